//! Seeded scenario generators, addressed by name.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    render, Agent, Dir, EntityKind, Item, Observation, Pos, Rect, Region, Terrain, WorldState,
};
use crate::error::{config, Result};

const MAP: i32 = 24;

/// Names a registered layout generator plus its tunables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    /// Extra non-target objects scattered over the map.
    #[serde(default = "default_distractors")]
    pub distractors: u32,
}

fn default_distractors() -> u32 {
    2
}

impl ScenarioSpec {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            distractors: default_distractors(),
        }
    }

    pub fn with_distractors(mut self, n: u32) -> Self {
        self.distractors = n;
        self
    }
}

type Generator = fn(&mut ChaCha8Rng, &mut WorldState);

const REGISTRY: &[(&str, Generator)] = &[
    ("two_sheep_pens", two_sheep_pens),
    ("twin_ores", twin_ores),
    ("two_doors", two_doors),
    ("two_houses", two_houses),
    ("twin_stones", twin_stones),
    ("twin_pads", twin_pads),
    ("obsidian", obsidian),
    ("lone_ore", lone_ore),
    ("lone_tree", lone_tree),
    ("empty_field", |_, _| {}),
];

pub fn scenario_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

/// Builds the initial world for `(seed, scenario)`. Equal inputs give identical worlds.
pub fn reset(seed: u64, scenario: &ScenarioSpec) -> Result<(WorldState, Observation)> {
    let generator = REGISTRY
        .iter()
        .find(|(n, _)| *n == scenario.name)
        .map(|(_, g)| *g)
        .ok_or_else(|| config(format!("unknown scenario {:?}", scenario.name)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dynamics_seed = rng.next_u64();
    let spawn = Pos::new(rng.random_range(11..=12), rng.random_range(11..=12));
    let facing = Dir::ALL[rng.random_range(0..4)];
    let mut state = WorldState::new(MAP, MAP, Agent::new(spawn, facing), dynamics_seed);
    generator(&mut rng, &mut state);
    let distractor = if scenario.name == "lone_tree" {
        EntityKind::Stone
    } else {
        EntityKind::Tree
    };
    for _ in 0..scenario.distractors {
        let spots = free_spots(&state, |p| {
            p.manhattan(state.agent.pos) >= 2
                && state.terrain(p) == Some(Terrain::Grass)
                && state.entities.iter().all(|e| e.pos.manhattan(p) >= 2)
        });
        if let Some(p) = pick(&mut rng, &spots) {
            state.spawn(distractor, p);
        }
    }
    let obs = render(&state);
    Ok((state, obs))
}

fn free_spots(state: &WorldState, extra: impl Fn(Pos) -> bool) -> Vec<Pos> {
    let mut out = Vec::new();
    for y in 1..state.height - 1 {
        for x in 1..state.width - 1 {
            let p = Pos::new(x, y);
            if p != state.agent.pos
                && state.terrain(p).is_some_and(Terrain::walkable)
                && state.entity_at(p).is_none()
                && extra(p)
            {
                out.push(p);
            }
        }
    }
    out
}

fn pick(rng: &mut ChaCha8Rng, spots: &[Pos]) -> Option<Pos> {
    (!spots.is_empty()).then(|| spots[rng.random_range(0..spots.len())])
}

fn in_rect(rng: &mut ChaCha8Rng, r: Rect) -> Pos {
    Pos::new(rng.random_range(r.x0..=r.x1), rng.random_range(r.y0..=r.y1))
}

fn add_region(state: &mut WorldState, name: &str, rect: Rect) {
    state.regions.push(Region {
        name: name.to_string(),
        rect,
    });
}

fn within_view(a: Pos, p: Pos) -> bool {
    (a.x - p.x).abs() <= 5 && (a.y - p.y).abs() <= 5
}

/// Two pens flanking the spawn corridor, one sheep in each.
fn two_sheep_pens(rng: &mut ChaCha8Rng, s: &mut WorldState) {
    let spawn = Pos::new(rng.random_range(11..=12), rng.random_range(10..=13));
    s.agent.pos = spawn;
    for (name, rect) in [
        ("left_pen", Rect::new(7, 9, 9, 14)),
        ("right_pen", Rect::new(14, 9, 16, 14)),
    ] {
        for y in rect.y0..=rect.y1 {
            for x in rect.x0..=rect.x1 {
                s.set_terrain(Pos::new(x, y), Terrain::PenFloor);
            }
        }
        add_region(s, name, rect);
        let p = in_rect(rng, rect);
        let id = s.spawn(EntityKind::Sheep, p);
        s.entity_mut(id).unwrap().home = Some(rect);
    }
}

/// Two identical ores, one north and one south of the spawn.
fn twin_ores(rng: &mut ChaCha8Rng, s: &mut WorldState) {
    let north = Rect::new(8, 7, 15, 9);
    let south = Rect::new(8, 14, 15, 16);
    add_region(s, "north", Rect::new(1, 1, 22, 10));
    add_region(s, "south", Rect::new(1, 13, 22, 22));
    for r in [north, south] {
        let p = in_rect(rng, r);
        s.spawn(EntityKind::Ore, p);
    }
}

/// Two doors, one close to the spawn and one at the edge of view.
fn two_doors(rng: &mut ChaCha8Rng, s: &mut WorldState) {
    let a = s.agent.pos;
    let near = free_spots(s, |p| (2..=3).contains(&p.manhattan(a)));
    let near = pick(rng, &near).unwrap();
    s.spawn(EntityKind::Door, near);
    add_region(s, "near_door", Rect::new(near.x, near.y, near.x, near.y));
    let far = free_spots(s, |p| {
        (6..=8).contains(&p.manhattan(a)) && within_view(a, p) && p.manhattan(near) >= 3
    });
    let far = pick(rng, &far).unwrap();
    s.spawn(EntityKind::Door, far);
    add_region(s, "far_door", Rect::new(far.x, far.y, far.x, far.y));
}

/// Two houses on opposite sides of the spawn; one carries a flag.
fn two_houses(rng: &mut ChaCha8Rng, s: &mut WorldState) {
    let a = s.agent.pos;
    let lot =
        |p: Pos| p.manhattan(a) >= 6 && within_view(a, p) && within_view(a, Pos::new(p.x, p.y - 1));
    let west = free_spots(s, |p| p.x <= a.x - 3 && lot(p));
    let east = free_spots(s, |p| p.x >= a.x + 3 && lot(p));
    let w = pick(rng, &west).unwrap();
    let e = pick(rng, &east).unwrap();
    let flag_west = rng.random_bool(0.5);
    for (p, flagged) in [(w, flag_west), (e, !flag_west)] {
        s.spawn(EntityKind::House, p);
        let name = if flagged { "flagged_lot" } else { "plain_lot" };
        add_region(s, name, Rect::new(p.x, p.y, p.x, p.y));
        if flagged {
            s.spawn(EntityKind::Flag, Pos::new(p.x, p.y - 1));
        }
    }
}

/// Two stones west and east; the agent starts holding a sword.
fn twin_stones(rng: &mut ChaCha8Rng, s: &mut WorldState) {
    s.agent.hotbar = vec![Item::Sword, Item::Pickaxe];
    s.agent.held = 0;
    s.agent.add(Item::Sword, 1);
    s.agent.add(Item::Pickaxe, 1);
    add_region(s, "west", Rect::new(1, 1, 10, 22));
    add_region(s, "east", Rect::new(13, 1, 22, 22));
    for r in [Rect::new(7, 8, 9, 15), Rect::new(14, 8, 16, 15)] {
        let p = in_rect(rng, r);
        s.spawn(EntityKind::Stone, p);
    }
}

/// Two pads west and east; the agent carries a single block.
fn twin_pads(rng: &mut ChaCha8Rng, s: &mut WorldState) {
    s.agent.add(Item::Block, 1);
    add_region(s, "west", Rect::new(1, 1, 10, 22));
    add_region(s, "east", Rect::new(13, 1, 22, 22));
    for r in [Rect::new(7, 8, 9, 15), Rect::new(14, 8, 16, 15)] {
        let p = in_rect(rng, r);
        s.spawn(EntityKind::Pad, p);
    }
}

/// A water tile and a lava tile; the agent holds a bucket and a pickaxe.
fn obsidian(rng: &mut ChaCha8Rng, s: &mut WorldState) {
    s.agent.hotbar = vec![Item::Bucket, Item::Pickaxe];
    s.agent.add(Item::Bucket, 1);
    s.agent.add(Item::Pickaxe, 1);
    let a = s.agent.pos;
    let water = free_spots(s, |p| (2..=4).contains(&p.manhattan(a)));
    let water = pick(rng, &water).unwrap();
    s.spawn(EntityKind::Water, water);
    let lava = free_spots(s, |p| {
        (3..=5).contains(&p.manhattan(a)) && p.manhattan(water) >= 3 && within_view(a, p)
    });
    let lava = pick(rng, &lava).unwrap();
    s.spawn(EntityKind::Lava, lava);
    add_region(s, "pool", Rect::new(water.x, water.y, water.x, water.y));
    add_region(s, "lava_pool", Rect::new(lava.x, lava.y, lava.x, lava.y));
}

fn lone(rng: &mut ChaCha8Rng, s: &mut WorldState, kind: EntityKind) {
    let a = s.agent.pos;
    let spots = free_spots(s, |p| (2..=5).contains(&p.manhattan(a)));
    let p = pick(rng, &spots).unwrap();
    s.spawn(kind, p);
    add_region(s, "target", Rect::new(p.x, p.y, p.x, p.y));
}

fn lone_ore(rng: &mut ChaCha8Rng, s: &mut WorldState) {
    lone(rng, s, EntityKind::Ore)
}

fn lone_tree(rng: &mut ChaCha8Rng, s: &mut WorldState) {
    lone(rng, s, EntityKind::Tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn reset_is_deterministic() {
        let spec = ScenarioSpec::named("two_sheep_pens");
        let (s1, o1) = reset(7, &spec).unwrap();
        let (s2, o2) = reset(7, &spec).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn two_sheep_pens_has_one_sheep_per_pen() {
        let (s, _) = reset(7, &ScenarioSpec::named("two_sheep_pens")).unwrap();
        let sheep: Vec<_> = s
            .entities
            .iter()
            .filter(|e| e.kind == EntityKind::Sheep)
            .collect();
        assert_eq!(sheep.len(), 2);
        for pen in ["left_pen", "right_pen"] {
            let r = s.region(pen).unwrap().rect;
            assert_eq!(sheep.iter().filter(|e| r.contains(e.pos)).count(), 1);
        }
    }

    #[test]
    fn unknown_scenario_is_config_error() {
        assert!(matches!(
            reset(7, &ScenarioSpec::named("nonexistent")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn every_scenario_generates_for_many_seeds() {
        for name in scenario_names() {
            for seed in 0..40 {
                let (s, _) = reset(seed, &ScenarioSpec::named(name)).unwrap();
                let mut ids: Vec<_> = s.entities.iter().map(|e| e.id).collect();
                ids.dedup();
                assert_eq!(ids.len(), s.entities.len());
                // Everything but distractors starts inside the view window.
                let distractor = if name == "lone_tree" {
                    EntityKind::Stone
                } else {
                    EntityKind::Tree
                };
                for e in s.entities.iter().filter(|e| e.kind != distractor) {
                    assert!(
                        s.in_view(e.pos),
                        "{name} seed {seed}: {:?} out of view",
                        e.kind
                    );
                }
            }
        }
    }
}
