//! Top-down renderer for the agent-centred view window.
//!
//! Tiles map to pixel cells of 8 or 9 pixels (96 / 11 is not integral). Sprites
//! are drawn inset by one pixel inside their cell, so two sprites never share a
//! 4-connected border and each object is its own colour component.

use super::{
    Dir, EntityKind, InstanceMask, ObjectId, Observation, Pos, Terrain, WorldState, OBS_SIZE,
    VIEW_RADIUS, VIEW_TILES,
};

/// Id-buffer value for pixels not covered by any object.
pub const NO_OBJECT: u32 = 0;
/// Id-buffer value for the agent's own sprite.
pub const AGENT_PIXEL_ID: u32 = u32::MAX;

type Rgb = [u8; 3];

const VOID: Rgb = [0, 0, 0];
const AGENT_BODY: Rgb = [250, 250, 120];
const AGENT_NOSE: Rgb = [255, 0, 0];

fn terrain_color(t: Terrain) -> Rgb {
    match t {
        Terrain::Grass => [86, 160, 70],
        Terrain::PenFloor => [196, 164, 112],
        Terrain::Sand => [222, 206, 150],
        Terrain::Wall => [90, 90, 90],
    }
}

fn sprite_color(kind: EntityKind, open: bool) -> Rgb {
    match kind {
        EntityKind::Sheep => [240, 240, 240],
        EntityKind::Ore => [60, 200, 220],
        EntityKind::Tree => [30, 100, 30],
        EntityKind::Stone => [150, 150, 165],
        EntityKind::Door if open => [230, 170, 90],
        EntityKind::Door => [140, 80, 30],
        EntityKind::House => [180, 40, 40],
        EntityKind::Flag => [250, 210, 0],
        EntityKind::Pad => [240, 130, 200],
        EntityKind::Block => [120, 70, 160],
        EntityKind::Water => [40, 80, 230],
        EntityKind::Lava => [250, 100, 0],
        EntityKind::Obsidian => [50, 20, 70],
    }
}

/// Whether a pixel colour belongs to the agent's own sprite.
pub fn is_agent_color(c: [u8; 3]) -> bool {
    c == AGENT_BODY || c == AGENT_NOSE
}

/// Whether a pixel colour belongs to some object sprite (not terrain, void or agent).
pub fn is_object_color(c: [u8; 3]) -> bool {
    const NON_OBJECT: [Rgb; 7] = [
        VOID,
        AGENT_BODY,
        AGENT_NOSE,
        [86, 160, 70],
        [196, 164, 112],
        [222, 206, 150],
        [90, 90, 90],
    ];
    !NON_OBJECT.contains(&c)
}

/// View cell containing pixel coordinate `px`.
pub fn cell_of(px: usize) -> usize {
    px * VIEW_TILES / OBS_SIZE
}

/// Half-open pixel range `[start, end)` of view cell `i`.
pub fn cell_bounds(i: usize) -> (usize, usize) {
    let start = |i: usize| (i * OBS_SIZE).div_ceil(VIEW_TILES);
    (start(i), start(i + 1))
}

/// Centre pixel of view cell `(i, j)`.
pub fn cell_center(i: usize, j: usize) -> (usize, usize) {
    let (x0, x1) = cell_bounds(i);
    let (y0, y1) = cell_bounds(j);
    ((x0 + x1) / 2, (y0 + y1) / 2)
}

/// Pixel at the centre of the tile the agent faces: the top-down analogue of a
/// first-person crosshair.
pub fn aim_point(facing: Dir) -> (usize, usize) {
    let c = VIEW_RADIUS;
    let (dx, dy) = facing.delta();
    cell_center((c + dx) as usize, (c + dy) as usize)
}

/// Per-pixel instance ids of one rendered frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdMap {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u32>,
}

impl IdMap {
    pub fn at(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    pub fn mask_of(&self, id: ObjectId) -> InstanceMask {
        InstanceMask {
            width: self.width,
            height: self.height,
            bits: self.ids.iter().map(|v| u8::from(*v == id)).collect(),
            object_id: Some(id),
        }
    }

    /// Object ids present in the frame, ascending, excluding the agent.
    pub fn visible_objects(&self) -> Vec<ObjectId> {
        let mut out: Vec<ObjectId> = self
            .ids
            .iter()
            .copied()
            .filter(|v| *v != NO_OBJECT && *v != AGENT_PIXEL_ID)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Shape of a sprite inside its inset rectangle of size `w x h`.
fn covers(kind: EntityKind, u: usize, v: usize, w: usize, h: usize) -> bool {
    let corner = (u == 0 || u + 1 == w) && (v == 0 || v + 1 == h);
    match kind {
        EntityKind::Sheep | EntityKind::Tree => !corner,
        EntityKind::Flag => u >= w / 2 - 1 && u <= w / 2,
        EntityKind::House => v > 0 || (u > 0 && u + 1 < w),
        _ => true,
    }
}

pub fn render(state: &WorldState) -> Observation {
    render_with_ids(state).0
}

/// Renders the view window and the matching instance id buffer.
pub fn render_with_ids(state: &WorldState) -> (Observation, IdMap) {
    let mut obs = Observation::blank(OBS_SIZE, OBS_SIZE);
    let mut ids = IdMap {
        width: OBS_SIZE,
        height: OBS_SIZE,
        ids: vec![NO_OBJECT; OBS_SIZE * OBS_SIZE],
    };
    let origin = Pos::new(
        state.agent.pos.x - VIEW_RADIUS,
        state.agent.pos.y - VIEW_RADIUS,
    );

    let paint_cell = |obs: &mut Observation, i: usize, j: usize, color: Rgb| {
        let (x0, x1) = cell_bounds(i);
        let (y0, y1) = cell_bounds(j);
        for y in y0..y1 {
            for x in x0..x1 {
                let k = (y * OBS_SIZE + x) * 3;
                obs.rgb[k..k + 3].copy_from_slice(&color);
            }
        }
    };
    for j in 0..VIEW_TILES {
        for i in 0..VIEW_TILES {
            let p = Pos::new(origin.x + i as i32, origin.y + j as i32);
            let color = state.terrain(p).map(terrain_color).unwrap_or(VOID);
            paint_cell(&mut obs, i, j, color);
        }
    }

    let mut visible: Vec<_> = state
        .entities
        .iter()
        .filter(|e| e.alive && state.in_view(e.pos))
        .collect();
    // Pads first so a placed block covers them.
    visible.sort_by_key(|e| (e.kind != EntityKind::Pad, e.id));
    for e in visible {
        let i = (e.pos.x - origin.x) as usize;
        let j = (e.pos.y - origin.y) as usize;
        let color = sprite_color(e.kind, e.open);
        draw_sprite(&mut obs, &mut ids, i, j, e.id, color, |u, v, w, h| {
            covers(e.kind, u, v, w, h)
        });
    }

    let c = VIEW_RADIUS as usize;
    let facing = state.agent.facing;
    draw_sprite(
        &mut obs,
        &mut ids,
        c,
        c,
        AGENT_PIXEL_ID,
        AGENT_BODY,
        |_, _, _, _| true,
    );
    // Facing marker: a two-pixel strip on the facing side of the agent sprite.
    let (x0, x1) = cell_bounds(c);
    let (y0, y1) = cell_bounds(c);
    let (ix0, ix1, iy0, iy1) = (x0 + 1, x1 - 1, y0 + 1, y1 - 1);
    for y in iy0..iy1 {
        for x in ix0..ix1 {
            let on = match facing {
                Dir::Up => y < iy0 + 2,
                Dir::Down => y >= iy1 - 2,
                Dir::Left => x < ix0 + 2,
                Dir::Right => x >= ix1 - 2,
            };
            if on {
                let k = (y * OBS_SIZE + x) * 3;
                obs.rgb[k..k + 3].copy_from_slice(&AGENT_NOSE);
            }
        }
    }
    (obs, ids)
}

fn draw_sprite(
    obs: &mut Observation,
    ids: &mut IdMap,
    i: usize,
    j: usize,
    id: u32,
    color: Rgb,
    shape: impl Fn(usize, usize, usize, usize) -> bool,
) {
    let (x0, x1) = cell_bounds(i);
    let (y0, y1) = cell_bounds(j);
    let (ix0, ix1, iy0, iy1) = (x0 + 1, x1 - 1, y0 + 1, y1 - 1);
    let (w, h) = (ix1 - ix0, iy1 - iy0);
    for y in iy0..iy1 {
        for x in ix0..ix1 {
            if shape(x - ix0, y - iy0, w, h) {
                let k = (y * OBS_SIZE + x) * 3;
                obs.rgb[k..k + 3].copy_from_slice(&color);
                ids.ids[y * OBS_SIZE + x] = id;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{Agent, WorldState};

    #[test]
    fn cells_tile_the_frame() {
        let mut covered = 0;
        for i in 0..VIEW_TILES {
            let (a, b) = cell_bounds(i);
            assert!(b - a == 8 || b - a == 9);
            for px in a..b {
                assert_eq!(cell_of(px), i);
            }
            covered += b - a;
        }
        assert_eq!(covered, OBS_SIZE);
    }

    #[test]
    fn aim_point_is_in_faced_cell() {
        for d in Dir::ALL {
            let (x, y) = aim_point(d);
            let (dx, dy) = d.delta();
            assert_eq!(cell_of(x) as i32, VIEW_RADIUS + dx);
            assert_eq!(cell_of(y) as i32, VIEW_RADIUS + dy);
        }
    }

    #[test]
    fn sprite_colors_are_object_colors() {
        let kinds = [
            EntityKind::Sheep,
            EntityKind::Ore,
            EntityKind::Tree,
            EntityKind::Stone,
            EntityKind::Door,
            EntityKind::House,
            EntityKind::Flag,
            EntityKind::Pad,
            EntityKind::Block,
            EntityKind::Water,
            EntityKind::Lava,
            EntityKind::Obsidian,
        ];
        for k in kinds {
            assert!(is_object_color(sprite_color(k, false)));
            assert!(is_object_color(sprite_color(k, true)));
        }
        for t in [
            Terrain::Grass,
            Terrain::PenFloor,
            Terrain::Sand,
            Terrain::Wall,
        ] {
            assert!(!is_object_color(terrain_color(t)));
        }
    }

    #[test]
    fn placed_block_hides_pad() {
        let mut s = WorldState::new(24, 24, Agent::new(Pos::new(12, 12), Dir::Up), 0);
        let pad = s.spawn(EntityKind::Pad, Pos::new(12, 10));
        let block = s.spawn(EntityKind::Block, Pos::new(12, 10));
        let (_, ids) = render_with_ids(&s);
        assert!(ids.mask_of(pad).is_empty());
        assert!(!ids.mask_of(block).is_empty());
    }
}
