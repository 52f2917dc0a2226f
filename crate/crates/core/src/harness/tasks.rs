//! The benchmark task registry: six interaction categories with two spatially
//! qualified tasks each, plus the three-step obsidian composite.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::gridworld::{Entity, EntityKind, InteractionType, Item, ScenarioSpec, WorldState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Hunt,
    Mine,
    Interact,
    Navigate,
    Tool,
    Place,
    /// Multi-step tasks outside the twelve-task suite.
    Composite,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Hunt => "hunt",
            Category::Mine => "mine",
            Category::Interact => "interact",
            Category::Navigate => "navigate",
            Category::Tool => "tool",
            Category::Place => "place",
            Category::Composite => "composite",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An object kind plus an optional spatial qualifier naming a scenario region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetDesc {
    pub kind: EntityKind,
    pub region: Option<String>,
}

impl TargetDesc {
    pub fn new(kind: EntityKind, region: &str) -> Self {
        Self {
            kind,
            region: Some(region.to_string()),
        }
    }

    /// Whether `e` fits the descriptor (dead entities included, so completed
    /// interactions can still be attributed).
    pub fn matches(&self, state: &WorldState, e: &Entity) -> bool {
        e.kind == self.kind
            && match &self.region {
                None => true,
                Some(name) => state.region(name).is_some_and(|r| r.rect.contains(e.pos)),
            }
    }

    /// Live entities fitting the descriptor, lowest id first.
    pub fn resolve<'a>(&self, state: &'a WorldState) -> Vec<&'a Entity> {
        state
            .entities
            .iter()
            .filter(|e| e.alive && self.matches(state, e))
            .collect()
    }
}

impl fmt::Display for TargetDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.region {
            Some(r) => write!(f, "{} in {r}", self.kind.name()),
            None => f.write_str(self.kind.name()),
        }
    }
}

/// When a plan step counts as done.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Completion {
    /// An event of the step's interaction type on a matching object.
    Event,
    /// The agent faces a matching object.
    Facing,
    /// The agent holds the item.
    Holding(Item),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTemplate {
    pub interaction: InteractionType,
    pub target: TargetDesc,
    pub done: Completion,
    /// Object to point at with a navigate prompt while the target is out of view.
    pub landmark: Option<TargetDesc>,
}

impl StepTemplate {
    fn event(interaction: InteractionType, target: TargetDesc) -> Self {
        Self {
            interaction,
            target,
            done: Completion::Event,
            landmark: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub scenario: ScenarioSpec,
    pub category: Category,
    pub steps: Vec<StepTemplate>,
    pub max_ticks: u64,
    /// Never generated for the training set.
    pub held_out: bool,
}

impl TaskSpec {
    /// Identifier of the success predicate: every step completed in order,
    /// failing on the first interaction with a same-kind object outside the
    /// qualifier.
    pub fn success_id(&self) -> String {
        let parts: Vec<String> = self
            .steps
            .iter()
            .map(|s| format!("{}:{}", s.interaction, s.target))
            .collect();
        parts.join(" -> ")
    }
}

const SINGLE_STEP_TICKS: u64 = 600;
const MULTI_STEP_TICKS: u64 = 2400;

fn single(name: &str, scenario: &str, category: Category, step: StepTemplate) -> TaskSpec {
    TaskSpec {
        name: name.to_string(),
        scenario: ScenarioSpec::named(scenario),
        category,
        steps: vec![step],
        max_ticks: SINGLE_STEP_TICKS,
        held_out: false,
    }
}

fn multi(name: &str, scenario: &str, category: Category, steps: Vec<StepTemplate>) -> TaskSpec {
    TaskSpec {
        name: name.to_string(),
        scenario: ScenarioSpec::named(scenario),
        category,
        steps,
        max_ticks: MULTI_STEP_TICKS,
        held_out: false,
    }
}

fn switch_then_mine(region: &str) -> Vec<StepTemplate> {
    let stone = TargetDesc::new(EntityKind::Stone, region);
    vec![
        StepTemplate {
            interaction: InteractionType::Switch,
            target: stone.clone(),
            done: Completion::Holding(Item::Pickaxe),
            landmark: None,
        },
        StepTemplate::event(InteractionType::Mine, stone),
    ]
}

/// All registered tasks: the twelve benchmark tasks, then the composite.
pub fn tasks() -> Vec<TaskSpec> {
    use Category as C;
    use EntityKind as K;
    use InteractionType as I;
    let ev = |i, k, r| StepTemplate::event(i, TargetDesc::new(k, r));
    let nav = |r| StepTemplate {
        interaction: I::Navigate,
        target: TargetDesc::new(K::House, r),
        done: Completion::Facing,
        landmark: None,
    };
    let mut place_east = single(
        "place_east_pad",
        "twin_pads",
        C::Place,
        ev(I::Place, K::Pad, "east"),
    );
    place_east.held_out = true;
    vec![
        single(
            "hunt_right_sheep",
            "two_sheep_pens",
            C::Hunt,
            ev(I::Hunt, K::Sheep, "right_pen"),
        ),
        single(
            "hunt_left_sheep",
            "two_sheep_pens",
            C::Hunt,
            ev(I::Hunt, K::Sheep, "left_pen"),
        ),
        single(
            "mine_north_ore",
            "twin_ores",
            C::Mine,
            ev(I::Mine, K::Ore, "north"),
        ),
        single(
            "mine_south_ore",
            "twin_ores",
            C::Mine,
            ev(I::Mine, K::Ore, "south"),
        ),
        single(
            "open_far_door",
            "two_doors",
            C::Interact,
            ev(I::Interact, K::Door, "far_door"),
        ),
        single(
            "open_near_door",
            "two_doors",
            C::Interact,
            ev(I::Interact, K::Door, "near_door"),
        ),
        single(
            "navigate_flagged_house",
            "two_houses",
            C::Navigate,
            nav("flagged_lot"),
        ),
        single(
            "navigate_plain_house",
            "two_houses",
            C::Navigate,
            nav("plain_lot"),
        ),
        multi(
            "mine_west_stone_with_pickaxe",
            "twin_stones",
            C::Tool,
            switch_then_mine("west"),
        ),
        multi(
            "mine_east_stone_with_pickaxe",
            "twin_stones",
            C::Tool,
            switch_then_mine("east"),
        ),
        single(
            "place_west_pad",
            "twin_pads",
            C::Place,
            ev(I::Place, K::Pad, "west"),
        ),
        place_east,
        multi(
            "make_obsidian",
            "obsidian",
            C::Composite,
            vec![
                ev(I::Use, K::Water, "pool"),
                ev(I::Use, K::Lava, "lava_pool"),
                ev(I::Mine, K::Obsidian, "lava_pool"),
            ],
        ),
    ]
}

pub fn task(name: &str) -> Result<TaskSpec> {
    tasks()
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| config(format!("unknown task {name:?}")))
}

pub fn task_names() -> Vec<String> {
    tasks().into_iter().map(|t| t.name).collect()
}

/// Tasks the expert dataset is generated from by default (held-out tasks excluded).
pub fn training_tasks() -> Vec<TaskSpec> {
    tasks().into_iter().filter(|t| !t.held_out).collect()
}
