//! Deterministic, partially observable tile world.
//!
//! The world is a fixed-size grid of terrain tiles with single-tile entities on
//! top. The agent sees an 11x11 tile window centred on itself, rendered at
//! 96x96 RGB. Every successful interaction is reported as an [`EventRecord`],
//! and the renderer keeps a per-pixel instance id buffer so ground-truth
//! segmentation is exact.

mod render;
mod scenario;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};

pub use render::{
    aim_point, cell_bounds, cell_center, cell_of, is_agent_color, is_object_color, render,
    render_with_ids, IdMap, AGENT_PIXEL_ID, NO_OBJECT,
};
pub use scenario::{reset, scenario_names, ScenarioSpec};

/// Observation side length in pixels.
pub const OBS_SIZE: usize = 96;
/// View window side length in tiles.
pub const VIEW_TILES: usize = 11;
/// Tiles visible on each side of the agent.
pub const VIEW_RADIUS: i32 = (VIEW_TILES as i32 - 1) / 2;

pub type ObjectId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn offset(self, dir: Dir) -> Pos {
        let (dx, dy) = dir.delta();
        Pos::new(self.x + dx, self.y + dy)
    }

    pub fn manhattan(self, other: Pos) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dir {
    Up,
    Down,
    Left,
    Right,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::Up, Dir::Down, Dir::Left, Dir::Right];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Dir::Up => (0, -1),
            Dir::Down => (0, 1),
            Dir::Left => (-1, 0),
            Dir::Right => (1, 0),
        }
    }

    pub fn cw(self) -> Dir {
        match self {
            Dir::Up => Dir::Right,
            Dir::Right => Dir::Down,
            Dir::Down => Dir::Left,
            Dir::Left => Dir::Up,
        }
    }

    pub fn ccw(self) -> Dir {
        self.cw().cw().cw()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terrain {
    Grass,
    PenFloor,
    Sand,
    Wall,
}

impl Terrain {
    pub fn walkable(self) -> bool {
        self != Terrain::Wall
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Sheep,
    Ore,
    Tree,
    Stone,
    Door,
    House,
    Flag,
    Pad,
    Block,
    Water,
    Lava,
    Obsidian,
}

impl EntityKind {
    pub fn blocks_movement(self) -> bool {
        !matches!(self, EntityKind::Pad)
    }

    pub fn name(self) -> &'static str {
        match self {
            EntityKind::Sheep => "sheep",
            EntityKind::Ore => "ore",
            EntityKind::Tree => "tree",
            EntityKind::Stone => "stone",
            EntityKind::Door => "door",
            EntityKind::House => "house",
            EntityKind::Flag => "flag",
            EntityKind::Pad => "pad",
            EntityKind::Block => "block",
            EntityKind::Water => "water",
            EntityKind::Lava => "lava",
            EntityKind::Obsidian => "obsidian",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Item {
    Sword,
    Pickaxe,
    Bucket,
    WaterBucket,
    Block,
    Ore,
    Wood,
    Stone,
    Obsidian,
    Mutton,
}

/// Axis-aligned inclusive tile rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Rect {
    pub const fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn contains(&self, p: Pos) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }
}

/// Named area used by spatial qualifiers ("right pen", "far door", ...).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub rect: Rect,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: ObjectId,
    pub kind: EntityKind,
    pub pos: Pos,
    pub alive: bool,
    /// Doors only.
    pub open: bool,
    /// Mobs stay inside this rectangle when wandering.
    pub home: Option<Rect>,
    /// Ticks left during which a hit mob does not wander.
    pub stunned: u8,
}

impl Entity {
    pub fn new(id: ObjectId, kind: EntityKind, pos: Pos) -> Self {
        Self {
            id,
            kind,
            pos,
            alive: true,
            open: false,
            home: None,
            stunned: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agent {
    pub pos: Pos,
    pub facing: Dir,
    pub inventory: BTreeMap<Item, u32>,
    pub hotbar: Vec<Item>,
    pub held: usize,
    /// Sheep hit on the given tick; a second consecutive hit kills it.
    pub last_hit: Option<(ObjectId, u64)>,
}

impl Agent {
    pub fn new(pos: Pos, facing: Dir) -> Self {
        Self {
            pos,
            facing,
            inventory: BTreeMap::new(),
            hotbar: Vec::new(),
            held: 0,
            last_hit: None,
        }
    }

    pub fn count(&self, item: Item) -> u32 {
        self.inventory.get(&item).copied().unwrap_or(0)
    }

    pub fn held_item(&self) -> Option<Item> {
        self.hotbar.get(self.held).copied()
    }

    pub fn add(&mut self, item: Item, n: u32) {
        *self.inventory.entry(item).or_insert(0) += n;
    }

    fn take(&mut self, item: Item) -> bool {
        match self.inventory.get_mut(&item) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        }
    }

    pub fn pose(&self) -> AgentPose {
        AgentPose {
            pos: self.pos,
            facing: self.facing,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPose {
    pub pos: Pos,
    pub facing: Dir,
}

/// Interaction type code. `Null` together with an empty mask means "no highlight".
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(into = "u8", try_from = "u8")]
#[repr(u8)]
pub enum InteractionType {
    #[default]
    Null = 0,
    Navigate = 1,
    Mine = 2,
    Interact = 3,
    Place = 4,
    Hunt = 5,
    Use = 6,
    Switch = 7,
}

impl InteractionType {
    pub const COUNT: usize = 8;

    pub const ALL: [InteractionType; 8] = [
        InteractionType::Null,
        InteractionType::Navigate,
        InteractionType::Mine,
        InteractionType::Interact,
        InteractionType::Place,
        InteractionType::Hunt,
        InteractionType::Use,
        InteractionType::Switch,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            InteractionType::Null => "null",
            InteractionType::Navigate => "navigate",
            InteractionType::Mine => "mine",
            InteractionType::Interact => "interact",
            InteractionType::Place => "place",
            InteractionType::Hunt => "hunt",
            InteractionType::Use => "use",
            InteractionType::Switch => "switch",
        }
    }
}

impl From<InteractionType> for u8 {
    fn from(t: InteractionType) -> u8 {
        t.code()
    }
}

impl TryFrom<u8> for InteractionType {
    type Error = String;

    fn try_from(code: u8) -> std::result::Result<Self, String> {
        InteractionType::from_code(code).ok_or_else(|| format!("invalid interaction code {code}"))
    }
}

impl fmt::Display for InteractionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InteractionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(code) = s.parse::<u8>() {
            return InteractionType::from_code(code)
                .ok_or_else(|| Error::Config(format!("invalid interaction code {code}")));
        }
        InteractionType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown interaction type {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Move {
    #[default]
    None,
    Up,
    Down,
    Left,
    Right,
}

impl Move {
    pub const ALL: [Move; 5] = [Move::None, Move::Up, Move::Down, Move::Left, Move::Right];

    pub fn dir(self) -> Option<Dir> {
        match self {
            Move::None => None,
            Move::Up => Some(Dir::Up),
            Move::Down => Some(Dir::Down),
            Move::Left => Some(Dir::Left),
            Move::Right => Some(Dir::Right),
        }
    }

    pub fn from_dir(dir: Dir) -> Move {
        match dir {
            Dir::Up => Move::Up,
            Dir::Down => Move::Down,
            Dir::Left => Move::Left,
            Dir::Right => Move::Right,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    #[default]
    None,
    Cw,
    Ccw,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::None, Turn::Cw, Turn::Ccw];
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    #[default]
    None,
    Primary,
    Secondary,
    Switch,
}

impl Act {
    pub const ALL: [Act; 4] = [Act::None, Act::Primary, Act::Secondary, Act::Switch];
}

/// Factored discrete action. Every combination is legal.
///
/// Within a tick the move is applied first (it also sets the facing, even when
/// the destination is blocked), then the turn, then the act on the faced tile.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    #[serde(rename = "move")]
    pub movement: Move,
    pub turn: Turn,
    pub act: Act,
}

impl Action {
    pub const NOOP: Action = Action {
        movement: Move::None,
        turn: Turn::None,
        act: Act::None,
    };

    pub fn moving(m: Move) -> Action {
        Action {
            movement: m,
            ..Action::NOOP
        }
    }

    pub fn acting(a: Act) -> Action {
        Action {
            act: a,
            ..Action::NOOP
        }
    }

    /// Per-factor class indices `(move, turn, act)`.
    pub fn indices(&self) -> [usize; 3] {
        [
            Move::ALL.iter().position(|m| *m == self.movement).unwrap(),
            Turn::ALL.iter().position(|t| *t == self.turn).unwrap(),
            Act::ALL.iter().position(|a| *a == self.act).unwrap(),
        ]
    }

    pub fn from_indices(idx: [usize; 3]) -> Option<Action> {
        Some(Action {
            movement: *Move::ALL.get(idx[0])?,
            turn: *Turn::ALL.get(idx[1])?,
            act: *Act::ALL.get(idx[2])?,
        })
    }
}

/// A successful interaction, reported on the tick the world advanced to.
///
/// The interaction was triggered by the action taken on frame `tick - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub tick: u64,
    #[serde(rename = "type")]
    pub interaction: InteractionType,
    pub object_id: ObjectId,
    pub agent_pos: Pos,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub width: usize,
    pub height: usize,
    /// Row-major, interleaved RGB.
    pub rgb: Vec<u8>,
}

impl Observation {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

/// Binary per-pixel mask of one object. An all-zero mask means nothing is highlighted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMask {
    pub width: usize,
    pub height: usize,
    /// Row-major, one byte per pixel, 0 or 1.
    pub bits: Vec<u8>,
    pub object_id: Option<ObjectId>,
}

impl InstanceMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![0; width * height],
            object_id: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|b| *b == 0)
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b != 0).count()
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn intersection(&self, other: &InstanceMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a != 0 && **b != 0)
            .count()
    }

    /// Intersection over union; two empty masks agree perfectly.
    pub fn iou(&self, other: &InstanceMask) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Mean pixel position, or `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// The mask pixel closest to the centroid; always inside the mask.
    pub fn anchor_point(&self) -> Option<(usize, usize)> {
        let (cx, cy) = self.centroid()?;
        let mut best: Option<((usize, usize), f64)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let d = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some(((x, y), d));
                    }
                }
            }
        }
        best.map(|(p, _)| p)
    }

    /// Copy shifted by `(dx, dy)` pixels; pixels leaving the frame are dropped.
    pub fn shifted(&self, dx: i32, dy: i32) -> InstanceMask {
        let mut out = InstanceMask::empty(self.width, self.height);
        out.object_id = self.object_id;
        for y in 0..self.height as i32 {
            for x in 0..self.width as i32 {
                if self.bits[(y as usize) * self.width + x as usize] != 0 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0
                        && ny >= 0
                        && (nx as usize) < self.width
                        && (ny as usize) < self.height
                    {
                        out.bits[ny as usize * self.width + nx as usize] = 1;
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub width: i32,
    pub height: i32,
    /// Row-major terrain grid.
    pub grid: Vec<Terrain>,
    pub entities: Vec<Entity>,
    pub agent: Agent,
    pub tick: u64,
    pub regions: Vec<Region>,
    pub terminated: bool,
    next_id: ObjectId,
    rng: ChaCha8Rng,
}

impl WorldState {
    /// Empty walled world; scenario generators fill it in.
    pub fn new(width: i32, height: i32, agent: Agent, dynamics_seed: u64) -> Self {
        let mut grid = vec![Terrain::Grass; (width * height) as usize];
        for y in 0..height {
            for x in 0..width {
                if x == 0 || y == 0 || x == width - 1 || y == height - 1 {
                    grid[(y * width + x) as usize] = Terrain::Wall;
                }
            }
        }
        Self {
            width,
            height,
            grid,
            entities: Vec::new(),
            agent,
            tick: 0,
            regions: Vec::new(),
            terminated: false,
            next_id: 1,
            rng: ChaCha8Rng::seed_from_u64(dynamics_seed),
        }
    }

    pub fn in_bounds(&self, p: Pos) -> bool {
        p.x >= 0 && p.y >= 0 && p.x < self.width && p.y < self.height
    }

    pub fn terrain(&self, p: Pos) -> Option<Terrain> {
        self.in_bounds(p)
            .then(|| self.grid[(p.y * self.width + p.x) as usize])
    }

    pub fn set_terrain(&mut self, p: Pos, t: Terrain) {
        if self.in_bounds(p) {
            self.grid[(p.y * self.width + p.x) as usize] = t;
        }
    }

    /// Adds an entity with a fresh id. Ids are never reused within an episode.
    pub fn spawn(&mut self, kind: EntityKind, pos: Pos) -> ObjectId {
        let id = self.next_id;
        self.next_id += 1;
        self.entities.push(Entity::new(id, kind, pos));
        id
    }

    pub fn entity(&self, id: ObjectId) -> Option<&Entity> {
        self.entities.iter().find(|e| e.id == id)
    }

    pub fn entity_mut(&mut self, id: ObjectId) -> Option<&mut Entity> {
        self.entities.iter_mut().find(|e| e.id == id)
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    /// Topmost live entity on a tile (a placed block covers its pad).
    pub fn entity_at(&self, p: Pos) -> Option<&Entity> {
        self.entities
            .iter()
            .filter(|e| e.alive && e.pos == p)
            .max_by_key(|e| (e.kind != EntityKind::Pad, e.id))
    }

    pub fn faced_entity(&self) -> Option<&Entity> {
        self.entity_at(self.agent.pos.offset(self.agent.facing))
    }

    pub fn is_walkable(&self, p: Pos) -> bool {
        self.terrain(p).is_some_and(Terrain::walkable)
            && !self
                .entities
                .iter()
                .any(|e| e.alive && e.pos == p && e.kind.blocks_movement())
    }

    /// Whether a tile lies inside the agent's view window.
    pub fn in_view(&self, p: Pos) -> bool {
        (p.x - self.agent.pos.x).abs() <= VIEW_RADIUS
            && (p.y - self.agent.pos.y).abs() <= VIEW_RADIUS
    }

    pub fn terminate(&mut self) {
        self.terminated = true;
    }

    /// Advances the world by one tick and returns the interactions completed on it.
    pub fn step(&mut self, action: Action) -> Result<Vec<EventRecord>> {
        if self.terminated {
            return Err(usage("step called on a terminated episode"));
        }
        if let Some(dir) = action.movement.dir() {
            self.agent.facing = dir;
            let dest = self.agent.pos.offset(dir);
            if self.is_walkable(dest) {
                self.agent.pos = dest;
            }
        }
        match action.turn {
            Turn::None => {}
            Turn::Cw => self.agent.facing = self.agent.facing.cw(),
            Turn::Ccw => self.agent.facing = self.agent.facing.ccw(),
        }

        let mut events = Vec::new();
        let faced = self.faced_entity().map(|e| (e.id, e.kind, e.open));
        let mut hit_this_tick = None;
        let event_tick = self.tick + 1;
        let mut emit = |interaction, object_id, agent_pos| {
            events.push(EventRecord {
                tick: event_tick,
                interaction,
                object_id,
                agent_pos,
            })
        };
        let agent_pos = self.agent.pos;
        match (action.act, faced) {
            (Act::Primary, Some((id, kind, _))) => match kind {
                EntityKind::Sheep => {
                    if self.tick > 0 && self.agent.last_hit == Some((id, self.tick - 1)) {
                        self.kill(id);
                        self.agent.add(Item::Mutton, 1);
                        emit(InteractionType::Hunt, id, agent_pos);
                    } else {
                        hit_this_tick = Some(id);
                        if let Some(e) = self.entity_mut(id) {
                            e.stunned = 2;
                        }
                    }
                }
                EntityKind::Ore | EntityKind::Tree | EntityKind::Block => {
                    self.kill(id);
                    let item = match kind {
                        EntityKind::Ore => Item::Ore,
                        EntityKind::Tree => Item::Wood,
                        _ => Item::Block,
                    };
                    self.agent.add(item, 1);
                    emit(InteractionType::Mine, id, agent_pos);
                }
                EntityKind::Stone if self.agent.held_item() == Some(Item::Pickaxe) => {
                    self.kill(id);
                    self.agent.add(Item::Stone, 1);
                    emit(InteractionType::Mine, id, agent_pos);
                }
                EntityKind::Obsidian if self.agent.count(Item::Pickaxe) > 0 => {
                    self.kill(id);
                    self.agent.add(Item::Obsidian, 1);
                    emit(InteractionType::Mine, id, agent_pos);
                }
                _ => {}
            },
            (Act::Secondary, Some((id, kind, open))) => match kind {
                EntityKind::Door if !open => {
                    if let Some(e) = self.entity_mut(id) {
                        e.open = true;
                    }
                    emit(InteractionType::Interact, id, agent_pos);
                }
                EntityKind::Water if self.agent.take(Item::Bucket) => {
                    self.agent.add(Item::WaterBucket, 1);
                    emit(InteractionType::Use, id, agent_pos);
                }
                EntityKind::Lava if self.agent.take(Item::WaterBucket) => {
                    self.agent.add(Item::Bucket, 1);
                    let pos = self.agent.pos.offset(self.agent.facing);
                    self.kill(id);
                    self.spawn(EntityKind::Obsidian, pos);
                    emit(InteractionType::Use, id, agent_pos);
                }
                EntityKind::Pad if self.agent.take(Item::Block) => {
                    let pos = self.agent.pos.offset(self.agent.facing);
                    self.spawn(EntityKind::Block, pos);
                    emit(InteractionType::Place, id, agent_pos);
                }
                _ => {}
            },
            (Act::Switch, faced) if !self.agent.hotbar.is_empty() => {
                self.agent.held = (self.agent.held + 1) % self.agent.hotbar.len();
                if let Some((id, _, _)) = faced {
                    emit(InteractionType::Switch, id, agent_pos);
                }
            }
            _ => {}
        }
        self.agent.last_hit = hit_this_tick.map(|id| (id, self.tick));

        self.wander_mobs();
        self.tick += 1;
        Ok(events)
    }

    fn kill(&mut self, id: ObjectId) {
        if let Some(e) = self.entity_mut(id) {
            e.alive = false;
        }
    }

    fn wander_mobs(&mut self) {
        for i in 0..self.entities.len() {
            let e = &self.entities[i];
            if !e.alive || e.kind != EntityKind::Sheep {
                continue;
            }
            if e.stunned > 0 {
                self.entities[i].stunned -= 1;
                continue;
            }
            if !self.rng.random_bool(0.1) {
                continue;
            }
            let dir = Dir::ALL[self.rng.random_range(0..4)];
            let dest = self.entities[i].pos.offset(dir);
            let home_ok = self.entities[i].home.is_none_or(|h| h.contains(dest));
            if home_ok && dest != self.agent.pos && self.is_walkable(dest) {
                self.entities[i].pos = dest;
            }
        }
    }
}

/// Functional form of [`WorldState::step`].
pub fn step(
    state: &WorldState,
    action: Action,
) -> Result<(WorldState, Observation, Vec<EventRecord>)> {
    let mut next = state.clone();
    let events = next.step(action)?;
    let obs = render(&next);
    Ok((next, obs, events))
}

/// Mask of the pixels rendered from `object_id` in the current view.
pub fn ground_truth_mask(state: &WorldState, object_id: ObjectId) -> Result<InstanceMask> {
    if state.entity(object_id).is_none() {
        return Err(Error::UnknownObject(object_id));
    }
    let (_, ids) = render_with_ids(state);
    Ok(ids.mask_of(object_id))
}
