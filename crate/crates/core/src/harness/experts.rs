//! Scripted experts and raw dataset generation.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tasks::{Category, Completion, TaskSpec};
use crate::error::Result;
use crate::expert::step_toward_facing;
use crate::gridworld::{reset, Act, Action, EventRecord, InteractionType, Move, Turn, WorldState};
use crate::reasoner::{Outcome, Progress};
use crate::trajectory::{Recorder, Trajectory};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Each episode opens with up to this many random moves and turns before
    /// the expert starts on its task.
    pub wander_max: usize,
}

/// Button that completes an interaction of the given type on the faced object.
pub fn act_for(interaction: InteractionType) -> Act {
    match interaction {
        InteractionType::Hunt | InteractionType::Mine => Act::Primary,
        InteractionType::Switch => Act::Switch,
        _ => Act::Secondary,
    }
}

/// Ground-truth controller for one task.
pub struct Expert {
    progress: Progress,
    rng: ChaCha8Rng,
    wander_left: usize,
}

impl Expert {
    pub fn new(task: &TaskSpec, seed: u64, wander: usize) -> Self {
        Self {
            progress: Progress::for_task(task),
            rng: ChaCha8Rng::seed_from_u64(seed),
            wander_left: wander,
        }
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn observe(&mut self, state: &WorldState, events: &[EventRecord]) -> Option<&Outcome> {
        self.progress.update(state, events)
    }

    pub fn act(&mut self, state: &WorldState) -> Action {
        if self.wander_left > 0 {
            self.wander_left -= 1;
            return match self.rng.random_range(0..6) {
                0..4 => Action::moving(Move::ALL[self.rng.random_range(1..5)]),
                4 => Action {
                    turn: if self.rng.random_bool(0.5) {
                        Turn::Cw
                    } else {
                        Turn::Ccw
                    },
                    ..Action::NOOP
                },
                _ => Action::NOOP,
            };
        }
        let Some(step) = self.progress.active_step() else {
            return Action::NOOP;
        };
        let Some(target) = step.target.resolve(state).first().map(|e| e.pos) else {
            return Action::NOOP;
        };
        if let Some(a) = step_toward_facing(state, target, &mut self.rng) {
            return a;
        }
        match step.done {
            Completion::Facing => Action::NOOP,
            Completion::Holding(_) => Action::acting(Act::Switch),
            Completion::Event => Action::acting(act_for(step.interaction)),
        }
    }
}

/// Plays one expert episode. Episodes that reach a facing goal get one extra
/// no-op frame so the final frame shows the goal being faced.
pub fn expert_episode(task: &TaskSpec, id: &str, seed: u64, cfg: &GenConfig) -> Result<Trajectory> {
    let (mut state, mut obs) = reset(seed, &task.scenario)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e8e7);
    let wander = if cfg.wander_max == 0 {
        0
    } else {
        rng.random_range(0..=cfg.wander_max)
    };
    let mut expert = Expert::new(task, rng.next_u64(), wander);
    let mut rec = Recorder::new(id, seed, task.scenario.clone(), Some(task.name.clone()));
    let facing_goal = task
        .steps
        .last()
        .is_some_and(|s| s.done == Completion::Facing);
    let mut outcome = None;
    for _ in 0..task.max_ticks {
        let action = expert.act(&state);
        rec.push(&state, obs, action);
        let events = state.step(action)?;
        obs = crate::gridworld::render(&state);
        rec.extend_events(&events);
        if let Some(o) = expert.observe(&state, &events) {
            outcome = Some(o.clone());
            break;
        }
    }
    let success = outcome == Some(Outcome::Success);
    if success && facing_goal {
        rec.push(&state, obs, Action::NOOP);
    }
    if !success {
        debug!("{id}: expert ended with {outcome:?}");
    }
    Ok(rec.finish(success))
}

/// Raw expert trajectories, `episodes_per_task` per task, reproducible from `seed`.
pub fn generate_dataset(
    tasks: &[TaskSpec],
    episodes_per_task: usize,
    seed: u64,
    cfg: &GenConfig,
) -> Result<Vec<Trajectory>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(tasks.len() * episodes_per_task);
    for task in tasks {
        for i in 0..episodes_per_task {
            let ep_seed = rng.next_u64();
            out.push(expert_episode(
                task,
                &format!("{}-{i:04}", task.name),
                ep_seed,
                cfg,
            )?);
        }
    }
    let failed = out.iter().filter(|t| !t.success).count();
    info!(
        "generated {} trajectories ({failed} flagged as expert failures)",
        out.len()
    );
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskAudit {
    pub episodes: usize,
    pub successes: usize,
    pub frames: usize,
    /// Episodes whose opening scene holds two or more objects of the target kind.
    pub twin_scenes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetAudit {
    pub per_task: BTreeMap<String, TaskAudit>,
    /// Share of hunt and mine episodes that open on a twin-object scene.
    pub hunt_mine_twin_fraction: f64,
}

/// Per-task counts and the twin-scene share, recomputed from each trajectory's
/// seed and scenario.
pub fn audit(trajs: &[Trajectory], tasks: &[TaskSpec]) -> Result<DatasetAudit> {
    let mut per_task: BTreeMap<String, TaskAudit> = BTreeMap::new();
    let (mut hm, mut hm_twin) = (0usize, 0usize);
    for t in trajs {
        let Some(name) = &t.task else { continue };
        let Some(task) = tasks.iter().find(|k| &k.name == name) else {
            continue;
        };
        let (state, _) = reset(t.seed, &t.scenario)?;
        let kind = task.steps[0].target.kind;
        let twin = state.entities.iter().filter(|e| e.kind == kind).count() >= 2;
        let a = per_task.entry(name.clone()).or_default();
        a.episodes += 1;
        a.successes += usize::from(t.success);
        a.frames += t.len();
        a.twin_scenes += usize::from(twin);
        if matches!(task.category, Category::Hunt | Category::Mine) {
            hm += 1;
            hm_twin += usize::from(twin);
        }
    }
    Ok(DatasetAudit {
        per_task,
        hunt_mine_twin_fraction: if hm == 0 {
            0.0
        } else {
            hm_twin as f64 / hm as f64
        },
    })
}
