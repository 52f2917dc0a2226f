//! Low-frequency prompt providers.
//!
//! The scripted reasoner decomposes a task into its template steps and points
//! at the active step's target using simulator ground truth. Human and external
//! providers feed the same [`PromptEvent`] schema through the episode server.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gridworld::render_with_ids;
use crate::gridworld::{EventRecord, InteractionType, ObjectId, Observation, WorldState};
use crate::harness::{task, Completion, StepTemplate, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    Scripted,
    Human,
    External,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEvent {
    pub frame_index: u64,
    /// Observation pixel; `None` clears the current prompt.
    pub point: Option<(usize, usize)>,
    pub interaction: InteractionType,
    pub source: PromptSource,
}

impl PromptEvent {
    pub fn clear(frame_index: u64, source: PromptSource) -> Self {
        Self {
            frame_index,
            point: None,
            interaction: InteractionType::Null,
            source,
        }
    }
}

pub type PlanStep = StepTemplate;

/// Ordered steps for `task_name`. The scripted decomposition depends only on
/// the task template, so the state is accepted for interface parity.
pub fn plan(task_name: &str, _state: &WorldState) -> Result<Vec<PlanStep>> {
    Ok(task(task_name)?.steps)
}

/// How an episode ended.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Outcome {
    Success,
    /// Interaction with a same-kind object outside the spatial qualifier.
    WrongTarget {
        tick: u64,
        object_id: ObjectId,
    },
    Timeout,
    Aborted,
}

/// Tracks completion of plan steps from per-tick events and state.
#[derive(Clone, Debug)]
pub struct Progress {
    steps: Vec<PlanStep>,
    active: usize,
    outcome: Option<Outcome>,
}

impl Progress {
    pub fn new(steps: Vec<PlanStep>) -> Self {
        Self {
            steps,
            active: 0,
            outcome: None,
        }
    }

    pub fn for_task(task: &TaskSpec) -> Self {
        Self::new(task.steps.clone())
    }

    pub fn active(&self) -> usize {
        self.active
    }

    pub fn active_step(&self) -> Option<&PlanStep> {
        self.steps.get(self.active)
    }

    pub fn steps(&self) -> &[PlanStep] {
        &self.steps
    }

    pub fn outcome(&self) -> Option<&Outcome> {
        self.outcome.as_ref()
    }

    fn fired(step: &PlanStep, state: &WorldState, events: &[EventRecord]) -> bool {
        match &step.done {
            Completion::Event => events.iter().any(|ev| {
                ev.interaction == step.interaction
                    && state
                        .entity(ev.object_id)
                        .is_some_and(|e| step.target.matches(state, e))
            }),
            Completion::Facing => state
                .faced_entity()
                .is_some_and(|e| step.target.matches(state, e)),
            Completion::Holding(item) => state.agent.held_item() == Some(*item),
        }
    }

    /// Folds in the state after a tick and the events of that tick. Returns the
    /// outcome once the plan is finished or failed.
    pub fn update(&mut self, state: &WorldState, events: &[EventRecord]) -> Option<&Outcome> {
        while self.outcome.is_none() {
            let Some(step) = self.steps.get(self.active) else {
                self.outcome = Some(Outcome::Success);
                break;
            };
            if let Some(ev) = events.iter().find(|ev| {
                ev.interaction == step.interaction
                    && state.entity(ev.object_id).is_some_and(|e| {
                        e.kind == step.target.kind && !step.target.matches(state, e)
                    })
            }) {
                self.outcome = Some(Outcome::WrongTarget {
                    tick: ev.tick,
                    object_id: ev.object_id,
                });
                break;
            }
            if !Self::fired(step, state, events) {
                break;
            }
            self.active += 1;
        }
        self.outcome.as_ref()
    }
}

/// Anything that issues prompts to the agent loop.
pub trait PromptProvider {
    /// Sees the state and events after every tick.
    fn observe(&mut self, _state: &WorldState, _events: &[EventRecord]) {}

    /// Called on cadence ticks only.
    fn next_prompt(
        &mut self,
        state: &WorldState,
        obs: &Observation,
        tick: u64,
    ) -> Option<PromptEvent>;
}

/// Ground-truth stand-in for a vision-language planner and pointer.
#[derive(Clone, Debug)]
pub struct ScriptedReasoner {
    progress: Progress,
}

impl ScriptedReasoner {
    pub fn new(steps: Vec<PlanStep>) -> Self {
        Self {
            progress: Progress::new(steps),
        }
    }

    pub fn for_task(task: &TaskSpec) -> Self {
        Self::new(task.steps.clone())
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }
}

impl PromptProvider for ScriptedReasoner {
    fn observe(&mut self, state: &WorldState, events: &[EventRecord]) {
        self.progress.update(state, events);
    }

    fn next_prompt(
        &mut self,
        state: &WorldState,
        _obs: &Observation,
        tick: u64,
    ) -> Option<PromptEvent> {
        let step = self.progress.active_step()?;
        let (_, ids) = render_with_ids(state);
        let point_at = |desc: &crate::harness::TargetDesc| {
            desc.resolve(state)
                .into_iter()
                .filter_map(|e| ids.mask_of(e.id).anchor_point())
                .next()
        };
        let (point, interaction) = match point_at(&step.target) {
            Some(p) => (p, step.interaction),
            None => (
                point_at(step.landmark.as_ref()?)?,
                InteractionType::Navigate,
            ),
        };
        Some(PromptEvent {
            frame_index: tick,
            point: Some(point),
            interaction,
            source: PromptSource::Scripted,
        })
    }
}
