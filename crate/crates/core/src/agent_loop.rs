//! The hierarchical runtime: prompts at a low cadence, tracking and acting at
//! every environment tick.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::{debug, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::gridworld::{
    render_with_ids, reset, Action, EventRecord, IdMap, InstanceMask, InteractionType, Observation,
    ScenarioSpec, WorldState,
};
use crate::harness::TaskSpec;
use crate::policy::{ActMode, Policy, PolicyContext};
use crate::reasoner::{Outcome, Progress, PromptEvent, PromptProvider};
use crate::tracker::{Direction, Frame, TrackerState, TrackerVariant};
use crate::trajectory::{rle_decode, rle_encode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub tracker: TrackerVariant,
    /// Ticks between reasoner calls.
    pub prompt_interval: u64,
    /// Overrides the task's tick limit.
    pub max_ticks: Option<u64>,
    pub mode: ActMode,
    /// Feed the policy an all-zero mask and the null type on every tick.
    pub drop_masks: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            tracker: TrackerVariant::Oracle,
            prompt_interval: 30,
            max_ticks: None,
            mode: ActMode::Argmax,
            drop_masks: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    /// Prompt applied on this tick, if any.
    pub prompt: Option<PromptEvent>,
    /// Prompt refused on this tick (point outside the frame).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<PromptEvent>,
    /// Mask the policy saw, run-length encoded.
    pub mask_rle: Vec<(u32, u32)>,
    pub mask_object: Option<u32>,
    pub interaction: InteractionType,
    pub action: Action,
    pub events: Vec<EventRecord>,
}

impl TickRecord {
    pub fn mask(&self, width: usize, height: usize) -> Result<InstanceMask> {
        Ok(InstanceMask {
            width,
            height,
            bits: rle_decode(&self.mask_rle, width, height)?,
            object_id: self.mask_object,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub task: String,
    pub scenario: ScenarioSpec,
    pub seed: u64,
    pub config: EpisodeConfig,
    pub ticks: Vec<TickRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task: String,
    pub seed: u64,
    pub success: bool,
    pub outcome: Outcome,
    pub ticks: u64,
    pub prompts: usize,
    pub trace: EpisodeTrace,
}

/// One live episode, advanced a tick at a time.
pub struct Episode<'p> {
    task: TaskSpec,
    seed: u64,
    policy: &'p Policy,
    cfg: EpisodeConfig,
    state: WorldState,
    obs: Observation,
    ids: IdMap,
    tracker: TrackerState,
    prompt_type: InteractionType,
    ctx: PolicyContext,
    progress: Progress,
    rng: ChaCha8Rng,
    ticks: Vec<TickRecord>,
    outcome: Option<Outcome>,
    prompts: usize,
}

impl<'p> Episode<'p> {
    pub fn new(
        task: &TaskSpec,
        seed: u64,
        policy: &'p Policy,
        cfg: &EpisodeConfig,
    ) -> Result<Self> {
        if cfg.prompt_interval == 0 {
            return Err(usage("prompt_interval must be positive"));
        }
        let (state, _) = reset(seed, &task.scenario)?;
        let (obs, ids) = render_with_ids(&state);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        Ok(Self {
            task: task.clone(),
            seed,
            policy,
            cfg: cfg.clone(),
            tracker: TrackerState::idle(cfg.tracker, obs.width, obs.height),
            state,
            obs,
            ids,
            prompt_type: InteractionType::Null,
            ctx: policy.new_context(),
            progress: Progress::for_task(task),
            rng,
            ticks: Vec::new(),
            outcome: None,
            prompts: 0,
        })
    }

    pub fn tick(&self) -> u64 {
        self.state.tick
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn ids(&self) -> &IdMap {
        &self.ids
    }

    pub fn tracker(&self) -> &TrackerState {
        &self.tracker
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn records(&self) -> &[TickRecord] {
        &self.ticks
    }

    pub fn outcome(&self) -> Option<&Outcome> {
        self.outcome.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn is_cadence_tick(&self) -> bool {
        self.state.tick.is_multiple_of(self.cfg.prompt_interval)
    }

    pub fn max_ticks(&self) -> u64 {
        self.cfg.max_ticks.unwrap_or(self.task.max_ticks)
    }

    fn frame(&self) -> Frame<'_> {
        Frame::new(&self.obs, Some(&self.ids))
    }

    /// Re-initialises the tracker on the current frame. A `None` point clears
    /// the prompt. Out-of-frame points are refused and leave the tracker as it was.
    fn apply_prompt(&mut self, p: &PromptEvent) -> Result<InstanceMask> {
        match p.point {
            None => {
                self.tracker =
                    TrackerState::idle(self.cfg.tracker, self.obs.width, self.obs.height);
                self.prompt_type = InteractionType::Null;
            }
            Some(point) => {
                self.tracker = TrackerState::init_from_point(
                    self.cfg.tracker,
                    self.frame(),
                    point,
                    Direction::Forward,
                )?;
                self.prompt_type = p.interaction;
            }
        }
        self.prompts += 1;
        Ok(self.tracker.current_mask.clone())
    }

    /// What the policy is fed for a tracker mask: empty or dropped masks go in
    /// with the null type.
    fn conditioning(&self, mask: InstanceMask) -> (InstanceMask, InteractionType) {
        if self.cfg.drop_masks || mask.is_empty() {
            (
                InstanceMask::empty(self.obs.width, self.obs.height),
                InteractionType::Null,
            )
        } else {
            (mask, self.prompt_type)
        }
    }

    /// Mask and type the next [`Episode::step`] would feed the policy if no
    /// prompt arrives. The tracker itself is left untouched.
    pub fn preview(&self) -> (InstanceMask, InteractionType) {
        let mut tracker = self.tracker.clone();
        let mask = tracker.propagate(self.frame());
        self.conditioning(mask)
    }

    /// Advances one tick. `prompt`, when given, replaces tracker propagation on
    /// this tick.
    pub fn step(&mut self, prompt: Option<PromptEvent>) -> Result<&TickRecord> {
        if self.is_done() {
            return Err(usage("episode already finished"));
        }
        let mut applied = None;
        let mut rejected = None;
        let mut mask = None;
        if let Some(p) = prompt {
            match self.apply_prompt(&p) {
                Ok(m) => {
                    mask = Some(m);
                    applied = Some(p);
                }
                Err(Error::Usage(msg)) => {
                    warn!("tick {}: prompt rejected: {msg}", self.state.tick);
                    rejected = Some(p);
                }
                Err(e) => return Err(e),
            }
        }
        let mask = match mask {
            Some(m) => m,
            None => {
                let frame = Frame::new(&self.obs, Some(&self.ids));
                self.tracker.propagate(frame)
            }
        };
        let (mask, ctype) = self.conditioning(mask);
        let (action, _) = self.policy.act(
            &self.obs,
            &mask,
            ctype,
            &mut self.ctx,
            self.cfg.mode,
            &mut self.rng,
        )?;
        let events = self.state.step(action)?;
        let tick = self.state.tick - 1;
        let (obs, ids) = render_with_ids(&self.state);
        self.obs = obs;
        self.ids = ids;
        if let Some(o) = self.progress.update(&self.state, &events) {
            self.outcome = Some(o.clone());
        } else if self.state.tick >= self.max_ticks() {
            self.outcome = Some(Outcome::Timeout);
        }
        self.ticks.push(TickRecord {
            tick,
            prompt: applied,
            rejected,
            mask_rle: rle_encode(&mask),
            mask_object: mask.object_id.filter(|_| !mask.is_empty()),
            interaction: ctype,
            action,
            events,
        });
        Ok(self.ticks.last().expect("just pushed"))
    }

    /// Ends the episode early (for example when a client disconnects).
    pub fn abort(&mut self) {
        if self.outcome.is_none() {
            self.outcome = Some(Outcome::Aborted);
        }
    }

    pub fn finish(self) -> EpisodeResult {
        let outcome = self.outcome.unwrap_or(Outcome::Aborted);
        EpisodeResult {
            task: self.task.name.clone(),
            seed: self.seed,
            success: outcome == Outcome::Success,
            outcome,
            ticks: self.state.tick,
            prompts: self.prompts,
            trace: EpisodeTrace {
                task: self.task.name,
                scenario: self.task.scenario,
                seed: self.seed,
                config: self.cfg,
                ticks: self.ticks,
            },
        }
    }
}

/// Runs one episode with `provider` queried on cadence ticks only.
pub fn run_episode(
    task: &TaskSpec,
    seed: u64,
    policy: &Policy,
    provider: &mut dyn PromptProvider,
    cfg: &EpisodeConfig,
) -> Result<EpisodeResult> {
    let mut ep = Episode::new(task, seed, policy, cfg)?;
    while !ep.is_done() {
        let prompt = if ep.is_cadence_tick() {
            provider.next_prompt(&ep.state, &ep.obs, ep.tick())
        } else {
            None
        };
        let rec = ep.step(prompt)?;
        let events = rec.events.clone();
        provider.observe(&ep.state, &events);
    }
    let res = ep.finish();
    debug!(
        "{} seed {}: {:?} after {} ticks",
        res.task, res.seed, res.outcome, res.ticks
    );
    Ok(res)
}

/// Wilson score interval at 95% confidence.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054_f64;
    let n = n as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub task: String,
    pub episodes: usize,
    pub successes: usize,
    pub rate: f64,
    pub ci95: (f64, f64),
    pub seeds: Vec<u64>,
    pub outcomes: Vec<Outcome>,
}

/// Episode seeds derived from a base seed.
pub fn episode_seeds(base: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Success rate over seeded episodes. `make_provider` builds a fresh prompt
/// source per episode; `on_episode` sees every result (for trace saving).
pub fn evaluate(
    task: &TaskSpec,
    policy: &Policy,
    cfg: &EpisodeConfig,
    seeds: &[u64],
    mut make_provider: impl FnMut(&TaskSpec) -> Box<dyn PromptProvider>,
    mut on_episode: impl FnMut(&EpisodeResult),
) -> Result<EvalSummary> {
    let mut successes = 0;
    let mut outcomes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut provider = make_provider(task);
        let res = run_episode(task, seed, policy, provider.as_mut(), cfg)?;
        successes += usize::from(res.success);
        outcomes.push(res.outcome.clone());
        on_episode(&res);
    }
    let n = seeds.len();
    Ok(EvalSummary {
        task: task.name.clone(),
        episodes: n,
        successes,
        rate: if n == 0 {
            0.0
        } else {
            successes as f64 / n as f64
        },
        ci95: wilson_interval(successes, n),
        seeds: seeds.to_vec(),
        outcomes,
    })
}

/// Re-simulates a trace's actions and returns the events of every tick.
pub fn replay(trace: &EpisodeTrace) -> Result<Vec<Vec<EventRecord>>> {
    let (mut state, _) = reset(trace.seed, &trace.scenario)?;
    trace.ticks.iter().map(|t| state.step(t.action)).collect()
}

/// Whether a trace replays to exactly its recorded event sequence.
pub fn replay_matches(trace: &EpisodeTrace) -> Result<bool> {
    let events = replay(trace)?;
    Ok(events.iter().zip(&trace.ticks).all(|(e, t)| *e == t.events))
}

/// Writes traces as line-delimited JSON.
pub fn save_traces(path: &Path, traces: &[EpisodeTrace]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for t in traces {
        serde_json::to_writer(&mut f, t)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_traces(path: &Path) -> Result<Vec<EpisodeTrace>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
