//! Ablation grids: training variants crossed with runtime conditions, scored
//! on seeded episodes, with direction verdicts for the fusion and tracker
//! comparisons.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::tasks::task;
use crate::agent_loop::{episode_seeds, evaluate, wilson_interval, EpisodeConfig};
use crate::error::{config, Error, Result};
use crate::policy::{
    load_checkpoint, save_checkpoint, train, ActMode, Fusion, Policy, TrainConfig,
};
use crate::reasoner::{PromptProvider, ScriptedReasoner};
use crate::tracker::TrackerVariant;
use crate::trajectory::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Fusion,
    DropoutP,
    Tracker,
    PromptInterval,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Fusion,
        Ablation::DropoutP,
        Ablation::Tracker,
        Ablation::PromptInterval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Fusion => "fusion",
            Ablation::DropoutP => "dropout_p",
            Ablation::Tracker => "tracker",
            Ablation::PromptInterval => "prompt_interval",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| config(format!("unknown ablation {s:?}")))
    }
}

/// What a policy was trained with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub fusion: Fusion,
    pub dropout_p: f64,
    pub train_seed: u64,
}

impl Variant {
    /// File stem used for this variant's checkpoint.
    pub fn key(&self) -> String {
        format!(
            "{}-p{:.2}-s{}",
            self.fusion, self.dropout_p, self.train_seed
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub fusions: Vec<Fusion>,
    pub dropout_ps: Vec<f64>,
    pub train_seeds: Vec<u64>,
    pub trackers: Vec<TrackerVariant>,
    pub intervals: Vec<u64>,
    pub tasks: Vec<String>,
    pub episodes: usize,
    /// Base seed for episode seeds; every cell plays the same episodes.
    pub eval_seed: u64,
    pub mode: ActMode,
}

pub const TWIN_HUNT: [&str; 2] = ["hunt_right_sheep", "hunt_left_sheep"];
pub const TWIN_HUNT_MINE: [&str; 4] = [
    "hunt_right_sheep",
    "hunt_left_sheep",
    "mine_north_ore",
    "mine_south_ore",
];

impl AblationGrid {
    /// The default grid for `ablation`; axes it does not vary hold the
    /// standard setting.
    pub fn for_ablation(ablation: Ablation) -> Self {
        let base = Self {
            fusions: vec![Fusion::TransformerLayer],
            dropout_ps: vec![0.75],
            train_seeds: vec![0],
            trackers: vec![TrackerVariant::Oracle],
            intervals: vec![30],
            tasks: TWIN_HUNT_MINE.iter().map(|s| s.to_string()).collect(),
            episodes: 32,
            eval_seed: 1000,
            mode: ActMode::Argmax,
        };
        match ablation {
            Ablation::Fusion => Self {
                fusions: Fusion::ALL.to_vec(),
                train_seeds: vec![0, 1, 2],
                tasks: TWIN_HUNT.iter().map(|s| s.to_string()).collect(),
                ..base
            },
            Ablation::DropoutP => Self {
                dropout_ps: vec![0.0, 0.75, 1.0],
                ..base
            },
            Ablation::Tracker => Self {
                trackers: TrackerVariant::ALL.to_vec(),
                ..base
            },
            Ablation::PromptInterval => Self {
                trackers: TrackerVariant::ALL.to_vec(),
                intervals: vec![3, 30],
                ..base
            },
        }
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for &fusion in &self.fusions {
            for &dropout_p in &self.dropout_ps {
                for &train_seed in &self.train_seeds {
                    out.push(Variant {
                        fusion,
                        dropout_p,
                        train_seed,
                    });
                }
            }
        }
        out
    }

    pub fn conditions(&self) -> Vec<(TrackerVariant, u64)> {
        self.intervals
            .iter()
            .flat_map(|&i| self.trackers.iter().map(move |&t| (t, i)))
            .collect()
    }
}

/// Supplies the trained policy for a variant.
pub trait PolicySource {
    /// `Ok(None)` marks the variant as unavailable; its cells become gaps.
    fn policy(&mut self, variant: &Variant) -> Result<Option<Arc<Policy>>>;
}

impl<F: FnMut(&Variant) -> Result<Option<Arc<Policy>>>> PolicySource for F {
    fn policy(&mut self, variant: &Variant) -> Result<Option<Arc<Policy>>> {
        self(variant)
    }
}

/// Checkpoints named `<variant key>.safetensors` in one directory.
pub struct CheckpointDir {
    pub dir: PathBuf,
}

impl PolicySource for CheckpointDir {
    fn policy(&mut self, variant: &Variant) -> Result<Option<Arc<Policy>>> {
        let path = self.dir.join(format!("{}.safetensors", variant.key()));
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(Arc::new(load_checkpoint(&path)?)))
    }
}

/// Trains each variant on a labeled dataset the first time it is asked for.
/// With `save_dir` set, existing checkpoints there are reused and new ones saved.
pub struct TrainOnDemand<'a> {
    pub data: &'a [Trajectory],
    pub base: TrainConfig,
    pub save_dir: Option<PathBuf>,
    cache: HashMap<String, Arc<Policy>>,
}

impl<'a> TrainOnDemand<'a> {
    pub fn new(data: &'a [Trajectory], base: TrainConfig, save_dir: Option<PathBuf>) -> Self {
        Self {
            data,
            base,
            save_dir,
            cache: HashMap::new(),
        }
    }
}

impl PolicySource for TrainOnDemand<'_> {
    fn policy(&mut self, variant: &Variant) -> Result<Option<Arc<Policy>>> {
        let key = variant.key();
        if let Some(p) = self.cache.get(&key) {
            return Ok(Some(p.clone()));
        }
        let path = self
            .save_dir
            .as_ref()
            .map(|d| d.join(format!("{key}.safetensors")));
        let policy = match &path {
            Some(p) if p.exists() => load_checkpoint(p)?,
            _ => {
                let mut cfg = self.base.clone();
                cfg.policy.fusion = variant.fusion;
                cfg.policy.dropout_p = variant.dropout_p;
                cfg.seed = variant.train_seed;
                info!("training {key}");
                let out = train(self.data, &cfg, |_| {})?;
                if let Some(p) = &path {
                    save_checkpoint(&out.policy, p)?;
                }
                out.policy
            }
        };
        let policy = Arc::new(policy);
        self.cache.insert(key, policy.clone());
        Ok(Some(policy))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: Variant,
    pub tracker: TrackerVariant,
    pub interval: u64,
    pub task: String,
    pub episodes: usize,
    pub eval_seed: u64,
    pub successes: Option<usize>,
    pub rate: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    /// Why the cell has no result.
    pub gap: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    /// `None` when a needed cell is missing.
    pub pass: Option<bool>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: Ablation,
    pub grid: AblationGrid,
    pub cells: Vec<CellResult>,
    pub verdicts: Vec<Verdict>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine {
    Header {
        ablation: Ablation,
        grid: AblationGrid,
    },
    Cell(CellResult),
    Verdict(Verdict),
}

/// Plays every cell of `grid`. Variants the source cannot supply, and cells
/// whose evaluation fails, are reported as gaps rather than aborting the run.
pub fn run_ablation(
    ablation: Ablation,
    grid: &AblationGrid,
    source: &mut dyn PolicySource,
) -> Result<AblationReport> {
    let specs = grid
        .tasks
        .iter()
        .map(|n| task(n))
        .collect::<Result<Vec<_>>>()?;
    let seeds = episode_seeds(grid.eval_seed, grid.episodes);
    let mut cells = Vec::new();
    for variant in grid.variants() {
        let policy = match source.policy(&variant) {
            Ok(Some(p)) => Ok(p),
            Ok(None) => Err(format!("no policy for {}", variant.key())),
            Err(e) => Err(format!("{}: {e}", variant.key())),
        };
        for (tracker, interval) in grid.conditions() {
            for spec in &specs {
                let mut cell = CellResult {
                    variant,
                    tracker,
                    interval,
                    task: spec.name.clone(),
                    episodes: grid.episodes,
                    eval_seed: grid.eval_seed,
                    successes: None,
                    rate: None,
                    ci95: None,
                    gap: None,
                };
                let cfg = EpisodeConfig {
                    tracker,
                    prompt_interval: interval,
                    mode: grid.mode,
                    ..EpisodeConfig::default()
                };
                let result = policy.as_ref().map_err(Clone::clone).and_then(|p| {
                    evaluate(
                        spec,
                        p,
                        &cfg,
                        &seeds,
                        |t| Box::new(ScriptedReasoner::for_task(t)) as Box<dyn PromptProvider>,
                        |_| {},
                    )
                    .map_err(|e| e.to_string())
                });
                match result {
                    Ok(s) => {
                        cell.successes = Some(s.successes);
                        cell.rate = Some(s.rate);
                        cell.ci95 = Some(s.ci95);
                    }
                    Err(msg) => {
                        warn!("gap: {msg}");
                        cell.gap = Some(msg);
                    }
                }
                info!(
                    "{} {}@{} {}: {:?}",
                    variant.key(),
                    tracker,
                    interval,
                    spec.name,
                    cell.rate
                );
                cells.push(cell);
            }
        }
    }
    let mut report = AblationReport {
        ablation,
        grid: grid.clone(),
        cells,
        verdicts: Vec::new(),
    };
    report.verdicts = verdicts(&report);
    Ok(report)
}

/// Successes and episodes pooled over matching cells; `None` if any is a gap
/// or nothing matches.
pub fn pooled(cells: &[CellResult], keep: impl Fn(&CellResult) -> bool) -> Option<(usize, usize)> {
    let mut any = false;
    let (mut s, mut n) = (0, 0);
    for c in cells.iter().filter(|c| keep(c)) {
        s += c.successes?;
        n += c.episodes;
        any = true;
    }
    any.then_some((s, n))
}

fn rate((s, n): (usize, usize)) -> f64 {
    if n == 0 {
        0.0
    } else {
        s as f64 / n as f64
    }
}

/// Direction verdicts the report's grid can speak to.
pub fn verdicts(report: &AblationReport) -> Vec<Verdict> {
    let grid = &report.grid;
    let cells = &report.cells;
    let mut out = Vec::new();
    if report.ablation == Ablation::Fusion {
        out.push(fusion_verdict(grid, cells));
    }
    if matches!(
        report.ablation,
        Ablation::Tracker | Ablation::PromptInterval
    ) {
        out.push(tracker_verdict(cells));
    }
    out
}

fn fusion_verdict(grid: &AblationGrid, cells: &[CellResult]) -> Verdict {
    let name = "transformer_layer fusion beats visual_backbone fusion".to_string();
    let mut wins = 0;
    let mut lines = Vec::new();
    for &seed in &grid.train_seeds {
        let per = |f: Fusion| {
            pooled(cells, |c| {
                c.variant.fusion == f && c.variant.train_seed == seed
            })
        };
        let (Some(tl), Some(vb)) = (per(Fusion::TransformerLayer), per(Fusion::VisualBackbone))
        else {
            return Verdict {
                name,
                pass: None,
                detail: format!("missing cells for training seed {seed}"),
            };
        };
        let strict = rate(tl) > rate(vb);
        wins += usize::from(strict);
        lines.push(format!(
            "seed {seed}: {:.3} vs {:.3}{}",
            rate(tl),
            rate(vb),
            if strict { " (strict)" } else { "" }
        ));
    }
    let n = grid.train_seeds.len();
    Verdict {
        name,
        pass: Some(n > 0 && 2 * wins > n),
        detail: format!("{}; strict on {wins} of {n} seeds", lines.join(", ")),
    }
}

fn tracker_verdict(cells: &[CellResult]) -> Verdict {
    let name = "without tracking, sparse prompts collapse; with tracking they match dense prompts"
        .to_string();
    let at = |t: TrackerVariant, i: u64| pooled(cells, |c| c.tracker == t && c.interval == i);
    let needed = [
        ("none@30", at(TrackerVariant::None, 30)),
        ("oracle@30", at(TrackerVariant::Oracle, 30)),
        ("none@3", at(TrackerVariant::None, 3)),
    ];
    let missing: Vec<_> = needed
        .iter()
        .filter(|(_, v)| v.is_none())
        .map(|(k, _)| *k)
        .collect();
    if !missing.is_empty() {
        return Verdict {
            name,
            pass: None,
            detail: format!("needs cells {}", missing.join(", ")),
        };
    }
    let [none30, oracle30, dense] = needed.map(|(_, v)| rate(v.expect("checked above")));
    let collapse = none30 < 0.2;
    let matched = (oracle30 - dense).abs() <= 0.1;
    Verdict {
        name,
        pass: Some(collapse && matched),
        detail: format!(
            "none@30 {none30:.3} ({}), oracle@30 {oracle30:.3} vs none@3 {dense:.3} ({})",
            if collapse {
                "below 0.2"
            } else {
                "not below 0.2"
            },
            if matched {
                "within 0.1"
            } else {
                "gap over 0.1"
            }
        ),
    }
}

impl AblationReport {
    /// One header line, one line per cell, one per verdict.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        let mut line = |r: &ReportLine| -> Result<()> {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
            Ok(())
        };
        line(&ReportLine::Header {
            ablation: self.ablation,
            grid: self.grid.clone(),
        })?;
        for c in &self.cells {
            line(&ReportLine::Cell(c.clone()))?;
        }
        for v in &self.verdicts {
            line(&ReportLine::Verdict(v.clone()))?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(fs::File::open(path)?);
        let mut header = None;
        let (mut cells, mut verdicts) = (Vec::new(), Vec::new());
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                ReportLine::Header { ablation, grid } => header = Some((ablation, grid)),
                ReportLine::Cell(c) => cells.push(c),
                ReportLine::Verdict(v) => verdicts.push(v),
            }
        }
        let (ablation, grid) = header.ok_or_else(|| {
            Error::CorruptDataset(format!("{}: report has no header", path.display()))
        })?;
        Ok(Self {
            ablation,
            grid,
            cells,
            verdicts,
        })
    }

    /// Plain-text summary table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "ablation {} ({} episodes per cell, eval seed {})",
            self.ablation, self.grid.episodes, self.grid.eval_seed
        );
        let _ = writeln!(
            s,
            "{:<18} {:>5} {:>5} {:<7} {:>4} {:<30} {:>8} {:>15}",
            "fusion", "p", "seed", "tracker", "pmt", "task", "success", "95% interval"
        );
        for c in &self.cells {
            let result = match (c.successes, c.rate) {
                (Some(k), Some(r)) => {
                    let (lo, hi) = c.ci95.unwrap_or_else(|| wilson_interval(k, c.episodes));
                    format!("{r:>8.3} {:>15}", format!("[{lo:.2}, {hi:.2}]"))
                }
                _ => format!("{:>8} {}", "gap", c.gap.as_deref().unwrap_or("no result")),
            };
            let _ = writeln!(
                s,
                "{:<18} {:>5.2} {:>5} {:<7} {:>4} {:<30} {result}",
                c.variant.fusion.name(),
                c.variant.dropout_p,
                c.variant.train_seed,
                c.tracker.name(),
                c.interval,
                c.task
            );
        }
        for v in &self.verdicts {
            let status = match v.pass {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "INCOMPLETE",
            };
            let _ = writeln!(s, "{status}: {} ({})", v.name, v.detail);
        }
        s
    }
}
