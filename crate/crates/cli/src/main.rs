use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gridrocket::agent_loop::{episode_seeds, evaluate, save_traces, EpisodeConfig, EvalSummary};
use gridrocket::episode_server::{EpisodeServer, ServerConfig};
use gridrocket::harness::{
    audit, generate_dataset, run_ablation, task, tasks, training_tasks, Ablation, AblationGrid,
    AblationReport, CheckpointDir, GenConfig, PolicySource, TrainOnDemand,
};
use gridrocket::policy::{load_checkpoint, save_checkpoint, train, ActMode, TrainConfig};
use gridrocket::reasoner::{PromptProvider, ScriptedReasoner};
use gridrocket::relabel::{relabel, RelabelConfig};
use gridrocket::tracker::TrackerVariant;
use gridrocket::trajectory::{load_dataset, save_dataset};

#[derive(Parser)]
#[command(
    name = "gridrocket",
    version,
    about = "Segmentation-conditioned policies on a grid world"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Argmax,
    Sample,
}

impl From<Mode> for ActMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Argmax => ActMode::Argmax,
            Mode::Sample => ActMode::Sample,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert trajectories (unlabeled).
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated task names; defaults to every training task.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random moves before the expert starts, drawn from 0..=N.
        #[arg(long, default_value_t = 0)]
        wander: usize,
    },
    /// Attach backward-tracked masks and interaction types to a dataset.
    Relabel {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        k: usize,
        #[arg(long, default_value = "oracle")]
        tracker: TrackerVariant,
        #[arg(long, default_value_t = 6)]
        nav_threshold: i32,
    },
    /// Train a policy on a labeled dataset; epoch metrics go to stdout as JSON lines.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON training config; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Success rate of a checkpoint with the scripted reasoner.
    Eval {
        #[arg(long)]
        task: String,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value = "oracle")]
        tracker: TrackerVariant,
        #[arg(long, default_value_t = 30)]
        interval: u64,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Mode::Argmax)]
        mode: Mode,
        /// Feed all-zero masks on every tick.
        #[arg(long)]
        drop_masks: bool,
        #[arg(long)]
        max_ticks: Option<u64>,
        /// Write every episode trace here.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Evaluate an ablation grid and write a line-delimited report.
    RunAblation {
        #[arg(long)]
        name: Ablation,
        #[arg(long)]
        out: PathBuf,
        /// Directory of `<variant>.safetensors` checkpoints.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Labeled dataset to train missing variants on (saved into --checkpoints).
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        train_seeds: Vec<u64>,
        #[arg(long)]
        eval_seed: Option<u64>,
    },
    /// Render a saved ablation report as a table.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Serve live episodes over TCP.
    Serve {
        #[arg(long)]
        task: String,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 10.0)]
        tick_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "oracle")]
        tracker: TrackerVariant,
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        /// Start every episode paused.
        #[arg(long)]
        paused: bool,
        /// Exit after the first client disconnects.
        #[arg(long)]
        once: bool,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn gen_data(out: &Path, names: &[String], episodes: usize, seed: u64, wander: usize) -> Result<()> {
    let specs = if names.is_empty() {
        training_tasks()
    } else {
        names
            .iter()
            .map(|n| task(n))
            .collect::<gridrocket::Result<Vec<_>>>()?
    };
    let trajs = generate_dataset(&specs, episodes, seed, &GenConfig { wander_max: wander })?;
    save_dataset(out, &trajs)?;
    let report = audit(&trajs, &tasks())?;
    let mut stdout = io::stdout().lock();
    for (name, a) in &report.per_task {
        writeln!(
            stdout,
            "{name:<30} {:>4} episodes {:>4} solved {:>6} frames",
            a.episodes, a.successes, a.frames
        )?;
    }
    writeln!(
        stdout,
        "twin-scene share of hunt/mine episodes: {:.2}",
        report.hunt_mine_twin_fraction
    )?;
    Ok(())
}

fn relabel_cmd(input: &Path, out: &Path, cfg: RelabelConfig) -> Result<()> {
    cfg.validate()?;
    let raw = load_dataset(input)?;
    let labeled = raw
        .iter()
        .map(|t| relabel(t, &cfg))
        .collect::<gridrocket::Result<Vec<_>>>()?;
    save_dataset(out, &labeled)?;
    let frames: usize = labeled.iter().map(|t| t.len()).sum();
    let highlighted: usize = labeled
        .iter()
        .flat_map(|t| t.labels.iter().flatten())
        .filter(|l| !l.is_null())
        .count();
    println!(
        "{} trajectories, {frames} frames, {highlighted} highlighted",
        labeled.len()
    );
    Ok(())
}

fn train_cmd(data: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let trajs = load_dataset(data)?;
    let mut stdout = io::stdout().lock();
    let outcome = train(&trajs, &cfg, |m| {
        let _ = serde_json::to_writer(&mut stdout, m);
        let _ = writeln!(stdout);
    })?;
    save_checkpoint(&outcome.policy, out)?;
    eprintln!("saved {}", out.display());
    Ok(())
}

fn summary_table(rows: &[EvalSummary]) -> String {
    let mut s = format!(
        "{:<30} {:>8} {:>9} {:>7} {:>15}\n",
        "task", "episodes", "successes", "rate", "95% interval"
    );
    for r in rows {
        s += &format!(
            "{:<30} {:>8} {:>9} {:>7.3} {:>15}\n",
            r.task,
            r.episodes,
            r.successes,
            r.rate,
            format!("[{:.2}, {:.2}]", r.ci95.0, r.ci95.1)
        );
    }
    s
}

fn eval_cmd(
    name: &str,
    policy: &Path,
    cfg: EpisodeConfig,
    episodes: usize,
    seed: u64,
    traces: Option<&Path>,
) -> Result<()> {
    let spec = task(name)?;
    let policy = load_checkpoint(policy)?;
    let seeds = episode_seeds(seed, episodes);
    let mut kept = Vec::new();
    let mut stdout = io::stdout().lock();
    let summary = evaluate(
        &spec,
        &policy,
        &cfg,
        &seeds,
        |t| Box::new(ScriptedReasoner::for_task(t)) as Box<dyn PromptProvider>,
        |r| {
            let line = serde_json::json!({
                "task": r.task,
                "seed": r.seed,
                "success": r.success,
                "outcome": r.outcome,
                "ticks": r.ticks,
                "prompts": r.prompts,
            });
            let _ = writeln!(stdout, "{line}");
            if traces.is_some() {
                kept.push(r.trace.clone());
            }
        },
    )?;
    if let Some(path) = traces {
        save_traces(path, &kept)?;
    }
    write!(stdout, "{}", summary_table(&[summary]))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_ablation_cmd(
    name: Ablation,
    out: &Path,
    checkpoints: Option<PathBuf>,
    train_data: Option<&Path>,
    train_config: Option<&Path>,
    episodes: Option<usize>,
    task_names: Vec<String>,
    train_seeds: Vec<u64>,
    eval_seed: Option<u64>,
) -> Result<()> {
    let mut grid = AblationGrid::for_ablation(name);
    if let Some(n) = episodes {
        grid.episodes = n;
    }
    if !task_names.is_empty() {
        grid.tasks = task_names;
    }
    if !train_seeds.is_empty() {
        grid.train_seeds = train_seeds;
    }
    if let Some(s) = eval_seed {
        grid.eval_seed = s;
    }
    let data;
    let mut source: Box<dyn PolicySource> = match (train_data, checkpoints) {
        (Some(dir), ckpts) => {
            data = load_dataset(dir)?;
            let base = match train_config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            Box::new(TrainOnDemand::new(&data, base, ckpts))
        }
        (None, Some(dir)) => Box::new(CheckpointDir { dir }),
        (None, None) => bail!("give --checkpoints, --train-data, or both"),
    };
    let report = run_ablation(name, &grid, source.as_mut())?;
    report.save(out)?;
    print!("{}", report.render());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn serve_cmd(
    name: &str,
    policy: &Path,
    addr: (&str, u16),
    tick_rate: f64,
    seed: u64,
    tracker: TrackerVariant,
    trace_dir: Option<PathBuf>,
    paused: bool,
    once: bool,
) -> Result<()> {
    let spec = task(name)?;
    let policy = Arc::new(load_checkpoint(policy)?);
    let cfg = ServerConfig {
        tick_rate,
        start_paused: paused,
        trace_dir,
        episode: EpisodeConfig {
            tracker,
            ..EpisodeConfig::default()
        },
        ..ServerConfig::default()
    };
    let mut server = EpisodeServer::bind(addr, policy, spec, seed, cfg)?;
    eprintln!("listening on {}", server.local_addr()?);
    if once {
        let report = server.serve_one()?;
        for r in &report.episodes {
            eprintln!(
                "{} seed {}: {:?} after {} ticks",
                r.task, r.seed, r.outcome, r.ticks
            );
        }
        Ok(())
    } else {
        Ok(server.serve_forever()?)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData {
            out,
            tasks,
            episodes,
            seed,
            wander,
        } => gen_data(&out, &tasks, episodes, seed, wander),
        Command::Relabel {
            input,
            out,
            k,
            tracker,
            nav_threshold,
        } => relabel_cmd(
            &input,
            &out,
            RelabelConfig {
                window_k: k,
                nav_threshold,
                tracker,
                ..RelabelConfig::default()
            },
        ),
        Command::Train {
            data,
            config,
            seed,
            out,
        } => train_cmd(&data, config.as_deref(), seed, &out),
        Command::Eval {
            task,
            policy,
            tracker,
            interval,
            episodes,
            seed,
            mode,
            drop_masks,
            max_ticks,
            traces,
        } => eval_cmd(
            &task,
            &policy,
            EpisodeConfig {
                tracker,
                prompt_interval: interval,
                max_ticks,
                mode: mode.into(),
                drop_masks,
            },
            episodes,
            seed,
            traces.as_deref(),
        ),
        Command::RunAblation {
            name,
            out,
            checkpoints,
            train_data,
            train_config,
            episodes,
            tasks,
            train_seeds,
            eval_seed,
        } => run_ablation_cmd(
            name,
            &out,
            checkpoints,
            train_data.as_deref(),
            train_config.as_deref(),
            episodes,
            tasks,
            train_seeds,
            eval_seed,
        ),
        Command::Report { input } => {
            print!("{}", AblationReport::load(&input)?.render());
            Ok(())
        }
        Command::Serve {
            task,
            policy,
            port,
            host,
            tick_rate,
            seed,
            tracker,
            trace_dir,
            paused,
            once,
        } => serve_cmd(
            &task,
            &policy,
            (&host, port),
            tick_rate,
            seed,
            tracker,
            trace_dir,
            paused,
            once,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn eval_flags_parse() {
        let cli = Cli::try_parse_from([
            "gridrocket",
            "eval",
            "--task",
            "hunt_right_sheep",
            "--policy",
            "p.safetensors",
            "--tracker",
            "none",
            "--interval",
            "3",
            "--episodes",
            "8",
            "--seed",
            "4",
        ])
        .unwrap();
        match cli.command {
            Command::Eval {
                tracker,
                interval,
                episodes,
                ..
            } => {
                assert_eq!(tracker, TrackerVariant::None);
                assert_eq!(interval, 3);
                assert_eq!(episodes, 8);
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from([
            "gridrocket",
            "run-ablation",
            "--name",
            "nope",
            "--out",
            "r"
        ])
        .is_err());
    }
}
