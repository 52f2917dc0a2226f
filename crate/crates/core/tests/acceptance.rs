//! Acceptance suite: one PASS/FAIL line per primary criterion.
//!
//! Runs as a plain binary (`harness = false`). Set `ACCEPTANCE_ONLY` to a
//! comma-separated list of criterion names to run a subset. The process fails
//! when a criterion fails, except those listed in `KNOWN_GAPS`.

use std::sync::Arc;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use gridrocket::agent_loop::{
    episode_seeds, evaluate, load_traces, replay_matches, save_traces, EpisodeConfig, EpisodeTrace,
};
use gridrocket::expert::step_toward_facing;
use gridrocket::gridworld::{
    ground_truth_mask, reset, Act, Action, EntityKind, InstanceMask, InteractionType, Observation,
    ScenarioSpec,
};
use gridrocket::harness::{
    generate_dataset, run_ablation, task, Ablation, AblationGrid, GenConfig, TaskSpec,
    TrainOnDemand, Variant, TWIN_HUNT, TWIN_HUNT_MINE,
};
use gridrocket::policy::{
    bc_loss, bc_loss_tensors, mask_tensor, obs_tensor, train, unconditioned_loss, ActMode,
    FrameToken, Fusion, Policy, PolicyConfig, TrainConfig,
};
use gridrocket::reasoner::{PromptProvider, ScriptedReasoner};
use gridrocket::relabel::{event_segments, relabel, replay_id_maps, Frames, RelabelConfig};
use gridrocket::tracker::TrackerVariant;
use gridrocket::trajectory::{chunk, rollout, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that fail in this world for structural reasons; see the README.
const KNOWN_GAPS: &[&str] = &["fusion_direction", "tracker_direction"];

const EPISODES_PER_TASK: usize = 150;
const EVAL_EPISODES: usize = 32;
const EVAL_SEED: u64 = 1000;

type Outcome = Result<(bool, String), String>;

fn train_config(fusion: Fusion, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 20,
        seed,
        ..TrainConfig::default()
    };
    cfg.policy.learning_rate = 3e-4;
    cfg.policy.fusion = fusion;
    cfg
}

fn labeled_dataset(names: &[&str], seed: u64) -> Vec<Trajectory> {
    let tasks: Vec<TaskSpec> = names.iter().map(|n| task(n).unwrap()).collect();
    generate_dataset(&tasks, EPISODES_PER_TASK, seed, &GenConfig::default())
        .unwrap()
        .iter()
        .map(|t| relabel(t, &RelabelConfig::default()).unwrap())
        .collect()
}

fn random_obs(rng: &mut ChaCha8Rng, size: usize) -> Observation {
    Observation {
        width: size,
        height: size,
        rgb: (0..size * size * 3).map(|_| rng.random()).collect(),
    }
}

fn random_mask(rng: &mut ChaCha8Rng, size: usize, density: f64) -> InstanceMask {
    InstanceMask {
        width: size,
        height: size,
        bits: (0..size * size)
            .map(|_| u8::from(rng.random_bool(density)))
            .collect(),
        object_id: Some(1),
    }
}

fn random_type(rng: &mut ChaCha8Rng) -> InteractionType {
    InteractionType::ALL[rng.random_range(1..InteractionType::COUNT)]
}

/// Overwrites every parameter so no weight is left at its (possibly zero) init.
fn scramble(policy: &Policy, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, var) in policy.vars() {
        let n = var.as_tensor().elem_count();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let t = Tensor::from_vec(v, var.as_tensor().dims(), &Device::Cpu).unwrap();
        var.set(&t.to_dtype(policy.dtype()).unwrap()).unwrap();
    }
}

fn zero_init() -> Outcome {
    let mut checked = 0;
    for seed in 0..4 {
        let policy =
            Policy::new(&PolicyConfig::default(), seed, DType::F32).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for density in [0.0, 0.05, 0.5, 1.0] {
            let obs = random_obs(&mut rng, 96);
            let mask = random_mask(&mut rng, 96, density);
            let a = policy
                .encode_frame(&obs, &mask)
                .map_err(|e| e.to_string())?;
            let b = policy.encode_rgb(&obs).map_err(|e| e.to_string())?;
            if a != b {
                return Ok((
                    false,
                    format!("seed {seed} density {density}: embeddings differ"),
                ));
            }
            checked += 1;
        }
    }
    Ok((
        true,
        format!("{checked} frames, masked and 3-channel embeddings identical"),
    ))
}

fn token(
    policy: &Policy,
    obs: &Observation,
    mask: &InstanceMask,
    c: InteractionType,
) -> FrameToken {
    let x = policy.encode_frame(obs, mask).unwrap();
    FrameToken {
        x: Tensor::from_vec(x, policy.config().hidden_dim, &Device::Cpu).unwrap(),
        c,
    }
}

fn causality() -> Outcome {
    let policy = Policy::new(&PolicyConfig::default(), 4, DType::F32).map_err(|e| e.to_string())?;
    scramble(&policy, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let frames: Vec<_> = (0..128)
        .map(|_| {
            (
                random_obs(&mut rng, 96),
                random_mask(&mut rng, 96, 0.3),
                random_type(&mut rng),
            )
        })
        .collect();
    let toks: Vec<FrameToken> = frames
        .iter()
        .map(|(o, m, c)| token(&policy, o, m, *c))
        .collect();
    let full = policy.forward(&toks).map_err(|e| e.to_string())?;

    // Perturb every token after position `cut`; logits up to `cut` must not move a bit.
    for cut in [0usize, 31, 90] {
        let mut alt = toks.clone();
        for t in alt.iter_mut().skip(cut + 1) {
            let (o, m) = (random_obs(&mut rng, 96), random_mask(&mut rng, 96, 0.3));
            *t = token(&policy, &o, &m, random_type(&mut rng));
        }
        let out = policy.forward(&alt).map_err(|e| e.to_string())?;
        for t in 0..=cut {
            for f in 0..3 {
                let same = full[t].logits[f]
                    .iter()
                    .zip(&out[t].logits[f])
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    return Ok((
                        false,
                        format!("future tokens after {cut} changed logits at {t}"),
                    ));
                }
            }
        }
    }

    let mut ctx = policy.new_context();
    let mut worst = 0f64;
    for (t, (o, m, c)) in frames.iter().enumerate() {
        let (_, got) = policy
            .act(o, m, *c, &mut ctx, ActMode::Argmax, &mut rng)
            .map_err(|e| e.to_string())?;
        for f in 0..3 {
            for (a, b) in got.logits[f].iter().zip(&full[t].logits[f]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok((
        worst <= 1e-5,
        format!("past logits bitwise stable; cache vs batch max gap {worst:.2e} over 128 steps"),
    ))
}

fn dropout_contract() -> Outcome {
    let err = |e: gridrocket::Error| e.to_string();
    // p = 1 against the unconditioned objective, bit for bit.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let actions: Vec<Action> = (0..40)
        .map(|_| {
            if rng.random_bool(0.2) {
                Action::acting(Act::Primary)
            } else {
                Action::from_indices([rng.random_range(0..5), 0, 0]).unwrap()
            }
        })
        .collect();
    let raw = rollout("drop", 1, &ScenarioSpec::named("lone_tree"), &actions).map_err(err)?;
    let traj = relabel(&raw, &RelabelConfig::default()).map_err(err)?;
    let policy = Policy::new(&PolicyConfig::default(), 2, DType::F32).map_err(err)?;
    scramble(&policy, 3);
    let c = &chunk(&traj, 128).map_err(err)?[0];
    for seed in 0..3 {
        let a = bc_loss(&policy, c, 1.0, seed)
            .map_err(err)?
            .to_scalar::<f32>()
            .map_err(|e| e.to_string())?;
        let b = unconditioned_loss(&policy, c)
            .map_err(err)?
            .to_scalar::<f32>()
            .map_err(|e| e.to_string())?;
        if a.to_bits() != b.to_bits() {
            return Ok((
                false,
                format!("p=1 loss {a} differs from unconditioned {b}"),
            ));
        }
    }

    // Finite differences on the mask input of a small f64 policy.
    let cfg = PolicyConfig {
        image_size: 16,
        patch_dim: 8,
        hidden_dim: 16,
        pool_heads: 2,
        transformer_blocks: 2,
        heads: 2,
        context_len: 16,
        ..PolicyConfig::default()
    };
    let policy = Policy::new(&cfg, 11, DType::F64).map_err(err)?;
    scramble(&policy, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let obs: Vec<Observation> = (0..4).map(|_| random_obs(&mut rng, 16)).collect();
    let obs = obs_tensor(&obs.iter().collect::<Vec<_>>(), DType::F64).map_err(err)?;
    let masks: Vec<InstanceMask> = (0..4).map(|_| random_mask(&mut rng, 16, 0.3)).collect();
    let types: Vec<InteractionType> = (0..4).map(|_| random_type(&mut rng)).collect();
    let acts: Vec<Action> = (0..4)
        .map(|_| {
            Action::from_indices([
                rng.random_range(0..5),
                rng.random_range(0..3),
                rng.random_range(0..4),
            ])
            .unwrap()
        })
        .collect();
    let keep = [true, false, true, false];
    let mask =
        Var::from_tensor(&mask_tensor(&masks.iter().collect::<Vec<_>>(), DType::F64).map_err(err)?)
            .map_err(|e| e.to_string())?;
    let loss =
        bc_loss_tensors(&policy, &obs, mask.as_tensor(), &types, &acts, &keep).map_err(err)?;
    let grads = loss.backward().map_err(|e| e.to_string())?;
    let g = grads
        .get(mask.as_tensor())
        .unwrap()
        .to_vec3::<f64>()
        .map_err(|e| e.to_string())?;
    let base = mask
        .as_tensor()
        .to_vec3::<f64>()
        .map_err(|e| e.to_string())?;
    let loss_at = |m: Vec<Vec<Vec<f64>>>| -> f64 {
        let flat: Vec<f64> = m.into_iter().flatten().flatten().collect();
        let m = Tensor::from_vec(flat, (4, 16, 16), &Device::Cpu).unwrap();
        bc_loss_tensors(&policy, &obs, &m, &types, &acts, &keep)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    };
    let eps = 1e-5;
    let mut worst_rel = 0f64;
    let mut dropped_max = 0f64;
    for t in 0..4 {
        for y in (0..16).step_by(3) {
            for x in (0..16).step_by(5) {
                let mut up = base.clone();
                up[t][y][x] += eps;
                let mut down = base.clone();
                down[t][y][x] -= eps;
                let fd = (loss_at(up) - loss_at(down)) / (2.0 * eps);
                let an = g[t][y][x];
                if keep[t] {
                    worst_rel = worst_rel.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-8));
                } else {
                    dropped_max = dropped_max.max(an.abs()).max(fd.abs());
                }
            }
        }
    }
    Ok((
        worst_rel <= 1e-4 && dropped_max == 0.0,
        format!(
            "p=1 loss equals unconditioned loss; dropped-frame mask gradient max {dropped_max:e}, \
             kept-frame finite-difference relative error {worst_rel:.2e}"
        ),
    ))
}

/// Walks to a lone object, waits, mines it and idles a little.
fn scripted_mine(seed: u64) -> Trajectory {
    let (name, kind) = if seed.is_multiple_of(2) {
        ("lone_ore", EntityKind::Ore)
    } else {
        ("lone_tree", EntityKind::Tree)
    };
    let spec = ScenarioSpec::named(name).with_distractors(0);
    let (mut state, _) = reset(seed, &spec).unwrap();
    let target = state.entities.iter().find(|e| e.kind == kind).unwrap().pos;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actions = Vec::new();
    for _ in 0..rng.random_range(0..6) {
        actions.push(Action::NOOP);
    }
    while let Some(a) = step_toward_facing(&state, target, &mut rng) {
        state.step(a).unwrap();
        actions.push(a);
    }
    actions.push(Action::acting(Act::Primary));
    actions.extend([Action::NOOP; 3]);
    rollout(&format!("scripted-{seed}"), seed, &spec, &actions).unwrap()
}

fn relabel_equivalence() -> Outcome {
    let iou_cfg = RelabelConfig {
        tracker: TrackerVariant::Iou,
        ..RelabelConfig::default()
    };
    let (mut agree, mut labeled) = (0usize, 0usize);
    let (mut good_segments, mut segments) = (0usize, 0usize);
    for seed in 0..20 {
        let traj = scripted_mine(seed);
        let err = |e: gridrocket::Error| format!("{}: {e}", traj.id);
        let oracle = relabel(&traj, &RelabelConfig::default())
            .map_err(err)?
            .labels
            .unwrap();
        let iou = relabel(&traj, &iou_cfg).map_err(err)?.labels.unwrap();
        for (a, b) in oracle.iter().zip(&iou) {
            if a.is_null() && b.is_null() {
                continue;
            }
            labeled += 1;
            if a.interaction == b.interaction && a.mask.iou(&b.mask) >= 0.9 {
                agree += 1;
            }
        }
        // Each IoU segment must end on the frame whose action completed that
        // interaction with the object it segments.
        let ids = replay_id_maps(&traj).map_err(err)?;
        let frames = Frames {
            obs: &traj.observations,
            ids: None,
        };
        for seg in event_segments(&traj, frames, &iou_cfg).map_err(err)? {
            segments += 1;
            let rewarded = traj.events.iter().any(|e| {
                e.tick as usize == seg.end + 1
                    && e.object_id == seg.object_id
                    && e.interaction == seg.interaction
            });
            let truth = ids[seg.end].mask_of(seg.object_id);
            if rewarded && seg.masks.last().is_some_and(|m| m.iou(&truth) >= 0.9) {
                good_segments += 1;
            }
        }
    }
    let frac = agree as f64 / labeled.max(1) as f64;
    Ok((
        labeled > 0 && frac >= 0.95 && segments > 0 && good_segments == segments,
        format!(
            "IoU labels match oracle on {agree}/{labeled} labeled frames ({frac:.3}); \
             {good_segments}/{segments} segments end on a rewarded interaction with their object"
        ),
    ))
}

fn scripted(t: &TaskSpec) -> Box<dyn PromptProvider> {
    Box::new(ScriptedReasoner::for_task(t))
}

/// Pooled success over `names`, keeping every trace.
fn success(
    policy: &Policy,
    names: &[&str],
    cfg: &EpisodeConfig,
    episodes: usize,
    traces: &mut Vec<EpisodeTrace>,
) -> (f64, Vec<String>) {
    let seeds = episode_seeds(EVAL_SEED, episodes);
    let (mut s, mut n) = (0, 0);
    let mut parts = Vec::new();
    for name in names {
        let t = task(name).unwrap();
        let r = evaluate(&t, policy, cfg, &seeds, scripted, |r| {
            traces.push(r.trace.clone())
        })
        .unwrap();
        s += r.successes;
        n += r.episodes;
        parts.push(format!("{name} {:.2}", r.rate));
    }
    (s as f64 / n as f64, parts)
}

fn efficacy(policy: &Policy, traces: &mut Vec<EpisodeTrace>) -> Outcome {
    let oracle = EpisodeConfig::default();
    let dropped = EpisodeConfig {
        drop_masks: true,
        ..EpisodeConfig::default()
    };
    let (with, with_parts) = success(policy, &TWIN_HUNT_MINE, &oracle, EVAL_EPISODES, traces);
    let (without, without_parts) =
        success(policy, &TWIN_HUNT_MINE, &dropped, EVAL_EPISODES, traces);
    Ok((
        with >= 0.9 && without <= 0.6,
        format!(
            "oracle prompts {with:.3} [{}]; masks dropped {without:.3} [{}]; {EVAL_EPISODES} episodes per task",
            with_parts.join(", "),
            without_parts.join(", ")
        ),
    ))
}

fn fusion_direction() -> Outcome {
    let data = labeled_dataset(&TWIN_HUNT, 2);
    let grid = AblationGrid {
        episodes: EVAL_EPISODES,
        eval_seed: EVAL_SEED,
        ..AblationGrid::for_ablation(Ablation::Fusion)
    };
    let mut source = TrainOnDemand::new(&data, train_config(Fusion::TransformerLayer, 0), None);
    let report = run_ablation(Ablation::Fusion, &grid, &mut source).map_err(|e| e.to_string())?;
    let v = &report.verdicts[0];
    Ok((v.pass == Some(true), v.detail.clone()))
}

fn tracker_direction(policy: Arc<Policy>) -> Outcome {
    let grid = AblationGrid {
        episodes: EVAL_EPISODES,
        eval_seed: EVAL_SEED,
        ..AblationGrid::for_ablation(Ablation::PromptInterval)
    };
    let mut source =
        |_: &Variant| -> gridrocket::Result<Option<Arc<Policy>>> { Ok(Some(policy.clone())) };
    let report =
        run_ablation(Ablation::PromptInterval, &grid, &mut source).map_err(|e| e.to_string())?;
    let v = &report.verdicts[0];
    Ok((v.pass == Some(true), v.detail.clone()))
}

fn obsidian(traces: &mut Vec<EpisodeTrace>) -> Outcome {
    let data = labeled_dataset(&["make_obsidian"], 3);
    let policy = train(&data, &train_config(Fusion::TransformerLayer, 0), |_| {})
        .map_err(|e| e.to_string())?
        .policy;
    let (rate, _) = success(
        &policy,
        &["make_obsidian"],
        &EpisodeConfig::default(),
        20,
        traces,
    );
    Ok((
        rate >= 0.5,
        format!("make_obsidian success {rate:.2} over 20 episodes"),
    ))
}

fn replay_determinism(traces: &[EpisodeTrace]) -> Outcome {
    if traces.is_empty() {
        return Ok((false, "no traces were recorded".into()));
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("traces.jsonl");
    save_traces(&path, traces).map_err(|e| e.to_string())?;
    let loaded = load_traces(&path).map_err(|e| e.to_string())?;
    let mut ok = 0;
    for t in &loaded {
        if replay_matches(t).map_err(|e| e.to_string())? {
            ok += 1;
        }
    }
    // Events also have to be about objects the ground truth can find.
    let events: usize = loaded
        .iter()
        .flat_map(|t| &t.ticks)
        .map(|r| r.events.len())
        .sum();
    let sound = loaded.iter().all(|t| {
        let (mut state, _) = reset(t.seed, &t.scenario).unwrap();
        t.ticks.iter().all(|r| {
            let visible = r
                .events
                .iter()
                .all(|e| !ground_truth_mask(&state, e.object_id).unwrap().is_empty());
            state.step(r.action).unwrap();
            visible
        })
    });
    Ok((
        ok == loaded.len() && loaded.len() == traces.len() && sound,
        format!(
            "{ok}/{} saved traces replay to identical event sequences ({events} events)",
            loaded.len()
        ),
    ))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let wanted = |name: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == name));

    let mut traces = Vec::new();
    let mut twin_policy: Option<Arc<Policy>> = None;
    let mut twin = || -> Arc<Policy> {
        twin_policy
            .get_or_insert_with(|| {
                let data = labeled_dataset(&TWIN_HUNT_MINE, 1);
                let out = train(&data, &train_config(Fusion::TransformerLayer, 0), |_| {}).unwrap();
                Arc::new(out.policy)
            })
            .clone()
    };

    let mut failures = Vec::new();
    let mut report = |name: &str, start: Instant, outcome: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        let known = KNOWN_GAPS.contains(&name);
        let tag = match (pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known gap)",
            (false, false) => "FAIL",
        };
        println!("{tag} {name}: {detail} [{secs:.1}s]");
        if !pass && !known {
            failures.push(name.to_string());
        }
    };

    if wanted("zero_init_equivalence") {
        let t = Instant::now();
        report("zero_init_equivalence", t, zero_init());
    }
    if wanted("causality") {
        let t = Instant::now();
        report("causality", t, causality());
    }
    if wanted("dropout_contract") {
        let t = Instant::now();
        report("dropout_contract", t, dropout_contract());
    }
    if wanted("relabel_oracle_equivalence") {
        let t = Instant::now();
        report("relabel_oracle_equivalence", t, relabel_equivalence());
    }
    if wanted("conditioning_efficacy") {
        let t = Instant::now();
        let policy = twin();
        report("conditioning_efficacy", t, efficacy(&policy, &mut traces));
    }
    if wanted("fusion_direction") {
        let t = Instant::now();
        report("fusion_direction", t, fusion_direction());
    }
    if wanted("tracker_direction") {
        let t = Instant::now();
        report("tracker_direction", t, tracker_direction(twin()));
    }
    if wanted("obsidian_composite") {
        let t = Instant::now();
        report("obsidian_composite", t, obsidian(&mut traces));
    }
    if wanted("replay_determinism") {
        let t = Instant::now();
        if traces.is_empty() {
            // Run on its own: record a few episodes to check.
            let policy = twin();
            success(
                &policy,
                &TWIN_HUNT_MINE,
                &EpisodeConfig::default(),
                4,
                &mut traces,
            );
        }
        report("replay_determinism", t, replay_determinism(&traces));
    }

    if !failures.is_empty() {
        println!("failed: {}", failures.join(", "));
        std::process::exit(1);
    }
}
