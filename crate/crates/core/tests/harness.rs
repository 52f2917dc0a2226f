use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::DType;

use gridrocket::gridworld::{ground_truth_mask, render, reset, InteractionType};
use gridrocket::harness::{
    audit, expert_episode, generate_dataset, run_ablation, task, task_names, tasks, training_tasks,
    verdicts, Ablation, AblationGrid, AblationReport, Category, CellResult, CheckpointDir,
    GenConfig, Variant,
};
use gridrocket::policy::{Fusion, Policy, PolicyConfig};
use gridrocket::reasoner::{
    plan, Outcome, Progress, PromptProvider, PromptSource, ScriptedReasoner,
};
use gridrocket::tracker::TrackerVariant;
use gridrocket::Error;
use tempfile::tempdir;

#[test]
fn suite_has_two_tasks_per_category_and_a_composite() {
    let mut per: BTreeMap<&str, usize> = BTreeMap::new();
    for t in tasks() {
        *per.entry(t.category.name()).or_default() += 1;
    }
    for c in ["hunt", "mine", "interact", "navigate", "tool", "place"] {
        assert_eq!(per[c], 2, "{c}");
    }
    assert_eq!(per["composite"], 1);
    assert_eq!(task_names().len(), 13);
    assert!(matches!(task("fly_to_the_moon"), Err(Error::Config(_))));
}

#[test]
fn held_out_tasks_are_not_trained_on() {
    let training: Vec<_> = training_tasks().into_iter().map(|t| t.name).collect();
    for t in tasks() {
        assert_eq!(training.contains(&t.name), !t.held_out, "{}", t.name);
    }
    assert!(tasks().iter().any(|t| t.held_out));
}

#[test]
fn obsidian_plan_has_three_steps_in_order() {
    let t = task("make_obsidian").unwrap();
    assert_eq!(t.category, Category::Composite);
    let (state, _) = reset(1, &t.scenario).unwrap();
    let steps = plan("make_obsidian", &state).unwrap();
    let kinds: Vec<_> = steps
        .iter()
        .map(|s| (s.interaction, s.target.kind.name()))
        .collect();
    assert_eq!(
        kinds,
        [
            (InteractionType::Use, "water"),
            (InteractionType::Use, "lava"),
            (InteractionType::Mine, "obsidian"),
        ]
    );
    assert_eq!(plan("make_obsidian", &state).unwrap(), steps);
}

#[test]
fn experts_solve_every_task() {
    let all = tasks();
    let trajs = generate_dataset(&all, 20, 3, &GenConfig::default()).unwrap();
    let report = audit(&trajs, &all).unwrap();
    for (name, a) in &report.per_task {
        assert_eq!(a.episodes, 20);
        assert!(
            a.successes as f64 / a.episodes as f64 >= 0.95,
            "{name}: {}/{}",
            a.successes,
            a.episodes
        );
    }
    assert!(
        report.hunt_mine_twin_fraction >= 0.5,
        "{}",
        report.hunt_mine_twin_fraction
    );
}

#[test]
fn dataset_generation_is_reproducible() {
    let ts = training_tasks();
    let a = generate_dataset(&ts[..4], 3, 9, &GenConfig::default()).unwrap();
    let b = generate_dataset(&ts[..4], 3, 9, &GenConfig::default()).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&ts[..4], 3, 10, &GenConfig::default()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn hunting_the_other_sheep_is_a_wrong_target() {
    let left = task("hunt_left_sheep").unwrap();
    let right = task("hunt_right_sheep").unwrap();
    let traj = expert_episode(&left, "left", 4, &GenConfig::default()).unwrap();
    assert!(traj.success);

    let (mut state, _) = reset(traj.seed, &left.scenario).unwrap();
    let mut progress = Progress::for_task(&right);
    let mut outcome = None;
    for &a in &traj.actions {
        let events = state.step(a).unwrap();
        if let Some(o) = progress.update(&state, &events) {
            outcome = Some(o.clone());
            break;
        }
    }
    let hunt = traj
        .events
        .iter()
        .find(|e| e.interaction == InteractionType::Hunt)
        .unwrap();
    assert_eq!(
        outcome,
        Some(Outcome::WrongTarget {
            tick: hunt.tick,
            object_id: hunt.object_id
        })
    );
}

#[test]
fn scripted_prompts_land_on_the_target() {
    for t in tasks() {
        for seed in 0..4 {
            let (state, obs) = reset(seed, &t.scenario).unwrap();
            let mut reasoner = ScriptedReasoner::for_task(&t);
            let Some(p) = reasoner.next_prompt(&state, &obs, 0) else {
                continue;
            };
            assert_eq!(p.source, PromptSource::Scripted);
            assert_eq!(p.frame_index, 0);
            let (x, y) = p.point.unwrap();
            let step = &t.steps[0];
            let visible = step
                .target
                .resolve(&state)
                .into_iter()
                .find(|e| ground_truth_mask(&state, e.id).unwrap().get(x, y));
            match visible {
                Some(_) => assert_eq!(p.interaction, step.interaction, "{}", t.name),
                None => {
                    // Target out of view: the prompt points at its landmark instead.
                    let landmark = step
                        .landmark
                        .as_ref()
                        .expect("prompt off target without a landmark");
                    assert_eq!(p.interaction, InteractionType::Navigate);
                    assert!(landmark.resolve(&state).iter().any(|e| ground_truth_mask(
                        &state, e.id
                    )
                    .unwrap()
                    .get(x, y)));
                }
            }
            assert_eq!(render(&state), obs);
        }
    }
}

fn tiny_policy(seed: u64) -> Arc<Policy> {
    let cfg = PolicyConfig {
        patch_dim: 8,
        hidden_dim: 16,
        pool_heads: 2,
        transformer_blocks: 1,
        heads: 2,
        context_len: 16,
        ..PolicyConfig::default()
    };
    Arc::new(Policy::new(&cfg, seed, DType::F32).unwrap())
}

fn cell(
    fusion: Fusion,
    seed: u64,
    tracker: TrackerVariant,
    interval: u64,
    successes: usize,
) -> CellResult {
    CellResult {
        variant: Variant {
            fusion,
            dropout_p: 0.75,
            train_seed: seed,
        },
        tracker,
        interval,
        task: "hunt_right_sheep".into(),
        episodes: 10,
        eval_seed: 0,
        successes: Some(successes),
        rate: Some(successes as f64 / 10.0),
        ci95: None,
        gap: None,
    }
}

fn report_of(ablation: Ablation, cells: Vec<CellResult>) -> AblationReport {
    let mut r = AblationReport {
        ablation,
        grid: AblationGrid::for_ablation(ablation),
        cells,
        verdicts: vec![],
    };
    r.verdicts = verdicts(&r);
    r
}

#[test]
fn fusion_verdict_needs_strict_wins_on_most_seeds() {
    use TrackerVariant::Oracle;
    let tl = Fusion::TransformerLayer;
    let vb = Fusion::VisualBackbone;
    let two_of_three = vec![
        cell(tl, 0, Oracle, 30, 9),
        cell(vb, 0, Oracle, 30, 7),
        cell(tl, 1, Oracle, 30, 8),
        cell(vb, 1, Oracle, 30, 8),
        cell(tl, 2, Oracle, 30, 6),
        cell(vb, 2, Oracle, 30, 5),
    ];
    assert_eq!(
        report_of(Ablation::Fusion, two_of_three.clone()).verdicts[0].pass,
        Some(true)
    );

    let mut one_of_three = two_of_three.clone();
    one_of_three[4] = cell(tl, 2, Oracle, 30, 5);
    assert_eq!(
        report_of(Ablation::Fusion, one_of_three).verdicts[0].pass,
        Some(false)
    );

    let mut gap = two_of_three;
    gap[5].successes = None;
    gap[5].gap = Some("no policy".into());
    assert_eq!(report_of(Ablation::Fusion, gap).verdicts[0].pass, None);
}

#[test]
fn tracker_verdict_checks_collapse_and_match() {
    use TrackerVariant::{None as NoTracker, Oracle};
    let tl = Fusion::TransformerLayer;
    let ok = vec![
        cell(tl, 0, NoTracker, 30, 1),
        cell(tl, 0, Oracle, 30, 9),
        cell(tl, 0, NoTracker, 3, 9),
        cell(tl, 0, Oracle, 3, 10),
    ];
    assert_eq!(
        report_of(Ablation::PromptInterval, ok.clone()).verdicts[0].pass,
        Some(true)
    );

    let mut no_collapse = ok.clone();
    no_collapse[0] = cell(tl, 0, NoTracker, 30, 2);
    assert_eq!(
        report_of(Ablation::PromptInterval, no_collapse).verdicts[0].pass,
        Some(false)
    );

    let mut drift = ok.clone();
    drift[1] = cell(tl, 0, Oracle, 30, 7);
    assert_eq!(
        report_of(Ablation::PromptInterval, drift).verdicts[0].pass,
        Some(false)
    );

    // The tracker grid has no dense-prompt cell, so its verdict stays open.
    let sparse_only = report_of(Ablation::Tracker, ok[..2].to_vec());
    assert_eq!(sparse_only.verdicts[0].pass, None);
    assert!(sparse_only.verdicts[0].detail.contains("none@3"));
    assert!(report_of(Ablation::DropoutP, ok).verdicts.is_empty());
}

#[test]
fn ablation_reports_gaps_and_round_trips() {
    let grid = AblationGrid {
        fusions: Fusion::ALL.to_vec(),
        train_seeds: vec![0],
        trackers: vec![TrackerVariant::Oracle, TrackerVariant::None],
        intervals: vec![30],
        tasks: vec!["hunt_right_sheep".into()],
        episodes: 2,
        ..AblationGrid::for_ablation(Ablation::Fusion)
    };
    let mut source = |v: &Variant| -> gridrocket::Result<Option<Arc<Policy>>> {
        Ok((v.fusion == Fusion::TransformerLayer).then(|| tiny_policy(v.train_seed)))
    };
    let report = run_ablation(Ablation::Fusion, &grid, &mut source).unwrap();
    assert_eq!(report.cells.len(), 4);
    for c in &report.cells {
        let missing = c.variant.fusion == Fusion::VisualBackbone;
        assert_eq!(c.gap.is_some(), missing);
        assert_eq!(c.successes.is_none(), missing);
    }
    assert_eq!(report.verdicts.len(), 1);
    assert_eq!(report.verdicts[0].pass, None);
    let table = report.render();
    assert!(table.contains("gap"), "{table}");
    assert!(table.contains("INCOMPLETE"), "{table}");

    let dir = tempdir().unwrap();
    let path = dir.path().join("fusion.jsonl");
    report.save(&path).unwrap();
    assert_eq!(AblationReport::load(&path).unwrap(), report);
}

#[test]
fn missing_checkpoints_become_gaps() {
    let dir = tempdir().unwrap();
    let grid = AblationGrid {
        tasks: vec!["mine_north_ore".into()],
        episodes: 1,
        ..AblationGrid::for_ablation(Ablation::DropoutP)
    };
    let mut source = CheckpointDir {
        dir: dir.path().to_path_buf(),
    };
    let report = run_ablation(Ablation::DropoutP, &grid, &mut source).unwrap();
    assert_eq!(report.cells.len(), 3);
    assert!(report.cells.iter().all(|c| c.gap.is_some()));
    assert!(matches!("bogus".parse::<Ablation>(), Err(Error::Config(_))));
    assert_eq!(
        "prompt_interval".parse::<Ablation>().unwrap(),
        Ablation::PromptInterval
    );
}
