use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gridrocket::gridworld::{reset, Action, InstanceMask, InteractionType};
use gridrocket::harness::{expert_episode, task, GenConfig};
use gridrocket::policy::{ActMode, DType, Policy, PolicyConfig};
use gridrocket::relabel::{relabel, RelabelConfig};
use gridrocket::tracker::{estimate_shift, TrackerVariant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gridworld(c: &mut Criterion) {
    let t = task("hunt_right_sheep").unwrap();
    let (state, _) = reset(0, &t.scenario).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("gridworld_step_and_render", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| {
                let a = Action::from_indices([rng.random_range(0..5), rng.random_range(0..3), 0])
                    .unwrap();
                s.step(a).unwrap();
                black_box(gridrocket::gridworld::render(&s))
            },
            BatchSize::SmallInput,
        )
    });
}

fn policy(c: &mut Criterion) {
    let cfg = PolicyConfig::default();
    let policy = Policy::new(&cfg, 0, DType::F32).unwrap();
    let t = task("mine_north_ore").unwrap();
    let (state, obs) = reset(0, &t.scenario).unwrap();
    let target = state.entities[0].id;
    let mask = gridrocket::gridworld::ground_truth_mask(&state, target).unwrap();
    c.bench_function("encode_frame", |b| {
        b.iter(|| black_box(policy.encode_frame(&obs, &mask).unwrap()))
    });

    // A full context, so each step pays for eviction at the window edge.
    let mut ctx = policy.new_context();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..cfg.context_len {
        policy
            .act(
                &obs,
                &mask,
                InteractionType::Mine,
                &mut ctx,
                ActMode::Sample,
                &mut rng,
            )
            .unwrap();
    }
    let empty = InstanceMask::empty(obs.width, obs.height);
    c.bench_function("act_step_full_context", |b| {
        b.iter(|| {
            black_box(
                policy
                    .act(
                        &obs,
                        &empty,
                        InteractionType::Null,
                        &mut ctx,
                        ActMode::Argmax,
                        &mut rng,
                    )
                    .unwrap(),
            )
        })
    });
}

fn relabeling(c: &mut Criterion) {
    let t = task("hunt_left_sheep").unwrap();
    let traj = expert_episode(&t, "bench", 3, &GenConfig::default()).unwrap();
    for tracker in [TrackerVariant::Oracle, TrackerVariant::Iou] {
        let cfg = RelabelConfig {
            tracker,
            ..RelabelConfig::default()
        };
        c.bench_function(&format!("relabel_episode_{tracker}"), |b| {
            b.iter(|| black_box(relabel(&traj, &cfg).unwrap()))
        });
    }
    let (a, b) = (&traj.observations[0], &traj.observations[1]);
    c.bench_function("estimate_shift", |bench| {
        bench.iter(|| black_box(estimate_shift(a, b)))
    });
}

criterion_group!(benches, gridworld, policy, relabeling);
criterion_main!(benches);
