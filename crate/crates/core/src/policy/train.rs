use std::time::Instant;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{mask_tensor, obs_tensor, Policy};
use super::PolicyConfig;
use crate::error::{usage, Result};
use crate::gridworld::{Action, InstanceMask, InteractionType};
use crate::trajectory::{chunk, Chunk, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub policy: PolicyConfig,
    pub epochs: usize,
    /// Upper bound on frames per optimiser step (whole chunks are never split).
    pub batch_frames: usize,
    /// Fraction of trajectories held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            policy: PolicyConfig::default(),
            epochs: 30,
            batch_frames: 64,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-frame negative log-likelihood under segmentation dropout.
    pub train_loss: f64,
    /// Mean per-frame negative log-likelihood on held-out trajectories, masks kept.
    pub val_loss: Option<f64>,
    /// Fraction of held-out frames whose argmax action matches on every factor.
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub policy: Policy,
    pub metrics: Vec<EpochMetrics>,
    pub val_ids: Vec<String>,
}

/// Per-frame keep flags `w_t ~ Bernoulli(1 - p)`, reproducible from `seed`.
pub fn dropout_weights(t: usize, p: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(usage(format!("dropout probability {p} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..t).map(|_| rng.random::<f64>() >= p).collect())
}

fn targets(actions: &[&Action]) -> Result<[Tensor; 3]> {
    let col = |f: usize| -> Result<Tensor> {
        let v: Vec<u32> = actions.iter().map(|a| a.indices()[f] as u32).collect();
        Ok(Tensor::from_vec(v, actions.len(), &Device::Cpu)?)
    };
    Ok([col(0)?, col(1)?, col(2)?])
}

/// Summed negative log-likelihood of `targets` under per-factor logits `[n, k_f]`.
fn nll_sum(logits: &[Tensor; 3], targets: &[Tensor; 3]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (l, t) in logits.iter().zip(targets) {
        let logp = candle_nn::ops::log_softmax(l, D::Minus1)?;
        let picked = logp.gather(&t.unsqueeze(1)?, 1)?.sum_all()?.neg()?;
        total = Some(match total {
            None => picked,
            Some(acc) => (acc + picked)?,
        });
    }
    Ok(total.expect("three factors"))
}

/// Segmentation-dropout behaviour-cloning loss of one sequence, summed over
/// frames and action factors. Frames with `keep[t] == false` see a zero mask
/// and the null type; the mask input is multiplied by the keep flag, so no
/// gradient reaches a dropped frame's mask.
pub fn bc_loss_tensors(
    policy: &Policy,
    obs: &Tensor,
    mask: &Tensor,
    types: &[InteractionType],
    actions: &[Action],
    keep: &[bool],
) -> Result<Tensor> {
    let t = types.len();
    if actions.len() != t || keep.len() != t || obs.dim(0)? != t || mask.dim(0)? != t {
        return Err(usage("bc_loss inputs disagree on sequence length"));
    }
    if t == 0 {
        return Err(usage("bc_loss needs at least one frame"));
    }
    let w: Vec<f64> = keep.iter().map(|k| f64::from(u8::from(*k))).collect();
    let w = Tensor::from_vec(w, (t, 1, 1), &Device::Cpu)?.to_dtype(policy.dtype)?;
    let mask = mask.broadcast_mul(&w)?;
    let types: Vec<InteractionType> = types
        .iter()
        .zip(keep)
        .map(|(c, k)| if *k { *c } else { InteractionType::Null })
        .collect();
    let tokens = policy.frame_tokens(obs, &mask, &types)?.unsqueeze(0)?;
    let (hidden, _) = policy.transformer(&tokens, None)?;
    let logits = policy.head_logits(&hidden.squeeze(0)?)?;
    let acts: Vec<&Action> = actions.iter().collect();
    nll_sum(&logits, &targets(&acts)?)
}

fn chunk_tensors(policy: &Policy, c: &Chunk<'_>) -> Result<(Tensor, Tensor, Vec<InteractionType>)> {
    let obs: Vec<_> = c.observations().iter().collect();
    let masks: Vec<&InstanceMask> = c.labels().iter().map(|l| &l.mask).collect();
    let types = c.labels().iter().map(|l| l.interaction).collect();
    Ok((
        obs_tensor(&obs, policy.dtype)?,
        mask_tensor(&masks, policy.dtype)?,
        types,
    ))
}

/// Segmentation-dropout loss on one labeled chunk, with per-frame keep
/// flags drawn with probability `1 - p` from `seed`.
pub fn bc_loss(policy: &Policy, c: &Chunk<'_>, p: f64, seed: u64) -> Result<Tensor> {
    let keep = dropout_weights(c.len, p, seed)?;
    let (obs, mask, types) = chunk_tensors(policy, c)?;
    bc_loss_tensors(policy, &obs, &mask, &types, c.actions(), &keep)
}

/// Behaviour-cloning loss with every mask zeroed and every type null.
pub fn unconditioned_loss(policy: &Policy, c: &Chunk<'_>) -> Result<Tensor> {
    let obs: Vec<_> = c.observations().iter().collect();
    let obs = obs_tensor(&obs, policy.dtype)?;
    let s = policy.cfg.image_size;
    let mask = Tensor::zeros((c.len, s, s), policy.dtype, &Device::Cpu)?;
    let types = vec![InteractionType::Null; c.len];
    let tokens = policy.frame_tokens(&obs, &mask, &types)?.unsqueeze(0)?;
    let (hidden, _) = policy.transformer(&tokens, None)?;
    let logits = policy.head_logits(&hidden.squeeze(0)?)?;
    let acts: Vec<&Action> = c.actions().iter().collect();
    nll_sum(&logits, &targets(&acts)?)
}

/// Right-padded batch of chunks. Returns summed NLL, per-factor logits of the
/// real frames and the number of real frames.
fn batch_forward(
    policy: &Policy,
    chunks: &[&Chunk<'_>],
    keeps: &[Vec<bool>],
) -> Result<(Tensor, [Tensor; 3], usize)> {
    let s = policy.cfg.image_size;
    let mut obs = Vec::new();
    let mut masks = Vec::new();
    let mut types = Vec::new();
    let mut acts = Vec::new();
    let empty = InstanceMask::empty(s, s);
    for (c, keep) in chunks.iter().zip(keeps) {
        for (i, l) in c.labels().iter().enumerate() {
            obs.push(&c.observations()[i]);
            acts.push(&c.actions()[i]);
            if keep[i] {
                masks.push(&l.mask);
                types.push(l.interaction);
            } else {
                masks.push(&empty);
                types.push(InteractionType::Null);
            }
        }
    }
    let n = obs.len();
    let tokens = policy.frame_tokens(
        &obs_tensor(&obs, policy.dtype)?,
        &mask_tensor(&masks, policy.dtype)?,
        &types,
    )?;
    let d = policy.cfg.hidden_dim;
    let tmax = chunks.iter().map(|c| c.len).max().unwrap_or(0);
    let b = chunks.len();
    // Row `n` of the extended token table is the zero padding token.
    let table = Tensor::cat(
        &[&tokens, &Tensor::zeros((1, d), policy.dtype, &Device::Cpu)?],
        0,
    )?;
    let mut gather = Vec::with_capacity(b * tmax);
    let mut real = Vec::with_capacity(n);
    let mut offset = 0u32;
    for (bi, c) in chunks.iter().enumerate() {
        for t in 0..tmax {
            if t < c.len {
                gather.push(offset + t as u32);
                real.push((bi * tmax + t) as u32);
            } else {
                gather.push(n as u32);
            }
        }
        offset += c.len as u32;
    }
    let gather = Tensor::from_vec(gather, b * tmax, &Device::Cpu)?;
    let real = Tensor::from_vec(real, n, &Device::Cpu)?;
    let x = table.index_select(&gather, 0)?.reshape((b, tmax, d))?;
    let (hidden, _) = policy.transformer(&x, None)?;
    let hidden = hidden.reshape((b * tmax, d))?.index_select(&real, 0)?;
    let logits = policy.head_logits(&hidden)?;
    let loss = nll_sum(&logits, &targets(&acts)?)?;
    Ok((loss, logits, n))
}

fn batches<'a>(chunks: &'a [Chunk<'a>], order: &[usize], budget: usize) -> Vec<Vec<&'a Chunk<'a>>> {
    let mut out: Vec<Vec<&Chunk>> = Vec::new();
    let mut frames = 0;
    for &i in order {
        let c = &chunks[i];
        if out.is_empty() || frames + c.len > budget {
            out.push(Vec::new());
            frames = 0;
        }
        out.last_mut().expect("just pushed").push(c);
        frames += c.len;
    }
    out
}

/// Mean per-frame NLL and all-factor argmax accuracy with every label kept.
pub fn evaluate_split(
    policy: &Policy,
    trajs: &[&Trajectory],
    batch_frames: usize,
) -> Result<(f64, f64)> {
    let chunks: Vec<Chunk> = trajs
        .iter()
        .map(|t| chunk(t, policy.cfg.context_len))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let order: Vec<usize> = (0..chunks.len()).collect();
    let (mut loss, mut correct, mut total) = (0.0, 0usize, 0usize);
    for batch in batches(&chunks, &order, batch_frames) {
        let keeps: Vec<Vec<bool>> = batch.iter().map(|c| vec![true; c.len]).collect();
        let (l, logits, n) = batch_forward(policy, &batch, &keeps)?;
        loss += l.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let preds: Vec<Vec<u32>> = logits
            .iter()
            .map(|l| l.argmax(D::Minus1)?.to_vec1::<u32>())
            .collect::<std::result::Result<_, _>>()?;
        let acts = batch.iter().flat_map(|c| c.actions());
        for (i, a) in acts.enumerate() {
            let idx = a.indices();
            if (0..3).all(|f| preds[f][i] as usize == idx[f]) {
                correct += 1;
            }
        }
        total += n;
    }
    if total == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((loss / total as f64, correct as f64 / total as f64))
}

/// Trains a fresh policy on labeled trajectories with segmentation dropout.
pub fn train(
    data: &[Trajectory],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    if data.iter().all(|t| t.is_empty()) {
        return Err(usage("training needs at least one non-empty trajectory"));
    }
    if let Some(t) = data.iter().find(|t| !t.is_labeled()) {
        return Err(usage(format!("trajectory {} is not labeled", t.id)));
    }
    cfg.policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let policy = Policy::new(&cfg.policy, rng.next_u64(), DType::F32)?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if data.len() >= 2 && cfg.val_fraction > 0.0 {
        ((data.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, data.len() - 1)
    } else {
        0
    };
    let val: Vec<&Trajectory> = order[..n_val].iter().map(|i| &data[*i]).collect();
    let train_set: Vec<&Trajectory> = order[n_val..].iter().map(|i| &data[*i]).collect();
    let chunks: Vec<Chunk> = train_set
        .iter()
        .map(|t| chunk(t, cfg.policy.context_len))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let params = ParamsAdamW {
        lr: cfg.policy.learning_rate,
        weight_decay: cfg.policy.weight_decay,
        ..ParamsAdamW::default()
    };
    let vars = policy.vars().into_iter().map(|(_, v)| v).collect();
    let mut opt = AdamW::new(vars, params)?;
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut idx: Vec<usize> = (0..chunks.len()).collect();
        idx.shuffle(&mut rng);
        let (mut sum, mut frames) = (0.0, 0usize);
        for batch in batches(&chunks, &idx, cfg.batch_frames) {
            let keeps = batch
                .iter()
                .map(|c| dropout_weights(c.len, cfg.policy.dropout_p, rng.next_u64()))
                .collect::<Result<Vec<_>>>()?;
            let (loss, _, n) = batch_forward(&policy, &batch, &keeps)?;
            sum += loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            frames += n;
            opt.backward_step(&(loss / n as f64)?)?;
        }
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_split(&policy, &val, cfg.batch_frames)?;
            (Some(l), Some(a))
        };
        let m = EpochMetrics {
            epoch,
            train_loss: sum / frames.max(1) as f64,
            val_loss,
            val_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: train {:.4} val {:?} acc {:?} ({:.1}s)",
            m.train_loss, m.val_loss, m.val_accuracy, m.seconds
        );
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome {
        policy,
        metrics,
        val_ids: val.iter().map(|t| t.id.clone()).collect(),
    })
}
