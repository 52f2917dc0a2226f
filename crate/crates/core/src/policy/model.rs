use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{Linear, Module, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Fusion, PolicyConfig};
use crate::error::{usage, Result};
use crate::gridworld::{Act, Action, InstanceMask, InteractionType, Move, Observation, Turn};

/// Number of choices per action factor: move, turn, act.
pub(crate) const FACTORS: [usize; 3] = [Move::ALL.len(), Turn::ALL.len(), Act::ALL.len()];

enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

/// Creates named parameters from a seeded stream, so identical seeds give
/// identical weights.
struct Params<'a> {
    varmap: &'a VarMap,
    rng: ChaCha8Rng,
    dtype: DType,
}

impl Params<'_> {
    fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.varmap
            .data()
            .lock()
            .expect("varmap lock")
            .insert(name.to_string(), var);
        Ok(out)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.tensor(
            &format!("{name}.weight"),
            &[fan_out, fan_in],
            Init::Uniform(bound),
        )?;
        let b = if bias {
            Some(self.tensor(&format!("{name}.bias"), &[fan_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear::new(w, b))
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<Norm> {
        Ok(Norm {
            weight: self.tensor(&format!("{name}.weight"), &[dim], Init::Ones)?,
            bias: self.tensor(&format!("{name}.bias"), &[dim], Init::Zeros)?,
        })
    }
}

/// Layer norm built from differentiable primitives.
struct Norm {
    weight: Tensor,
    bias: Tensor,
}

impl Norm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

struct Backbone {
    rgb_proj: Linear,
    /// Weights of the fourth input channel; zero at initialisation.
    mask_proj: Linear,
    mix: Linear,
    pos: Tensor,
    key: Linear,
    value: Linear,
    query: Tensor,
    out: Linear,
}

struct Block {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

/// Per-layer attention keys and values, `[1, heads, t, head_dim]`.
pub(crate) type KvCache = Vec<(Tensor, Tensor)>;

/// Per-factor action logits for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub logits: [Vec<f64>; 3],
}

impl ActionDistribution {
    pub fn probs(&self, factor: usize) -> Vec<f64> {
        let l = &self.logits[factor];
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    pub fn argmax(&self) -> Action {
        let pick = |l: &[f64]| {
            l.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
                    if *v > best.1 {
                        (i, *v)
                    } else {
                        best
                    }
                })
                .0
        };
        Action::from_indices([
            pick(&self.logits[0]),
            pick(&self.logits[1]),
            pick(&self.logits[2]),
        ])
        .expect("factor sizes match the action space")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        let mut idx = [0; 3];
        for (f, slot) in idx.iter_mut().enumerate() {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let p = self.probs(f);
            *slot = p.len() - 1;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    *slot = i;
                    break;
                }
            }
        }
        Action::from_indices(idx).expect("factor sizes match the action space")
    }

    /// Negative log-likelihood of `action`, summed over factors.
    pub fn nll(&self, action: &Action) -> f64 {
        action
            .indices()
            .iter()
            .enumerate()
            .map(|(f, i)| {
                let l = &self.logits[f];
                let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = l.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                lse - l[*i]
            })
            .sum()
    }
}

/// Fused per-frame token: pooled visual embedding plus the interaction type.
#[derive(Clone, Debug)]
pub struct FrameToken {
    /// `[hidden_dim]`, before the type embedding is added.
    pub x: Tensor,
    pub c: InteractionType,
}

pub struct Policy {
    pub(crate) cfg: PolicyConfig,
    pub(crate) varmap: VarMap,
    pub(crate) dtype: DType,
    backbone: Backbone,
    type_emb: Option<Tensor>,
    blocks: Vec<Block>,
    ln_f: Norm,
    heads: [Linear; 3],
    slopes: Vec<f64>,
}

impl std::fmt::Debug for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Policy")
            .field("cfg", &self.cfg)
            .field("dtype", &self.dtype)
            .finish()
    }
}

/// `[n, s, s, 3]` tensor of RGB values scaled to `[0, 1]`.
pub fn obs_tensor(obs: &[&Observation], dtype: DType) -> Result<Tensor> {
    let (w, h) = obs.first().map(|o| (o.width, o.height)).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(obs.len() * w * h * 3);
    for o in obs {
        if o.width != w || o.height != h {
            return Err(usage("observations of mixed sizes"));
        }
        data.extend(o.rgb.iter().map(|v| *v as f32 / 255.0));
    }
    Ok(Tensor::from_vec(data, (obs.len(), h, w, 3), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `[n, s, s]` binary mask tensor.
pub fn mask_tensor(masks: &[&InstanceMask], dtype: DType) -> Result<Tensor> {
    let (w, h) = masks.first().map(|m| (m.width, m.height)).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        if m.width != w || m.height != h {
            return Err(usage("masks of mixed sizes"));
        }
        data.extend(m.bits.iter().map(|b| f32::from(*b != 0)));
    }
    Ok(Tensor::from_vec(data, (masks.len(), h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

impl Policy {
    /// Fresh weights drawn from `seed`.
    pub fn new(cfg: &PolicyConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let varmap = VarMap::new();
        let mut p = Params {
            varmap: &varmap,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
        };
        let (c, d) = (cfg.patch_dim, cfg.hidden_dim);
        let pp = cfg.patch_size * cfg.patch_size;
        let n_patches = cfg.patches_per_side().pow(2);
        let backbone = Backbone {
            rgb_proj: p.linear("backbone.rgb_proj", 3 * pp, c, true)?,
            mask_proj: Linear::new(
                p.tensor("backbone.mask_proj.weight", &[c, pp], Init::Zeros)?,
                None,
            ),
            mix: p.linear("backbone.mix", c, c, true)?,
            pos: p.tensor("backbone.pos", &[n_patches, c], Init::Uniform(1.0))?,
            key: p.linear("pool.key", c, d, false)?,
            value: p.linear("pool.value", c, d, true)?,
            query: p.tensor(
                "pool.query",
                &[cfg.pool_heads, d / cfg.pool_heads, 1],
                Init::Uniform(1.0),
            )?,
            out: p.linear("pool.out", d, d, true)?,
        };
        let type_emb = match cfg.fusion {
            Fusion::TransformerLayer => {
                Some(p.tensor("type_emb", &[InteractionType::COUNT, d], Init::Uniform(0.1))?)
            }
            Fusion::VisualBackbone => None,
        };
        let mut blocks = Vec::new();
        for i in 0..cfg.transformer_blocks {
            let n = format!("blocks.{i}");
            blocks.push(Block {
                ln1: p.norm(&format!("{n}.ln1"), d)?,
                qkv: p.linear(&format!("{n}.qkv"), d, 3 * d, true)?,
                proj: p.linear(&format!("{n}.proj"), d, d, true)?,
                ln2: p.norm(&format!("{n}.ln2"), d)?,
                ff1: p.linear(&format!("{n}.ff1"), d, cfg.ffn_mult * d, true)?,
                ff2: p.linear(&format!("{n}.ff2"), cfg.ffn_mult * d, d, true)?,
            });
        }
        let ln_f = p.norm("ln_f", d)?;
        let heads = [
            p.linear("head.move", d, FACTORS[0], true)?,
            p.linear("head.turn", d, FACTORS[1], true)?,
            p.linear("head.act", d, FACTORS[2], true)?,
        ];
        // Geometric per-head slopes for the relative-distance attention bias.
        let slopes = (0..cfg.heads)
            .map(|h| 2f64.powf(-8.0 * (h + 1) as f64 / cfg.heads as f64))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            varmap,
            dtype,
            backbone,
            type_emb,
            blocks,
            ln_f,
            heads,
            slopes,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut out: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn patchify(&self, x: &Tensor, channels: usize) -> Result<Tensor> {
        let n = x.dim(0)?;
        let (g, p) = (self.cfg.patches_per_side(), self.cfg.patch_size);
        Ok(x.reshape((n, g, p, g, p, channels))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((n * g * g, p * p * channels))?)
    }

    /// Backbone embedding `[n, hidden_dim]` of frames `[n, s, s, 3]` fused with
    /// the mask channel `[n, s, s]`. Without a mask only the three RGB channels
    /// are used.
    pub fn encode(&self, obs: &Tensor, mask_channel: Option<&Tensor>) -> Result<Tensor> {
        let (n, h, w, ch) = obs.dims4()?;
        let s = self.cfg.image_size;
        if h != s || w != s || ch != 3 {
            return Err(usage(format!(
                "expected [n, {s}, {s}, 3] observations, got {:?}",
                obs.dims()
            )));
        }
        let b = &self.backbone;
        let mut feat = b.rgb_proj.forward(&self.patchify(obs, 3)?)?;
        if let Some(m) = mask_channel {
            if m.dims() != [n, s, s] {
                return Err(usage(format!(
                    "mask shape {:?} does not match observations",
                    m.dims()
                )));
            }
            feat = (feat + b.mask_proj.forward(&self.patchify(&m.unsqueeze(3)?, 1)?)?)?;
        }
        let n_patches = self.cfg.patches_per_side().pow(2);
        let feat = b.mix.forward(&feat.relu()?)?.relu()?;
        let feat = feat.reshape((n, n_patches, self.cfg.patch_dim))?;
        // Each channel is standardised over the frame's patches. Most of a view
        // is background, so without this the pooled token barely moves between
        // frames and training stalls at the marginal action distribution.
        let mean = feat.mean_keepdim(1)?;
        let feat = feat.broadcast_sub(&mean)?;
        let var = feat.sqr()?.mean_keepdim(1)?;
        let feat = feat
            .broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .broadcast_add(&b.pos)?;

        // Attention pooling with per-head keys `W_k x` and values `W_v x + b_v`.
        // Both projections are linear, so the query is folded into the key
        // weights and the value projection is applied after averaging.
        let heads = self.cfg.pool_heads;
        let (c, d) = (self.cfg.patch_dim, self.cfg.hidden_dim);
        let dh = d / heads;
        let wk = b.key.weight().reshape((heads, dh, c))?;
        let u = wk
            .transpose(1, 2)?
            .contiguous()?
            .matmul(&b.query)?
            .squeeze(2)?
            .t()?
            .contiguous()?;
        let scores = (feat.reshape((n * n_patches, c))?.matmul(&u)? / (dh as f64).sqrt())?;
        let scores = scores
            .reshape((n, n_patches, heads))?
            .transpose(1, 2)?
            .contiguous()?;
        let att = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let mixed = att.matmul(&feat)?;
        let wv = b.value.weight().reshape((heads, dh, c))?;
        let pooled = mixed
            .transpose(0, 1)?
            .contiguous()?
            .matmul(&wv.transpose(1, 2)?.contiguous()?)?;
        let mut pooled = pooled.transpose(0, 1)?.reshape((n, d))?;
        if let Some(bias) = b.value.bias() {
            pooled = pooled.broadcast_add(bias)?;
        }
        Ok(b.out.forward(&pooled)?)
    }

    /// Mask channel for the configured fusion: binary, or carrying the type code.
    pub fn mask_channel(&self, mask: &Tensor, types: &[InteractionType]) -> Result<Tensor> {
        match self.cfg.fusion {
            Fusion::TransformerLayer => Ok(mask.clone()),
            Fusion::VisualBackbone => {
                let codes: Vec<f32> = types.iter().map(|c| c.code() as f32).collect();
                let codes = Tensor::from_vec(codes, (types.len(), 1, 1), &Device::Cpu)?
                    .to_dtype(self.dtype)?;
                Ok(mask.broadcast_mul(&codes)?)
            }
        }
    }

    /// Adds the interaction-type embedding (transformer-layer fusion only).
    pub fn add_type(&self, x: &Tensor, types: &[InteractionType]) -> Result<Tensor> {
        match &self.type_emb {
            None => Ok(x.clone()),
            Some(emb) => {
                let ids: Vec<u32> = types.iter().map(|c| c.code() as u32).collect();
                let ids = Tensor::from_vec(ids, types.len(), &Device::Cpu)?;
                Ok((x + emb.index_select(&ids, 0)?)?)
            }
        }
    }

    /// Transformer input tokens `[n, hidden_dim]` for frames, binary masks and types.
    pub fn frame_tokens(
        &self,
        obs: &Tensor,
        mask: &Tensor,
        types: &[InteractionType],
    ) -> Result<Tensor> {
        let channel = self.mask_channel(mask, types)?;
        let x = self.encode(obs, Some(&channel))?;
        self.add_type(&x, types)
    }

    /// Embedding of a single frame and mask, as a plain vector.
    pub fn encode_frame(&self, obs: &Observation, mask: &InstanceMask) -> Result<Vec<f32>> {
        if obs.width != mask.width || obs.height != mask.height {
            return Err(usage("observation and mask sizes differ"));
        }
        let x = self.encode(
            &obs_tensor(&[obs], self.dtype)?,
            Some(&mask_tensor(&[mask], self.dtype)?),
        )?;
        Ok(x.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?)
    }

    /// RGB-only embedding, the three-channel counterpart of [`Policy::encode_frame`].
    pub fn encode_rgb(&self, obs: &Observation) -> Result<Vec<f32>> {
        let x = self.encode(&obs_tensor(&[obs], self.dtype)?, None)?;
        Ok(x.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?)
    }

    /// Additive attention bias `[1, heads, tq, tk]` for queries at the last `tq`
    /// of `tk` positions: a per-head penalty linear in distance, `-inf` on the future.
    fn attention_bias(&self, tq: usize, tk: usize) -> Result<Tensor> {
        let h = self.cfg.heads;
        let mut data = Vec::with_capacity(h * tq * tk);
        for slope in &self.slopes {
            for i in 0..tq {
                let qi = tk - tq + i;
                for j in 0..tk {
                    data.push(if j > qi {
                        f64::NEG_INFINITY
                    } else {
                        -slope * (qi - j) as f64
                    });
                }
            }
        }
        Ok(Tensor::from_vec(data, (1, h, tq, tk), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    /// Runs the transformer over new tokens `[b, t, d]` that follow cached
    /// positions (if any). Returns final hidden states and the updated cache.
    pub(crate) fn transformer(
        &self,
        x: &Tensor,
        past: Option<&KvCache>,
    ) -> Result<(Tensor, KvCache)> {
        let (b, t, d) = x.dims3()?;
        let h = self.cfg.heads;
        let dh = d / h;
        let tp = match past {
            Some(p) => p[0].0.dim(2)?,
            None => 0,
        };
        let bias = self.attention_bias(t, tp + t)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = x.clone();
        let mut cache = Vec::with_capacity(self.blocks.len());
        for (l, blk) in self.blocks.iter().enumerate() {
            let qkv = blk.qkv.forward(&blk.ln1.forward(&x)?)?;
            let split = |i: usize| -> Result<Tensor> {
                Ok(qkv
                    .narrow(2, i * d, d)?
                    .reshape((b, t, h, dh))?
                    .transpose(1, 2)?
                    .contiguous()?)
            };
            let (q, mut k, mut v) = (split(0)?, split(1)?, split(2)?);
            if let Some(p) = past {
                k = Tensor::cat(&[&p[l].0, &k], 2)?;
                v = Tensor::cat(&[&p[l].1, &v], 2)?;
            }
            let scores = (q.matmul(&k.t()?)? * scale)?.broadcast_add(&bias)?;
            let att = candle_nn::ops::softmax(&scores, D::Minus1)?;
            let o = att.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
            x = (x + blk.proj.forward(&o)?)?;
            let ff = blk
                .ff2
                .forward(&blk.ff1.forward(&blk.ln2.forward(&x)?)?.relu()?)?;
            x = (x + ff)?;
            cache.push((k, v));
        }
        Ok((self.ln_f.forward(&x)?, cache))
    }

    /// Per-factor logits for hidden states `[.., d]`.
    pub(crate) fn head_logits(&self, hidden: &Tensor) -> Result<[Tensor; 3]> {
        Ok([
            self.heads[0].forward(hidden)?,
            self.heads[1].forward(hidden)?,
            self.heads[2].forward(hidden)?,
        ])
    }

    /// Causal forward over a token sequence; one distribution per token.
    pub fn forward(&self, tokens: &[FrameToken]) -> Result<Vec<ActionDistribution>> {
        if tokens.is_empty() {
            return Err(usage("forward needs at least one token"));
        }
        if tokens.len() > self.cfg.context_len {
            return Err(usage(format!(
                "{} tokens exceed context length {}",
                tokens.len(),
                self.cfg.context_len
            )));
        }
        let xs: Vec<&Tensor> = tokens.iter().map(|t| &t.x).collect();
        let x = Tensor::stack(&xs, 0)?;
        let types: Vec<_> = tokens.iter().map(|t| t.c).collect();
        let x = self.add_type(&x, &types)?.unsqueeze(0)?;
        let (hidden, _) = self.transformer(&x, None)?;
        distributions(&self.head_logits(&hidden.squeeze(0)?)?)
    }
}

/// Splits `[t, n_f]` logits per frame.
pub(crate) fn distributions(logits: &[Tensor; 3]) -> Result<Vec<ActionDistribution>> {
    let rows: Vec<Vec<Vec<f64>>> = logits
        .iter()
        .map(|l| l.to_dtype(DType::F64)?.to_vec2::<f64>())
        .collect::<std::result::Result<_, _>>()?;
    Ok((0..rows[0].len())
        .map(|t| ActionDistribution {
            logits: [rows[0][t].clone(), rows[1][t].clone(), rows[2][t].clone()],
        })
        .collect())
}
