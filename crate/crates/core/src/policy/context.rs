use std::collections::VecDeque;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{distributions, mask_tensor, obs_tensor, ActionDistribution, KvCache, Policy};
use crate::error::Result;
use crate::gridworld::{Action, InstanceMask, InteractionType, Observation};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Sample,
    #[default]
    Argmax,
}

/// Rolling inference memory over the most recent `context_len` tokens.
///
/// Tokens are appended with cached keys and values. Once the window is full
/// the oldest token is dropped and the window is recomputed from the retained
/// tokens, so the result always equals a fresh forward over the window.
#[derive(Clone, Debug, Default)]
pub struct PolicyContext {
    tokens: VecDeque<Tensor>,
    cache: Option<KvCache>,
    capacity: usize,
}

impl PolicyContext {
    pub fn new(capacity: usize) -> Self {
        Self {
            tokens: VecDeque::new(),
            cache: None,
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn clear(&mut self) {
        self.tokens.clear();
        self.cache = None;
    }
}

impl Policy {
    pub fn new_context(&self) -> PolicyContext {
        PolicyContext::new(self.cfg.context_len)
    }

    /// Appends one transformer input token `[hidden_dim]` (type already added)
    /// and returns the distribution at its position.
    pub fn push_token(&self, ctx: &mut PolicyContext, token: Tensor) -> Result<ActionDistribution> {
        ctx.tokens.push_back(token.clone());
        let hidden = if ctx.tokens.len() > ctx.capacity {
            ctx.tokens.pop_front();
            let all: Vec<&Tensor> = ctx.tokens.iter().collect();
            let x = Tensor::stack(&all, 0)?.unsqueeze(0)?;
            let (h, cache) = self.transformer(&x, None)?;
            ctx.cache = Some(cache);
            let t = h.dim(1)?;
            h.narrow(1, t - 1, 1)?
        } else {
            let x = token.unsqueeze(0)?.unsqueeze(0)?;
            let (h, cache) = self.transformer(&x, ctx.cache.as_ref())?;
            ctx.cache = Some(cache);
            h
        };
        let logits = self.head_logits(&hidden.squeeze(0)?)?;
        Ok(distributions(&logits)?.remove(0))
    }

    /// Transformer input token for one frame.
    pub fn token_for(
        &self,
        obs: &Observation,
        mask: &InstanceMask,
        ctype: InteractionType,
    ) -> Result<Tensor> {
        let o = obs_tensor(&[obs], self.dtype)?;
        let m = mask_tensor(&[mask], self.dtype)?;
        Ok(self.frame_tokens(&o, &m, &[ctype])?.squeeze(0)?)
    }

    /// Chooses an action for the newest frame and appends it to the context.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &Observation,
        mask: &InstanceMask,
        ctype: InteractionType,
        ctx: &mut PolicyContext,
        mode: ActMode,
        rng: &mut R,
    ) -> Result<(Action, ActionDistribution)> {
        let token = self.token_for(obs, mask, ctype)?;
        let dist = self.push_token(ctx, token)?;
        let action = match mode {
            ActMode::Argmax => dist.argmax(),
            ActMode::Sample => dist.sample(rng),
        };
        Ok((action, dist))
    }
}
