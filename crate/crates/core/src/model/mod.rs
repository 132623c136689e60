// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small decoder-only transformer with an explicit backward pass.
//!
//! Pre-layer-norm blocks, GELU MLP, learned positions and an output
//! projection tied to the token embedding. Everything is `f32`. The token
//! embedding lookup is the intercept point: [`Model::forward_with_intercept`]
//! hands those activations to a callback, and
//! [`Model::backward_to_embeddings`] returns the loss gradient at exactly
//! that point.

mod backward;
mod config;
mod forward;
mod generate;
mod io;
mod kernels;
mod params;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use backward::teacher_forced_loss;
pub use config::ModelConfig;
pub use forward::ForwardTrace;
pub use generate::{Decoding, GenerateOptions};
pub use io::{load_weights, read_weights, save_weights, write_weights};
pub use params::{LayerParams, ModelParameters};

pub(crate) use backward::{logit_gradient, run_backward};
pub(crate) use forward::run_forward;

use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

/// Prompt, target and which target tokens to explain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub prompt_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    pub target_mask: Vec<bool>,
}

impl TargetSpec {
    /// Mask covering every target token.
    pub fn full(prompt_ids: Vec<TokenId>, target_ids: Vec<TokenId>) -> Self {
        let target_mask = vec![true; target_ids.len()];
        Self {
            prompt_ids,
            target_ids,
            target_mask,
        }
    }

    /// Mask built from a set of target indices. Repeated indices are harmless.
    pub fn with_selection(
        prompt_ids: Vec<TokenId>,
        target_ids: Vec<TokenId>,
        selection: &[usize],
    ) -> Result<Self> {
        let mut target_mask = vec![false; target_ids.len()];
        for &i in selection {
            *target_mask.get_mut(i).ok_or_else(|| {
                Error::TargetSpec(format!(
                    "selected target index {i} is out of range ({} target tokens)",
                    target_ids.len()
                ))
            })? = true;
        }
        Ok(Self {
            prompt_ids,
            target_ids,
            target_mask,
        })
    }

    pub fn combined_ids(&self) -> Vec<TokenId> {
        let mut ids = self.prompt_ids.clone();
        ids.extend_from_slice(&self.target_ids);
        ids
    }

    pub fn combined_len(&self) -> usize {
        self.prompt_ids.len() + self.target_ids.len()
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.target_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
    }

    /// Combined-sequence index of the last masked target token.
    pub fn last_masked_index(&self) -> Option<usize> {
        self.masked_positions().last().map(|t| self.prompt_ids.len() + t)
    }

    /// Position whose logits predict target token `t`.
    pub(crate) fn predicting_position(&self, t: usize) -> usize {
        self.prompt_ids.len() + t - 1
    }

    pub(crate) fn check_mask(&self) -> Result<()> {
        if self.target_mask.len() != self.target_ids.len() {
            return Err(Error::TargetSpec(format!(
                "mask has {} entries for {} target tokens",
                self.target_mask.len(),
                self.target_ids.len()
            )));
        }
        if self.prompt_ids.is_empty() {
            return Err(Error::TargetSpec("prompt must contain at least one token".into()));
        }
        if !self.target_mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask);
        }
        Ok(())
    }

    /// Full precondition check against a model config.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.check_mask()?;
        if self.combined_len() > config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.combined_len(),
                limit: config.max_seq_len,
            });
        }
        let vocab_size = config.vocab_size;
        if let Some(&id) = self
            .prompt_ids
            .iter()
            .chain(&self.target_ids)
            .find(|&&id| id as usize >= vocab_size)
        {
            return Err(Error::UnknownToken { id, vocab_size });
        }
        Ok(())
    }
}

/// Forward/backward pass counters, shared by every clone of a [`Model`].
#[derive(Debug, Default)]
pub struct PassCounters {
    forward: AtomicU64,
    backward: AtomicU64,
}

impl PassCounters {
    pub fn forward_passes(&self) -> u64 {
        self.forward.load(Ordering::SeqCst)
    }

    pub fn backward_passes(&self) -> u64 {
        self.backward.load(Ordering::SeqCst)
    }
}

/// Cooperative cancellation, checked between model passes.
#[derive(Debug, Clone, Default)]
pub struct CancelFlag(Arc<AtomicBool>);

impl CancelFlag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.is_cancelled() {
            Err(Error::Cancelled)
        } else {
            Ok(())
        }
    }
}

/// Immutable parameters plus pass counters. Cheap to clone and safe to
/// share across threads.
#[derive(Debug, Clone)]
pub struct Model {
    params: Arc<ModelParameters>,
    counters: Arc<PassCounters>,
}

impl Model {
    pub fn new(params: ModelParameters) -> Result<Self> {
        params.config.validate()?;
        Ok(Self {
            params: Arc::new(params),
            counters: Arc::default(),
        })
    }

    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(ModelParameters::init_random(config, seed)?)
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn counters(&self) -> &PassCounters {
        &self.counters
    }

    pub fn forward(&self, ids: &[TokenId]) -> Result<ForwardTrace> {
        self.forward_with_intercept(ids, &mut |_| {})
    }

    /// Forward pass with a hook on the token-embedding activations
    /// (`seq_len × d_model`, row-major). The hook may read or rewrite them.
    pub fn forward_with_intercept(
        &self,
        ids: &[TokenId],
        intercept: &mut dyn FnMut(&mut [f32]),
    ) -> Result<ForwardTrace> {
        let trace = run_forward(&self.params, ids, intercept)?;
        self.counters.forward.fetch_add(1, Ordering::SeqCst);
        Ok(trace)
    }

    /// Exact gradient of [`teacher_forced_loss`] with respect to each
    /// position's token-embedding activation, `(seq_len, d_model)`.
    pub fn backward_to_embeddings(&self, trace: &ForwardTrace, spec: &TargetSpec) -> Result<Vec<f32>> {
        let d_logits = logit_gradient(trace, spec)?;
        let grad = run_backward(&self.params, trace, &d_logits, None);
        self.counters.backward.fetch_add(1, Ordering::SeqCst);
        Ok(grad)
    }

    /// Autoregressive decoding from `prompt`, one full forward pass per step.
    pub fn generate(&self, prompt: &[TokenId], options: &GenerateOptions) -> Result<Vec<TokenId>> {
        self.generate_cancellable(prompt, options, &CancelFlag::new())
    }

    pub fn generate_cancellable(
        &self,
        prompt: &[TokenId],
        options: &GenerateOptions,
        cancel: &CancelFlag,
    ) -> Result<Vec<TokenId>> {
        if prompt.is_empty() {
            return Err(Error::TargetSpec("prompt must contain at least one token".into()));
        }
        let limit = self.config().max_seq_len;
        if prompt.len() + options.max_new > limit {
            return Err(Error::SequenceTooLong {
                len: prompt.len() + options.max_new,
                limit,
            });
        }
        forward::check_ids(&self.params, prompt)?;
        let mut sampler = generate::Sampler::new(options.decoding);
        let mut ids = prompt.to_vec();
        let mut out = Vec::with_capacity(options.max_new);
        for _ in 0..options.max_new {
            cancel.check()?;
            let trace = self.forward(&ids)?;
            let next = sampler.pick(trace.logits_at(ids.len() - 1), &options.suppress);
            if Some(next) == options.stop_token {
                break;
            }
            ids.push(next);
            out.push(next);
        }
        Ok(out)
    }
}
