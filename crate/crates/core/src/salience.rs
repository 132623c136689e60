// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient-based input salience.
//!
//! A salience call runs one forward pass over `BOS + prompt + target`, one
//! backward pass from the teacher-forced loss of the masked target tokens to
//! the token-embedding activations, and reduces each gradient row to a score:
//!
//! - `grad_l2`: the L2 norm of the row (nonnegative);
//! - `grad_dot_input`: the row dotted with the token's raw embedding (signed).
//!
//! Scores cover every position, including target tokens that feed later
//! masked tokens. Positions at or after the last masked target get exactly
//! zero. No normalization happens here.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CancelFlag, Decoding, GenerateOptions, Model, TargetSpec};
use crate::tokenizer::{TokenId, BOS_ID, EOS_ID, PAD_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SalienceMethod {
    GradL2,
    GradDotInput,
}

impl SalienceMethod {
    pub const ALL: [SalienceMethod; 2] = [SalienceMethod::GradL2, SalienceMethod::GradDotInput];

    /// Whether scores can be negative.
    pub fn is_signed(self) -> bool {
        matches!(self, Self::GradDotInput)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::GradL2 => "grad_l2",
            Self::GradDotInput => "grad_dot_input",
        }
    }

    fn reduce(self, gradient_row: &[f32], embedding: &[f32]) -> f32 {
        let acc: f64 = match self {
            Self::GradL2 => gradient_row
                .iter()
                .map(|&g| f64::from(g) * f64::from(g))
                .sum::<f64>()
                .sqrt(),
            Self::GradDotInput => gradient_row
                .iter()
                .zip(embedding)
                .map(|(&g, &e)| f64::from(g) * f64::from(e))
                .sum(),
        };
        acc as f32
    }
}

impl fmt::Display for SalienceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SalienceMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "grad_l2" => Ok(Self::GradL2),
            "grad_dot_input" => Ok(Self::GradDotInput),
            other => Err(format!("unknown salience method {other:?} (expected grad_l2 or grad_dot_input)")),
        }
    }
}

/// Per-token scores for one method over the combined sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalienceMap {
    pub method: SalienceMethod,
    /// One score per token of `spec.combined_ids()`.
    pub scores: Vec<f32>,
    /// The spec actually sent to the model: its prompt starts with BOS.
    pub spec: TargetSpec,
}

impl SalienceMap {
    /// Number of positions before the target, BOS included.
    pub fn prompt_len(&self) -> usize {
        self.spec.prompt_ids.len()
    }

    pub fn target_scores(&self) -> &[f32] {
        &self.scores[self.prompt_len()..]
    }
}

/// A map together with the gradient rows and embeddings it was reduced from.
#[derive(Debug, Clone)]
pub struct SalienceDetail {
    pub map: SalienceMap,
    /// `(seq_len, d_model)`
    pub gradient: Vec<f32>,
    /// `(seq_len, d_model)` token embeddings, the "input" of grad·input.
    pub embeddings: Vec<f32>,
    pub d_model: usize,
}

impl SalienceDetail {
    pub fn gradient_row(&self, position: usize) -> &[f32] {
        &self.gradient[position * self.d_model..(position + 1) * self.d_model]
    }

    pub fn embedding_row(&self, position: usize) -> &[f32] {
        &self.embeddings[position * self.d_model..(position + 1) * self.d_model]
    }
}

fn with_bos(spec: &TargetSpec) -> TargetSpec {
    let mut prompt_ids = Vec::with_capacity(spec.prompt_ids.len() + 1);
    prompt_ids.push(BOS_ID);
    prompt_ids.extend_from_slice(&spec.prompt_ids);
    TargetSpec {
        prompt_ids,
        target_ids: spec.target_ids.clone(),
        target_mask: spec.target_mask.clone(),
    }
}

/// Salience of every token in `BOS + prompt + target` for the masked target
/// tokens. `spec.prompt_ids` must not include BOS; it is prepended here.
/// A multi-bit mask explains the sum of the selected tokens' losses.
pub fn salience(model: &Model, spec: &TargetSpec, method: SalienceMethod) -> Result<SalienceMap> {
    Ok(salience_detailed(model, spec, method, &CancelFlag::new())?.map)
}

/// [`salience`] for a set of selected target indices (a set: duplicates are
/// ignored).
pub fn salience_multi(
    model: &Model,
    prompt_ids: &[TokenId],
    target_ids: &[TokenId],
    selection: &[usize],
    method: SalienceMethod,
) -> Result<SalienceMap> {
    let spec = TargetSpec::with_selection(prompt_ids.to_vec(), target_ids.to_vec(), selection)?;
    salience(model, &spec, method)
}

/// [`salience`] that also returns the gradient rows behind the scores.
pub fn salience_detailed(
    model: &Model,
    spec: &TargetSpec,
    method: SalienceMethod,
    cancel: &CancelFlag,
) -> Result<SalienceDetail> {
    let spec = with_bos(spec);
    spec.validate(model.config())?;
    cancel.check()?;
    let trace = model.forward(&spec.combined_ids())?;
    cancel.check()?;
    let gradient = model.backward_to_embeddings(&trace, &spec)?;
    let d_model = trace.d_model();
    let embeddings = trace.embeddings().to_vec();
    let scores = gradient
        .chunks_exact(d_model)
        .zip(embeddings.chunks_exact(d_model))
        .map(|(g, e)| method.reduce(g, e))
        .collect::<Vec<_>>();
    if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Invariant(format!("non-finite salience at position {bad}")));
    }
    Ok(SalienceDetail {
        map: SalienceMap {
            method,
            scores,
            spec,
        },
        gradient,
        embeddings,
        d_model,
    })
}

/// Decoding options used for explained generations: stop at EOS and never
/// emit BOS or PAD.
pub fn generation_options(decoding: Decoding, max_new: usize) -> GenerateOptions {
    GenerateOptions {
        decoding,
        max_new,
        stop_token: Some(EOS_ID),
        suppress: vec![BOS_ID, PAD_ID],
    }
}

/// Generates a continuation of `BOS + prompt_ids`. The result excludes BOS,
/// the prompt and the stopping EOS.
pub fn generate_continuation(
    model: &Model,
    prompt_ids: &[TokenId],
    decoding: Decoding,
    max_new: usize,
    cancel: &CancelFlag,
) -> Result<Vec<TokenId>> {
    let mut ids = Vec::with_capacity(prompt_ids.len() + 1);
    ids.push(BOS_ID);
    ids.extend_from_slice(prompt_ids);
    model.generate_cancellable(&ids, &generation_options(decoding, max_new), cancel)
}

/// Generates a continuation and explains it. `selection` indexes into the
/// generated tokens; `None` explains all of them.
pub fn explain_generation(
    model: &Model,
    prompt_ids: &[TokenId],
    decoding: Decoding,
    max_new: usize,
    method: SalienceMethod,
    selection: Option<&[usize]>,
) -> Result<(Vec<TokenId>, SalienceMap)> {
    let generated = generate_continuation(model, prompt_ids, decoding, max_new, &CancelFlag::new())?;
    if generated.is_empty() {
        return Err(Error::EmptyGeneration);
    }
    let spec = match selection {
        Some(selection) => TargetSpec::with_selection(prompt_ids.to_vec(), generated.clone(), selection)?,
        None => TargetSpec::full(prompt_ids.to_vec(), generated.clone()),
    };
    let map = salience(model, &spec, method)?;
    Ok((generated, map))
}
