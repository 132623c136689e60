// SPDX-License-Identifier: MIT OR Apache-2.0

use super::kernels::{self, NormTrace};
use super::params::ModelParameters;
use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

/// Activations of one block, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    pub ln1: NormTrace,
    /// `(seq, 3 * d_model)`
    pub qkv: Vec<f32>,
    /// `(heads, seq, seq)`; entries above the diagonal are zero.
    pub probs: Vec<f32>,
    /// Concatenated head outputs, `(seq, d_model)`.
    pub attn: Vec<f32>,
    pub ln2: NormTrace,
    /// MLP hidden layer before and after GELU, `(seq, d_ff)`.
    pub pre_act: Vec<f32>,
    pub act: Vec<f32>,
}

/// Everything the backward pass needs, so it never re-runs the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) ids: Vec<TokenId>,
    /// Token-embedding activations, `(seq, d_model)`, before positions are added.
    pub(crate) embeddings: Vec<f32>,
    pub(crate) layers: Vec<LayerTrace>,
    pub(crate) final_ln: NormTrace,
    /// `(seq, vocab_size)`
    pub(crate) logits: Vec<f32>,
    pub(crate) vocab_size: usize,
    pub(crate) d_model: usize,
}

impl ForwardTrace {
    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Row-major `(seq_len, vocab_size)` logits.
    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    pub fn logits_at(&self, position: usize) -> &[f32] {
        &self.logits[position * self.vocab_size..(position + 1) * self.vocab_size]
    }

    /// The intercepted token-embedding activations, `(seq_len, d_model)`.
    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }
}

pub(crate) fn check_ids(params: &ModelParameters, ids: &[TokenId]) -> Result<()> {
    let config = &params.config;
    if ids.is_empty() {
        return Err(Error::TargetSpec("input sequence is empty".into()));
    }
    if ids.len() > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            limit: config.max_seq_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::UnknownToken {
            id,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}

/// Runs the model. `intercept` sees (and may edit) the token-embedding
/// activations right after lookup, before positional embeddings are added.
pub(crate) fn run_forward(
    params: &ModelParameters,
    ids: &[TokenId],
    intercept: &mut dyn FnMut(&mut [f32]),
) -> Result<ForwardTrace> {
    check_ids(params, ids)?;
    let config = &params.config;
    let d = config.d_model;
    let seq = ids.len();

    let mut embeddings = Vec::with_capacity(seq * d);
    for &id in ids {
        embeddings.extend_from_slice(params.embedding(id as usize));
    }
    intercept(&mut embeddings);

    let mut x = embeddings.clone();
    kernels::add_assign(&mut x, &params.position_embedding[..seq * d]);

    let mut layers = Vec::with_capacity(config.n_layers);
    for layer in &params.layers {
        let ln1 = kernels::layer_norm(&x, &layer.ln1_gain, &layer.ln1_bias, config.layernorm_epsilon);
        let qkv = kernels::matmul(&ln1.output, &layer.qkv_weight, Some(&layer.qkv_bias), d, 3 * d);
        let (attn, probs) = causal_attention(&qkv, seq, config.n_heads, d);
        let attn_proj =
            kernels::matmul(&attn, &layer.attn_out_weight, Some(&layer.attn_out_bias), d, d);
        kernels::add_assign(&mut x, &attn_proj);

        let ln2 = kernels::layer_norm(&x, &layer.ln2_gain, &layer.ln2_bias, config.layernorm_epsilon);
        let pre_act = kernels::matmul(&ln2.output, &layer.fc_weight, Some(&layer.fc_bias), d, config.d_ff);
        let act: Vec<f32> = pre_act.iter().map(|&v| kernels::gelu(v)).collect();
        let mlp = kernels::matmul(&act, &layer.proj_weight, Some(&layer.proj_bias), config.d_ff, d);
        kernels::add_assign(&mut x, &mlp);

        layers.push(LayerTrace {
            ln1,
            qkv,
            probs,
            attn,
            ln2,
            pre_act,
            act,
        });
    }

    let final_ln = kernels::layer_norm(&x, &params.final_ln_gain, &params.final_ln_bias, config.layernorm_epsilon);
    let logits = kernels::matmul_transposed(&final_ln.output, &params.token_embedding, d);

    Ok(ForwardTrace {
        ids: ids.to_vec(),
        embeddings,
        layers,
        final_ln,
        logits,
        vocab_size: config.vocab_size,
        d_model: d,
    })
}

/// Scaled dot-product attention where position `i` sees positions `0..=i`.
fn causal_attention(qkv: &[f32], seq: usize, heads: usize, d: usize) -> (Vec<f32>, Vec<f32>) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0.0; seq * d];
    let mut probs = vec![0.0; heads * seq * seq];
    for h in 0..heads {
        for i in 0..seq {
            let q = &qkv[i * 3 * d + h * hd..i * 3 * d + (h + 1) * hd];
            let row = &mut probs[(h * seq + i) * seq..(h * seq + i) * seq + i + 1];
            let mut max = f32::NEG_INFINITY;
            for (j, p) in row.iter_mut().enumerate() {
                let k = &qkv[j * 3 * d + d + h * hd..j * 3 * d + d + (h + 1) * hd];
                *p = kernels::dot(q, k) * scale;
                max = max.max(*p);
            }
            let mut total = 0.0;
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                total += *p;
            }
            let o = &mut out[i * d + h * hd..i * d + (h + 1) * hd];
            for (j, p) in row.iter_mut().enumerate() {
                *p /= total;
                let v = &qkv[j * 3 * d + 2 * d + h * hd..j * 3 * d + 2 * d + (h + 1) * hd];
                for (o, &v) in o.iter_mut().zip(v) {
                    *o += *p * v;
                }
            }
        }
    }
    (out, probs)
}
