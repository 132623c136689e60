// SPDX-License-Identifier: MIT OR Apache-2.0

//! Teacher-forced loss and the hand-written backward pass.

use super::forward::{ForwardTrace, LayerTrace};
use super::kernels;
use super::params::ModelParameters;
use super::TargetSpec;
use crate::error::{Error, Result};

fn check_trace(trace: &ForwardTrace, spec: &TargetSpec) -> Result<()> {
    spec.check_mask()?;
    let combined = spec.combined_ids();
    if trace.ids != combined {
        return Err(Error::TargetSpec(
            "trace was not computed on prompt followed by target".into(),
        ));
    }
    Ok(())
}

/// Sum over masked target positions of the negative log-probability the model
/// assigns to each target token given everything before it.
pub fn teacher_forced_loss(trace: &ForwardTrace, spec: &TargetSpec) -> Result<f32> {
    check_trace(trace, spec)?;
    let mut loss = 0.0f64;
    for t in spec.masked_positions() {
        let row = trace.logits_at(spec.predicting_position(t));
        let target = spec.target_ids[t] as usize;
        loss += f64::from(kernels::log_sum_exp(row) - row[target]);
    }
    Ok(loss as f32)
}

/// Gradient of [`teacher_forced_loss`] with respect to the logits.
pub(crate) fn logit_gradient(trace: &ForwardTrace, spec: &TargetSpec) -> Result<Vec<f32>> {
    check_trace(trace, spec)?;
    let v = trace.vocab_size;
    let mut d_logits = vec![0.0f32; trace.logits.len()];
    for t in spec.masked_positions() {
        let pos = spec.predicting_position(t);
        let row = trace.logits_at(pos);
        let lse = kernels::log_sum_exp(row);
        let d_row = &mut d_logits[pos * v..(pos + 1) * v];
        for (d, &l) in d_row.iter_mut().zip(row) {
            *d = (l - lse).exp();
        }
        d_row[spec.target_ids[t] as usize] -= 1.0;
    }
    Ok(d_logits)
}

/// Backpropagates `d_logits` to the token-embedding activations. When
/// `grads` is given, parameter gradients are accumulated into it as well.
pub(crate) fn run_backward(
    params: &ModelParameters,
    trace: &ForwardTrace,
    d_logits: &[f32],
    mut grads: Option<&mut ModelParameters>,
) -> Vec<f32> {
    let config = &params.config;
    let d = config.d_model;
    let f = config.d_ff;
    let v = config.vocab_size;
    let seq = trace.ids.len();

    // logits = y · Eᵀ with E tied to the input embedding table
    let d_y = kernels::matmul(d_logits, &params.token_embedding, None, v, d);
    if let Some(g) = grads.as_deref_mut() {
        kernels::accumulate_outer(&mut g.token_embedding, d_logits, &trace.final_ln.output, v, d);
    }
    let mut dx = kernels::layer_norm_backward(
        &trace.final_ln,
        &params.final_ln_gain,
        &d_y,
        grads
            .as_deref_mut()
            .map(|g| (&mut g.final_ln_gain[..], &mut g.final_ln_bias[..])),
    );

    for (l, (layer, lt)) in params.layers.iter().zip(&trace.layers).enumerate().rev() {
        let mut lg = grads.as_deref_mut().map(|g| &mut g.layers[l]);

        // MLP residual branch
        let d_act = kernels::matmul_transposed(&dx, &layer.proj_weight, d);
        if let Some(g) = lg.as_deref_mut() {
            kernels::accumulate_outer(&mut g.proj_weight, &lt.act, &dx, f, d);
            kernels::accumulate_rows(&mut g.proj_bias, &dx);
        }
        let d_pre: Vec<f32> = d_act
            .iter()
            .zip(&lt.pre_act)
            .map(|(&g, &x)| g * kernels::gelu_derivative(x))
            .collect();
        let d_ln2 = kernels::matmul_transposed(&d_pre, &layer.fc_weight, f);
        if let Some(g) = lg.as_deref_mut() {
            kernels::accumulate_outer(&mut g.fc_weight, &lt.ln2.output, &d_pre, d, f);
            kernels::accumulate_rows(&mut g.fc_bias, &d_pre);
        }
        let d_mid = kernels::layer_norm_backward(
            &lt.ln2,
            &layer.ln2_gain,
            &d_ln2,
            lg.as_deref_mut()
                .map(|g| (&mut g.ln2_gain[..], &mut g.ln2_bias[..])),
        );
        kernels::add_assign(&mut dx, &d_mid);

        // attention residual branch
        let d_attn = kernels::matmul_transposed(&dx, &layer.attn_out_weight, d);
        if let Some(g) = lg.as_deref_mut() {
            kernels::accumulate_outer(&mut g.attn_out_weight, &lt.attn, &dx, d, d);
            kernels::accumulate_rows(&mut g.attn_out_bias, &dx);
        }
        let d_qkv = attention_backward(lt, &d_attn, seq, config.n_heads, d);
        let d_ln1 = kernels::matmul_transposed(&d_qkv, &layer.qkv_weight, 3 * d);
        if let Some(g) = lg.as_deref_mut() {
            kernels::accumulate_outer(&mut g.qkv_weight, &lt.ln1.output, &d_qkv, d, 3 * d);
            kernels::accumulate_rows(&mut g.qkv_bias, &d_qkv);
        }
        let d_in = kernels::layer_norm_backward(
            &lt.ln1,
            &layer.ln1_gain,
            &d_ln1,
            lg.map(|g| (&mut g.ln1_gain[..], &mut g.ln1_bias[..])),
        );
        kernels::add_assign(&mut dx, &d_in);
    }

    // x0 = embeddings + positions: the gradient passes through unchanged
    if let Some(g) = grads {
        kernels::add_assign(&mut g.position_embedding[..seq * d], &dx);
        for (row, &id) in dx.chunks_exact(d).zip(&trace.ids) {
            let id = id as usize;
            kernels::add_assign(&mut g.token_embedding[id * d..(id + 1) * d], row);
        }
    }
    dx
}

fn attention_backward(lt: &LayerTrace, d_attn: &[f32], seq: usize, heads: usize, d: usize) -> Vec<f32> {
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let qkv = &lt.qkv;
    let mut d_qkv = vec![0.0f32; qkv.len()];
    let mut d_probs = vec![0.0f32; seq];
    let q_at = |i: usize, h: usize| i * 3 * d + h * hd;
    let k_at = |j: usize, h: usize| j * 3 * d + d + h * hd;
    let v_at = |j: usize, h: usize| j * 3 * d + 2 * d + h * hd;
    for h in 0..heads {
        for i in 0..seq {
            let d_out = &d_attn[i * d + h * hd..i * d + (h + 1) * hd];
            let probs = &lt.probs[(h * seq + i) * seq..(h * seq + i) * seq + i + 1];
            let mut weighted = 0.0;
            for (j, &p) in probs.iter().enumerate() {
                let vj = &qkv[v_at(j, h)..v_at(j, h) + hd];
                d_probs[j] = kernels::dot(d_out, vj);
                weighted += p * d_probs[j];
                for (g, &o) in d_qkv[v_at(j, h)..v_at(j, h) + hd].iter_mut().zip(d_out) {
                    *g += p * o;
                }
            }
            for (j, &p) in probs.iter().enumerate() {
                let d_score = p * (d_probs[j] - weighted) * scale;
                if d_score == 0.0 {
                    continue;
                }
                for c in 0..hd {
                    d_qkv[q_at(i, h) + c] += d_score * qkv[k_at(j, h) + c];
                    d_qkv[k_at(j, h) + c] += d_score * qkv[q_at(i, h) + c];
                }
            }
        }
    }
    d_qkv
}
