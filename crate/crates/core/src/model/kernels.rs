// SPDX-License-Identifier: MIT OR Apache-2.0

//! Row-major dense kernels. Every output row depends only on the matching
//! input row, with a fixed summation order, so results for a prefix of the
//! sequence never change when later rows are appended.

/// `out = a · b (+ bias)` with `a: (rows, inner)`, `b: (inner, cols)`.
pub(crate) fn matmul(a: &[f32], b: &[f32], bias: Option<&[f32]>, inner: usize, cols: usize) -> Vec<f32> {
    let rows = a.len() / inner;
    let mut out = vec![0.0f32; rows * cols];
    for (a_row, out_row) in a.chunks_exact(inner).zip(out.chunks_exact_mut(cols)) {
        if let Some(bias) = bias {
            out_row.copy_from_slice(bias);
        }
        for (&x, b_row) in a_row.iter().zip(b.chunks_exact(cols)) {
            if x == 0.0 {
                continue;
            }
            for (o, &w) in out_row.iter_mut().zip(b_row) {
                *o += x * w;
            }
        }
    }
    out
}

/// `out = a · bᵀ` with `a: (rows, inner)`, `b: (cols, inner)`.
pub(crate) fn matmul_transposed(a: &[f32], b: &[f32], inner: usize) -> Vec<f32> {
    let cols = b.len() / inner;
    let rows = a.len() / inner;
    let mut out = vec![0.0f32; rows * cols];
    for (a_row, out_row) in a.chunks_exact(inner).zip(out.chunks_exact_mut(cols)) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(inner)) {
            *o = dot(a_row, b_row);
        }
    }
    out
}

/// `acc += aᵀ · c` with `a: (rows, m)`, `c: (rows, n)`, `acc: (m, n)`.
pub(crate) fn accumulate_outer(acc: &mut [f32], a: &[f32], c: &[f32], m: usize, n: usize) {
    for (a_row, c_row) in a.chunks_exact(m).zip(c.chunks_exact(n)) {
        for (&x, acc_row) in a_row.iter().zip(acc.chunks_exact_mut(n)) {
            if x == 0.0 {
                continue;
            }
            for (g, &y) in acc_row.iter_mut().zip(c_row) {
                *g += x * y;
            }
        }
    }
}

/// `acc += Σ_rows c`.
pub(crate) fn accumulate_rows(acc: &mut [f32], c: &[f32]) {
    for row in c.chunks_exact(acc.len()) {
        for (g, &y) in acc.iter_mut().zip(row) {
            *g += y;
        }
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn add_assign(a: &mut [f32], b: &[f32]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Cached layer-norm activations for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormTrace {
    pub normalized: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub output: Vec<f32>,
}

pub(crate) fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> NormTrace {
    let d = gain.len();
    let rows = x.len() / d;
    let mut normalized = vec![0.0; x.len()];
    let mut output = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rstd = 1.0 / (var + eps).sqrt();
        inv_std[r] = rstd;
        for i in 0..d {
            let n = (row[i] - mean) * rstd;
            normalized[r * d + i] = n;
            output[r * d + i] = n * gain[i] + bias[i];
        }
    }
    NormTrace {
        normalized,
        inv_std,
        output,
    }
}

/// Returns `dx`; accumulates gain/bias gradients when requested.
pub(crate) fn layer_norm_backward(
    trace: &NormTrace,
    gain: &[f32],
    d_out: &[f32],
    mut param_grads: Option<(&mut [f32], &mut [f32])>,
) -> Vec<f32> {
    let d = gain.len();
    let mut dx = vec![0.0; d_out.len()];
    let mut d_norm = vec![0.0; d];
    for (r, &rstd) in trace.inv_std.iter().enumerate() {
        let dy = &d_out[r * d..(r + 1) * d];
        let xhat = &trace.normalized[r * d..(r + 1) * d];
        if let Some((g_gain, g_bias)) = param_grads.as_mut() {
            for i in 0..d {
                g_gain[i] += dy[i] * xhat[i];
                g_bias[i] += dy[i];
            }
        }
        for i in 0..d {
            d_norm[i] = dy[i] * gain[i];
        }
        let mean_d = d_norm.iter().sum::<f32>() / d as f32;
        let mean_dx = d_norm.iter().zip(xhat).map(|(a, b)| a * b).sum::<f32>() / d as f32;
        for i in 0..d {
            dx[r * d + i] = rstd * (d_norm[i] - mean_d - xhat[i] * mean_dx);
        }
    }
    dx
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_K: f32 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Numerically stable `log Σ exp`.
pub(crate) fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}
