// SPDX-License-Identifier: MIT OR Apache-2.0

//! Test-only reference transformer in `f64`, written independently of the
//! crate's kernels (nested vectors, straightforward loops). Used as the
//! finite-difference oracle for the hand-written backward pass.

#![allow(dead_code)]

use promptlens_core::model::{ModelParameters, TargetSpec};

pub type Mat = Vec<Vec<f64>>;

fn to_mat(flat: &[f32], cols: usize) -> Mat {
    flat.chunks(cols).map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
}

fn to_vec(flat: &[f32]) -> Vec<f64> {
    flat.iter().map(|&v| f64::from(v)).collect()
}

pub struct RefLayer {
    ln1: (Vec<f64>, Vec<f64>),
    wq: Mat,
    bq: Vec<f64>,
    wo: Mat,
    bo: Vec<f64>,
    ln2: (Vec<f64>, Vec<f64>),
    wfc: Mat,
    bfc: Vec<f64>,
    wproj: Mat,
    bproj: Vec<f64>,
}

pub struct RefModel {
    pub heads: usize,
    pub eps: f64,
    pub wte: Mat,
    pub wpe: Mat,
    layers: Vec<RefLayer>,
    lnf: (Vec<f64>, Vec<f64>),
}

impl RefModel {
    pub fn new(p: &ModelParameters) -> Self {
        let c = p.config;
        let d = c.d_model;
        Self {
            heads: c.n_heads,
            eps: f64::from(c.layernorm_epsilon),
            wte: to_mat(&p.token_embedding, d),
            wpe: to_mat(&p.position_embedding, d),
            layers: p
                .layers
                .iter()
                .map(|l| RefLayer {
                    ln1: (to_vec(&l.ln1_gain), to_vec(&l.ln1_bias)),
                    wq: to_mat(&l.qkv_weight, 3 * d),
                    bq: to_vec(&l.qkv_bias),
                    wo: to_mat(&l.attn_out_weight, d),
                    bo: to_vec(&l.attn_out_bias),
                    ln2: (to_vec(&l.ln2_gain), to_vec(&l.ln2_bias)),
                    wfc: to_mat(&l.fc_weight, c.d_ff),
                    bfc: to_vec(&l.fc_bias),
                    wproj: to_mat(&l.proj_weight, d),
                    bproj: to_vec(&l.proj_bias),
                })
                .collect(),
            lnf: (to_vec(&p.final_ln_gain), to_vec(&p.final_ln_bias)),
        }
    }

    pub fn embeddings(&self, ids: &[u32]) -> Mat {
        ids.iter().map(|&i| self.wte[i as usize].clone()).collect()
    }

    fn norm(&self, x: &[f64], (g, b): &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let s = (var + self.eps).sqrt();
        x.iter().enumerate().map(|(i, v)| (v - mean) / s * g[i] + b[i]).collect()
    }

    fn affine(x: &[f64], w: &Mat, b: &[f64]) -> Vec<f64> {
        let mut out = b.to_vec();
        for (i, xi) in x.iter().enumerate() {
            for (o, wij) in out.iter_mut().zip(&w[i]) {
                *o += xi * wij;
            }
        }
        out
    }

    fn gelu(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
    }

    /// Logits for rows `0..=last_row` given token-embedding activations.
    pub fn logits(&self, emb: &Mat, last_row: usize) -> Mat {
        let t_len = emb.len();
        let d = emb[0].len();
        let hd = d / self.heads;
        let mut x: Mat = (0..t_len)
            .map(|t| emb[t].iter().zip(&self.wpe[t]).map(|(a, b)| a + b).collect())
            .collect();
        for l in &self.layers {
            let qkv: Mat = x.iter().map(|r| Self::affine(&self.norm(r, &l.ln1), &l.wq, &l.bq)).collect();
            let mut attn = vec![vec![0.0; d]; t_len];
            for h in 0..self.heads {
                for i in 0..t_len {
                    let q = &qkv[i][h * hd..(h + 1) * hd];
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            let k = &qkv[j][d + h * hd..d + (h + 1) * hd];
                            q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for (j, s) in scores.iter().enumerate() {
                        let p = (s - m).exp() / z;
                        for c in 0..hd {
                            attn[i][h * hd + c] += p * qkv[j][2 * d + h * hd + c];
                        }
                    }
                }
            }
            for i in 0..t_len {
                let o = Self::affine(&attn[i], &l.wo, &l.bo);
                for c in 0..d {
                    x[i][c] += o[c];
                }
                let hidden: Vec<f64> = Self::affine(&self.norm(&x[i], &l.ln2), &l.wfc, &l.bfc)
                    .into_iter()
                    .map(Self::gelu)
                    .collect();
                let m = Self::affine(&hidden, &l.wproj, &l.bproj);
                for c in 0..d {
                    x[i][c] += m[c];
                }
            }
        }
        (0..=last_row)
            .map(|i| {
                let y = self.norm(&x[i], &self.lnf);
                self.wte
                    .iter()
                    .map(|w| w.iter().zip(&y).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect()
    }

    /// Teacher-forced loss for `spec` (whose prompt already holds any BOS).
    pub fn loss(&self, emb: &Mat, spec: &TargetSpec) -> f64 {
        let p = spec.prompt_ids.len();
        let masked: Vec<usize> = (0..spec.target_ids.len()).filter(|&t| spec.target_mask[t]).collect();
        let last = p + masked.last().unwrap() - 1;
        let logits = self.logits(emb, last);
        masked
            .iter()
            .map(|&t| {
                let row = &logits[p + t - 1];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[spec.target_ids[t] as usize]
            })
            .sum()
    }
}

/// Passes when within `rel` relative error, or within the absolute floor.
pub fn close(analytic: f64, oracle: f64, rel: f64, abs_floor: f64) -> bool {
    let diff = (analytic - oracle).abs();
    diff <= abs_floor || diff <= rel * analytic.abs().max(oracle.abs())
}
