// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use crate::error::{Error, Result};

const INIT_SCALE: f32 = 0.02;

/// Weights for one transformer block. Matrices are row-major `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    /// `(d_model, 3 * d_model)`: query, key and value projections side by side.
    pub qkv_weight: Vec<f32>,
    pub qkv_bias: Vec<f32>,
    pub attn_out_weight: Vec<f32>,
    pub attn_out_bias: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub fc_weight: Vec<f32>,
    pub fc_bias: Vec<f32>,
    pub proj_weight: Vec<f32>,
    pub proj_bias: Vec<f32>,
}

/// All model weights. The output projection is tied to `token_embedding`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    /// `(vocab_size, d_model)`
    pub token_embedding: Vec<f32>,
    /// `(max_seq_len, d_model)`
    pub position_embedding: Vec<f32>,
    pub layers: Vec<LayerParams>,
    pub final_ln_gain: Vec<f32>,
    pub final_ln_bias: Vec<f32>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Canonical tensor order, names and shapes for a config.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let f = config.d_ff;
    let mut out = vec![
        ("token_embedding".to_owned(), vec![config.vocab_size, d], Init::Normal),
        ("position_embedding".to_owned(), vec![config.max_seq_len, d], Init::Normal),
    ];
    for l in 0..config.n_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        out.extend([
            (p("ln1_gain"), vec![d], Init::Ones),
            (p("ln1_bias"), vec![d], Init::Zeros),
            (p("qkv_weight"), vec![d, 3 * d], Init::Normal),
            (p("qkv_bias"), vec![3 * d], Init::Zeros),
            (p("attn_out_weight"), vec![d, d], Init::Normal),
            (p("attn_out_bias"), vec![d], Init::Zeros),
            (p("ln2_gain"), vec![d], Init::Ones),
            (p("ln2_bias"), vec![d], Init::Zeros),
            (p("fc_weight"), vec![d, f], Init::Normal),
            (p("fc_bias"), vec![f], Init::Zeros),
            (p("proj_weight"), vec![f, d], Init::Normal),
            (p("proj_bias"), vec![d], Init::Zeros),
        ]);
    }
    out.push(("final_ln_gain".to_owned(), vec![d], Init::Ones));
    out.push(("final_ln_bias".to_owned(), vec![d], Init::Zeros));
    out
}

impl ModelParameters {
    /// Names and shapes of every tensor, in serialization order.
    pub fn tensor_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        layout(config).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    /// Embeddings and weight matrices drawn from N(0, 1) scaled by 0.02; layer
    /// norm gains are one and every bias is zero.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(&config)
            .into_iter()
            .map(|(_, shape, init)| {
                let n: usize = shape.iter().product();
                match init {
                    Init::Normal => (0..n)
                        .map(|_| {
                            let z: f32 = StandardNormal.sample(&mut rng);
                            z * INIT_SCALE
                        })
                        .collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                }
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    pub fn zeros_like(config: ModelConfig) -> Self {
        let tensors = layout(&config)
            .into_iter()
            .map(|(_, shape, _)| vec![0.0; shape.iter().product()])
            .collect();
        Self::from_tensors(config, tensors).expect("layout matches config")
    }

    /// Assembles parameters from flat tensors in [`Self::tensor_shapes`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::tensor_shapes(&config);
        if tensors.len() != shapes.len() {
            return Err(Error::Weights(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            let expected: usize = shape.iter().product();
            if t.len() != expected {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: vec![t.len()],
                });
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let position_embedding = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: next(),
                ln1_bias: next(),
                qkv_weight: next(),
                qkv_bias: next(),
                attn_out_weight: next(),
                attn_out_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                fc_weight: next(),
                fc_bias: next(),
                proj_weight: next(),
                proj_bias: next(),
            })
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_ln_gain: next(),
            final_ln_bias: next(),
        })
    }

    /// Tensors in serialization order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend([
                &l.ln1_gain[..],
                &l.ln1_bias,
                &l.qkv_weight,
                &l.qkv_bias,
                &l.attn_out_weight,
                &l.attn_out_bias,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.fc_weight,
                &l.fc_bias,
                &l.proj_weight,
                &l.proj_bias,
            ]);
        }
        out.push(&self.final_ln_gain);
        out.push(&self.final_ln_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> =
            vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain[..],
                &mut l.ln1_bias,
                &mut l.qkv_weight,
                &mut l.qkv_bias,
                &mut l.attn_out_weight,
                &mut l.attn_out_bias,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.fc_weight,
                &mut l.fc_bias,
                &mut l.proj_weight,
                &mut l.proj_bias,
            ]);
        }
        out.push(&mut self.final_ln_gain);
        out.push(&mut self.final_ln_bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Token-embedding row for one id.
    pub fn embedding(&self, id: usize) -> &[f32] {
        let d = self.config.d_model;
        &self.token_embedding[id * d..(id + 1) * d]
    }
}
