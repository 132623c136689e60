// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tokenizer::TokenId;

/// How the next token is chosen at each step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Decoding {
    #[default]
    Greedy,
    Temperature { temperature: f32, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub decoding: Decoding,
    pub max_new: usize,
    /// Decoding stops after this token; it is not part of the output.
    pub stop_token: Option<TokenId>,
    /// Tokens that are never produced (e.g. BOS and PAD).
    pub suppress: Vec<TokenId>,
}

impl GenerateOptions {
    pub fn greedy(max_new: usize) -> Self {
        Self {
            decoding: Decoding::Greedy,
            max_new,
            stop_token: None,
            suppress: Vec::new(),
        }
    }
}

pub(crate) struct Sampler {
    decoding: Decoding,
    rng: Option<ChaCha8Rng>,
}

impl Sampler {
    pub fn new(decoding: Decoding) -> Self {
        let rng = match decoding {
            Decoding::Greedy => None,
            Decoding::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Self { decoding, rng }
    }

    pub fn pick(&mut self, logits: &[f32], suppress: &[TokenId]) -> TokenId {
        let allowed = |i: usize| !suppress.contains(&(i as TokenId));
        match (self.decoding, self.rng.as_mut()) {
            (Decoding::Temperature { temperature, .. }, Some(rng)) if temperature > 0.0 => {
                let max = logits
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| allowed(i))
                    .map(|(_, &l)| l)
                    .fold(f32::NEG_INFINITY, f32::max);
                let weights: Vec<f64> = logits
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| {
                        if allowed(i) {
                            f64::from((l - max) / temperature).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut last_allowed = 0;
                for (i, w) in weights.iter().enumerate() {
                    if *w > 0.0 {
                        last_allowed = i;
                        if u < *w {
                            return i as TokenId;
                        }
                        u -= w;
                    }
                }
                last_allowed as TokenId
            }
            _ => {
                // first maximum wins ties
                let mut best = None;
                for (i, &l) in logits.iter().enumerate() {
                    if allowed(i) && best.map_or(true, |(_, b)| l > b) {
                        best = Some((i, l));
                    }
                }
                best.map_or(0, |(i, _)| i as TokenId)
            }
        }
    }
}
