// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic tasks and a small Adam training loop.
//!
//! This exists to produce test models that actually attend somewhere
//! meaningful (a copying model should find the token it copies). It reuses
//! the same forward and backward code the salience engine uses.
//!
//! Both tasks use the byte-level vocabulary: lowercase letters are symbols,
//! digits are values and `|` separates the query from the answer.
//!
//! - copy: `a q f … |` → `a q f …`
//! - key-value recall: `k1 v1 k2 v2 … | kq` → `vq`

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logit_gradient, run_backward, run_forward, Model, ModelConfig, ModelParameters, TargetSpec};
use crate::tokenizer::{TokenId, BOS_ID, FIRST_TEXT_ID};

const SEPARATOR: TokenId = b'|' as TokenId;

fn letters() -> Vec<TokenId> {
    (b'a'..=b'z').map(TokenId::from).collect()
}

fn digits() -> Vec<TokenId> {
    (b'0'..=b'9').map(TokenId::from).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Repeat `length` distinct letters after the separator.
    Copy { length: usize },
    /// Recall the digit paired with the queried letter among `pairs` pairs.
    KeyValue { pairs: usize },
}

impl Task {
    /// Prompt length plus target length, BOS included.
    pub fn sequence_len(&self) -> usize {
        match *self {
            Task::Copy { length } => 2 * length + 2,
            Task::KeyValue { pairs } => 2 * pairs + 4,
        }
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        let ok = match *self {
            Task::Copy { length } => (1..=26).contains(&length),
            Task::KeyValue { pairs } => (1..=26).contains(&pairs),
        };
        if !ok {
            return Err(Error::Config(format!("task {self} needs between 1 and 26 symbols")));
        }
        if self.sequence_len() > config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.sequence_len(),
                limit: config.max_seq_len,
            });
        }
        if config.vocab_size < FIRST_TEXT_ID as usize {
            return Err(Error::Config("fixture tasks need the byte-level vocabulary".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Example {
        match *self {
            Task::Copy { length } => {
                let mut symbols = letters();
                symbols.shuffle(rng);
                symbols.truncate(length);
                let mut prompt = symbols.clone();
                prompt.push(SEPARATOR);
                Example {
                    prompt,
                    // +1 for BOS
                    sources: (0..length).map(|i| i + 1).collect(),
                    target: symbols,
                }
            }
            Task::KeyValue { pairs } => {
                let mut keys = letters();
                keys.shuffle(rng);
                keys.truncate(pairs);
                let values: Vec<TokenId> = (0..pairs)
                    .map(|_| *digits().choose(rng).expect("non-empty"))
                    .collect();
                let query = rng.random_range(0..pairs);
                let mut prompt = Vec::with_capacity(2 * pairs + 2);
                for (k, v) in keys.iter().zip(&values) {
                    prompt.push(*k);
                    prompt.push(*v);
                }
                prompt.push(SEPARATOR);
                prompt.push(keys[query]);
                Example {
                    prompt,
                    target: vec![values[query]],
                    sources: vec![2 * query + 2],
                }
            }
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Copy { length } => write!(f, "copy:{length}"),
            Task::KeyValue { pairs } => write!(f, "key-value:{pairs}"),
        }
    }
}

impl FromStr for Task {
    type Err = String;

    /// `copy`, `copy:<length>`, `key-value` or `key-value:<pairs>`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (name, size) = match s.split_once(':') {
            Some((n, k)) => (n, Some(k.parse::<usize>().map_err(|e| format!("bad task size: {e}"))?)),
            None => (s, None),
        };
        match name {
            "copy" => Ok(Task::Copy { length: size.unwrap_or(8) }),
            "key-value" | "kv" | "key_value" => Ok(Task::KeyValue { pairs: size.unwrap_or(4) }),
            other => Err(format!("unknown task {other:?} (expected copy or key-value)")),
        }
    }
}

/// One task instance. Ids exclude BOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
    /// For each target token, the index in `BOS + prompt` it is read from.
    pub sources: Vec<usize>,
}

impl Example {
    pub fn spec(&self) -> TargetSpec {
        TargetSpec::full(self.prompt.clone(), self.target.clone())
    }

    fn spec_with_bos(&self) -> TargetSpec {
        let mut prompt = vec![BOS_ID];
        prompt.extend_from_slice(&self.prompt);
        TargetSpec::full(prompt, self.target.clone())
    }
}

/// Held-out examples come from their own stream, separate from training.
pub fn held_out_examples(task: Task, seed: u64, n: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f4_e1d0_u64);
    (0..n).map(|_| task.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: Task,
    pub seed: u64,
    /// Step budget.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub eval_every: usize,
    pub eval_examples: usize,
    /// Training stops once held-out accuracy reaches this.
    pub target_accuracy: f64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, task: Task, seed: u64, steps: usize) -> Self {
        Self {
            model,
            task,
            seed,
            steps,
            batch_size: 16,
            learning_rate: 3e-3,
            eval_every: 50,
            eval_examples: 200,
            target_accuracy: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f32,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub steps_run: usize,
    pub accuracy: f64,
    pub reached_target: bool,
    pub log: Vec<LogEntry>,
}

/// Fraction of target tokens the model predicts exactly (teacher forced,
/// argmax).
pub fn evaluate(params: &ModelParameters, examples: &[Example]) -> Result<f64> {
    let results: Vec<Result<(usize, usize)>> = examples
        .par_iter()
        .map(|ex| {
            let spec = ex.spec_with_bos();
            let trace = run_forward(params, &spec.combined_ids(), &mut |_| {})?;
            let correct = (0..ex.target.len())
                .filter(|&t| {
                    let row = trace.logits_at(spec.prompt_ids.len() + t - 1);
                    argmax(row) == ex.target[t] as usize
                })
                .count();
            Ok((correct, ex.target.len()))
        })
        .collect();
    let (mut correct, mut total) = (0, 0);
    for r in results {
        let (c, t) = r?;
        correct += c;
        total += t;
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Adam {
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: i32,
}

impl Adam {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.98;
    const EPS: f32 = 1e-8;

    fn new(params: &ModelParameters) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            second: zeros.clone(),
            first: zeros,
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParameters, grads: &ModelParameters, lr: f32) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let grads = grads.tensors();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn example_gradient(params: &ModelParameters, ex: &Example) -> Result<(f32, ModelParameters)> {
    let spec = ex.spec_with_bos();
    let trace = run_forward(params, &spec.combined_ids(), &mut |_| {})?;
    let loss = crate::model::teacher_forced_loss(&trace, &spec)?;
    let d_logits = logit_gradient(&trace, &spec)?;
    let mut grads = ModelParameters::zeros_like(params.config);
    run_backward(params, &trace, &d_logits, Some(&mut grads));
    Ok((loss, grads))
}

/// Trains until held-out accuracy reaches the target or the step budget runs
/// out. Fully deterministic for a given config. `on_log` sees every
/// evaluation point.
pub fn train(config: &TrainConfig, mut on_log: impl FnMut(&LogEntry)) -> Result<TrainOutcome> {
    config.model.validate()?;
    config.task.validate(&config.model)?;
    let mut params = ModelParameters::init_random(config.model, config.seed)?;
    let held_out = held_out_examples(config.task, config.seed, config.eval_examples);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(&params);
    let mut log = Vec::new();
    let tokens_per_batch = (config.batch_size * config.task.sample(&mut rng.clone()).target.len()) as f32;

    let mut accuracy = evaluate(&params, &held_out)?;
    let mut steps_run = 0;
    let entry = LogEntry { step: 0, loss: f32::NAN, accuracy: Some(accuracy) };
    on_log(&entry);
    log.push(entry);

    while steps_run < config.steps && accuracy < config.target_accuracy {
        let batch: Vec<Example> = (0..config.batch_size).map(|_| config.task.sample(&mut rng)).collect();
        let results: Vec<Result<(f32, ModelParameters)>> =
            batch.par_iter().map(|ex| example_gradient(&params, ex)).collect();
        let mut total = ModelParameters::zeros_like(params.config);
        let mut loss = 0.0f32;
        for r in results {
            let (l, g) = r?;
            loss += l;
            for (acc, t) in total.tensors_mut().into_iter().zip(g.tensors()) {
                for (a, &v) in acc.iter_mut().zip(t) {
                    *a += v / tokens_per_batch;
                }
            }
        }
        loss /= tokens_per_batch;
        steps_run += 1;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: steps_run });
        }
        adam.update(&mut params, &total, config.learning_rate);
        if !params.is_finite() {
            return Err(Error::Diverged { step: steps_run });
        }
        let eval_now = steps_run % config.eval_every.max(1) == 0 || steps_run == config.steps;
        if eval_now {
            accuracy = evaluate(&params, &held_out)?;
        }
        let entry = LogEntry {
            step: steps_run,
            loss,
            accuracy: eval_now.then_some(accuracy),
        };
        if eval_now {
            on_log(&entry);
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        params,
        steps_run,
        accuracy,
        reached_target: accuracy >= config.target_accuracy,
        log,
    })
}

/// Convenience: wrap trained parameters as a [`Model`].
pub fn into_model(outcome: TrainOutcome) -> Result<Model> {
    Model::new(outcome.params)
}
