// SPDX-License-Identifier: MIT OR Apache-2.0

//! Text-level entry points: tokenize, generate and explain strings rather
//! than token ids. The HTTP service and the CLI both go through here, so
//! they produce identical numbers for identical inputs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CancelFlag, Decoding, Model, TargetSpec};
use crate::salience::{self, SalienceMap, SalienceMethod};
use crate::tokenizer::{TokenId, TokenSequence, Vocabulary};

/// A model paired with the vocabulary it was trained on.
#[derive(Debug, Clone)]
pub struct Explainer {
    model: Model,
    vocab: Arc<Vocabulary>,
}

/// Where the explained target comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetInput {
    /// Text, tokenized on its own (tokens never straddle the prompt).
    Text(String),
    /// Exact ids, e.g. a previous generation.
    Ids(Vec<TokenId>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub prompt: TokenSequence,
    pub output: TokenSequence,
}

/// A salience map with the text alignment of both halves of its input.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSalience {
    pub map: SalienceMap,
    pub prompt: TokenSequence,
    pub target: TokenSequence,
}

impl AlignedSalience {
    /// Index of the first target token in `BOS + prompt + target`.
    pub fn target_start(&self) -> usize {
        1 + self.prompt.len()
    }
}

impl Explainer {
    pub fn new(model: Model, vocab: Arc<Vocabulary>) -> Result<Self> {
        if model.config().vocab_size != vocab.len() {
            return Err(Error::Vocabulary(format!(
                "model expects {} tokens but the vocabulary has {}",
                model.config().vocab_size,
                vocab.len()
            )));
        }
        Ok(Self { model, vocab })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        self.vocab.tokenize(text)
    }

    pub fn generate(&self, prompt: &str, decoding: Decoding, max_new: usize, cancel: &CancelFlag) -> Result<Generation> {
        let prompt = self.vocab.tokenize(prompt);
        let ids = salience::generate_continuation(&self.model, &prompt.ids, decoding, max_new, cancel)?;
        let output = self.vocab.decode(&ids)?;
        Ok(Generation { prompt, output })
    }

    /// Explains `target` given `prompt`. `mask` selects target tokens and
    /// defaults to all of them.
    pub fn salience(
        &self,
        prompt: &str,
        target: &TargetInput,
        mask: Option<&[bool]>,
        method: SalienceMethod,
        cancel: &CancelFlag,
    ) -> Result<AlignedSalience> {
        let prompt = self.vocab.tokenize(prompt);
        let target = match target {
            TargetInput::Text(text) => self.vocab.tokenize(text),
            TargetInput::Ids(ids) => self.vocab.decode(ids)?,
        };
        let target_mask = mask.map_or_else(|| vec![true; target.len()], <[bool]>::to_vec);
        let spec = TargetSpec {
            prompt_ids: prompt.ids.clone(),
            target_ids: target.ids.clone(),
            target_mask,
        };
        let detail = salience::salience_detailed(&self.model, &spec, method, cancel)?;
        Ok(AlignedSalience {
            map: detail.map,
            prompt,
            target,
        })
    }
}
