// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by tokenization, the model, salience and segmentation.
#[derive(Debug, Error)]
#[non_exhaustive]
pub enum Error {
    /// A token id is outside the vocabulary (or the model's embedding table).
    #[error("unknown token id {id} (vocabulary size {vocab_size})")]
    UnknownToken { id: u32, vocab_size: usize },

    /// The vocabulary file or in-memory vocabulary is malformed.
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    /// A model configuration violates its invariants.
    #[error("invalid model config: {0}")]
    Config(String),

    /// A sequence does not fit in the model's context window.
    #[error("sequence of {len} tokens exceeds the model limit of {limit} (max_seq_len)")]
    SequenceTooLong { len: usize, limit: usize },

    /// A target mask selects nothing to explain.
    #[error("target mask is empty: select at least one target token to explain")]
    EmptyMask,

    /// A target specification is inconsistent.
    #[error("invalid target spec: {0}")]
    TargetSpec(String),

    /// Generation produced no tokens.
    #[error("generation is empty (the model emitted end-of-sequence immediately); increase max_new or supply an explicit target")]
    EmptyGeneration,

    /// A tensor in a weights file does not match the manifest config.
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// A weights file is malformed.
    #[error("invalid weights file: {0}")]
    Weights(String),

    /// A custom segmentation pattern failed to compile.
    #[error("invalid segmentation pattern: {0}")]
    Pattern(#[from] regex::Error),

    /// A segment selection touches the prompt.
    #[error("only output segments can be explained (segment {0} is in the prompt)")]
    PromptSelection(usize),

    /// Segment or selection index out of range.
    #[error("segment index {index} out of range ({len} segments)")]
    SegmentIndex { index: usize, len: usize },

    /// Display intensity must be finite and positive.
    #[error("display intensity (gamma) must be positive and finite, got {0}")]
    InvalidGamma(f64),

    /// Internal invariant breach (e.g. segments do not partition the tokens).
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step} (loss is not finite)")]
    Diverged { step: usize },

    /// Work was abandoned because the caller went away.
    #[error("computation cancelled")]
    Cancelled,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::UnknownToken { .. } => "unknown_token",
            Error::Vocabulary(_) => "invalid_vocabulary",
            Error::Config(_) => "invalid_config",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::EmptyMask => "empty_mask",
            Error::TargetSpec(_) => "invalid_target",
            Error::EmptyGeneration => "empty_generation",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Weights(_) => "invalid_weights",
            Error::Pattern(_) => "invalid_pattern",
            Error::PromptSelection(_) => "prompt_selection",
            Error::SegmentIndex { .. } => "segment_index",
            Error::InvalidGamma(_) => "invalid_gamma",
            Error::Invariant(_) => "invariant",
            Error::Diverged { .. } => "diverged",
            Error::Cancelled => "cancelled",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// True for errors caused by the request rather than the system.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::UnknownToken { .. }
                | Error::SequenceTooLong { .. }
                | Error::EmptyMask
                | Error::TargetSpec(_)
                | Error::EmptyGeneration
                | Error::Pattern(_)
                | Error::PromptSelection(_)
                | Error::SegmentIndex { .. }
                | Error::InvalidGamma(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
