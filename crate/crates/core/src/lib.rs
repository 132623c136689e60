// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt debugging with gradient-based input salience.
//!
//! The pieces, bottom-up:
//!
//! - [`tokenizer`]: greedy longest-match subwords with byte fallback and
//!   byte offsets back into the source text;
//! - [`model`]: a small causal transformer with a hand-written backward pass
//!   to the token-embedding activations;
//! - [`salience`]: `grad_l2` and `grad_dot_input` scores for a masked target;
//! - [`segmentation`]: word/sentence/line/paragraph/custom aggregation and
//!   display scaling;
//! - [`pipeline`] and [`report`]: string-level calls and the export schema
//!   shared by the CLI and the HTTP service;
//! - [`fixture`]: synthetic tasks and a training loop for test models.

pub mod error;
pub mod fixture;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod salience;
pub mod segmentation;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{CancelFlag, Decoding, ForwardTrace, Model, ModelConfig, ModelParameters, TargetSpec};
pub use pipeline::{AlignedSalience, Explainer, Generation, TargetInput};
pub use report::SalienceReport;
pub use salience::{SalienceMap, SalienceMethod};
pub use segmentation::{DisplayBasis, Granularity, Region, Segment, SegmentedSalience};
pub use tokenizer::{TokenId, TokenSequence, Vocabulary};
