// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared inputs for the benchmarks.

use promptlens_core::{Model, ModelConfig, TargetSpec, Vocabulary};

/// The default toy architecture with a byte-level vocabulary.
pub fn toy_model(max_seq_len: usize) -> Model {
    let config = ModelConfig {
        vocab_size: Vocabulary::bytes_only().len(),
        max_seq_len,
        ..ModelConfig::default()
    };
    Model::init_random(config, 0).expect("valid config")
}

/// A spec of `len` tokens (BOS excluded), three quarters prompt.
pub fn spec(len: usize) -> TargetSpec {
    let ids: Vec<u32> = (0..len as u32).map(|i| 97 + i % 26).collect();
    let split = len * 3 / 4;
    TargetSpec::full(ids[..split].to_vec(), ids[split..].to_vec())
}

pub const TEXT: &str = "The quick brown fox jumps over the lazy dog. It was not amused.\n\
Meanwhile, the dog slept on; nothing could wake it!\n\n\
A new paragraph begins here. Does it end? Yes.\n";
