// SPDX-License-Identifier: MIT OR Apache-2.0

//! The versioned JSON shape shared by the CLI export and the HTTP API.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pipeline::AlignedSalience;
use crate::salience::SalienceMethod;
use crate::segmentation::{self, DisplayBasis, Granularity, Region, SegmentedSalience};
use crate::tokenizer::{TokenId, Vocabulary, BOS_ID};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub index: usize,
    pub id: TokenId,
    /// Display form of the token (`<bos>`, `<0xE2>`, or its text).
    pub token: String,
    /// Byte range into `text`.
    pub start: usize,
    pub end: usize,
    pub region: Region,
    pub special: bool,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub first_token: usize,
    pub end_token: usize,
    pub region: Region,
    pub special: bool,
    pub text: String,
    pub raw: f64,
    pub display: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalienceReport {
    pub schema_version: u32,
    pub method: SalienceMethod,
    pub granularity: Granularity,
    pub gamma: f64,
    pub basis: DisplayBasis,
    /// Prompt followed by target.
    pub text: String,
    /// Byte offset where the target starts in `text`.
    pub target_offset: usize,
    pub target_mask: Vec<bool>,
    pub tokens: Vec<TokenRecord>,
    pub segments: Vec<SegmentRecord>,
    pub token_total: f64,
    pub segment_total: f64,
}

impl SalienceReport {
    pub fn build(
        aligned: &AlignedSalience,
        vocab: &Vocabulary,
        granularity: &Granularity,
        gamma: f64,
        basis: DisplayBasis,
    ) -> Result<Self> {
        let segments = segmentation::segment(&aligned.prompt, &aligned.target, granularity)?;
        let seg = segmentation::aggregate(&aligned.map, &segments)?;
        let seg = segmentation::normalize_with_basis(&seg, gamma, basis)?;
        Self::assemble(aligned, vocab, granularity, &seg)
    }

    fn assemble(
        aligned: &AlignedSalience,
        vocab: &Vocabulary,
        granularity: &Granularity,
        seg: &SegmentedSalience,
    ) -> Result<Self> {
        let text = format!("{}{}", aligned.prompt.source, aligned.target.source);
        let target_offset = aligned.prompt.source.len();
        let scores = &aligned.map.scores;
        let mut tokens = Vec::with_capacity(scores.len());
        tokens.push(TokenRecord {
            index: 0,
            id: BOS_ID,
            token: vocab.token_display(BOS_ID)?,
            start: 0,
            end: 0,
            region: Region::Prompt,
            special: true,
            score: scores[0],
        });
        let halves = [
            (&aligned.prompt, Region::Prompt, 0),
            (&aligned.target, Region::Target, target_offset),
        ];
        for (seq, region, base) in halves {
            for (&id, &(s, e)) in seq.ids.iter().zip(&seq.offsets) {
                let index = tokens.len();
                tokens.push(TokenRecord {
                    index,
                    id,
                    token: vocab.token_display(id)?,
                    start: base + s,
                    end: base + e,
                    region,
                    special: false,
                    score: scores[index],
                });
            }
        }
        let segments = seg
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| SegmentRecord {
                index: i,
                start: s.start,
                end: s.end,
                first_token: s.first_token,
                end_token: s.end_token,
                region: s.region,
                special: s.special,
                text: text[s.start..s.end].to_owned(),
                raw: seg.raw[i],
                display: seg.display[i],
            })
            .collect();
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            method: aligned.map.method,
            granularity: granularity.clone(),
            gamma: seg.gamma,
            basis: seg.basis,
            text,
            target_offset,
            target_mask: aligned.map.spec.target_mask.clone(),
            tokens,
            segments,
            token_total: scores.iter().map(|&s| f64::from(s)).sum(),
            segment_total: seg.total(),
        })
    }

    pub fn token_scores(&self) -> Vec<f32> {
        self.tokens.iter().map(|t| t.score).collect()
    }
}
