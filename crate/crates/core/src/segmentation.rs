// SPDX-License-Identifier: MIT OR Apache-2.0

//! Grouping tokens into words, sentences, lines, paragraphs or custom units,
//! summing their scores, and scaling the sums for display.
//!
//! Boundaries are found on the text, then each token joins the segment that
//! contains its first non-whitespace character (its first character when it
//! is all whitespace). Segments that end up with no tokens disappear, and a
//! segment's text runs from its first token to the next segment's first
//! token, so the segments tile the source exactly. Prompt and target are
//! segmented independently; position 0 is always a lone BOS segment.
//!
//! Rules:
//! - word: a segment starts at every non-whitespace character that follows
//!   whitespace; punctuation stays with its word.
//! - sentence: after `.`, `!` or `?` followed by whitespace, the next
//!   non-whitespace character starts a segment.
//! - line: the character after each `\n` starts a segment.
//! - paragraph: the first character after a run containing a blank line
//!   starts a segment.
//! - custom: every match of the pattern starts a segment.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::salience::SalienceMap;
use crate::tokenizer::TokenSequence;

/// Serialized as its string form (`word`, `custom:<regex>`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Granularity {
    Token,
    Word,
    Sentence,
    Line,
    Paragraph,
    /// Regular expression whose matches start new segments.
    Custom(String),
}

impl Granularity {
    pub const BUILTIN: [Granularity; 5] = [
        Granularity::Token,
        Granularity::Word,
        Granularity::Sentence,
        Granularity::Line,
        Granularity::Paragraph,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Token => "token",
            Self::Word => "word",
            Self::Sentence => "sentence",
            Self::Line => "line",
            Self::Paragraph => "paragraph",
            Self::Custom(_) => "custom",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Custom(p) => write!(f, "custom:{p}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for Granularity {
    type Err = String;

    /// `token`, `word`, `sentence`, `line`, `paragraph` or `custom:<regex>`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "token" => Self::Token,
            "word" => Self::Word,
            "sentence" => Self::Sentence,
            "line" => Self::Line,
            "paragraph" => Self::Paragraph,
            other => match other.strip_prefix("custom:") {
                Some(p) => Self::Custom(p.to_owned()),
                None => return Err(format!("unknown granularity {other:?}")),
            },
        })
    }
}

impl TryFrom<String> for Granularity {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Granularity> for String {
    fn from(g: Granularity) -> Self {
        g.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Prompt,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// Byte range into `prompt.source + target.source`.
    pub start: usize,
    pub end: usize,
    /// Token index range into `BOS + prompt + target`.
    pub first_token: usize,
    pub end_token: usize,
    pub region: Region,
    /// Set for the BOS segment, which has no text.
    pub special: bool,
}

impl Segment {
    pub fn token_count(&self) -> usize {
        self.end_token - self.first_token
    }
}

/// Segment boundaries (byte positions > 0) for one text.
fn boundaries(text: &str, granularity: &Granularity) -> Result<Vec<usize>> {
    static PARAGRAPH: OnceLock<Regex> = OnceLock::new();
    let bytes = text.as_bytes();
    let after_whitespace_run = |mut i: usize| {
        for c in text[i..].chars() {
            if !c.is_whitespace() {
                break;
            }
            i += c.len_utf8();
        }
        i
    };
    let mut out = Vec::new();
    match granularity {
        Granularity::Token => {}
        Granularity::Word => {
            let mut prev_ws = false;
            for (i, c) in text.char_indices() {
                if i > 0 && prev_ws && !c.is_whitespace() {
                    out.push(i);
                }
                prev_ws = c.is_whitespace();
            }
        }
        Granularity::Sentence => {
            for (i, c) in text.char_indices() {
                if matches!(c, '.' | '!' | '?') {
                    let next = i + 1;
                    if text[next..].starts_with(char::is_whitespace) {
                        let start = after_whitespace_run(next);
                        if start < bytes.len() {
                            out.push(start);
                        }
                    }
                }
            }
        }
        Granularity::Line => {
            for (i, &b) in bytes.iter().enumerate() {
                if b == b'\n' && i + 1 < bytes.len() {
                    out.push(i + 1);
                }
            }
        }
        Granularity::Paragraph => {
            let re = PARAGRAPH.get_or_init(|| Regex::new(r"\n[^\S\n]*\n\s*").expect("valid regex"));
            for m in re.find_iter(text) {
                if m.end() < bytes.len() {
                    out.push(m.end());
                }
            }
        }
        Granularity::Custom(pattern) => {
            let re = Regex::new(pattern)?;
            for m in re.find_iter(text) {
                if m.start() > 0 {
                    out.push(m.start());
                }
            }
        }
    }
    out.dedup();
    Ok(out)
}

/// Where a token is anchored for segment assignment.
fn anchor(text: &str, (start, end): (usize, usize)) -> usize {
    let mut p = start;
    while p < end {
        if !text.is_char_boundary(p) {
            // inside a multi-byte character: not whitespace
            return p;
        }
        let c = text[p..].chars().next().expect("p < len");
        if !c.is_whitespace() {
            return p;
        }
        p += c.len_utf8();
    }
    start
}

fn segment_region(
    seq: &TokenSequence,
    granularity: &Granularity,
    region: Region,
    token_base: usize,
    char_base: usize,
    out: &mut Vec<Segment>,
) -> Result<()> {
    if seq.is_empty() {
        // compile custom patterns even for empty text so errors are uniform
        boundaries("", granularity)?;
        return Ok(());
    }
    let bounds = boundaries(&seq.source, granularity)?;
    let group_of = |i: usize| -> usize {
        match granularity {
            Granularity::Token => i,
            _ => bounds.partition_point(|&b| b <= anchor(&seq.source, seq.offsets[i])),
        }
    };
    let mut first = 0;
    let mut group = group_of(0);
    for i in 1..=seq.len() {
        let next_group = (i < seq.len()).then(|| group_of(i));
        if next_group != Some(group) {
            let end = if i < seq.len() {
                seq.offsets[i].0
            } else {
                seq.source.len()
            };
            out.push(Segment {
                start: char_base + seq.offsets[first].0,
                end: char_base + end,
                first_token: token_base + first,
                end_token: token_base + i,
                region,
                special: false,
            });
            first = i;
            if let Some(g) = next_group {
                group = g;
            }
        }
    }
    Ok(())
}

/// Segments over `BOS + prompt + target`.
pub fn segment(prompt: &TokenSequence, target: &TokenSequence, granularity: &Granularity) -> Result<Vec<Segment>> {
    let mut out = vec![Segment {
        start: 0,
        end: 0,
        first_token: 0,
        end_token: 1,
        region: Region::Prompt,
        special: true,
    }];
    segment_region(prompt, granularity, Region::Prompt, 1, 0, &mut out)?;
    segment_region(
        target,
        granularity,
        Region::Target,
        1 + prompt.len(),
        prompt.source.len(),
        &mut out,
    )?;
    Ok(out)
}

/// What display values are computed from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplayBasis {
    /// Summed segment scores.
    #[default]
    Sum,
    /// Per-token mean of each segment. Opt-in; not the default view.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedSalience {
    pub segments: Vec<Segment>,
    /// Sum of member token scores, one per segment.
    pub raw: Vec<f64>,
    /// Scaled values in `[-1, 1]` (`[0, 1]` for nonnegative methods).
    pub display: Vec<f64>,
    pub gamma: f64,
    pub basis: DisplayBasis,
}

impl SegmentedSalience {
    pub fn total(&self) -> f64 {
        self.raw.iter().sum()
    }
}

fn check_partition(segments: &[Segment], n_tokens: usize) -> Result<()> {
    let mut cursor = 0;
    for (i, s) in segments.iter().enumerate() {
        if s.first_token != cursor || s.end_token <= s.first_token {
            return Err(Error::Invariant(format!(
                "segment {i} covers tokens {}..{} but the next token is {cursor}",
                s.first_token, s.end_token
            )));
        }
        cursor = s.end_token;
    }
    if cursor != n_tokens {
        return Err(Error::Invariant(format!(
            "segments cover {cursor} of {n_tokens} tokens"
        )));
    }
    Ok(())
}

/// Sums token scores per segment. Display values are left at γ = 1 over the
/// sums; call [`normalize_for_display`] to change that.
pub fn aggregate(map: &SalienceMap, segments: &[Segment]) -> Result<SegmentedSalience> {
    aggregate_scores(&map.scores, segments)
}

/// [`aggregate`] for bare token scores, e.g. re-ingested from an export.
pub fn aggregate_scores(scores: &[f32], segments: &[Segment]) -> Result<SegmentedSalience> {
    check_partition(segments, scores.len())?;
    let raw: Vec<f64> = segments
        .iter()
        .map(|s| scores[s.first_token..s.end_token].iter().map(|&v| f64::from(v)).sum())
        .collect();
    let display = scale(&raw, 1.0);
    Ok(SegmentedSalience {
        segments: segments.to_vec(),
        raw,
        display,
        gamma: 1.0,
        basis: DisplayBasis::Sum,
    })
}

/// `sign(v) · (|v| / max|v|)^γ`; all zeros stay zero.
fn scale(values: &[f64], gamma: f64) -> Vec<f64> {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|&v| v.signum() * (v.abs() / max).powf(gamma))
        .collect()
}

/// Recomputes display values with colormap intensity `gamma` (> 0). Larger
/// γ emphasizes the top segments, smaller γ lifts diffuse attributions.
pub fn normalize_for_display(seg: &SegmentedSalience, gamma: f64) -> Result<SegmentedSalience> {
    normalize_with_basis(seg, gamma, seg.basis)
}

pub fn normalize_with_basis(seg: &SegmentedSalience, gamma: f64, basis: DisplayBasis) -> Result<SegmentedSalience> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidGamma(gamma));
    }
    let values: Vec<f64> = match basis {
        DisplayBasis::Sum => seg.raw.clone(),
        DisplayBasis::Mean => seg
            .raw
            .iter()
            .zip(&seg.segments)
            .map(|(r, s)| r / s.token_count() as f64)
            .collect(),
    };
    Ok(SegmentedSalience {
        display: scale(&values, gamma),
        gamma,
        basis,
        ..seg.clone()
    })
}

/// Target mask covering every token of the selected segments.
/// `target_start` is the index of the first target token in the combined
/// sequence.
pub fn segment_selection_to_mask(
    segments: &[Segment],
    selected: &[usize],
    target_start: usize,
    target_len: usize,
) -> Result<Vec<bool>> {
    let mut mask = vec![false; target_len];
    for &index in selected {
        let seg = segments.get(index).ok_or(Error::SegmentIndex {
            index,
            len: segments.len(),
        })?;
        if seg.region != Region::Target {
            return Err(Error::PromptSelection(index));
        }
        for t in seg.first_token..seg.end_token {
            mask[t - target_start] = true;
        }
    }
    Ok(mask)
}

/// Indices of the segments that contain any masked target token.
pub fn covering_segments(segments: &[Segment], mask: &[bool], target_start: usize) -> Vec<usize> {
    segments
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            s.region == Region::Target
                && (s.first_token..s.end_token).any(|t| mask.get(t - target_start).copied().unwrap_or(false))
        })
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TargetSpec;
    use crate::salience::SalienceMethod;
    use crate::tokenizer::Vocabulary;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["hello", " world", "wor", "ld.", " B", "A.", "\n\n", " the", "ing"]).unwrap()
    }

    fn texts(seg: &[Segment], full: &str) -> Vec<String> {
        seg.iter().map(|s| full[s.start..s.end].to_owned()).collect()
    }

    #[test]
    fn one_word_is_one_segment() {
        let v = vocab();
        let prompt = v.tokenize("helloing");
        let segs = segment(&prompt, &TokenSequence::empty(), &Granularity::Word).unwrap();
        assert_eq!(segs.len(), 2);
        assert!(segs[0].special);
        assert_eq!((segs[1].first_token, segs[1].end_token), (1, 1 + prompt.len()));
    }

    #[test]
    fn two_sentences() {
        let v = vocab();
        let prompt = v.tokenize("A. B.");
        let segs = segment(&prompt, &TokenSequence::empty(), &Granularity::Sentence).unwrap();
        assert_eq!(texts(&segs[1..], "A. B."), vec!["A.", " B."]);
    }

    #[test]
    fn words_keep_punctuation_and_tile_the_text() {
        let v = Vocabulary::bytes_only();
        let text = "Hi, there!  How are\tyou?";
        let prompt = v.tokenize(text);
        let segs = segment(&prompt, &TokenSequence::empty(), &Granularity::Word).unwrap();
        assert_eq!(texts(&segs[1..], text), vec!["Hi, ", "there!  ", "How ", "are\t", "you?"]);
    }

    #[test]
    fn leading_space_tokens_join_the_word_they_introduce() {
        let v = vocab();
        let prompt = v.tokenize("hello world");
        let segs = segment(&prompt, &TokenSequence::empty(), &Granularity::Word).unwrap();
        assert_eq!(texts(&segs[1..], "hello world"), vec!["hello", " world"]);
    }

    #[test]
    fn lines_and_paragraphs() {
        let v = Vocabulary::bytes_only();
        let text = "a b\nc\n\n  d e\nf\n";
        let prompt = v.tokenize(text);
        let lines = segment(&prompt, &TokenSequence::empty(), &Granularity::Line).unwrap();
        assert_eq!(texts(&lines[1..], text), vec!["a b\n", "c\n", "\n", "  d e\n", "f\n"]);
        let paras = segment(&prompt, &TokenSequence::empty(), &Granularity::Paragraph).unwrap();
        assert_eq!(texts(&paras[1..], text), vec!["a b\nc\n\n  ", "d e\nf\n"]);
    }

    #[test]
    fn custom_pattern_and_bad_pattern() {
        let v = Vocabulary::bytes_only();
        let text = "Q: one A: two Q: three";
        let prompt = v.tokenize(text);
        let segs = segment(&prompt, &TokenSequence::empty(), &Granularity::Custom("[QA]:".into())).unwrap();
        assert_eq!(texts(&segs[1..], text), vec!["Q: one ", "A: two ", "Q: three"]);
        let err = segment(&prompt, &TokenSequence::empty(), &Granularity::Custom("(".into())).unwrap_err();
        assert!(matches!(err, Error::Pattern(_)));
    }

    #[test]
    fn prompt_and_target_never_share_a_segment() {
        let v = vocab();
        let prompt = v.tokenize("hello wor");
        let target = v.tokenize("ld. B");
        let segs = segment(&prompt, &target, &Granularity::Sentence).unwrap();
        let full = "hello world. B";
        assert_eq!(texts(&segs[1..], full), vec!["hello wor", "ld.", " B"]);
        assert_eq!(segs[1].region, Region::Prompt);
        assert_eq!(segs[2].region, Region::Target);
        assert_eq!(segs[2].first_token, 1 + prompt.len());
    }

    fn map_with(scores: Vec<f32>) -> SalienceMap {
        SalienceMap {
            method: SalienceMethod::GradDotInput,
            spec: TargetSpec::full(vec![0], vec![1]),
            scores,
        }
    }

    #[test]
    fn token_granularity_keeps_token_scores() {
        let v = vocab();
        let prompt = v.tokenize("hello world");
        let segs = segment(&prompt, &TokenSequence::empty(), &Granularity::Token).unwrap();
        let agg = aggregate(&map_with(vec![0.5, 0.25, -1.0]), &segs).unwrap();
        assert_eq!(agg.raw, vec![0.5, 0.25, -1.0]);
    }

    #[test]
    fn merged_tokens_sum() {
        let segs = vec![
            Segment { start: 0, end: 0, first_token: 0, end_token: 1, region: Region::Prompt, special: true },
            Segment { start: 0, end: 3, first_token: 1, end_token: 4, region: Region::Prompt, special: false },
        ];
        let agg = aggregate_scores(&[0.0, 0.1, 0.2, 0.3], &segs).unwrap();
        assert!((agg.raw[1] - 0.6).abs() < 1e-7);
    }

    #[test]
    fn partition_violation_is_an_internal_error() {
        let segs = vec![Segment { start: 0, end: 1, first_token: 0, end_token: 2, region: Region::Prompt, special: false }];
        assert!(matches!(aggregate_scores(&[1.0, 2.0, 3.0], &segs), Err(Error::Invariant(_))));
    }

    #[test]
    fn display_scaling() {
        let base = aggregate_scores(
            &[2.0, -4.0],
            &[
                Segment { start: 0, end: 1, first_token: 0, end_token: 1, region: Region::Prompt, special: false },
                Segment { start: 1, end: 2, first_token: 1, end_token: 2, region: Region::Prompt, special: false },
            ],
        )
        .unwrap();
        let d = normalize_for_display(&base, 1.0).unwrap();
        assert_eq!(d.display, vec![0.5, -1.0]);
        let d = normalize_for_display(&base, 2.0).unwrap();
        assert_eq!(d.display, vec![0.25, -1.0]);
        assert!(normalize_for_display(&base, 0.0).is_err());
        let zeros = aggregate_scores(&[0.0, 0.0], &base.segments).unwrap();
        assert_eq!(normalize_for_display(&zeros, 0.5).unwrap().display, vec![0.0, 0.0]);
    }

    #[test]
    fn mean_basis_divides_by_token_count() {
        let segs = vec![
            Segment { start: 0, end: 2, first_token: 0, end_token: 2, region: Region::Prompt, special: false },
            Segment { start: 2, end: 3, first_token: 2, end_token: 3, region: Region::Prompt, special: false },
        ];
        let agg = aggregate_scores(&[1.0, 1.0, 1.5], &segs).unwrap();
        assert_eq!(agg.display, vec![1.0, 0.75]);
        let mean = normalize_with_basis(&agg, 1.0, DisplayBasis::Mean).unwrap();
        assert_eq!(mean.display, vec![1.0 / 1.5, 1.0]);
        assert_eq!(mean.raw, agg.raw);
    }

    #[test]
    fn selection_to_mask() {
        let v = Vocabulary::bytes_only();
        let prompt = v.tokenize("ab");
        let target = v.tokenize("cd ef gh");
        let target_start = 1 + prompt.len();
        let tokens = segment(&prompt, &target, &Granularity::Token).unwrap();
        let first_target = tokens.iter().position(|s| s.region == Region::Target).unwrap();
        let m = segment_selection_to_mask(&tokens, &[first_target], target_start, target.len()).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 1);
        assert!(m[0]);

        let words = segment(&prompt, &target, &Granularity::Word).unwrap();
        let w0 = words.iter().position(|s| s.region == Region::Target).unwrap();
        let m = segment_selection_to_mask(&words, &[w0, w0 + 1], target_start, target.len()).unwrap();
        assert_eq!(m, vec![true, true, true, true, true, true, false, false]);
        let all: Vec<usize> = (w0..words.len()).collect();
        assert_eq!(segment_selection_to_mask(&words, &all, target_start, target.len()).unwrap(), vec![true; 8]);

        assert!(matches!(
            segment_selection_to_mask(&words, &[1], target_start, target.len()),
            Err(Error::PromptSelection(1))
        ));
        assert_eq!(covering_segments(&words, &m, target_start), vec![w0, w0 + 1]);
    }

    fn granularities() -> Vec<Granularity> {
        let mut g = Granularity::BUILTIN.to_vec();
        g.push(Granularity::Custom(r"\d+".into()));
        g
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn segments_partition_tokens_and_text(
            prompt in "[a-z .!?\n\t\u{e9}\u{20ac}0-9]{0,60}",
            target in "[a-z .!?\n\u{3000}]{0,30}",
        ) {
            let v = vocab();
            let p = v.tokenize(&prompt);
            let t = v.tokenize(&target);
            let full = format!("{prompt}{target}");
            for g in granularities() {
                let segs = segment(&p, &t, &g).unwrap();
                prop_assert!(check_partition(&segs, 1 + p.len() + t.len()).is_ok());
                let mut cursor = 0;
                for s in &segs {
                    prop_assert_eq!(s.start, cursor);
                    cursor = s.end;
                    let in_target = s.first_token > p.len();
                    prop_assert_eq!(in_target, s.region == Region::Target);
                    prop_assert!(s.end_token <= 1 + p.len() || s.first_token > p.len());
                }
                prop_assert_eq!(cursor, full.len());
            }
        }
    }
}
