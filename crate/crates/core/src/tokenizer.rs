// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy longest-match subword tokenizer with byte fallback.
//!
//! Ids `0..256` are raw bytes, `256..259` are the specials (BOS, EOS, PAD)
//! and everything above is a multi-byte text token. Matching runs left to
//! right over the UTF-8 encoding of the input; a character that does not
//! start any text token is emitted as one fallback token per byte, so every
//! string is encodable and decoding is exact.
//!
//! Offsets are byte offsets into the UTF-8 source. A fallback token for one
//! byte of a multi-byte character therefore gets a range that starts or ends
//! inside that character.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BYTE_FALLBACK_COUNT: usize = 256;
pub const BOS_ID: TokenId = 256;
pub const EOS_ID: TokenId = 257;
pub const PAD_ID: TokenId = 258;
/// First id available to text tokens.
pub const FIRST_TEXT_ID: TokenId = 259;

const SPECIAL_NAMES: [&str; 3] = ["<bos>", "<eos>", "<pad>"];

/// Token id/string table. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    /// Bytes for each id; specials hold their display name.
    entries: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, TokenId>,
    max_token_len: usize,
}

/// Token ids aligned to the text they came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    /// Half-open byte ranges into `source`, one per id.
    pub offsets: Vec<(usize, usize)>,
    pub source: String,
}

impl TokenSequence {
    pub fn empty() -> Self {
        Self {
            ids: Vec::new(),
            offsets: Vec::new(),
            source: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Source text covered by token `index`. Lossy when the token splits a
    /// multi-byte character.
    pub fn token_text(&self, index: usize) -> String {
        let (start, end) = self.offsets[index];
        String::from_utf8_lossy(&self.source.as_bytes()[start..end]).into_owned()
    }
}

impl Vocabulary {
    /// Builds a vocabulary from text tokens. Each must be valid UTF-8 and at
    /// least two bytes long (single bytes are already covered by fallbacks).
    pub fn new<I, S>(text_tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut entries: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        entries.extend(SPECIAL_NAMES.iter().map(|s| s.as_bytes().to_vec()));
        let mut lookup = HashMap::new();
        let mut max_token_len = 1;
        for token in text_tokens {
            let token: String = token.into();
            if token.len() < 2 {
                return Err(Error::Vocabulary(format!(
                    "text token {token:?} is shorter than two bytes"
                )));
            }
            let id = entries.len() as TokenId;
            if lookup.insert(token.as_bytes().to_vec(), id).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {token:?}")));
            }
            max_token_len = max_token_len.max(token.len());
            entries.push(token.into_bytes());
        }
        Ok(Self {
            entries,
            lookup,
            max_token_len,
        })
    }

    /// Only byte fallbacks and specials.
    pub fn bytes_only() -> Self {
        Self::new(std::iter::empty::<String>()).expect("empty token list is valid")
    }

    /// Picks up to `max_text_tokens` frequent words and word prefixes from a
    /// corpus. Words carry their leading space, so `" the"` and `"the"` are
    /// distinct candidates. Ties break by byte order, making the result
    /// deterministic.
    pub fn from_corpus(corpus: &str, max_text_tokens: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut rest = corpus;
        while !rest.is_empty() {
            let lead = usize::from(rest.starts_with(' '));
            let body = &rest[lead..];
            let word_len: usize = body
                .char_indices()
                .find(|(_, c)| !c.is_alphanumeric())
                .map_or(body.len(), |(i, _)| i);
            if word_len == 0 {
                let skip = rest.chars().next().map_or(1, char::len_utf8);
                rest = &rest[skip..];
                continue;
            }
            let word = &rest[..lead + word_len];
            for (end, _) in word
                .char_indices()
                .skip(1)
                .chain(std::iter::once((word.len(), ' ')))
            {
                if end >= 2 {
                    *counts.entry(&word[..end]).or_default() += 1;
                }
            }
            rest = &rest[lead + word_len..];
        }
        let mut scored: Vec<(usize, &str)> = counts
            .into_iter()
            .filter(|(_, n)| *n >= 2)
            .map(|(piece, n)| (n * (piece.len() - 1), piece))
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        Self::new(scored.into_iter().take(max_text_tokens).map(|(_, p)| p))
            .expect("corpus pieces are unique and at least two bytes")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_special(id: TokenId) -> bool {
        (BOS_ID..FIRST_TEXT_ID).contains(&id)
    }

    /// Bytes a token contributes to decoded text (empty for specials).
    pub fn token_bytes(&self, id: TokenId) -> Result<&[u8]> {
        let bytes = self.entries.get(id as usize).ok_or(Error::UnknownToken {
            id,
            vocab_size: self.len(),
        })?;
        Ok(if Self::is_special(id) { &[] } else { bytes })
    }

    /// Human-readable form of a token, for token chips and debugging.
    pub fn token_display(&self, id: TokenId) -> Result<String> {
        let entry = self.entries.get(id as usize).ok_or(Error::UnknownToken {
            id,
            vocab_size: self.len(),
        })?;
        Ok(match std::str::from_utf8(entry) {
            Ok(s) => s.to_owned(),
            Err(_) => format!("<0x{:02X}>", entry[0]),
        })
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let bytes = text.as_bytes();
        let mut ids = Vec::new();
        let mut offsets = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let longest = self.max_token_len.min(bytes.len() - pos);
            let matched = (2..=longest).rev().find_map(|len| {
                if !text.is_char_boundary(pos + len) {
                    return None;
                }
                self.lookup.get(&bytes[pos..pos + len]).map(|&id| (id, len))
            });
            match matched {
                Some((id, len)) => {
                    ids.push(id);
                    offsets.push((pos, pos + len));
                    pos += len;
                }
                None => {
                    let char_len = text[pos..].chars().next().map_or(1, char::len_utf8);
                    for (b, &byte) in bytes.iter().enumerate().skip(pos).take(char_len) {
                        ids.push(TokenId::from(byte));
                        offsets.push((b, b + 1));
                    }
                    pos += char_len;
                }
            }
        }
        TokenSequence {
            ids,
            offsets,
            source: text.to_owned(),
        }
    }

    /// Concatenates token bytes. Exact inverse of [`Vocabulary::tokenize`];
    /// byte sequences that are not valid UTF-8 (possible for sampled output)
    /// render with replacement characters.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        Ok(self.decode(ids)?.source)
    }

    /// Builds an aligned sequence from ids, e.g. for generated output.
    pub fn decode(&self, ids: &[TokenId]) -> Result<TokenSequence> {
        let mut bytes = Vec::new();
        let mut byte_offsets = Vec::with_capacity(ids.len());
        for &id in ids {
            let start = bytes.len();
            bytes.extend_from_slice(self.token_bytes(id)?);
            byte_offsets.push((start, bytes.len()));
        }
        let (source, offsets) = match String::from_utf8(bytes) {
            Ok(source) => (source, byte_offsets),
            Err(err) => lossy_with_offsets(err.as_bytes(), &byte_offsets),
        };
        Ok(TokenSequence {
            ids: ids.to_vec(),
            offsets,
            source,
        })
    }

    pub fn parse(contents: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (line_no, line) in contents.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, escaped) = line.split_once('\t').ok_or_else(|| {
                Error::Vocabulary(format!("line {}: expected `<id>\\t<token>`", line_no + 1))
            })?;
            let id: usize = id.parse().map_err(|_| {
                Error::Vocabulary(format!("line {}: bad id {id:?}", line_no + 1))
            })?;
            if id != line_no {
                return Err(Error::Vocabulary(format!(
                    "line {}: ids must be dense and ordered, found {id}",
                    line_no + 1
                )));
            }
            let bytes = unescape(escaped)
                .map_err(|msg| Error::Vocabulary(format!("line {}: {msg}", line_no + 1)))?;
            if id < BYTE_FALLBACK_COUNT {
                if bytes != [id as u8] {
                    return Err(Error::Vocabulary(format!(
                        "line {}: byte fallback {id} must encode byte 0x{id:02X}",
                        line_no + 1
                    )));
                }
            } else if id < FIRST_TEXT_ID as usize {
                let expected = SPECIAL_NAMES[id - BYTE_FALLBACK_COUNT];
                if bytes != expected.as_bytes() {
                    return Err(Error::Vocabulary(format!(
                        "line {}: special {id} must be {expected}",
                        line_no + 1
                    )));
                }
            } else {
                let token = String::from_utf8(bytes).map_err(|_| {
                    Error::Vocabulary(format!("line {}: text token is not UTF-8", line_no + 1))
                })?;
                tokens.push(token);
            }
        }
        Self::new(tokens)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (id, entry) in self.entries.iter().enumerate() {
            let escaped = if id < BYTE_FALLBACK_COUNT {
                format!("\\x{id:02X}")
            } else {
                escape(std::str::from_utf8(entry).expect("text tokens are UTF-8"))
            };
            let _ = writeln!(out, "{id}\t{escaped}");
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }
}

/// Replaces invalid UTF-8 with U+FFFD while remapping token byte ranges onto
/// the rewritten string. Ranges stay ordered and contiguous.
fn lossy_with_offsets(bytes: &[u8], offsets: &[(usize, usize)]) -> (String, Vec<(usize, usize)>) {
    // map[i] = position in the output of input byte boundary i
    let mut map = vec![0usize; bytes.len() + 1];
    let mut out = String::with_capacity(bytes.len() + 8);
    let mut consumed = 0;
    for chunk in bytes.utf8_chunks() {
        for (i, _) in chunk.valid().bytes().enumerate() {
            map[consumed + i] = out.len() + i;
        }
        out.push_str(chunk.valid());
        consumed += chunk.valid().len();
        let invalid = chunk.invalid();
        if !invalid.is_empty() {
            map[consumed] = out.len();
            out.push(char::REPLACEMENT_CHARACTER);
            for i in 1..invalid.len() {
                map[consumed + i] = out.len();
            }
            consumed += invalid.len();
        }
    }
    map[bytes.len()] = out.len();
    let offsets = offsets.iter().map(|&(s, e)| (map[s], map[e])).collect();
    (out, offsets)
}

fn escape(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    for c in token.chars() {
        match c {
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\\' => out.push_str("\\\\"),
            c if (c as u32) < 0x20 || c == '\x7f' => {
                let _ = write!(out, "\\x{:02X}", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

fn unescape(escaped: &str) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::with_capacity(escaped.len());
    let bytes = escaped.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            out.push(bytes[i]);
            i += 1;
            continue;
        }
        match bytes.get(i + 1) {
            Some(b'n') => out.push(b'\n'),
            Some(b't') => out.push(b'\t'),
            Some(b'\\') => out.push(b'\\'),
            Some(b'x') => {
                let hex = escaped
                    .get(i + 2..i + 4)
                    .ok_or_else(|| "truncated \\x escape".to_owned())?;
                let byte = u8::from_str_radix(hex, 16)
                    .map_err(|_| format!("bad \\x escape {hex:?}"))?;
                out.push(byte);
                i += 2;
            }
            other => return Err(format!("unknown escape {other:?}")),
        }
        i += 2;
    }
    Ok(out)
}
