// SPDX-License-Identifier: MIT OR Apache-2.0

//! Datapoint store backed by an append-only JSON-lines log.
//!
//! Every mutation appends one record (`put` with the full datapoint, or
//! `delete`); loading replays the log. Without a path the store is
//! in-memory only.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::http::StatusCode;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Datapoint {
    pub id: String,
    pub prompt: String,
    /// Reference or contrastive output.
    pub target: Option<String>,
    pub last_generation: Option<String>,
    /// Set when the prompt changed after the last generation.
    pub stale_generation: bool,
    /// Milliseconds since the Unix epoch.
    pub created_ms: u64,
    pub modified_ms: u64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct NewDatapoint {
    pub prompt: String,
    #[serde(default)]
    pub target: Option<String>,
}

/// Partial update. `target: null` clears the target; an absent field leaves
/// it alone.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatapointPatch {
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default, with = "double_option")]
    pub target: Option<Option<String>>,
}

mod double_option {
    use serde::{Deserialize, Deserializer};

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Option<String>>, D::Error> {
        Option::<String>::deserialize(d).map(Some)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Record {
    Put { datapoint: Datapoint },
    Delete { id: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinState {
    pub pinned: Option<String>,
    pub selected: Option<String>,
}

struct Inner {
    items: BTreeMap<u64, Datapoint>,
    next: u64,
    log: Option<File>,
    pin: PinState,
}

pub struct DatapointStore {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn parse_id(id: &str) -> Option<u64> {
    id.strip_prefix("dp-")?.parse().ok()
}

fn storage_error(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", e.to_string())
}

fn validate_prompt(prompt: &str) -> Result<(), ApiError> {
    if prompt.is_empty() {
        return Err(ApiError::invalid("empty_prompt", "prompt must not be empty"));
    }
    Ok(())
}

impl DatapointStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            inner: Mutex::new(Inner {
                items: BTreeMap::new(),
                next: 1,
                log: None,
                pin: PinState::default(),
            }),
        }
    }

    /// Opens (creating if needed) the log at `path` and replays it. A final
    /// line without a newline is an interrupted write and is ignored.
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut items = BTreeMap::new();
        let mut next = 1;
        if path.exists() {
            let mut reader = BufReader::new(File::open(&path)?);
            let mut line = String::new();
            let mut number = 0;
            let mut valid_len = 0u64;
            loop {
                line.clear();
                let read = reader.read_line(&mut line)?;
                if read == 0 {
                    break;
                }
                number += 1;
                if !line.ends_with('\n') {
                    // Drop the torn tail so the next append starts on a fresh line.
                    OpenOptions::new().write(true).open(&path)?.set_len(valid_len)?;
                    break;
                }
                valid_len += read as u64;
                if line.trim().is_empty() {
                    continue;
                }
                let record: Record = serde_json::from_str(&line).map_err(|e| {
                    std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("{}:{number}: {e}", path.display()),
                    )
                })?;
                match record {
                    Record::Put { datapoint } => {
                        let n = parse_id(&datapoint.id).ok_or_else(|| {
                            std::io::Error::new(
                                std::io::ErrorKind::InvalidData,
                                format!("{}:{number}: bad id {:?}", path.display(), datapoint.id),
                            )
                        })?;
                        next = next.max(n + 1);
                        items.insert(n, datapoint);
                    }
                    Record::Delete { id } => {
                        if let Some(n) = parse_id(&id) {
                            next = next.max(n + 1);
                            items.remove(&n);
                        }
                    }
                }
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path: Some(path),
            inner: Mutex::new(Inner {
                items,
                next,
                log: Some(log),
                pin: PinState::default(),
            }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn append(inner: &mut Inner, record: &Record) -> Result<(), ApiError> {
        if let Some(log) = inner.log.as_mut() {
            let mut line = serde_json::to_string(record).map_err(storage_error)?;
            line.push('\n');
            log.write_all(line.as_bytes()).map_err(storage_error)?;
            log.flush().map_err(storage_error)?;
        }
        Ok(())
    }

    fn put(inner: &mut Inner, n: u64, dp: Datapoint) -> Result<Datapoint, ApiError> {
        Self::append(inner, &Record::Put { datapoint: dp.clone() })?;
        inner.items.insert(n, dp.clone());
        Ok(dp)
    }

    pub fn create(&self, new: NewDatapoint) -> Result<Datapoint, ApiError> {
        validate_prompt(&new.prompt)?;
        let mut inner = self.inner.lock();
        let n = inner.next;
        inner.next += 1;
        let now = now_ms();
        let dp = Datapoint {
            id: format!("dp-{n}"),
            prompt: new.prompt,
            target: new.target,
            last_generation: None,
            stale_generation: false,
            created_ms: now,
            modified_ms: now,
        };
        Self::put(&mut inner, n, dp)
    }

    pub fn list(&self) -> Vec<Datapoint> {
        self.inner.lock().items.values().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Result<Datapoint, ApiError> {
        let inner = self.inner.lock();
        parse_id(id)
            .and_then(|n| inner.items.get(&n))
            .cloned()
            .ok_or_else(|| ApiError::not_found("datapoint", id))
    }

    fn modify(&self, id: &str, edit: impl FnOnce(&mut Datapoint)) -> Result<Datapoint, ApiError> {
        let mut inner = self.inner.lock();
        let n = parse_id(id)
            .filter(|n| inner.items.contains_key(n))
            .ok_or_else(|| ApiError::not_found("datapoint", id))?;
        let mut dp = inner.items[&n].clone();
        edit(&mut dp);
        dp.modified_ms = now_ms().max(dp.modified_ms);
        Self::put(&mut inner, n, dp)
    }

    pub fn update(&self, id: &str, patch: DatapointPatch) -> Result<Datapoint, ApiError> {
        if let Some(p) = &patch.prompt {
            validate_prompt(p)?;
        }
        self.modify(id, |dp| {
            if let Some(prompt) = patch.prompt {
                if prompt != dp.prompt {
                    dp.stale_generation = dp.last_generation.is_some();
                    dp.prompt = prompt;
                }
            }
            if let Some(target) = patch.target {
                dp.target = target;
            }
        })
    }

    /// Stores a fresh generation and clears the stale flag.
    pub fn record_generation(&self, id: &str, text: &str) -> Result<Datapoint, ApiError> {
        self.modify(id, |dp| {
            dp.last_generation = Some(text.to_owned());
            dp.stale_generation = false;
        })
    }

    pub fn delete(&self, id: &str) -> Result<(), ApiError> {
        let mut inner = self.inner.lock();
        let n = parse_id(id)
            .filter(|n| inner.items.contains_key(n))
            .ok_or_else(|| ApiError::not_found("datapoint", id))?;
        Self::append(&mut inner, &Record::Delete { id: id.to_owned() })?;
        inner.items.remove(&n);
        let pin = &mut inner.pin;
        if pin.pinned.as_deref() == Some(id) {
            pin.pinned = None;
        }
        if pin.selected.as_deref() == Some(id) {
            pin.selected = None;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pin_state(&self) -> PinState {
        self.inner.lock().pin.clone()
    }

    /// Replaces the pin state. Both ids must exist and differ.
    pub fn set_pin(&self, state: PinState) -> Result<PinState, ApiError> {
        let mut inner = self.inner.lock();
        for id in [&state.pinned, &state.selected].into_iter().flatten() {
            if !parse_id(id).is_some_and(|n| inner.items.contains_key(&n)) {
                return Err(ApiError::not_found("datapoint", id));
            }
        }
        if state.pinned.is_some() && state.pinned == state.selected {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "pin_conflict",
                "the pinned datapoint cannot also be the selected one",
            ));
        }
        inner.pin = state.clone();
        Ok(state)
    }
}
