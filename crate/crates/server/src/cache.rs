// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bounded LRU result cache with per-key single-flight execution.
//!
//! The first request for a key runs the computation on the blocking pool;
//! concurrent requests for the same key wait on it instead of recomputing.
//! When every waiter has gone away (client disconnects) the computation's
//! [`CancelFlag`] is raised. Failures are handed to the waiters but never
//! stored.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use lru::LruCache;
use parking_lot::Mutex;
use promptlens_core::CancelFlag;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::watch;

use crate::error::ApiError;

pub const DEFAULT_CAPACITY: usize = 512;

/// Content hash of a request's canonical form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct CacheKey(String);

impl CacheKey {
    /// Hashes the JSON encoding of `material`. Callers pass a struct with a
    /// fixed field order, so logically equal requests produce equal keys no
    /// matter how their bodies were written.
    pub fn of(material: &impl Serialize) -> Self {
        let bytes = serde_json::to_vec(material).expect("cache key material serializes");
        Self(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// How a lookup was answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheStatus {
    Hit,
    Miss,
    /// Joined a computation already in flight.
    Shared,
}

impl CacheStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Hit => "hit",
            Self::Miss => "miss",
            Self::Shared => "shared",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub capacity: usize,
    pub entries: usize,
    pub in_flight: usize,
    pub hits: u64,
    pub misses: u64,
    pub deduplicated: u64,
    pub evictions: u64,
    pub failures: u64,
}

type Outcome<V> = Option<Result<V, ApiError>>;

struct Flight<V> {
    id: u64,
    rx: watch::Receiver<Outcome<V>>,
    waiters: usize,
    cancel: CancelFlag,
}

struct Inner<V> {
    entries: LruCache<CacheKey, V>,
    in_flight: HashMap<CacheKey, Flight<V>>,
    next_flight: u64,
}

pub struct SingleFlightCache<V> {
    inner: Arc<Mutex<Inner<V>>>,
    capacity: usize,
    hits: AtomicU64,
    misses: AtomicU64,
    deduplicated: AtomicU64,
    evictions: Arc<AtomicU64>,
    failures: Arc<AtomicU64>,
}

/// Drops the waiter's interest; the last one out cancels the computation.
struct WaiterGuard<V> {
    inner: Arc<Mutex<Inner<V>>>,
    key: CacheKey,
    flight: u64,
    done: bool,
}

impl<V> Drop for WaiterGuard<V> {
    fn drop(&mut self) {
        if self.done {
            return;
        }
        let mut inner = self.inner.lock();
        let abandon = match inner.in_flight.get_mut(&self.key) {
            Some(f) if f.id == self.flight => {
                f.waiters -= 1;
                f.waiters == 0
            }
            _ => false,
        };
        if abandon {
            if let Some(f) = inner.in_flight.remove(&self.key) {
                f.cancel.cancel();
            }
        }
    }
}

impl<V: Clone + Send + Sync + 'static> SingleFlightCache<V> {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self {
            inner: Arc::new(Mutex::new(Inner {
                entries: LruCache::new(NonZeroUsize::new(capacity).expect("capacity is positive")),
                in_flight: HashMap::new(),
                next_flight: 0,
            })),
            capacity,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            deduplicated: AtomicU64::new(0),
            evictions: Arc::new(AtomicU64::new(0)),
            failures: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Returns the cached value for `key`, joining or starting its
    /// computation as needed. `compute` runs on tokio's blocking pool.
    pub async fn get_or_compute<F>(&self, key: CacheKey, compute: F) -> (Result<V, ApiError>, CacheStatus)
    where
        F: FnOnce(CancelFlag) -> Result<V, ApiError> + Send + 'static,
    {
        let (mut rx, status, flight) = {
            let mut inner = self.inner.lock();
            if let Some(v) = inner.entries.get(&key) {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return (Ok(v.clone()), CacheStatus::Hit);
            }
            if let Some(f) = inner.in_flight.get_mut(&key) {
                f.waiters += 1;
                self.deduplicated.fetch_add(1, Ordering::Relaxed);
                (f.rx.clone(), CacheStatus::Shared, f.id)
            } else {
                self.misses.fetch_add(1, Ordering::Relaxed);
                let id = inner.next_flight;
                inner.next_flight += 1;
                let (tx, rx) = watch::channel(None);
                let cancel = CancelFlag::new();
                inner.in_flight.insert(
                    key.clone(),
                    Flight {
                        id,
                        rx: rx.clone(),
                        waiters: 1,
                        cancel: cancel.clone(),
                    },
                );
                self.spawn(key.clone(), id, tx, cancel, compute);
                (rx, CacheStatus::Miss, id)
            }
        };
        let mut guard = WaiterGuard {
            inner: self.inner.clone(),
            key,
            flight,
            done: false,
        };
        let result = loop {
            if let Some(r) = rx.borrow_and_update().clone() {
                break r;
            }
            if rx.changed().await.is_err() {
                break Err(ApiError::new(
                    axum::http::StatusCode::INTERNAL_SERVER_ERROR,
                    "internal",
                    "computation ended without a result",
                ));
            }
        };
        guard.done = true;
        (result, status)
    }

    fn spawn<F>(&self, key: CacheKey, id: u64, tx: watch::Sender<Outcome<V>>, cancel: CancelFlag, compute: F)
    where
        F: FnOnce(CancelFlag) -> Result<V, ApiError> + Send + 'static,
    {
        let inner = self.inner.clone();
        let evictions = self.evictions.clone();
        let failures = self.failures.clone();
        tokio::task::spawn_blocking(move || {
            let result = compute(cancel);
            {
                let mut inner = inner.lock();
                if inner.in_flight.get(&key).is_some_and(|f| f.id == id) {
                    inner.in_flight.remove(&key);
                }
                match &result {
                    Ok(v) => {
                        if let Some((old, _)) = inner.entries.push(key.clone(), v.clone()) {
                            if old != key {
                                evictions.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                    }
                    Err(_) => {
                        failures.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
            // nobody listening is fine: the value is cached anyway
            let _ = tx.send(Some(result));
        });
    }

    pub fn stats(&self) -> CacheStats {
        let inner = self.inner.lock();
        CacheStats {
            capacity: self.capacity,
            entries: inner.entries.len(),
            in_flight: inner.in_flight.len(),
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            deduplicated: self.deduplicated.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
        }
    }

    /// Whether `key` is currently stored (does not touch recency).
    pub fn contains(&self, key: &CacheKey) -> bool {
        self.inner.lock().entries.contains(key)
    }
}
