// SPDX-License-Identifier: MIT OR Apache-2.0

//! HTTP session service around a [`promptlens_core::Explainer`].
//!
//! | route | |
//! |---|---|
//! | `POST /api/tokenize` | tokens and byte offsets |
//! | `POST /api/generate` | greedy or sampled continuations, `n` candidates |
//! | `POST /api/salience` | token and segment scores at a granularity |
//! | `GET, POST /api/datapoints` | list, create |
//! | `GET, PATCH, DELETE /api/datapoints/{id}` | |
//! | `GET, POST /api/pin` | side-by-side pin state |
//! | `GET /api/diagnostics` | pass counters and cache statistics |
//! | `GET /api/model` | config, vocabulary size, methods |
//!
//! Generation and salience results are cached by content hash; salience is
//! cached at token level so changing granularity or gamma never reruns the
//! model. Anything outside `/api` is served from the static UI directory when
//! one is configured.

pub mod api;
pub mod cache;
pub mod error;
pub mod store;

use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::routing::{get, post};
use axum::Router;
use promptlens_core::Explainer;
use sha2::{Digest, Sha256};
use tower_http::services::ServeDir;

pub use api::{Cached, Diagnostics};
pub use cache::{CacheKey, CacheStats, CacheStatus, SingleFlightCache, DEFAULT_CAPACITY};
pub use error::{ApiError, ErrorBody};
pub use store::{Datapoint, DatapointStore, PinState};

#[derive(Debug, Clone, Default)]
pub struct ServiceOptions {
    pub cache_capacity: Option<usize>,
    /// Datapoint log. `None` keeps datapoints in memory.
    pub store_path: Option<PathBuf>,
    /// Built UI bundle served at `/`.
    pub static_dir: Option<PathBuf>,
}

pub struct AppState {
    pub explainer: Explainer,
    /// Hash of the weights and vocabulary; part of every cache key.
    pub model_id: String,
    pub cache: SingleFlightCache<Cached>,
    pub store: DatapointStore,
}

impl AppState {
    pub fn new(explainer: Explainer, options: &ServiceOptions) -> std::io::Result<Self> {
        let store = match &options.store_path {
            Some(path) => DatapointStore::open(path)?,
            None => DatapointStore::in_memory(),
        };
        Ok(Self {
            model_id: fingerprint(&explainer),
            cache: SingleFlightCache::new(options.cache_capacity.unwrap_or(DEFAULT_CAPACITY)),
            explainer,
            store,
        })
    }
}

/// Short content hash identifying a model and vocabulary.
pub fn fingerprint(explainer: &Explainer) -> String {
    let params = explainer.model().params();
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&params.config).expect("config serializes"));
    for tensor in params.tensors() {
        for v in tensor {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.update(explainer.vocab().to_file_string().as_bytes());
    hex::encode(&hasher.finalize()[..8])
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/tokenize", post(api::tokenize))
        .route("/generate", post(api::generate))
        .route("/salience", post(api::salience))
        .route("/datapoints", get(api::list_datapoints).post(api::create_datapoint))
        .route(
            "/datapoints/{id}",
            get(api::get_datapoint)
                .patch(api::update_datapoint)
                .delete(api::delete_datapoint),
        )
        .route("/pin", get(api::get_pin).post(api::set_pin))
        .route("/diagnostics", get(api::diagnostics))
        .route("/model", get(api::model_info))
        .fallback(api::not_found);
    let app = Router::new().nest("/api", api);
    let app = match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => app.route("/", get(placeholder_index)),
    };
    app.with_state(state)
}

async fn placeholder_index() -> axum::response::Html<&'static str> {
    axum::response::Html(
        "<!doctype html><title>promptlens</title><p>promptlens service is running. \
         No UI bundle configured (pass --static-dir); the API lives under /api.</p>",
    )
}

/// Serves `app` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
