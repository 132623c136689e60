// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use promptlens_core::{Explainer, Model, ModelConfig, Vocabulary};
use promptlens_server::{router, AppState, ServiceOptions};
use serde_json::Value;
use tower::ServiceExt;

pub fn explainer() -> Explainer {
    let vocab = Vocabulary::from_corpus("the cat sat on the mat. the dog sat on the log.\n", 16);
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: vocab.len(),
        max_seq_len: 96,
        layernorm_epsilon: 1e-5,
    };
    Explainer::new(Model::init_random(config, 11).unwrap(), Arc::new(vocab)).unwrap()
}

pub fn app_with(options: ServiceOptions) -> (Arc<AppState>, Router) {
    let state = Arc::new(AppState::new(explainer(), &options).unwrap());
    let app = router(state.clone(), None);
    (state, app)
}

pub fn app() -> (Arc<AppState>, Router) {
    app_with(ServiceOptions::default())
}

pub struct Reply {
    pub status: StatusCode,
    pub cache: Option<String>,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or(Value::Null)
    }

    pub fn code(&self) -> String {
        self.json()["code"].as_str().unwrap_or_default().to_owned()
    }
}

pub async fn send_raw(app: &Router, method: Method, uri: &str, body: &str) -> Reply {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_owned()))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let cache = response
        .headers()
        .get("x-cache")
        .map(|v| v.to_str().unwrap().to_owned());
    let bytes = axum::body::to_bytes(response.into_body(), usize::MAX).await.unwrap().to_vec();
    Reply { status, cache, bytes }
}

pub async fn post(app: &Router, uri: &str, body: Value) -> Reply {
    send_raw(app, Method::POST, uri, &body.to_string()).await
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    let request = Request::builder().uri(uri).body(Body::empty()).unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = axum::body::to_bytes(response.into_body(), usize::MAX).await.unwrap().to_vec();
    Reply { status, cache: None, bytes }
}

pub fn passes(state: &AppState) -> (u64, u64) {
    let c = state.explainer.model().counters();
    (c.forward_passes(), c.backward_passes())
}
