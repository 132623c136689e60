// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::*;
use serde_json::json;

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn identical_concurrent_requests_share_one_backward_pass() {
    let (state, app) = app();
    let req = json!({ "prompt": "the cat sat on the mat. the dog", "target": " sat on the log." });
    let (_, b0) = passes(&state);
    let handles: Vec<_> = (0..10)
        .map(|_| {
            let (app, req) = (app.clone(), req.clone());
            tokio::spawn(async move { post(&app, "/api/salience", req).await })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        let r = h.await.unwrap();
        assert!(r.status.is_success());
        bodies.push(r.bytes);
    }
    assert_eq!(passes(&state).1 - b0, 1);
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn distinct_concurrent_requests_each_compute() {
    let (state, app) = app();
    let (_, b0) = passes(&state);
    let handles: Vec<_> = (0..10)
        .map(|i| {
            let app = app.clone();
            tokio::spawn(async move {
                post(&app, "/api/salience", json!({ "prompt": format!("the cat {i}"), "target": " sat" })).await
            })
        })
        .collect();
    for h in handles {
        assert!(h.await.unwrap().status.is_success());
    }
    assert_eq!(passes(&state).1 - b0, 10);
}

#[tokio::test]
async fn replayed_request_log_is_all_hits() {
    let (state, app) = app();
    let log = [
        ("/api/generate", json!({ "prompt": "the cat", "max_new": 4 })),
        ("/api/salience", json!({ "prompt": "the cat", "target": " sat" })),
        ("/api/salience", json!({ "prompt": "the cat", "target": " sat", "granularity": "sentence", "gamma": 2.0 })),
        ("/api/salience", json!({ "prompt": "the dog", "target": " on the log", "selection": [1] })),
        ("/api/generate", json!({ "prompt": "the", "max_new": 6, "temperature": 0.7, "seed": 3, "n": 2 })),
    ];
    for (uri, body) in &log {
        assert!(post(&app, uri, body.clone()).await.status.is_success());
    }
    let before = passes(&state);
    let hits_before = state.cache.stats().hits;
    for (uri, body) in &log {
        assert_eq!(post(&app, uri, body.clone()).await.cache.as_deref(), Some("hit"));
    }
    assert_eq!(passes(&state), before);
    assert_eq!(state.cache.stats().hits - hits_before, log.len() as u64);
}
