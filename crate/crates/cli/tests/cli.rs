// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::Arc;

use promptlens_core::report::SalienceReport;
use promptlens_core::segmentation::{aggregate_scores, normalize_for_display, segment, Granularity};
use promptlens_core::{Explainer, Model, Vocabulary};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_promptlens"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("NO_COLOR").output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    model: PathBuf,
    vocab: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.txt");
        std::fs::write(&corpus, "the cat sat on the mat. the dog sat on the log.\nA bird flew by!\n").unwrap();
        let vocab = dir.path().join("vocab.txt");
        let model = dir.path().join("model.bin");
        stdout(&run(&["build-vocab", "--corpus", s(&corpus), "--size", "24", "--out", s(&vocab)]));
        stdout(&run(&[
            "init-model", "--vocab", s(&vocab), "--out", s(&model), "--layers", "1", "--heads", "2",
            "--d-model", "16", "--d-ff", "32", "--max-seq-len", "128", "--seed", "3",
        ]));
        Self { _dir: dir, model, vocab }
    }

    fn args<'a>(&'a self, rest: &[&'a str]) -> Vec<&'a str> {
        let mut v = rest.to_vec();
        v.extend(["--model", s(&self.model), "--vocab", s(&self.vocab)]);
        v
    }

    fn explainer(&self) -> Explainer {
        let params = promptlens_core::model::load_weights(&self.model).unwrap();
        let vocab = Vocabulary::load(&self.vocab).unwrap();
        Explainer::new(Model::new(params).unwrap(), Arc::new(vocab)).unwrap()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const PROMPT: &str = "The cat sat on the mat. The dog sat on the log.";
const TARGET: &str = " A bird flew by! Then it sat.";

#[test]
fn token_tsv_has_one_row_per_token() {
    let f = Fixture::new();
    let out = stdout(&run(&f.args(&["salience", "--prompt", PROMPT, "--target", TARGET, "--granularity", "token", "--output", "tsv"])));
    let rows = out.lines().count() - 1;
    let n_tokens = 1 + f.explainer().tokenize(PROMPT).len() + f.explainer().tokenize(TARGET).len();
    assert_eq!(rows, n_tokens);
    assert!(out.starts_with("segment\tstart"));
}

#[test]
fn json_export_reaggregates_to_sentence_output() {
    let f = Fixture::new();
    let base = ["salience", "--prompt", PROMPT, "--target", TARGET, "--output", "json", "--gamma", "0.5"];
    let word: SalienceReport = serde_json::from_str(&stdout(&run(&f.args(&[&base[..], &["--granularity", "word"]].concat())))).unwrap();
    let sentence: SalienceReport =
        serde_json::from_str(&stdout(&run(&f.args(&[&base[..], &["--granularity", "sentence"]].concat())))).unwrap();
    assert_eq!(word.schema_version, 1);

    // offline: re-segment the exported text and aggregate exported token scores
    let e = f.explainer();
    let segs = segment(&e.tokenize(PROMPT), &e.tokenize(TARGET), &Granularity::Sentence).unwrap();
    let offline = normalize_for_display(&aggregate_scores(&word.token_scores(), &segs).unwrap(), 0.5).unwrap();
    assert_eq!(offline.raw.len(), sentence.segments.len());
    for (i, seg) in sentence.segments.iter().enumerate() {
        assert!((offline.raw[i] - seg.raw).abs() <= 1e-6 * seg.raw.abs().max(1e-12));
        assert!((offline.display[i] - seg.display).abs() <= 1e-6);
        // independent check against the exported tokens
        let sum: f64 = word.tokens[seg.first_token..seg.end_token].iter().map(|t| f64::from(t.score)).sum();
        assert!((sum - seg.raw).abs() <= 1e-6 * sum.abs().max(1e-12));
    }
}

#[test]
fn missing_model_is_a_validation_error_naming_the_path() {
    let out = run(&["salience", "--model", "/nonexistent/weights.bin", "--prompt", "a", "--target", "b"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/weights.bin"));
}

#[test]
fn bad_inputs_exit_with_status_two() {
    let f = Fixture::new();
    let cases: [&[&str]; 3] = [
        &["salience", "--prompt", "a", "--target", "b", "--select-tokens", "40"],
        &["salience", "--prompt", "a", "--target", "b", "--gamma", "-1"],
        &["salience", "--prompt", "a", "--target", "b", "--granularity", "chapter"],
    ];
    for case in cases {
        let out = run(&f.args(case));
        assert_eq!(out.status.code(), Some(2), "{case:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[tokio::test]
async fn tokenize_matches_the_api() {
    use tower::ServiceExt;
    let f = Fixture::new();
    let text = "the cat, naïve 🐈\tsat";
    let cli: Value = serde_json::from_str(&stdout(&run(&["tokenize", "--text", text, "--vocab", s(&f.vocab)]))).unwrap();
    let state = Arc::new(promptlens_server::AppState::new(f.explainer(), &Default::default()).unwrap());
    let app = promptlens_server::router(state, None);
    let request = axum::http::Request::post("/api/tokenize")
        .header("content-type", "application/json")
        .body(axum::body::Body::from(serde_json::json!({ "text": text }).to_string()))
        .unwrap();
    let body = axum::body::to_bytes(app.oneshot(request).await.unwrap().into_body(), usize::MAX).await.unwrap();
    let api: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(cli, api);
}

#[test]
fn seeded_generation_is_reproducible() {
    let f = Fixture::new();
    let args = f.args(&["generate", "--prompt", "the cat", "--max-new", "12", "--temperature", "1.2", "--seed", "42"]);
    let a = stdout(&run(&args));
    assert_eq!(a, stdout(&run(&args)));
    let other = f.args(&["generate", "--prompt", "the cat", "--max-new", "12", "--temperature", "1.2", "--seed", "43"]);
    assert_ne!(a, stdout(&run(&other)));
}

#[test]
fn ansi_and_plain_renderings() {
    let f = Fixture::new();
    let color = stdout(&run(&f.args(&["salience", "--prompt", PROMPT, "--target", TARGET])));
    assert!(color.contains("\x1b[48;5;"));
    let plain = stdout(&run(&f.args(&["salience", "--prompt", PROMPT, "--target", TARGET, "--no-color", "--select-segments", "14"])));
    assert!(!plain.contains('\x1b'));
    assert!(plain.contains("[1.000]"));
    assert!(plain.contains("[*"));
}

#[test]
fn generate_then_explain() {
    let f = Fixture::new();
    let out = run(&f.args(&["salience", "--prompt", PROMPT, "--generate", "--max-new", "6", "--output", "json", "--method", "grad-dot-input"]));
    let report: SalienceReport = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report.target_mask.len(), report.tokens.iter().filter(|t| t.region == promptlens_core::Region::Target).count());
}

#[test]
fn serve_reports_its_address_and_answers() {
    let f = Fixture::new();
    let mut child = bin()
        .args(f.args(&["serve", "--port", "0"]))
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    let addr = first.strip_prefix("listening on ").unwrap().to_owned();
    assert!(lines.next().unwrap().unwrap().starts_with("UI: http://"));
    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /api/model HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("grad_dot_input"));
}

#[test]
fn serve_on_an_occupied_port_fails_cleanly() {
    let f = Fixture::new();
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = run(&f.args(&["serve", "--port", &port]));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cannot listen on") && err.contains(&port), "{err}");
}

#[test]
fn untrained_fixture_exhausts_its_budget() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.bin");
    let out = run(&["train-fixture", "--task", "copy:4", "--steps", "0", "--out", s(&weights), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(weights.exists());
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    // 256 byte tokens plus specials: chance is well under 5%
    assert!(summary["accuracy"].as_f64().unwrap() < 0.05);
    assert_eq!(summary["reached_target"], false);
}

#[test]
fn fixture_training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let train = |name: &str| {
        let path = dir.path().join(name);
        let log = dir.path().join(format!("{name}.log"));
        let out = run(&[
            "train-fixture", "--task", "copy:3", "--steps", "6", "--layers", "1", "--heads", "2", "--d-model", "16",
            "--d-ff", "32", "--max-seq-len", "16", "--seed", "9", "--out", s(&path), "--log", s(&log),
        ]);
        assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
        (std::fs::read(path).unwrap(), std::fs::read_to_string(log).unwrap())
    };
    let (a, log_a) = train("a.bin");
    let (b, log_b) = train("b.bin");
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
}

#[test]
fn invalid_training_setup_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train-fixture", "--task", "copy:30", "--out", s(&dir.path().join("w.bin"))]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("copy:30"));
}
