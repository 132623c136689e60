// SPDX-License-Identifier: MIT OR Apache-2.0

//! Request and response bodies plus the route handlers.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Request, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use promptlens_core::model::Decoding;
use promptlens_core::report::SalienceReport;
use promptlens_core::segmentation::{self, DisplayBasis, Granularity};
use promptlens_core::{AlignedSalience, SalienceMethod, TargetInput, TokenId, TokenSequence, Vocabulary};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cache::{CacheKey, CacheStats, CacheStatus};
use crate::error::ApiError;
use crate::store::{Datapoint, DatapointPatch, NewDatapoint, PinState};
use crate::AppState;

/// Largest `n` accepted by `/api/generate`.
pub const MAX_CANDIDATES: usize = 16;

/// `Json` extractor whose rejections use the structured error body.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Self(v)),
            Err(rejection) => Err(ApiError::new(rejection.status(), "malformed_request", rejection.body_text())),
        }
    }
}

/// Token ids with their byte spans and display strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenList {
    pub ids: Vec<TokenId>,
    pub offsets: Vec<(usize, usize)>,
    pub tokens: Vec<String>,
}

impl TokenList {
    pub fn new(seq: &TokenSequence, vocab: &Vocabulary) -> Result<Self, ApiError> {
        let tokens = seq
            .ids
            .iter()
            .map(|&id| vocab.token_display(id))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            ids: seq.ids.clone(),
            offsets: seq.offsets.clone(),
            tokens,
        })
    }
}

/// What the cache stores.
#[derive(Debug, Clone)]
pub enum Cached {
    Generation(Arc<GenerateResponse>),
    Salience(Arc<AlignedSalience>),
}

/// Canonical request description hashed into a [`CacheKey`]. Field order
/// is fixed here, so it does not depend on how the client wrote the body.
#[derive(Serialize)]
struct KeyMaterial<'a> {
    model: &'a str,
    kind: &'a str,
    prompt: &'a str,
    target: Option<&'a TargetInput>,
    mask: Option<&'a [bool]>,
    method: Option<SalienceMethod>,
    decoding: Option<Decoding>,
    max_new: Option<usize>,
    n: Option<usize>,
}

fn with_status(body: impl Serialize, status: CacheStatus) -> Response {
    let mut response = Json(body).into_response();
    response
        .headers_mut()
        .insert("x-cache", HeaderValue::from_static(status.as_str()));
    response
}

fn require_prompt(prompt: &str) -> Result<(), ApiError> {
    if prompt.is_empty() {
        return Err(ApiError::invalid("empty_prompt", "prompt must not be empty"));
    }
    Ok(())
}

// ---- tokenize ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizeRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizeResponse {
    pub text: String,
    #[serde(flatten)]
    pub tokens: TokenList,
}

/// Shared by the HTTP handler and the CLI.
pub fn tokenize_response(vocab: &Vocabulary, text: &str) -> Result<TokenizeResponse, ApiError> {
    Ok(TokenizeResponse {
        text: text.to_owned(),
        tokens: TokenList::new(&vocab.tokenize(text), vocab)?,
    })
}

pub async fn tokenize(
    State(state): State<Arc<AppState>>,
    ApiJson(req): ApiJson<TokenizeRequest>,
) -> Result<Json<TokenizeResponse>, ApiError> {
    Ok(Json(tokenize_response(state.explainer.vocab(), &req.text)?))
}

// ---- generate ----

fn default_max_new() -> usize {
    32
}

fn default_n() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    /// Absent or zero means greedy decoding.
    #[serde(default)]
    pub temperature: Option<f32>,
    /// Sampling seed; candidate `i` uses `seed + i`. Ignored when greedy.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Stores the first candidate as this datapoint's generation.
    #[serde(default)]
    pub datapoint_id: Option<String>,
}

impl GenerateRequest {
    fn decoding(&self, candidate: usize) -> Result<Decoding, ApiError> {
        match self.temperature {
            None | Some(0.0) => Ok(Decoding::Greedy),
            Some(t) if t.is_finite() && t > 0.0 => Ok(Decoding::Temperature {
                temperature: t,
                seed: self.seed.unwrap_or(0).wrapping_add(candidate as u64),
            }),
            Some(t) => Err(ApiError::invalid(
                "invalid_temperature",
                format!("temperature must be finite and non-negative, got {t}"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    #[serde(flatten)]
    pub tokens: TokenList,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub prompt: TokenList,
    pub candidates: Vec<Candidate>,
}

pub async fn generate(
    State(state): State<Arc<AppState>>,
    ApiJson(req): ApiJson<GenerateRequest>,
) -> Result<Response, ApiError> {
    require_prompt(&req.prompt)?;
    if !(1..=MAX_CANDIDATES).contains(&req.n) {
        return Err(ApiError::invalid(
            "invalid_candidates",
            format!("n must be between 1 and {MAX_CANDIDATES}"),
        ));
    }
    if let Some(id) = &req.datapoint_id {
        state.store.get(id)?;
    }
    let limit = state.explainer.model().config().max_seq_len;
    // BOS is prepended to every prompt
    let prompt_tokens = state.explainer.tokenize(&req.prompt).len() + 1;
    if prompt_tokens + req.max_new > limit {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "sequence_too_long",
            format!(
                "prompt uses {prompt_tokens} tokens (with BOS) and max_new is {}, but the model holds {limit}",
                req.max_new
            ),
        )
        .with_details(json!({ "prompt_tokens": prompt_tokens, "max_new": req.max_new, "max_seq_len": limit })));
    }
    let decodings = (0..req.n).map(|i| req.decoding(i)).collect::<Result<Vec<_>, _>>()?;
    let key = CacheKey::of(&KeyMaterial {
        model: &state.model_id,
        kind: "generate",
        prompt: &req.prompt,
        target: None,
        mask: None,
        method: None,
        decoding: Some(decodings[0]),
        max_new: Some(req.max_new),
        n: Some(req.n),
    });
    let worker = state.clone();
    let prompt = req.prompt.clone();
    let max_new = req.max_new;
    let (result, status) = state
        .cache
        .get_or_compute(key, move |cancel| {
            let mut candidates = Vec::with_capacity(decodings.len());
            let mut prompt_tokens = None;
            for decoding in decodings {
                let g = worker.explainer.generate(&prompt, decoding, max_new, &cancel)?;
                candidates.push(Candidate {
                    text: g.output.source.clone(),
                    tokens: TokenList::new(&g.output, worker.explainer.vocab())?,
                });
                if prompt_tokens.is_none() {
                    prompt_tokens = Some(TokenList::new(&g.prompt, worker.explainer.vocab())?);
                }
            }
            Ok(Cached::Generation(Arc::new(GenerateResponse {
                prompt: prompt_tokens.expect("n >= 1"),
                candidates,
            })))
        })
        .await;
    let Cached::Generation(response) = result? else {
        return Err(internal_kind_mismatch());
    };
    if let Some(id) = &req.datapoint_id {
        state.store.record_generation(id, &response.candidates[0].text)?;
    }
    Ok(with_status(&*response, status))
}

fn internal_kind_mismatch() -> ApiError {
    ApiError::new(
        StatusCode::INTERNAL_SERVER_ERROR,
        "internal",
        "cache entry has the wrong kind",
    )
}

// ---- salience ----

fn default_granularity() -> String {
    "word".into()
}

fn default_gamma() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SalienceRequest {
    pub prompt: String,
    /// Target text (tokenized on its own).
    #[serde(default)]
    pub target: Option<String>,
    /// Exact target ids, e.g. from a generate response.
    #[serde(default)]
    pub target_ids: Option<Vec<TokenId>>,
    /// One flag per target token. Default: every token.
    #[serde(default)]
    pub mask: Option<Vec<bool>>,
    /// Target token indices to explain (alternative to `mask`).
    #[serde(default)]
    pub selection: Option<Vec<usize>>,
    /// Segment indices at `granularity` to explain (alternative to `mask`).
    #[serde(default)]
    pub select_segments: Option<Vec<usize>>,
    #[serde(default)]
    pub method: Option<SalienceMethod>,
    #[serde(default = "default_granularity")]
    pub granularity: String,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub basis: DisplayBasis,
}

struct ResolvedSalience {
    target: TargetInput,
    mask: Vec<bool>,
    method: SalienceMethod,
    granularity: Granularity,
}

fn resolve(state: &AppState, req: &SalienceRequest) -> Result<ResolvedSalience, ApiError> {
    require_prompt(&req.prompt)?;
    let granularity: Granularity = req
        .granularity
        .parse()
        .map_err(|e: String| ApiError::invalid("invalid_granularity", e))?;
    let vocab = state.explainer.vocab();
    let (target, target_seq) = match (&req.target, &req.target_ids) {
        (Some(text), None) => (TargetInput::Text(text.clone()), vocab.tokenize(text)),
        (None, Some(ids)) => (TargetInput::Ids(ids.clone()), vocab.decode(ids)?),
        _ => {
            return Err(ApiError::invalid(
                "invalid_target",
                "provide exactly one of `target` and `target_ids`",
            ))
        }
    };
    let len = target_seq.len();
    let selectors = [req.mask.is_some(), req.selection.is_some(), req.select_segments.is_some()];
    if selectors.iter().filter(|&&s| s).count() > 1 {
        return Err(ApiError::invalid(
            "invalid_mask",
            "use at most one of `mask`, `selection` and `select_segments`",
        ));
    }
    let mask = if let Some(mask) = &req.mask {
        if mask.len() != len {
            return Err(ApiError::invalid(
                "invalid_mask",
                format!("mask has {} entries but the target has {len} tokens", mask.len()),
            )
            .with_details(json!({ "mask_len": mask.len(), "target_tokens": len })));
        }
        mask.clone()
    } else if let Some(selection) = &req.selection {
        let mut mask = vec![false; len];
        for &i in selection {
            *mask.get_mut(i).ok_or_else(|| {
                ApiError::invalid("invalid_mask", format!("selection index {i} is outside the {len} target tokens"))
            })? = true;
        }
        mask
    } else if let Some(selected) = &req.select_segments {
        let prompt_seq = vocab.tokenize(&req.prompt);
        let segments = segmentation::segment(&prompt_seq, &target_seq, &granularity)?;
        segmentation::segment_selection_to_mask(&segments, selected, 1 + prompt_seq.len(), len)?
    } else {
        vec![true; len]
    };
    Ok(ResolvedSalience {
        target,
        mask,
        method: req.method.unwrap_or(SalienceMethod::GradL2),
        granularity,
    })
}

/// Computes (or fetches) the token-level scores for `req` and builds the
/// report at the requested granularity.
pub async fn salience_report(state: &Arc<AppState>, req: &SalienceRequest) -> Result<(SalienceReport, CacheStatus), ApiError> {
    let resolved = resolve(state, req)?;
    if !(req.gamma.is_finite() && req.gamma > 0.0) {
        return Err(promptlens_core::Error::InvalidGamma(req.gamma).into());
    }
    let key = CacheKey::of(&KeyMaterial {
        model: &state.model_id,
        kind: "salience",
        prompt: &req.prompt,
        target: Some(&resolved.target),
        mask: Some(&resolved.mask),
        method: Some(resolved.method),
        decoding: None,
        max_new: None,
        n: None,
    });
    let worker = state.clone();
    let prompt = req.prompt.clone();
    let (target, mask, method) = (resolved.target, resolved.mask, resolved.method);
    let (result, status) = state
        .cache
        .get_or_compute(key, move |cancel| {
            let aligned = worker.explainer.salience(&prompt, &target, Some(&mask), method, &cancel)?;
            Ok(Cached::Salience(Arc::new(aligned)))
        })
        .await;
    let Cached::Salience(aligned) = result? else {
        return Err(internal_kind_mismatch());
    };
    let report = SalienceReport::build(&aligned, state.explainer.vocab(), &resolved.granularity, req.gamma, req.basis)?;
    Ok((report, status))
}

pub async fn salience(
    State(state): State<Arc<AppState>>,
    ApiJson(req): ApiJson<SalienceRequest>,
) -> Result<Response, ApiError> {
    let (report, status) = salience_report(&state, &req).await?;
    Ok(with_status(report, status))
}

// ---- datapoints and pinning ----

pub async fn list_datapoints(State(state): State<Arc<AppState>>) -> Json<Vec<Datapoint>> {
    Json(state.store.list())
}

pub async fn create_datapoint(
    State(state): State<Arc<AppState>>,
    ApiJson(new): ApiJson<NewDatapoint>,
) -> Result<(StatusCode, Json<Datapoint>), ApiError> {
    Ok((StatusCode::CREATED, Json(state.store.create(new)?)))
}

pub async fn get_datapoint(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Datapoint>, ApiError> {
    Ok(Json(state.store.get(&id)?))
}

pub async fn update_datapoint(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ApiJson(patch): ApiJson<DatapointPatch>,
) -> Result<Json<Datapoint>, ApiError> {
    Ok(Json(state.store.update(&id, patch)?))
}

pub async fn delete_datapoint(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    state.store.delete(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

pub async fn get_pin(State(state): State<Arc<AppState>>) -> Json<PinState> {
    Json(state.store.pin_state())
}

pub async fn set_pin(
    State(state): State<Arc<AppState>>,
    ApiJson(pin): ApiJson<PinState>,
) -> Result<Json<PinState>, ApiError> {
    Ok(Json(state.store.set_pin(pin)?))
}

// ---- introspection ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub model_id: String,
    pub forward_passes: u64,
    pub backward_passes: u64,
    pub cache: CacheStats,
    pub datapoints: usize,
}

pub fn diagnostics_snapshot(state: &AppState) -> Diagnostics {
    let counters = state.explainer.model().counters();
    Diagnostics {
        model_id: state.model_id.clone(),
        forward_passes: counters.forward_passes(),
        backward_passes: counters.backward_passes(),
        cache: state.cache.stats(),
        datapoints: state.store.len(),
    }
}

pub async fn diagnostics(State(state): State<Arc<AppState>>) -> Json<Diagnostics> {
    Json(diagnostics_snapshot(&state))
}

pub async fn model_info(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "model_id": state.model_id,
        "config": state.explainer.model().config(),
        "vocab_size": state.explainer.vocab().len(),
        "methods": SalienceMethod::ALL,
        "granularities": Granularity::BUILTIN.iter().map(Granularity::name).collect::<Vec<_>>(),
        "display_bases": [DisplayBasis::Sum, DisplayBasis::Mean],
    }))
}

pub async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}
