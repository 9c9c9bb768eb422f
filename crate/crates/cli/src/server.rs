//! JSON-over-HTTP API over a workspace and one frozen subject.
//!
//! Every JSON response carries `subject_hash` and `vocab_hash`. Images are
//! content-addressed under `/images/{hash}.png`.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use concept_lab::conceptor::{Decomposition, DecompositionConfig};
use concept_lab::decomposer::{manipulate_seeds, single_image_decompose, RemovalOrder, DEFAULT_TAU};
use concept_lab::oracle::PooledCosine;
use concept_lab::subject::{Subject, TokenId};
use concept_lab::Error;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config;
use crate::jobs::{JobQueue, SubmitError};
use crate::workspace::Workspace;

/// Largest `count` accepted by the generate endpoint.
pub const MAX_IMAGES: usize = 64;

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    workspace: Workspace,
    subject: Arc<Subject>,
    jobs: JobQueue,
}

impl AppState {
    /// Starts the job worker.
    pub fn new(workspace: Workspace, subject: Subject) -> Self {
        let subject = Arc::new(subject);
        let jobs = JobQueue::start(subject.clone(), workspace.clone());
        Self {
            inner: Arc::new(Inner { workspace, subject, jobs }),
        }
    }

    pub fn subject(&self) -> &Subject {
        &self.inner.subject
    }

    pub fn workspace(&self) -> &Workspace {
        &self.inner.workspace
    }
}

/// An error response: `{"error": message, "field": name?}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn not_found(what: &str) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: format!("unknown {what}"),
            field: None,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, field) = match &e {
            Error::Invalid { field, .. } => (StatusCode::UNPROCESSABLE_ENTITY, Some(field.clone())),
            Error::UnknownToken(_) => (StatusCode::UNPROCESSABLE_ENTITY, Some("token".to_string())),
            Error::Integrity { .. } => (StatusCode::CONFLICT, None),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, None),
        };
        Self {
            status,
            message: e.to_string(),
            field,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(f) = self.field {
            body["field"] = Value::String(f);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

/// `value` with the subject and vocabulary hashes added.
fn stamped(state: &AppState, mut value: Value) -> Value {
    if let Value::Object(m) = &mut value {
        m.insert("subject_hash".into(), state.subject().weights_hash().into());
        m.insert("vocab_hash".into(), state.subject().vocab_hash().into());
    }
    value
}

fn ok(state: &AppState, value: Value) -> ApiResult {
    Ok(Json(stamped(state, value)).into_response())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: e.to_string(),
        field: None,
    })?
}

fn load(state: &AppState, id: &str) -> Result<Decomposition, ApiError> {
    state.workspace().load_decomposition(id)?.ok_or_else(|| ApiError::not_found("decomposition"))
}

fn image_url(hash: &str) -> String {
    format!("/images/{hash}.png")
}

async fn list_decompositions(State(state): State<AppState>) -> ApiResult {
    let s = state.clone();
    let items = blocking(move || {
        let mut items = Vec::new();
        for id in s.workspace().decomposition_ids()? {
            let Some(dec) = s.workspace().load_decomposition(&id)? else { continue };
            items.push(json!({
                "id": id,
                "concept": dec.concept,
                "seed": dec.seed,
                "n": dec.n,
                "lambda_sparsity": dec.lambda_sparsity,
                "compatible": dec.verify_against(s.subject()).is_ok(),
                "derived": dec.provenance.is_some(),
            }));
        }
        Ok(items)
    })
    .await?;
    ok(&state, json!({ "decompositions": items }))
}

async fn get_decomposition(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let s = state.clone();
    let dec = blocking(move || load(&s, &id).map(|d| (id, d))).await?;
    ok(&state, json!({ "id": dec.0, "decomposition": dec.1 }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub seed: u64,
    #[serde(default = "one")]
    pub count: usize,
    /// Token name (or numeric id) to scale.
    #[serde(default)]
    pub edits: Option<BTreeMap<String, f64>>,
}

fn one() -> usize {
    1
}

fn resolve_edits(subject: &Subject, edits: &BTreeMap<String, f64>) -> Result<BTreeMap<TokenId, f64>, Error> {
    edits
        .iter()
        .map(|(k, &v)| {
            let id = match k.parse::<u32>() {
                Ok(n) if subject.vocab().contains(TokenId(n)) => TokenId(n),
                _ => subject.vocab().id(k)?,
            };
            Ok((id, v))
        })
        .collect()
}

fn parse_body<T: serde::de::DeserializeOwned>(body: Value) -> Result<T, ApiError> {
    serde_json::from_value(body).map_err(|e| ApiError {
        status: StatusCode::UNPROCESSABLE_ENTITY,
        message: e.to_string(),
        field: Some("body".into()),
    })
}

async fn generate(State(state): State<AppState>, Path(id): Path<String>, Json(body): Json<Value>) -> ApiResult {
    let req: GenerateRequest = parse_body(body)?;
    if req.count == 0 || req.count > MAX_IMAGES {
        return Err(Error::invalid("count", format!("must be in 1..={MAX_IMAGES}")).into());
    }
    let s = state.clone();
    let out = blocking(move || {
        let dec = load(&s, &id)?;
        dec.verify_against(s.subject())?;
        let edits = resolve_edits(s.subject(), req.edits.as_ref().unwrap_or(&BTreeMap::new()))?;
        let seeds: Vec<u64> = (0..req.count as u64).map(|i| req.seed.wrapping_add(i)).collect();
        let images = manipulate_seeds(s.subject(), &dec, &edits, &seeds)?;
        let mut items = Vec::new();
        for (img, seed) in images.iter().zip(&seeds) {
            let hash = s.workspace().store_image(img)?;
            items.push(json!({ "seed": seed, "hash": hash, "url": image_url(&hash) }));
        }
        let applied: BTreeMap<String, f64> = edits.iter().map(|(t, v)| (s.subject().vocab().token(*t).to_string(), *v)).collect();
        Ok(json!({ "decomposition_id": id, "images": items, "edits": applied }))
    })
    .await?;
    ok(&state, out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleImageRequest {
    pub seed: u64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub order: RemovalOrder,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

async fn single_image(State(state): State<AppState>, Path(id): Path<String>, Json(body): Json<Value>) -> ApiResult {
    let req: SingleImageRequest = parse_body(body)?;
    let s = state.clone();
    let out = blocking(move || {
        let dec = load(&s, &id)?;
        let result = single_image_decompose(s.subject(), &dec, req.seed, req.tau, req.order, &PooledCosine::default())?;
        let reference = manipulate_seeds(s.subject(), &dec, &BTreeMap::new(), &[req.seed])?;
        let removed: BTreeMap<TokenId, f64> = dec
            .ranked
            .iter()
            .filter(|r| !result.surviving.iter().any(|k| k.token_id == r.token_id))
            .map(|r| (r.token_id, 0.0))
            .collect();
        let fin = manipulate_seeds(s.subject(), &dec, &removed, &[req.seed])?;
        let (rh, fh) = (s.workspace().store_image(&reference[0])?, s.workspace().store_image(&fin[0])?);
        Ok(json!({
            "decomposition_id": id,
            "result": result,
            "reference_url": image_url(&rh),
            "final_url": image_url(&fh),
        }))
    })
    .await?;
    ok(&state, out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeRequest {
    pub concept: String,
    #[serde(default)]
    pub config: Option<Value>,
}

/// Checks everything that can be checked before the corpus exists.
fn validate_job(subject: &Subject, req: &DecomposeRequest) -> Result<DecompositionConfig, Error> {
    subject.vocab().id(&req.concept).map_err(|_| Error::invalid("concept", format!("unknown concept `{}`", req.concept)))?;
    let cfg = match &req.config {
        None => DecompositionConfig::default(),
        Some(v) => config::overlay(&DecompositionConfig::default(), v)?,
    };
    cfg.validate()?;
    let non_null = subject.vocab().len() - 1;
    let available = match cfg.top_m {
        Some(m) if m > non_null => return Err(Error::invalid("top_m", format!("{m} exceeds the {non_null} non-null tokens"))),
        Some(m) => m,
        None => non_null - usize::from(cfg.exclude_concept_token),
    };
    if cfg.n > available {
        return Err(Error::invalid("n", format!("{} exceeds the {available} candidate tokens", cfg.n)));
    }
    Ok(cfg)
}

async fn submit_decompose(State(state): State<AppState>, Json(body): Json<Value>) -> ApiResult {
    let req: DecomposeRequest = parse_body(body)?;
    let cfg = validate_job(state.subject(), &req)?;
    match state.inner.jobs.submit(&req.concept, cfg) {
        Ok(handle) => Ok((StatusCode::ACCEPTED, Json(stamped(&state, json!({ "job": handle })))).into_response()),
        Err(SubmitError::Conflict(other)) => Err(ApiError {
            status: StatusCode::CONFLICT,
            message: format!("job {other} is already training `{}`", req.concept),
            field: Some("concept".into()),
        }),
    }
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let job = state.inner.jobs.get(&id).ok_or_else(|| ApiError::not_found("job"))?;
    ok(&state, json!({ "job": job }))
}

async fn get_image(State(state): State<AppState>, Path(file): Path<String>) -> ApiResult {
    let hash = file.strip_suffix(".png").ok_or_else(|| ApiError::not_found("image"))?;
    let path = state.workspace().image_path(hash).ok_or_else(|| ApiError::not_found("image"))?;
    let bytes = blocking(move || std::fs::read(path).map_err(|e| ApiError::from(Error::Io(e)))).await?;
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "public, max-age=31536000, immutable")], bytes).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/decompositions", get(list_decompositions))
        .route("/api/decompositions/{id}", get(get_decomposition))
        .route("/api/decompositions/{id}/generate", post(generate))
        .route("/api/decompositions/{id}/single-image", post(single_image))
        .route("/api/jobs/decompose", post(submit_decompose))
        .route("/api/jobs/{id}", get(get_job))
        .route("/images/{file}", get(get_image))
        .with_state(state)
}

pub async fn serve(state: AppState, host: &str, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
