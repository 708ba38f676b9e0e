//! HTTP session service for interactive elicitation.
//!
//! Sessions are held in memory and, when a data directory is configured,
//! persisted as `{request, answers}` after every mutation. At startup the
//! stored answers are replayed; the loop is deterministic so the replay
//! reproduces the pending query ids.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::elicit::{LoopConfig, ProblemKind, ProblemParams, ProblemSetup, Query, SessionState};
use crate::error::Error;
use crate::rng::stream_id;
use crate::types::Label;

/// Default cap on `pool_size * contexts` for one session.
pub const DEFAULT_POOL_BUDGET: usize = 5_000_000;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Where sessions are persisted; `None` keeps them in memory only.
    pub data_dir: Option<PathBuf>,
    /// Static files mounted at `/`.
    pub static_dir: Option<PathBuf>,
    pub pool_budget: usize,
    /// Synthesis requests with at least this many nodes run as jobs.
    pub job_min_nodes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { data_dir: None, static_dir: None, pool_budget: DEFAULT_POOL_BUDGET, job_min_nodes: 14 }
    }
}

/// Body of `POST /api/sessions`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub problem: String,
    #[serde(default)]
    pub problem_params: Value,
    #[serde(default)]
    pub loop_config: Value,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct StoredAnswer {
    query_id: u64,
    label: Label,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredSession {
    request: CreateRequest,
    answers: Vec<StoredAnswer>,
}

struct Entry {
    request: CreateRequest,
    state: SessionState,
    answers: Vec<StoredAnswer>,
    last: Option<(StoredAnswer, usize)>,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum Job {
    Running,
    Done { result: Value },
    Failed { code: String, message: String },
}

#[derive(Default)]
struct Store {
    sessions: RwLock<HashMap<String, Arc<Mutex<Entry>>>>,
    setups: Mutex<HashMap<String, Arc<ProblemSetup>>>,
    jobs: Mutex<HashMap<u64, Job>>,
    next_job: AtomicU64,
    next_session: AtomicU64,
}

#[derive(Clone)]
pub struct AppState {
    cfg: Arc<ServiceConfig>,
    store: Arc<Store>,
}

/// JSON error `{code, message}` with a status.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown session {id}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::Invalid(_) | Error::Json(_) | Error::DimensionMismatch { .. } | Error::FormatVersion(_) => {
                (StatusCode::BAD_REQUEST, "invalid")
            }
            Error::StaleQuery { .. } => (StatusCode::CONFLICT, "stale_query"),
            Error::Finished => (StatusCode::CONFLICT, "finished"),
            Error::CapExceeded { .. } => (StatusCode::INSUFFICIENT_STORAGE, "budget_exceeded"),
            Error::EmptyPool | Error::DegeneratePool | Error::Infeasible(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "unprocessable")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

impl CreateRequest {
    /// Parsed problem, parameters and loop configuration (defaults filled in).
    pub fn resolve(&self) -> crate::Result<(ProblemKind, ProblemParams, LoopConfig)> {
        let kind: ProblemKind = self.problem.parse()?;
        let params: ProblemParams = if self.problem_params.is_null() {
            ProblemParams::default()
        } else {
            serde_json::from_value(self.problem_params.clone())?
        };
        let overrides = if self.loop_config.is_null() { json!({}) } else { self.loop_config.clone() };
        let cfg = LoopConfig::with_overrides(kind, &params, &overrides)?;
        Ok((kind, params, cfg))
    }

    /// A fresh session without evaluation ticks.
    pub fn open(&self) -> crate::Result<SessionState> {
        let (kind, params, cfg) = self.resolve()?;
        let setup = Arc::new(ProblemSetup::build(kind, &params, cfg.pool_spec(), self.seed)?);
        SessionState::new(setup, cfg, self.seed, stream_id(&[self.seed]), None)
    }
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Self {
        Self { cfg: Arc::new(cfg), store: Arc::default() }
    }

    fn setup_for(&self, kind: ProblemKind, params: &ProblemParams, cfg: &LoopConfig, seed: u64) -> ApiResult<Arc<ProblemSetup>> {
        let spec = cfg.pool_spec();
        let contexts = match kind {
            ProblemKind::Pctsp => spec.train_instances + spec.test_instances,
            ProblemKind::Config => 1,
        };
        let cells = spec.pool_size.saturating_mul(contexts);
        if cells > self.cfg.pool_budget {
            return Err(ApiError::new(
                StatusCode::INSUFFICIENT_STORAGE,
                "budget_exceeded",
                format!("pool of {} candidates over {contexts} instances exceeds the budget of {}", spec.pool_size, self.cfg.pool_budget),
            ));
        }
        let key = serde_json::to_string(&(kind, params, spec, seed)).map_err(Error::from)?;
        if let Some(s) = self.store.setups.lock().get(&key) {
            return Ok(Arc::clone(s));
        }
        let built = Arc::new(ProblemSetup::build(kind, params, spec, seed)?);
        Ok(Arc::clone(self.store.setups.lock().entry(key).or_insert(built)))
    }

    fn open(&self, request: CreateRequest, answers: &[StoredAnswer]) -> ApiResult<Entry> {
        let (kind, params, cfg) = request.resolve()?;
        let setup = self.setup_for(kind, &params, &cfg, request.seed)?;
        let mut state = SessionState::new(setup, cfg, request.seed, stream_id(&[request.seed]), None)?;
        let mut last = None;
        for a in answers {
            state.next_query()?;
            let out = state.submit(a.query_id, a.label)?;
            last = Some((*a, out.iteration));
        }
        Ok(Entry { request, state, answers: answers.to_vec(), last })
    }

    fn persist(&self, id: &str, e: &Entry) {
        let Some(dir) = &self.cfg.data_dir else { return };
        let stored = StoredSession { request: e.request.clone(), answers: e.answers.clone() };
        let tmp = dir.join(format!("{id}.json.tmp"));
        let res = serde_json::to_vec(&stored)
            .map_err(std::io::Error::from)
            .and_then(|b| std::fs::write(&tmp, b))
            .and_then(|_| std::fs::rename(&tmp, dir.join(format!("{id}.json"))));
        if let Err(err) = res {
            log::error!("persisting session {id}: {err}");
        }
    }

    /// Reloads every persisted session from the data directory.
    pub fn restore(&self) -> std::io::Result<usize> {
        let Some(dir) = &self.cfg.data_dir else { return Ok(0) };
        std::fs::create_dir_all(dir)?;
        let mut n = 0;
        for ent in std::fs::read_dir(dir)? {
            let path = ent?.path();
            if path.extension().and_then(|s| s.to_str()) != Some("json") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else { continue };
            let loaded = std::fs::read(&path)
                .map_err(Error::from)
                .and_then(|b| Ok(serde_json::from_slice::<StoredSession>(&b)?));
            match loaded.map_err(ApiError::from).and_then(|s| self.open(s.request, &s.answers)) {
                Ok(entry) => {
                    if let Some(num) = id.strip_prefix('s').and_then(|r| r.split('-').next()).and_then(|x| x.parse::<u64>().ok()) {
                        self.store.next_session.fetch_max(num + 1, Ordering::SeqCst);
                    }
                    self.store.sessions.write().insert(id, Arc::new(Mutex::new(entry)));
                    n += 1;
                }
                Err(e) => log::warn!("skipping session file {}: {}", path.display(), e.message),
            }
        }
        Ok(n)
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Entry>>> {
        self.store.sessions.read().get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }

    pub fn session_count(&self) -> usize {
        self.store.sessions.read().len()
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn create_session(State(app): State<AppState>, body: axum::body::Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let request: CreateRequest = serde_json::from_slice(&body).map_err(Error::from)?;
    let app2 = app.clone();
    let entry = blocking(move || app2.open(request, &[])).await?;
    let n = app.store.next_session.fetch_add(1, Ordering::SeqCst);
    let id = format!("s{n}-{:08x}", rand::random::<u32>());
    app.persist(&id, &entry);
    app.store.sessions.write().insert(id.clone(), Arc::new(Mutex::new(entry)));
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))))
}

fn side(setup: &ProblemSetup, ctx: usize, id: usize) -> crate::Result<Value> {
    let s = setup.candidate(id)?;
    let breakdown: serde_json::Map<String, Value> =
        setup.breakdown(ctx, &s)?.into_iter().map(|(k, v)| (k, json!(v))).collect();
    Ok(json!({ "candidate_id": id, "render": setup.render(ctx, &s)?, "objective_breakdown": breakdown }))
}

/// `{query_id, iteration, instance_id, attempt, left, right}`.
pub fn query_payload(state: &SessionState, q: &Query) -> crate::Result<Value> {
    let setup = state.setup();
    Ok(json!({
        "query_id": q.query_id,
        "iteration": q.iteration,
        "instance_id": q.context,
        "attempt": q.attempt,
        "left": side(setup, q.context, q.left)?,
        "right": side(setup, q.context, q.right)?,
    }))
}

async fn get_query(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let s = app.session(&id)?;
    blocking(move || {
        let mut e = s.lock();
        let q = e.state.next_query()?;
        Ok(Json(query_payload(&e.state, &q)?))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerBody {
    query_id: u64,
    label: Label,
}

async fn post_answer(State(app): State<AppState>, UrlPath(id): UrlPath<String>, body: axum::body::Bytes) -> ApiResult<Json<Value>> {
    let body: AnswerBody = serde_json::from_slice(&body).map_err(Error::from)?;
    let s = app.session(&id)?;
    let answer = StoredAnswer { query_id: body.query_id, label: body.label };
    let app2 = app.clone();
    blocking(move || {
        let mut e = s.lock();
        if let Some((prev, iteration)) = e.last {
            if prev.query_id == answer.query_id {
                if prev.label == answer.label {
                    return Ok(Json(json!({ "iteration": iteration, "accepted": false })));
                }
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "stale_query",
                    format!("query {} was already answered", answer.query_id),
                ));
            }
        }
        let out = e.state.submit(answer.query_id, answer.label)?;
        e.answers.push(answer);
        e.last = Some((answer, out.iteration));
        app2.persist(&id, &e);
        Ok(Json(json!({ "iteration": out.iteration, "accepted": out.accepted, "finished": e.state.is_finished() })))
    })
    .await
}

async fn get_state(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let s = app.session(&id)?;
    let snap = s.lock().state.snapshot();
    Ok(Json(state_payload(&snap)))
}

/// `{iteration, steps, weights_mean, weights_std, history_counts, finished}`.
pub fn state_payload(snap: &crate::elicit::SessionSnapshot) -> Value {
    json!({
        "iteration": snap.iteration,
        "steps": snap.steps,
        "weights_mean": snap.weights_mean,
        "weights_std": snap.weights_std,
        "history_counts": {
            "answered": snap.answered,
            "indifferent": snap.indifferent,
            "exchanges": snap.exchanges,
        },
        "finished": snap.finished,
    })
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SynthBody {
    #[serde(default)]
    instance_id: Option<usize>,
}

/// `{instance_id, solver, render, objective_breakdown, structure, utility}`.
pub fn synthesis_payload(setup: &ProblemSetup, w: &crate::types::WeightVector, ctx: usize) -> crate::Result<Value> {
    let r = crate::elicit::session::synthesize_with(setup, w, ctx)?;
    let s = &r.synthesis.structure;
    let breakdown: serde_json::Map<String, Value> =
        setup.breakdown(ctx, s)?.into_iter().map(|(k, v)| (k, json!(v))).collect();
    Ok(json!({
        "instance_id": ctx,
        "solver": r.synthesis.solver.as_str(),
        "render": setup.render(ctx, s)?,
        "objective_breakdown": breakdown,
        "structure": s,
        "utility": r.utility,
    }))
}

async fn post_synthesize(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: axum::body::Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let body: SynthBody = if body.is_empty() { SynthBody::default() } else { serde_json::from_slice(&body).map_err(Error::from)? };
    let s = app.session(&id)?;
    let (setup, w) = {
        let e = s.lock();
        (Arc::clone(e.state.setup()), e.state.ensemble().mean_weights())
    };
    let ctx = body.instance_id.unwrap_or_else(|| setup.test_contexts().first().copied().unwrap_or(0));
    if ctx >= setup.context_count() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid", format!("unknown instance {ctx}")));
    }
    let heavy = setup.kind() == ProblemKind::Pctsp
        && setup.params().nodes >= app.cfg.job_min_nodes
        && setup.params().nodes <= setup.params().exact_cap;
    if !heavy {
        let v = blocking(move || Ok(synthesis_payload(&setup, &w, ctx)?)).await?;
        return Ok((StatusCode::OK, Json(v)));
    }
    let job = app.store.next_job.fetch_add(1, Ordering::SeqCst) + 1;
    app.store.jobs.lock().insert(job, Job::Running);
    let store = Arc::clone(&app.store);
    tokio::task::spawn_blocking(move || {
        let status = match synthesis_payload(&setup, &w, ctx) {
            Ok(result) => Job::Done { result },
            Err(e) => {
                let a = ApiError::from(e);
                Job::Failed { code: a.code.into(), message: a.message }
            }
        };
        store.jobs.lock().insert(job, status);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job, "status": "running" }))))
}

async fn get_job(State(app): State<AppState>, UrlPath(id): UrlPath<u64>) -> ApiResult<Json<Value>> {
    let job = app.store.jobs.lock().get(&id).cloned();
    match job {
        Some(j) => {
            let mut v = serde_json::to_value(j).map_err(Error::from)?;
            v["job_id"] = json!(id);
            Ok(Json(v))
        }
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown job {id}"))),
    }
}

pub fn router(app: AppState) -> Router {
    let static_dir = app.cfg.static_dir.clone();
    let api = Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/query", get(get_query))
        .route("/api/sessions/{id}/answer", post(post_answer))
        .route("/api/sessions/{id}/state", get(get_state))
        .route("/api/sessions/{id}/synthesize", post(post_synthesize))
        .route("/api/jobs/{id}", get(get_job))
        .with_state(app);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Restores persisted sessions and serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, cfg: ServiceConfig) -> anyhow::Result<()> {
    let app = AppState::new(cfg);
    let restored = tokio::task::block_in_place(|| app.restore())?;
    if restored > 0 {
        log::info!("restored {restored} sessions");
    }
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Default static bundle location relative to the working directory.
pub fn default_static_dir() -> Option<PathBuf> {
    let p = Path::new("webui/dist");
    p.is_dir().then(|| p.to_path_buf())
}
