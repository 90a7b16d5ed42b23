//! HTTP surface over the ingestion engine.
//!
//! | route | body | result |
//! |---|---|---|
//! | `POST /ingest[?source=hint]` | PNG bytes | `{record_id, decision, q, c, f}`, or 202 when deferred |
//! | `GET /queue[?state=PENDING]` | | review items |
//! | `POST /queue/next` | `{reviewer_id, lease_seconds?}` | claimed item or 204 |
//! | `POST /queue/{id}/claim` | `{reviewer_id, lease_seconds?}` | item, 409 on conflict |
//! | `POST /queue/{id}/release` | `{reviewer_id}` | item |
//! | `POST /queue/{id}/label` | `{reviewer_id, label: 0, 1 or "UNQUALIFIED"}` | resolution |
//! | `POST /records/{id}/reopen` | | item |
//! | `GET /records/{id}` | | full record |
//! | `GET /images/{id}` | | PNG |
//! | `GET /stats` | | manifest statistics |
//! | `POST /model/reload` | | `{version, scorer_id}` |
//! | `GET /healthz` | | `ok`, no auth |
//!
//! Every successful mutation is journaled as exactly one manifest event.

use std::collections::HashSet;
use std::fs;
use std::future::Future;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::mpsc;

use tipqc_core::curator::{EventKind, ManifestError, Source, Status};
use tipqc_core::pipeline::{analyze, Engine, IngestOutcome, PipelineConfig, PipelineError};
use tipqc_core::router::{HumanVerdict, ItemState, QueueError, ReviewItem};
use tipqc_core::scorer::{Scorer, ScorerModel};
use tipqc_core::synth::Verdict;

pub const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

/// Milliseconds since the epoch, or any monotone substitute in tests.
pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0))
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("model: {0}")]
    Model(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A scorer with the version it was installed under.
pub struct ScorerHandle {
    pub version: u64,
    pub scorer: Arc<dyn Scorer>,
}

struct Deferred {
    bytes: Bytes,
    hint: Option<String>,
}

pub struct AppState {
    engine: Mutex<Engine>,
    scorer: RwLock<Arc<ScorerHandle>>,
    config: PipelineConfig,
    clock: Clock,
    in_flight: AtomicUsize,
    deferred: AtomicUsize,
    backlog_tx: mpsc::UnboundedSender<Deferred>,
    backlog_rx: Mutex<Option<mpsc::UnboundedReceiver<Deferred>>>,
    worker_started: AtomicBool,
    next_version: AtomicU64,
}

impl AppState {
    pub fn new(engine: Engine, scorer: Arc<dyn Scorer>, clock: Clock) -> Arc<Self> {
        let (tx, rx) = mpsc::unbounded_channel();
        Arc::new(Self {
            config: engine.config().clone(),
            engine: Mutex::new(engine),
            scorer: RwLock::new(Arc::new(ScorerHandle { version: 1, scorer })),
            clock,
            in_flight: AtomicUsize::new(0),
            deferred: AtomicUsize::new(0),
            backlog_tx: tx,
            backlog_rx: Mutex::new(Some(rx)),
            worker_started: AtomicBool::new(false),
            next_version: AtomicU64::new(2),
        })
    }

    pub fn engine(&self) -> MutexGuard<'_, Engine> {
        self.engine.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn scorer(&self) -> Arc<ScorerHandle> {
        self.scorer.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Installs a new scorer; in-flight requests keep the one they started with.
    pub fn swap_scorer(&self, scorer: Arc<dyn Scorer>) -> u64 {
        let version = self.next_version.fetch_add(1, Ordering::SeqCst);
        *self.scorer.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(ScorerHandle { version, scorer });
        version
    }

    pub fn now(&self) -> u64 {
        (self.clock)()
    }

    /// Deferred ingests not yet processed.
    pub fn deferred(&self) -> usize {
        self.deferred.load(Ordering::SeqCst)
    }

    /// Analysis runs without the engine lock; only the commit is serialized.
    pub fn ingest_now(&self, bytes: &[u8], hint: Option<&str>) -> Result<IngestOutcome, PipelineError> {
        let handle = self.scorer();
        let result = analyze(bytes, &self.config, handle.scorer.as_ref()).and_then(|a| {
            let mut engine = self.engine();
            let now = self.now();
            engine.commit_real(a, hint, now)
        });
        if let Err(e) = &result {
            if !e.is_client_error() && !matches!(e, PipelineError::Manifest(_)) {
                let ev = EventKind::IngestFailed { source_hint: hint.map(str::to_owned), error: e.to_string() };
                let mut engine = self.engine();
                let now = self.now();
                if let Err(log_err) = engine.manifest_mut().commit(now, ev) {
                    tracing::error!("could not journal ingest failure: {log_err}");
                }
            }
        }
        result
    }

    fn start_worker(self: &Arc<Self>) {
        if self.worker_started.swap(true, Ordering::SeqCst) {
            return;
        }
        let Ok(rt) = tokio::runtime::Handle::try_current() else {
            self.worker_started.store(false, Ordering::SeqCst);
            return;
        };
        let Some(mut rx) = self.backlog_rx.lock().unwrap_or_else(|p| p.into_inner()).take() else {
            return;
        };
        let state = self.clone();
        rt.spawn(async move {
            while let Some(job) = rx.recv().await {
                let st = state.clone();
                let res = tokio::task::spawn_blocking(move || st.ingest_now(&job.bytes, job.hint.as_deref())).await;
                match res {
                    Ok(Err(e)) => tracing::warn!("deferred ingest failed: {e}"),
                    Err(e) => tracing::error!("deferred ingest panicked: {e}"),
                    Ok(Ok(_)) => {}
                }
                state.deferred.fetch_sub(1, Ordering::SeqCst);
            }
        });
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Decode(_) => StatusCode::BAD_REQUEST,
            PipelineError::Rejected(_) => StatusCode::UNPROCESSABLE_ENTITY,
            PipelineError::Manifest(m) => return ApiError::from_manifest(m),
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl ApiError {
    fn from_manifest(e: &ManifestError) -> Self {
        let status = match e {
            ManifestError::UnknownRecord(_) | ManifestError::Queue(QueueError::UnknownItem(_)) => StatusCode::NOT_FOUND,
            ManifestError::Queue(QueueError::InvalidLease) => StatusCode::BAD_REQUEST,
            ManifestError::Queue(_) | ManifestError::Rejected(_) | ManifestError::DuplicateRecord(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<ManifestError> for ApiError {
    fn from(e: ManifestError) -> Self {
        ApiError::from_manifest(&e)
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Builds the router and starts the deferred-ingest worker when a runtime
/// is available.
pub fn app(state: Arc<AppState>) -> Router {
    state.start_worker();
    let api = Router::new()
        .route("/ingest", post(ingest))
        .route("/queue", get(queue))
        .route("/queue/next", post(claim_next))
        .route("/queue/{id}/claim", post(claim))
        .route("/queue/{id}/release", post(release))
        .route("/queue/{id}/label", post(label))
        .route("/records/{id}", get(record))
        .route("/records/{id}/reopen", post(reopen))
        .route("/images/{id}", get(image))
        .route("/stats", get(stats))
        .route("/model/reload", post(reload_model))
        .route_layer(middleware::from_fn_with_state(state.clone(), auth));
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .merge(api)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

async fn auth(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
        }
    }
    next.run(req).await
}

#[derive(Deserialize)]
struct IngestQuery {
    source: Option<String>,
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn ingest(State(state): State<Arc<AppState>>, Query(q): Query<IngestQuery>, body: Bytes) -> ApiResult<Response> {
    if body.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty body"));
    }
    let running = state.in_flight.fetch_add(1, Ordering::SeqCst);
    let _guard = InFlight(&state.in_flight);
    if state.config.backlog > 0 && running >= state.config.backlog && state.worker_started.load(Ordering::SeqCst) {
        state.deferred.fetch_add(1, Ordering::SeqCst);
        if state.backlog_tx.send(Deferred { bytes: body, hint: q.source }).is_err() {
            state.deferred.fetch_sub(1, Ordering::SeqCst);
            return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "ingest worker stopped"));
        }
        let body = json!({ "queued": true, "deferred": state.deferred() });
        return Ok((StatusCode::ACCEPTED, Json(body)).into_response());
    }
    let st = state.clone();
    let out = tokio::task::spawn_blocking(move || st.ingest_now(&body, q.source.as_deref()))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(out).into_response())
}

#[derive(Deserialize)]
struct QueueQuery {
    state: Option<String>,
}

async fn queue(State(state): State<Arc<AppState>>, Query(q): Query<QueueQuery>) -> ApiResult<Json<Vec<ReviewItem>>> {
    let filter = match q.state.as_deref().map(str::to_ascii_uppercase).as_deref() {
        None | Some("") | Some("ALL") => None,
        Some("PENDING") => Some(ItemState::Pending),
        Some("CLAIMED") => Some(ItemState::Claimed),
        Some("RESOLVED") => Some(ItemState::Resolved),
        Some(other) => return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unknown state {other}"))),
    };
    let engine = state.engine();
    Ok(Json(engine.manifest().state().queue.list(filter, state.now())))
}

#[derive(Deserialize)]
struct ClaimBody {
    reviewer_id: String,
    lease_seconds: Option<u64>,
}

fn do_claim(state: &AppState, engine: &mut Engine, id: &str, body: &ClaimBody) -> ApiResult<ReviewItem> {
    if body.reviewer_id.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "reviewer_id is required"));
    }
    let lease_ms = body.lease_seconds.map_or(state.config.lease_ms, |s| s.saturating_mul(1000));
    let now = state.now();
    let ev = EventKind::Claimed { record_id: id.into(), reviewer: body.reviewer_id.clone(), lease_ms };
    engine.manifest_mut().commit(now, ev)?;
    Ok(engine.manifest().state().queue.get(id).expect("claimed item").view_at(now))
}

async fn claim(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Json(body): Json<ClaimBody>) -> ApiResult<Json<ReviewItem>> {
    let mut engine = state.engine();
    do_claim(&state, &mut engine, &id, &body).map(Json)
}

async fn claim_next(State(state): State<Arc<AppState>>, Json(body): Json<ClaimBody>) -> ApiResult<Response> {
    let mut engine = state.engine();
    let Some(id) = engine.manifest().state().queue.next_claimable(state.now()) else {
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    do_claim(&state, &mut engine, &id, &body).map(|it| Json(it).into_response())
}

#[derive(Deserialize)]
struct ReleaseBody {
    reviewer_id: String,
}

async fn release(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Json(body): Json<ReleaseBody>) -> ApiResult<Json<ReviewItem>> {
    let mut engine = state.engine();
    let now = state.now();
    engine.manifest_mut().commit(now, EventKind::Released { record_id: id.clone(), reviewer: body.reviewer_id })?;
    Ok(Json(engine.manifest().state().queue.get(&id).expect("released item").view_at(now)))
}

#[derive(Deserialize)]
struct LabelBody {
    reviewer_id: String,
    label: HumanVerdict,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Resolution {
    pub record_id: String,
    pub human_label: Option<HumanVerdict>,
    pub final_label: Option<u8>,
    pub status: Status,
    pub source: Source,
    pub synth_verdict: Option<Verdict>,
}

async fn label(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Json(body): Json<LabelBody>) -> ApiResult<Json<Resolution>> {
    let mut engine = state.engine();
    let now = state.now();
    let ev = EventKind::HumanLabeled { record_id: id.clone(), reviewer: body.reviewer_id, label: body.label };
    engine.manifest_mut().commit(now, ev)?;
    let r = engine.manifest().state().record(&id)?;
    Ok(Json(Resolution {
        record_id: id,
        human_label: r.human_label,
        final_label: r.final_label,
        status: r.status,
        source: r.source,
        synth_verdict: r.synth_verdict,
    }))
}

async fn reopen(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<ReviewItem>> {
    let mut engine = state.engine();
    let now = state.now();
    engine.manifest_mut().commit(now, EventKind::Reopened { record_id: id.clone() })?;
    Ok(Json(engine.manifest().state().queue.get(&id).expect("reopened item").view_at(now)))
}

async fn record(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let engine = state.engine();
    let r = engine.manifest().state().record(&id)?;
    Ok(Json(r).into_response())
}

async fn image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let path = state.engine().manifest().state().record(&id)?.image_path.clone();
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, format!("image for {id}: {e}")))?;
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, "image/png".parse().expect("static header"));
    Ok((headers, bytes).into_response())
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<tipqc_core::curator::ManifestStats> {
    let engine = state.engine();
    Json(engine.manifest().state().stats(state.now()))
}

async fn reload_model(State(state): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    let path = state.config.model.clone();
    let model = tokio::task::spawn_blocking(move || ScorerModel::load(&path))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let id = model.id();
    let version = state.swap_scorer(Arc::new(model));
    Ok(Json(json!({ "version": version, "scorer_id": id })))
}

/// Polls `dir` and ingests PNG files not seen before. Files already
/// journaled under a `watch:` hint are skipped.
pub async fn watch_dir(state: Arc<AppState>, dir: std::path::PathBuf, interval: Duration) {
    let mut seen: HashSet<String> = state
        .engine()
        .manifest()
        .state()
        .records
        .values()
        .filter_map(|r| r.source_hint.as_deref()?.strip_prefix("watch:").map(str::to_owned))
        .collect();
    let mut tick = tokio::time::interval(interval);
    loop {
        tick.tick().await;
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| Path::new(n).extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) && !seen.contains(n))
            .collect();
        names.sort();
        for name in names {
            let Ok(bytes) = fs::read(dir.join(&name)) else { continue };
            seen.insert(name.clone());
            let st = state.clone();
            let hint = format!("watch:{name}");
            match tokio::task::spawn_blocking(move || st.ingest_now(&bytes, Some(&hint))).await {
                Ok(Ok(o)) => tracing::info!("{name} -> {} {}", o.record_id, o.decision),
                Ok(Err(e)) => tracing::warn!("{name}: {e}"),
                Err(e) => tracing::error!("{name}: {e}"),
            }
        }
    }
}

/// Serves on `listener` until `shutdown` resolves, then snapshots the
/// manifest.
pub async fn serve_on(listener: TcpListener, state: Arc<AppState>, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
    let watcher = state.config.watch_dir.clone().map(|dir| {
        let interval = Duration::from_millis(state.config.watch_interval_ms.max(10));
        tokio::spawn(watch_dir(state.clone(), dir, interval))
    });
    axum::serve(listener, app(state.clone())).with_graceful_shutdown(shutdown).await?;
    if let Some(w) = watcher {
        w.abort();
    }
    state.engine().manifest_mut().snapshot()?;
    Ok(())
}

/// Validates the config, loads the model, opens the manifest and serves
/// until Ctrl-C.
pub async fn serve(config: PipelineConfig) -> Result<(), ServiceError> {
    config.validate()?;
    let model = ScorerModel::load(&config.model).map_err(|e| ServiceError::Model(e.to_string()))?;
    let clock = system_clock();
    let engine = Engine::open(config.clone(), clock())?;
    let state = AppState::new(engine, Arc::new(model), clock);
    let listener = TcpListener::bind(&config.bind).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    serve_on(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
