//! HTTP session service over the editing engine.
//!
//! A client uploads a source image once (`POST /sessions`), which starts
//! inversion and the bald proxy in the background. Edits posted to the
//! session (`POST /sessions/{id}/edits`, a recipe in JSON with inline
//! images) queue as jobs for a single worker. Job progress is available by
//! polling `GET /jobs/{id}` (optionally long-polling with `?wait_ms=`) or as
//! a server-sent event stream at `GET /jobs/{id}/events`.

mod error;
pub mod jobs;
pub mod store;

use std::collections::HashMap;
use std::convert::Infallible;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use hairproxy_core::config::ServiceSection;
use hairproxy_core::io::{decode_image, encode_image_png};
use hairproxy_core::{
    Config, EditRequest, Engine, Image, NoProgress, RecipeFile, Resolve, SourceState,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

pub use error::{Error, Result};
use jobs::JobProgress;
pub use jobs::{JobEvent, JobRecord, JobState};
pub use store::{HistoryEntry, HistoryOutcome, SessionMeta, Store};

pub const BIND_ENV: &str = "HAIRPROXY_BIND";
pub const PORT_ENV: &str = "HAIRPROXY_PORT";

/// Longest a single long-poll request is held open.
const MAX_WAIT: Duration = Duration::from_secs(30);
const RETRY_AFTER_S: &str = "1";

#[derive(Clone, Debug)]
pub struct ServiceOptions {
    pub store_dir: PathBuf,
    pub session_ttl: Duration,
    pub queue_capacity: usize,
    pub sweep_interval: Duration,
}

impl ServiceOptions {
    pub fn from_section(s: &ServiceSection) -> Self {
        ServiceOptions {
            store_dir: s.store_dir.clone(),
            session_ttl: Duration::from_secs(s.session_ttl_hours * 3600),
            queue_capacity: s.queue_capacity,
            sweep_interval: Duration::from_secs(60),
        }
    }
}

/// Bind address from the config, overridden by `HAIRPROXY_BIND`
/// (`host:port`) and then `HAIRPROXY_PORT`.
pub fn bind_address(section: &ServiceSection) -> Result<SocketAddr> {
    let raw = std::env::var(BIND_ENV).unwrap_or_else(|_| section.bind.clone());
    let bad = |reason: String| Error::Bind {
        addr: raw.clone(),
        reason,
    };
    let mut addr: SocketAddr = raw.parse().map_err(|e| bad(format!("{e}")))?;
    if let Ok(port) = std::env::var(PORT_ENV) {
        addr.set_port(
            port.parse()
                .map_err(|_| bad(format!("{PORT_ENV}=`{port}` is not a port")))?,
        );
    }
    Ok(addr)
}

#[derive(Debug)]
enum Precompute {
    Pending,
    Ready(Arc<SourceState>),
    Failed { stage: String, message: String },
}

#[derive(Debug)]
struct Session {
    meta: RwLock<SessionMeta>,
    image: Image,
    source: RwLock<Precompute>,
}

impl Session {
    fn status(&self) -> (&'static str, Option<String>) {
        match &*read(&self.source) {
            Precompute::Pending => ("pending", None),
            Precompute::Ready(_) => ("ready", None),
            Precompute::Failed { stage, message } => {
                ("failed", Some(format!("stage `{stage}` failed: {message}")))
            }
        }
    }
}

fn read<T>(l: &RwLock<T>) -> std::sync::RwLockReadGuard<'_, T> {
    l.read().unwrap_or_else(|p| p.into_inner())
}

fn write<T>(l: &RwLock<T>) -> std::sync::RwLockWriteGuard<'_, T> {
    l.write().unwrap_or_else(|p| p.into_inner())
}

struct QueuedJob {
    job: Arc<JobRecord>,
    session: Arc<Session>,
    engine: Engine,
    request: EditRequest,
}

struct Shared {
    engine: Engine,
    store: Store,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    jobs: RwLock<HashMap<String, Arc<JobRecord>>>,
    queue: Mutex<Option<mpsc::Sender<QueuedJob>>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    fn session(&self, id: &str) -> Option<Arc<Session>> {
        let s = read(&self.0.sessions).get(id).cloned()?;
        let expired = self.0.store.expired(&read(&s.meta), store::now_unix_s());
        (!expired).then_some(s)
    }

    fn job(&self, id: &str) -> Option<Arc<JobRecord>> {
        read(&self.0.jobs).get(id).cloned()
    }

    fn start_precompute(&self, session: Arc<Session>) {
        let state = self.clone();
        tokio::task::spawn_blocking(move || {
            let (id, seed) = {
                let m = read(&session.meta);
                (m.id.clone(), m.seed)
            };
            let outcome = state
                .0
                .engine
                .prepare_source(&session.image, seed, &NoProgress);
            let next = match outcome {
                Ok(src) => {
                    if let Err(e) = state.0.store.save_source(&id, &src) {
                        log::warn!("session {id}: cache not persisted: {e}");
                    }
                    Precompute::Ready(Arc::new(src))
                }
                Err(e) => Precompute::Failed {
                    stage: e.stage.into(),
                    message: e.error.to_string(),
                },
            };
            log::info!("session {id}: precompute {}", next_label(&next));
            *write(&session.source) = next;
        });
    }

    /// Drops expired sessions and their jobs.
    fn sweep(&self) {
        let now = store::now_unix_s();
        let expired: Vec<String> = read(&self.0.sessions)
            .iter()
            .filter(|(_, s)| self.0.store.expired(&read(&s.meta), now))
            .map(|(id, _)| id.clone())
            .collect();
        if expired.is_empty() {
            return;
        }
        write(&self.0.sessions).retain(|id, _| !expired.contains(id));
        write(&self.0.jobs).retain(|_, j| !expired.contains(&j.session));
        for id in &expired {
            log::info!("session {id}: expired");
            self.0.store.remove(id);
        }
    }

    /// Stops accepting jobs. The worker finishes what is queued, then exits.
    pub fn close_queue(&self) {
        self.0
            .queue
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .take();
    }
}

fn next_label(p: &Precompute) -> &'static str {
    match p {
        Precompute::Pending => "pending",
        Precompute::Ready(_) => "ready",
        Precompute::Failed { .. } => "failed",
    }
}

/// A running service: shared state plus its worker and sweeper tasks.
pub struct Service {
    state: AppState,
    worker: JoinHandle<()>,
    sweeper: JoinHandle<()>,
}

impl Service {
    /// Opens the store, restores unexpired sessions and starts the worker.
    /// Must be called inside a tokio runtime.
    pub fn start(engine: Engine, opts: &ServiceOptions) -> Result<Self> {
        let store = Store::open(&opts.store_dir, opts.session_ttl)?;
        let (tx, rx) = mpsc::channel(opts.queue_capacity.max(1));
        let state = AppState(Arc::new(Shared {
            engine,
            store,
            sessions: RwLock::new(HashMap::new()),
            jobs: RwLock::new(HashMap::new()),
            queue: Mutex::new(Some(tx)),
        }));
        restore(&state)?;
        let worker = tokio::spawn(worker(state.clone(), rx));
        let sweeper = {
            let state = state.clone();
            let every = opts.sweep_interval;
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(every);
                loop {
                    tick.tick().await;
                    state.sweep();
                }
            })
        };
        Ok(Service {
            state,
            worker,
            sweeper,
        })
    }

    pub fn state(&self) -> AppState {
        self.state.clone()
    }

    pub fn router(&self) -> Router {
        router(self.state.clone())
    }

    /// Closes the queue and waits for queued and running jobs to finish.
    pub async fn drain(self) {
        self.state.close_queue();
        self.sweeper.abort();
        if let Err(e) = self.worker.await {
            log::error!("worker task ended abnormally: {e}");
        }
    }

    /// Serves until `shutdown` resolves, then drains running jobs.
    pub async fn run(
        self,
        listener: tokio::net::TcpListener,
        shutdown: impl Future<Output = ()> + Send + 'static,
    ) -> Result<()> {
        let app = self.router();
        axum::serve(listener, app)
            .with_graceful_shutdown(shutdown)
            .await?;
        log::info!("draining jobs");
        self.drain().await;
        Ok(())
    }
}

/// Builds the engine, binds and serves until `shutdown` resolves.
pub async fn serve(
    config: &Config,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<()> {
    let engine = config.engine()?;
    let addr = bind_address(&config.service)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Bind {
            addr: addr.to_string(),
            reason: e.to_string(),
        })?;
    let service = Service::start(engine, &ServiceOptions::from_section(&config.service))?;
    log::info!("listening on {}", listener.local_addr()?);
    service.run(listener, shutdown).await
}

fn restore(state: &AppState) -> Result<()> {
    let now = store::now_unix_s();
    for (meta, image, cached) in state.0.store.scan()? {
        if state.0.store.expired(&meta, now) {
            state.0.store.remove(&meta.id);
            continue;
        }
        let id = meta.id.clone();
        {
            let mut jobs = write(&state.0.jobs);
            for h in &meta.history {
                let st = match &h.outcome {
                    HistoryOutcome::Done => JobState::Done {
                        result_id: h.job_id.clone(),
                    },
                    HistoryOutcome::Failed { stage, message } => JobState::Failed {
                        stage: stage.clone(),
                        message: message.clone(),
                        partial: state.0.store.load_partial_png(&id, &h.job_id).is_ok(),
                    },
                };
                jobs.insert(
                    h.job_id.clone(),
                    Arc::new(JobRecord::new(h.job_id.clone(), id.clone(), st)),
                );
            }
        }
        let pending = cached.is_none();
        let session = Arc::new(Session {
            meta: RwLock::new(meta),
            image,
            source: RwLock::new(match cached {
                Some(src) => Precompute::Ready(Arc::new(src)),
                None => Precompute::Pending,
            }),
        });
        write(&state.0.sessions).insert(id, session.clone());
        if pending {
            state.start_precompute(session);
        }
    }
    Ok(())
}

async fn worker(state: AppState, mut rx: mpsc::Receiver<QueuedJob>) {
    while let Some(q) = rx.recv().await {
        let state = state.clone();
        let id = q.job.id.clone();
        if let Err(e) = tokio::task::spawn_blocking(move || run_job(&state, q)).await {
            log::error!("job {id}: worker panicked: {e}");
        }
    }
}

fn run_job(state: &AppState, q: QueuedJob) {
    let QueuedJob {
        job,
        session,
        engine,
        request,
    } = q;
    let session_id = job.session.clone();
    let src = match &*read(&session.source) {
        Precompute::Ready(src) => src.clone(),
        _ => unreachable!("jobs are only queued on ready sessions"),
    };
    job.set_state(JobState::Running {
        stage: "validate".into(),
        step: 0,
        loss: None,
    });
    let outcome = engine.edit(&src, &request, &JobProgress(&job));
    let (entry, terminal) = match outcome {
        Ok(out) => {
            let saved = encode_image_png(&out.image)
                .map_err(Error::from)
                .and_then(|png| {
                    state
                        .0
                        .store
                        .save_result(&session_id, &job.id, &png, &out.report)
                });
            match saved {
                Ok(()) => (
                    HistoryOutcome::Done,
                    JobState::Done {
                        result_id: job.id.clone(),
                    },
                ),
                Err(e) => failed("store", e.to_string(), false),
            }
        }
        Err(e) => {
            let partial = e
                .partial
                .as_ref()
                .and_then(|img| encode_image_png(img).ok())
                .map(|png| {
                    state
                        .0
                        .store
                        .save_partial(&session_id, &job.id, &png)
                        .is_ok()
                })
                .unwrap_or(false);
            failed(e.stage, e.error.to_string(), partial)
        }
    };
    {
        let mut meta = write(&session.meta);
        meta.history.push(HistoryEntry {
            job_id: job.id.clone(),
            completed_unix_s: store::now_unix_s(),
            outcome: entry,
        });
        if let Err(e) = state.0.store.write_meta(&meta) {
            log::warn!("session {session_id}: history not persisted: {e}");
        }
    }
    log::info!("job {}: {:?}", job.id, terminal);
    job.set_state(terminal);
}

fn failed(stage: &str, message: String, partial: bool) -> (HistoryOutcome, JobState) {
    (
        HistoryOutcome::Failed {
            stage: stage.into(),
            message: message.clone(),
        },
        JobState::Failed {
            stage: stage.into(),
            message,
            partial,
        },
    )
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/edits", post(submit_edit))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/result", get(get_result))
        .route("/jobs/{id}/report", get(get_report))
        .route("/jobs/{id}/partial", get(get_partial))
        .route("/jobs/{id}/events", get(job_events))
        .layer(DefaultBodyLimit::max(32 * 1024 * 1024))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    retry_after: bool,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            retry_after: false,
        }
    }

    fn retry(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            retry_after: true,
            ..Self::new(status, message)
        }
    }

    fn bad_request(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::BAD_REQUEST, e.to_string())
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} `{id}`"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut resp = (self.status, Json(json!({ "error": self.message }))).into_response();
        if self.retry_after {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from_static(RETRY_AFTER_S));
        }
        resp
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "generator": state.0.engine.gen.name() }))
}

#[derive(Serialize)]
struct SessionView {
    id: String,
    seed: u64,
    created_unix_s: u64,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    history: Vec<HistoryEntry>,
}

fn session_view(s: &Session) -> SessionView {
    let meta = read(&s.meta).clone();
    let (status, error) = s.status();
    SessionView {
        id: meta.id,
        seed: meta.seed,
        created_unix_s: meta.created_unix_s,
        status,
        error,
        history: meta.history,
    }
}

/// Multipart fields: `image` (PNG bytes, required), `seed` (optional).
async fn create_session(
    State(state): State<AppState>,
    mut form: Multipart,
) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let mut image = None;
    let mut seed = 0u64;
    while let Some(field) = form.next_field().await.map_err(ApiError::bad_request)? {
        match field.name() {
            Some("image") => {
                let bytes = field.bytes().await.map_err(ApiError::bad_request)?;
                image = Some(decode_image(&bytes).map_err(ApiError::bad_request)?);
            }
            Some("seed") => {
                let text = field.text().await.map_err(ApiError::bad_request)?;
                seed = text
                    .trim()
                    .parse()
                    .map_err(|_| ApiError::bad_request(format!("seed `{text}` is not a u64")))?;
            }
            _ => {}
        }
    }
    let image = image.ok_or_else(|| ApiError::bad_request("missing `image` field"))?;
    let (h, w) = state.0.engine.gen.output_size();
    if (image.height(), image.width()) != (h, w) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!(
                "image is {}x{}, the generator expects {h}x{w}",
                image.height(),
                image.width()
            ),
        ));
    }
    let meta = SessionMeta {
        id: store::new_id(),
        seed,
        created_unix_s: store::now_unix_s(),
        history: Vec::new(),
    };
    state
        .0
        .store
        .create(&meta, &image)
        .map_err(ApiError::internal)?;
    let session = Arc::new(Session {
        meta: RwLock::new(meta.clone()),
        image,
        source: RwLock::new(Precompute::Pending),
    });
    write(&state.0.sessions).insert(meta.id.clone(), session.clone());
    state.start_precompute(session.clone());
    Ok((StatusCode::CREATED, Json(session_view(&session))))
}

async fn get_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionView>> {
    let s = state
        .session(&id)
        .ok_or_else(|| ApiError::not_found("session", &id))?;
    Ok(Json(session_view(&s)))
}

#[derive(Serialize)]
struct JobView {
    id: String,
    session_id: String,
    #[serde(flatten)]
    state: JobState,
}

fn job_view(j: &JobRecord) -> JobView {
    JobView {
        id: j.id.clone(),
        session_id: j.session.clone(),
        state: j.state(),
    }
}

/// Body: a recipe in JSON. Images must be inline (`png_base64`).
async fn submit_edit(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: String,
) -> ApiResult<(StatusCode, Json<JobView>)> {
    let session = state
        .session(&id)
        .ok_or_else(|| ApiError::not_found("session", &id))?;
    match &*read(&session.source) {
        Precompute::Pending => {
            return Err(ApiError::retry(
                StatusCode::SERVICE_UNAVAILABLE,
                "session is still being prepared",
            ))
        }
        Precompute::Failed { stage, message } => {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("session preparation failed at `{stage}`: {message}"),
            ))
        }
        Precompute::Ready(_) => {}
    }
    let recipe = RecipeFile::from_json(&body).map_err(ApiError::bad_request)?;
    let request = recipe
        .to_request(Resolve::InlineOnly)
        .map_err(ApiError::bad_request)?;
    let engine = recipe
        .apply_overrides(&state.0.engine)
        .map_err(ApiError::bad_request)?;
    request
        .validate(engine.gen.as_ref())
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;

    let job = Arc::new(JobRecord::new(
        store::new_id(),
        id.clone(),
        JobState::Queued,
    ));
    let tx = state
        .0
        .queue
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .clone()
        .ok_or_else(|| {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "service is shutting down")
        })?;
    // Registered before sending so a fast worker never outruns the lookup.
    write(&state.0.jobs).insert(job.id.clone(), job.clone());
    let queued = QueuedJob {
        job: job.clone(),
        session,
        engine,
        request,
    };
    if let Err(e) = tx.try_send(queued) {
        write(&state.0.jobs).remove(&job.id);
        return Err(match e {
            mpsc::error::TrySendError::Full(_) => {
                ApiError::retry(StatusCode::TOO_MANY_REQUESTS, "job queue is full")
            }
            mpsc::error::TrySendError::Closed(_) => {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "service is shutting down")
            }
        });
    }
    if let Err(e) = state.0.store.save_request(&id, &job.id, &recipe) {
        log::warn!("job {}: request not persisted: {e}", job.id);
    }
    Ok((StatusCode::ACCEPTED, Json(job_view(&job))))
}

#[derive(Deserialize)]
struct WaitQuery {
    /// Hold the request until the job state changes or this many
    /// milliseconds pass (capped at 30 s).
    wait_ms: Option<u64>,
}

async fn get_job(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<WaitQuery>,
) -> ApiResult<Json<JobView>> {
    let job = state
        .job(&id)
        .ok_or_else(|| ApiError::not_found("job", &id))?;
    if let Some(ms) = q.wait_ms {
        let before = job.state();
        if !before.is_terminal() {
            let mut rx = job.subscribe();
            let _ = tokio::time::timeout(Duration::from_millis(ms).min(MAX_WAIT), async {
                while rx.changed().await.is_ok() {
                    if job.state() != before {
                        break;
                    }
                }
            })
            .await;
        }
    }
    Ok(Json(job_view(&job)))
}

/// The job's status when it has no result (202 while pending, 409 if failed).
fn not_done(job: &JobRecord) -> Response {
    let view = job_view(job);
    let code = match view.state {
        JobState::Failed { .. } => StatusCode::CONFLICT,
        _ => StatusCode::ACCEPTED,
    };
    (code, Json(view)).into_response()
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn get_result(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state
        .job(&id)
        .ok_or_else(|| ApiError::not_found("job", &id))?;
    match job.state() {
        JobState::Done { result_id } => Ok(png_response(
            state
                .0
                .store
                .load_result_png(&job.session, &result_id)
                .map_err(ApiError::internal)?,
        )),
        _ => Ok(not_done(&job)),
    }
}

async fn get_report(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state
        .job(&id)
        .ok_or_else(|| ApiError::not_found("job", &id))?;
    match job.state() {
        JobState::Done { result_id } => Ok(Json(
            state
                .0
                .store
                .load_report(&job.session, &result_id)
                .map_err(ApiError::internal)?,
        )
        .into_response()),
        _ => Ok(not_done(&job)),
    }
}

/// Best intermediate image of a failed job.
async fn get_partial(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state
        .job(&id)
        .ok_or_else(|| ApiError::not_found("job", &id))?;
    match job.state() {
        JobState::Failed { partial: true, .. } => Ok(png_response(
            state
                .0
                .store
                .load_partial_png(&job.session, &id)
                .map_err(ApiError::internal)?,
        )),
        JobState::Failed { .. } => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "job failed before producing an image",
        )),
        _ => Ok(not_done(&job)),
    }
}

/// Replays the job's event log, then follows it until the job finishes.
/// Event names are `progress` and `state`.
async fn job_events(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = std::result::Result<Event, Infallible>>>> {
    let job = state
        .job(&id)
        .ok_or_else(|| ApiError::not_found("job", &id))?;
    let rx = job.subscribe();
    let events = stream::unfold((job, rx, 0usize), |(job, mut rx, cursor)| async move {
        loop {
            // Marks the current version seen before reading the log.
            rx.borrow_and_update();
            let (batch, finished) = job.events_since(cursor);
            if !batch.is_empty() {
                let next = cursor + batch.len();
                return Some((stream::iter(batch), (job, rx, next)));
            }
            if finished || rx.changed().await.is_err() {
                return None;
            }
        }
    })
    .flatten()
    .map(|ev| {
        let name = match ev {
            JobEvent::Progress { .. } => "progress",
            JobEvent::State { .. } => "state",
        };
        Ok(Event::default()
            .event(name)
            .json_data(&ev)
            .unwrap_or_else(|_| Event::default().event(name)))
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}
