//! HTTP handlers. Every `/v1` route needs `Authorization: Bearer <token>`.
//! Reads are served from the latest published snapshot; mutations go to the
//! control loop and return once it has applied them.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::mpsc;
use std::sync::Arc;

use acm_control::events::{EventLog, EventRecord};
use acm_control::plane::{Snapshot, SubmitError};
use acm_control::scheduler::SchedulerError;
use acm_core::{JobId, JobSpec, JobState};
use acm_storage::{CodeStore, LogCursor, LogStore, MountTable, StorageError};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;
use tower_http::services::ServeDir;

use crate::control::{Command, Published};
use crate::types::*;

/// Largest log chunk a single request may ask for.
pub const MAX_LOG_CHUNK: usize = 1 << 20;
const DEFAULT_LOG_CHUNK: usize = 64 << 10;
const MAX_PAGE: usize = 1000;

#[derive(Clone)]
pub struct AppState {
    pub commands: mpsc::Sender<Command>,
    pub published: Published,
    pub events: Arc<EventLog>,
    pub logs: Arc<LogStore>,
    pub code: Arc<CodeStore>,
    pub mounts: MountTable,
    /// Token to principal.
    pub tokens: Arc<HashMap<String, String>>,
    pub page_size: usize,
}

#[derive(Debug, Clone)]
pub struct Principal(pub String);

pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let body_limit = usize::try_from(state.code.max_bytes())
        .unwrap_or(usize::MAX)
        .saturating_add(1 << 20);
    let v1 = Router::new()
        .route("/code", post(upload_code))
        .route("/jobs", post(submit_job).get(list_jobs))
        .route("/jobs/{id}", get(get_job).delete(cancel_job))
        .route("/jobs/{id}/logs", get(job_logs))
        .route("/jobs/{id}/events", get(job_events))
        .route("/cluster/nodes", get(cluster_nodes))
        .route("/cluster/scaling", get(cluster_scaling))
        .route("/cluster/health", get(cluster_health))
        .route("/workspaces/{id}/files", get(workspace_files))
        .route_layer(middleware::from_fn_with_state(state.clone(), authenticate))
        .layer(DefaultBodyLimit::max(body_limit));
    let mut app = Router::new().nest("/v1", v1);
    if let Some(dir) = static_dir {
        app = app.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true));
    }
    app.layer(middleware::from_fn_with_state(state.clone(), stamp_seq))
        .with_state(state)
}

async fn authenticate(State(state): State<AppState>, mut req: Request, next: Next) -> Response {
    let token = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    match token.and_then(|t| state.tokens.get(t)) {
        Some(principal) => {
            req.extensions_mut().insert(Principal(principal.clone()));
            next.run(req).await
        }
        None => ApiError::new(
            StatusCode::UNAUTHORIZED,
            "Unauthorized",
            "missing or invalid bearer token",
        )
        .into_response(),
    }
}

/// Responses that did not set the sequence header get the current one.
async fn stamp_seq(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let mut resp = next.run(req).await;
    if !resp.headers().contains_key(SEQ_HEADER) {
        let seq = state.published.get().seq;
        resp.headers_mut().insert(SEQ_HEADER, HeaderValue::from(seq));
    }
    resp
}

/// A JSON body stamped with the sequence number of the snapshot it came
/// from.
struct Stamped<T>(u64, T);

impl<T: Serialize> IntoResponse for Stamped<T> {
    fn into_response(self) -> Response {
        let mut resp = Json(self.1).into_response();
        resp.headers_mut().insert(SEQ_HEADER, HeaderValue::from(self.0));
        resp
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    details: Vec<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            details: Vec::new(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }

    fn loop_gone() -> Self {
        Self::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "Unavailable",
            "control loop is not running",
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code.to_string(),
                message: self.message,
                details: self.details,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<SubmitError> for ApiError {
    fn from(err: SubmitError) -> Self {
        let message = err.to_string();
        match err {
            SubmitError::Invalid(violations) => Self {
                details: violations
                    .iter()
                    .map(|v| {
                        let mut value = serde_json::to_value(v).unwrap_or_default();
                        if let Some(obj) = value.as_object_mut() {
                            obj.insert("message".into(), v.to_string().into());
                        }
                        value
                    })
                    .collect(),
                ..Self::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidSpec", message)
            },
            SubmitError::UnknownCode(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "UnknownCode", message),
            SubmitError::Scheduler(e) => e.into(),
        }
    }
}

impl From<SchedulerError> for ApiError {
    fn from(err: SchedulerError) -> Self {
        let message = err.to_string();
        match err {
            SchedulerError::JobNotFound(_) | SchedulerError::UnknownTask { .. } => Self::not_found(message),
            SchedulerError::AlreadyTerminal(_) => Self::new(StatusCode::CONFLICT, "Conflict", message),
            SchedulerError::QueueClosed => Self::new(StatusCode::SERVICE_UNAVAILABLE, "QueueClosed", message),
            _ => Self::internal(message),
        }
    }
}

impl From<StorageError> for ApiError {
    fn from(err: StorageError) -> Self {
        let message = err.to_string();
        match err {
            StorageError::EmptyArchive | StorageError::InvalidUri(_) | StorageError::InvalidPath(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "Invalid", message)
            }
            StorageError::TooLarge { .. } => Self::new(StatusCode::PAYLOAD_TOO_LARGE, "TooLarge", message),
            StorageError::NotFound(_) | StorageError::UnknownStream(_) => Self::not_found(message),
            _ => Self::internal(message),
        }
    }
}

fn parse_job_id(text: &str) -> Result<JobId, ApiError> {
    text.parse()
        .map_err(|_| ApiError::not_found(format!("{text} not found")))
}

fn find_job(snap: &Snapshot, id: JobId) -> Result<&acm_control::plane::JobView, ApiError> {
    snap.job(id)
        .ok_or_else(|| ApiError::not_found(format!("{id} not found")))
}

async fn upload_code(State(state): State<AppState>, body: Bytes) -> Result<Stamped<CodeUploaded>, ApiError> {
    let seq = state.published.get().seq;
    let code = state.code.clone();
    let stored = tokio::task::spawn_blocking(move || code.put_code(&body))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Stamped(
        seq,
        CodeUploaded {
            digest: stored.digest,
            size: stored.size_bytes,
        },
    ))
}

fn parse_spec(headers: &HeaderMap, body: &[u8]) -> Result<JobSpec, ApiError> {
    let yaml = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|ct| ct.contains("yaml"));
    let parsed = if yaml {
        serde_yaml::from_slice(body).map_err(|e| e.to_string())
    } else {
        serde_json::from_slice(body).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "MalformedSpec",
            format!("job document does not parse: {e}"),
        )
    })
}

async fn submit_job(
    State(state): State<AppState>,
    Extension(principal): Extension<Principal>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Stamped<JobSubmitted>, ApiError> {
    let spec = parse_spec(&headers, &body)?;
    let (reply, rx) = oneshot::channel();
    state
        .commands
        .send(Command::Submit {
            spec,
            principal: principal.0,
            reply,
        })
        .map_err(|_| ApiError::loop_gone())?;
    let (job_id, snap) = rx.await.map_err(|_| ApiError::loop_gone())??;
    Ok(Stamped(snap.seq, JobSubmitted { job_id }))
}

#[derive(Debug, Default, Deserialize)]
struct ListQuery {
    state: Option<String>,
    principal: Option<String>,
    limit: Option<usize>,
    cursor: Option<String>,
}

fn page_limit(requested: Option<usize>, default: usize) -> Result<usize, ApiError> {
    match requested {
        Some(0) => Err(ApiError::bad_request("limit must be positive")),
        Some(n) => Ok(n.min(MAX_PAGE)),
        None => Ok(default),
    }
}

async fn list_jobs(State(state): State<AppState>, Query(q): Query<ListQuery>) -> Result<Stamped<JobPage>, ApiError> {
    let snap = state.published.get();
    let wanted: Option<JobState> = q
        .state
        .as_deref()
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .transpose()
        .map_err(ApiError::bad_request)?;
    let after: Option<JobId> = q
        .cursor
        .as_deref()
        .filter(|s| !s.is_empty())
        .map(|c| {
            c.parse()
                .map_err(|_| ApiError::bad_request(format!("bad cursor {c:?}")))
        })
        .transpose()?;
    let limit = page_limit(q.limit, state.page_size)?;
    let mut matching = snap
        .jobs
        .iter()
        .filter(|j| after.is_none_or(|a| j.record.id > a))
        .filter(|j| wanted.is_none_or(|s| j.record.state == s))
        .filter(|j| {
            q.principal
                .as_deref()
                .is_none_or(|p| j.record.principal.as_deref() == Some(p))
        });
    let jobs: Vec<JobSummary> = matching.by_ref().take(limit).map(JobSummary::from).collect();
    let next_cursor = match matching.next() {
        Some(_) => jobs.last().map(|j| j.job_id),
        None => None,
    };
    Ok(Stamped(snap.seq, JobPage { jobs, next_cursor }))
}

#[derive(Debug, Default, Deserialize)]
struct TaskPageQuery {
    limit: Option<usize>,
    cursor: Option<usize>,
}

async fn get_job(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<TaskPageQuery>,
) -> Result<Stamped<JobDetail>, ApiError> {
    let snap = state.published.get();
    let view = find_job(&snap, parse_job_id(&id)?)?;
    let r = &view.record;
    let limit = page_limit(q.limit, state.page_size)?;
    let offset = q.cursor.unwrap_or(0).min(r.tasks.len());
    let end = offset.saturating_add(limit).min(r.tasks.len());
    let detail = JobDetail {
        job_id: r.id,
        spec: r.spec.clone(),
        principal: r.principal.clone(),
        state: r.state,
        queue_position: view.queue_position,
        submitted_at: r.submitted_at,
        started_at: r.started_at,
        finished_at: r.finished_at,
        task_count: r.tasks.len(),
        task_offset: offset,
        tasks: r.tasks[offset..end].to_vec(),
        next_task_cursor: (end < r.tasks.len()).then_some(end),
    };
    Ok(Stamped(snap.seq, detail))
}

async fn cancel_job(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Stamped<JobCanceled>, ApiError> {
    let job = parse_job_id(&id)?;
    let (reply, rx) = oneshot::channel();
    state
        .commands
        .send(Command::Cancel { job, reply })
        .map_err(|_| ApiError::loop_gone())?;
    let snap = rx.await.map_err(|_| ApiError::loop_gone())??;
    let state = find_job(&snap, job)?.record.state;
    Ok(Stamped(snap.seq, JobCanceled { job_id: job, state }))
}

#[derive(Debug, Default, Deserialize)]
struct LogQuery {
    task: Option<String>,
    cursor: Option<u64>,
    max_bytes: Option<usize>,
}

/// Cuts a trailing partial UTF-8 sequence so a chunk boundary never splits
/// a character. The cut bytes come back on the next read.
fn utf8_prefix(bytes: &[u8]) -> usize {
    match std::str::from_utf8(bytes) {
        Ok(_) => bytes.len(),
        Err(e) if e.error_len().is_none() && e.valid_up_to() > 0 => e.valid_up_to(),
        Err(_) => bytes.len(),
    }
}

async fn job_logs(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<LogQuery>,
) -> Result<Stamped<LogChunk>, ApiError> {
    let snap = state.published.get();
    let view = find_job(&snap, parse_job_id(&id)?)?;
    let job = view.record.id;
    let task = match q.task.filter(|t| !t.is_empty()) {
        Some(t) if view.record.task(&t).is_some() => t,
        Some(t) => return Err(ApiError::not_found(format!("task {t} not found in {job}"))),
        None => view
            .record
            .tasks
            .first()
            .map(|t| t.task_name.clone())
            .ok_or_else(|| ApiError::not_found(format!("{job} has no tasks")))?,
    };
    let max = q.max_bytes.unwrap_or(DEFAULT_LOG_CHUNK).clamp(1, MAX_LOG_CHUNK);
    let cursor = LogCursor {
        job_id: job,
        task_name: task.clone(),
        byte_offset: q.cursor.unwrap_or(0),
    };
    let (bytes, next) = match state.logs.read(&cursor, max) {
        Ok(read) => read,
        Err(StorageError::UnknownStream(_)) => (Vec::new(), cursor.clone()),
        Err(e) => return Err(e.into()),
    };
    let keep = utf8_prefix(&bytes);
    let next_cursor = next.byte_offset - (bytes.len() - keep) as u64;
    let len = state.logs.len(job, &task).unwrap_or(0);
    let chunk = LogChunk {
        job_id: job,
        task,
        cursor: cursor.byte_offset,
        next_cursor,
        data: String::from_utf8_lossy(&bytes[..keep]).into_owned(),
        complete: view.record.state.is_terminal() && next_cursor >= len,
    };
    Ok(Stamped(snap.seq, chunk))
}

#[derive(Debug, Default, Deserialize)]
struct EventQuery {
    after: Option<u64>,
}

async fn job_events(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<EventQuery>,
) -> Result<Stamped<EventPage>, ApiError> {
    let snap = state.published.get();
    let job = find_job(&snap, parse_job_id(&id)?)?.record.id;
    let after = q.after.unwrap_or(0);
    let events: Vec<EventRecord> = state
        .events
        .for_job(job, snap.seq)
        .into_iter()
        .filter(|e| e.seq() > after)
        .collect();
    Ok(Stamped(
        snap.seq,
        EventPage {
            job_id: job,
            events,
            last_seq: snap.seq,
        },
    ))
}

async fn cluster_nodes(State(state): State<AppState>) -> Stamped<ClusterNodes> {
    let snap = state.published.get();
    Stamped(
        snap.seq,
        ClusterNodes {
            tick: snap.tick,
            nodes: snap.nodes.clone(),
            queue_depth: snap.queue_depth,
            pending_cleanups: snap.pending_cleanups,
        },
    )
}

#[derive(Debug, Default, Deserialize)]
struct ScalingQuery {
    limit: Option<usize>,
}

async fn cluster_scaling(
    State(state): State<AppState>,
    Query(q): Query<ScalingQuery>,
) -> Result<Stamped<ScalingHistory>, ApiError> {
    let snap = state.published.get();
    let limit = page_limit(q.limit, state.page_size)?;
    let skip = snap.scaling.len().saturating_sub(limit);
    Ok(Stamped(
        snap.seq,
        ScalingHistory {
            plans: snap.scaling[skip..].to_vec(),
        },
    ))
}

async fn cluster_health(State(state): State<AppState>) -> Stamped<ClusterHealth> {
    let snap = state.published.get();
    let mut jobs_by_state = BTreeMap::new();
    for j in &snap.jobs {
        *jobs_by_state.entry(j.record.state.as_str().to_string()).or_insert(0) += 1;
    }
    let mut nodes_by_state = BTreeMap::new();
    for n in &snap.nodes {
        *nodes_by_state.entry(format!("{:?}", n.state)).or_insert(0) += 1;
    }
    Stamped(
        snap.seq,
        ClusterHealth {
            tick: snap.tick,
            seq: snap.seq,
            queue_depth: snap.queue_depth,
            jobs_by_state,
            nodes_by_state,
            last_scaling: snap.scaling.last().cloned(),
            accepting_jobs: !snap.closed,
        },
    )
}

#[derive(Debug, Default, Deserialize)]
struct FilesQuery {
    prefix: Option<String>,
}

/// `{id}` is a job id (its workspace) or a `local://` path, URL-encoded.
async fn workspace_files(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<FilesQuery>,
) -> Result<Stamped<WorkspaceFiles>, ApiError> {
    let snap = state.published.get();
    let uri = match id.parse::<JobId>() {
        Ok(job) => find_job(&snap, job)?
            .record
            .spec
            .workspace_uri
            .clone()
            .ok_or_else(|| ApiError::not_found(format!("{job} has no workspace")))?,
        Err(_) => format!("local://{id}"),
    };
    let mounts = state.mounts.clone();
    let prefix = q.prefix.unwrap_or_default();
    let listing_uri = uri.clone();
    let entries = tokio::task::spawn_blocking(move || mounts.list_workspace(&listing_uri, &prefix))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Stamped(
        snap.seq,
        WorkspaceFiles {
            workspace: uri,
            entries,
        },
    ))
}
