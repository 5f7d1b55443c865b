//! HTTP/JSON service over a data directory.
//!
//! Every state change goes through one writer (a mutex around [`Store`])
//! and is journaled and synced before the response is sent. Reads go to an
//! immutable snapshot that the writer republishes after each change.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use arc_swap::ArcSwap;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thinkact_core::action::{DispatchRecord, Registry};
use thinkact_core::data::ActionTask;
use thinkact_core::protocol::{parse, SpanMap, Trajectory, Violation};
use thinkact_core::reward::{
    score_document, ConsistencyLabel, PairwiseModel, Preferred, RewardBreakdown, Scorers, TaskKind,
};

use crate::files::{read_json, read_tasks, FileError};
use crate::ops::{run_task, Limits, OpError};
use crate::store::{labels_from, read_run_steps, valid_id, DataDir, QueueItem, Store, StoreError, TrajectoryRecord};

/// Wall-clock time for leases and timestamps.
pub trait ServiceClock: Send + Sync {
    fn now_ms(&self) -> i64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl ServiceClock for SystemClock {
    fn now_ms(&self) -> i64 {
        chrono::Utc::now().timestamp_millis()
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(start_ms: i64) -> Self {
        Self(AtomicI64::new(start_ms))
    }

    pub fn advance(&self, ms: i64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl ServiceClock for ManualClock {
    fn now_ms(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Default)]
struct Snapshot {
    queue: BTreeMap<String, QueueItem>,
    trajectories: BTreeMap<String, Arc<TrajectoryRecord>>,
}

impl Snapshot {
    fn of(store: &Store) -> Self {
        Self {
            queue: store.items().map(|i| (i.pair_id.clone(), i.clone())).collect(),
            trajectories: store.trajectories().map(|t| (t.id.clone(), t.clone())).collect(),
        }
    }
}

pub struct Service {
    dir: DataDir,
    tasks: BTreeMap<String, ActionTask>,
    registry: Registry,
    preference_model: Option<PairwiseModel>,
    clock: Arc<dyn ServiceClock>,
    writer: Mutex<Store>,
    snapshot: ArcSwap<Snapshot>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    File(#[from] FileError),
}

impl Service {
    /// Opens the data directory: replays the journals and loads
    /// `tasks.jsonl` and the preference model when present.
    pub fn open(dir: DataDir, clock: Arc<dyn ServiceClock>) -> Result<Self, ServiceError> {
        let tasks = if dir.tasks().exists() {
            read_tasks(&dir.tasks())?
        } else {
            Vec::new()
        };
        let preference_model = optional_json(&dir.preference_model())?;
        let store = Store::open(dir.clone())?;
        let snapshot = ArcSwap::from_pointee(Snapshot::of(&store));
        Ok(Self {
            dir,
            tasks: tasks.into_iter().map(|t| (t.task_id.clone(), t)).collect(),
            registry: Registry::new(),
            preference_model,
            clock,
            writer: Mutex::new(store),
            snapshot,
        })
    }

    pub fn router(self: Arc<Self>) -> Router {
        Router::new()
            .route("/episodes", post(post_episode))
            .route("/trajectories/{id}", get(get_trajectory))
            .route("/trajectories/{id}/score", post(score_trajectory))
            .route("/queue", post(post_queue))
            .route("/queue/next", get(queue_next))
            .route("/queue/{id}", get(get_queue_item))
            .route("/queue/{id}/label", post(label_item))
            .route("/queue/{id}/skip", post(skip_item))
            .route("/runs/{id}/steps", get(run_steps))
            .route("/labels", get(human_labels))
            .with_state(self)
    }

    fn scorers(&self) -> Scorers<'_> {
        Scorers {
            preference_model: self.preference_model.as_ref(),
            ..Scorers::default()
        }
    }

    /// Runs `f` as the single writer and republishes the snapshot.
    async fn write<T: Send + 'static>(
        self: &Arc<Self>,
        f: impl FnOnce(&mut Store, i64) -> Result<T, StoreError> + Send + 'static,
    ) -> Result<T, ApiError> {
        let this = self.clone();
        tokio::task::spawn_blocking(move || {
            let mut store = this.writer.lock();
            let out = f(&mut store, this.clock.now_ms());
            this.snapshot.store(Arc::new(Snapshot::of(&store)));
            out
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(ApiError::from)
    }
}

fn optional_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, FileError> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Conflict(_) => StatusCode::CONFLICT,
            StoreError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::File(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<OpError> for ApiError {
    fn from(e: OpError) -> Self {
        match e {
            OpError::Invalid(m) => Self::invalid(m),
            OpError::NotFound(m) => Self::not_found(m),
            OpError::File(f) => Self::internal(f.to_string()),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: &self.message })).into_response()
    }
}

/// Any body that does not match the schema is a 422.
fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::invalid(format!("body: {e}")))
}

fn checked_id(id: &str, what: &str) -> Result<(), ApiError> {
    if valid_id(id) {
        Ok(())
    } else {
        Err(ApiError::not_found(format!("{what} {id}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRequest {
    pub task_id: String,
    pub policy_ref: String,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResponse {
    pub trajectory_id: String,
    pub task_id: String,
    pub kind: TaskKind,
    pub document: String,
    pub score: RewardBreakdown,
    pub records: Vec<DispatchRecord>,
}

async fn post_episode(State(svc): State<Arc<Service>>, bytes: Bytes) -> Result<Response, ApiError> {
    let req: EpisodeRequest = body(&bytes)?;
    let task = svc
        .tasks
        .get(&req.task_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("task {}", req.task_id)))?;
    let sec = req.limits.apply(&svc.registry)?;
    let this = svc.clone();
    let (task, out) = tokio::task::spawn_blocking(move || {
        let out = run_task(&this.dir, &this.registry, &task, &req.policy_ref, &sec, req.seed);
        (task, out)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?;
    let out = out?;
    let score = score_document(task.kind, &out.document, &task.gold_answer, &svc.scorers());
    let records = out.records.clone();
    let stored = svc
        .write(move |store, now| {
            store.store_trajectory(
                &task.task_id,
                task.kind,
                &task.gold_answer,
                out.document,
                now,
                &out.records,
            )
        })
        .await?;
    let resp = EpisodeResponse {
        trajectory_id: stored.id,
        task_id: stored.task_id,
        kind: stored.kind,
        document: stored.document,
        score,
        records,
    };
    Ok((StatusCode::CREATED, Json(resp)).into_response())
}

/// A stored trajectory with its parse, as the console renders it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryView {
    pub id: String,
    pub task_id: String,
    pub kind: TaskKind,
    pub created_at: String,
    pub document: String,
    pub trajectory: Option<Trajectory>,
    pub violations: Vec<Violation>,
    pub spans: SpanMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
}

fn lookup(svc: &Service, id: &str) -> Result<Arc<TrajectoryRecord>, ApiError> {
    checked_id(id, "trajectory")?;
    svc.snapshot
        .load()
        .trajectories
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("trajectory {id}")))
}

async fn get_trajectory(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<TrajectoryView>, ApiError> {
    let t = lookup(&svc, &id)?;
    let mut view = TrajectoryView {
        id: t.id.clone(),
        task_id: t.task_id.clone(),
        kind: t.kind,
        created_at: t.created_at.clone(),
        document: t.document.clone(),
        trajectory: None,
        violations: Vec::new(),
        spans: SpanMap::new(),
        parse_error: None,
    };
    match parse(&t.document) {
        Ok(p) => {
            view.trajectory = Some(p.trajectory);
            view.violations = p.violations;
            view.spans = p.spans;
        }
        Err(e) => view.parse_error = Some(e.to_string()),
    }
    Ok(Json(view))
}

async fn score_trajectory(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<RewardBreakdown>, ApiError> {
    let t = lookup(&svc, &id)?;
    Ok(Json(score_document(t.kind, &t.document, &t.gold, &svc.scorers())))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnqueueRequest {
    #[serde(default)]
    pub pair_id: Option<String>,
    #[serde(default)]
    pub task_id: Option<String>,
    pub trajectory_a: String,
    pub trajectory_b: String,
}

async fn post_queue(State(svc): State<Arc<Service>>, bytes: Bytes) -> Result<Response, ApiError> {
    let req: EnqueueRequest = body(&bytes)?;
    let item = svc
        .write(move |store, now| store.enqueue(req.pair_id, req.task_id, req.trajectory_a, req.trajectory_b, now))
        .await?;
    Ok((StatusCode::CREATED, Json(item)).into_response())
}

async fn queue_next(State(svc): State<Arc<Service>>) -> Result<Response, ApiError> {
    match svc.write(|store, now| store.lease_next(now)).await? {
        Some(item) => Ok(Json(item).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

async fn get_queue_item(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<QueueItem>, ApiError> {
    svc.snapshot
        .load()
        .queue
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("pair {id}")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRequest {
    pub choice: Preferred,
    pub labeler: String,
}

async fn label_item(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    bytes: Bytes,
) -> Result<Json<QueueItem>, ApiError> {
    checked_id(&id, "pair")?;
    let req: LabelRequest = body(&bytes)?;
    svc.write(move |store, now| store.label(&id, req.choice, &req.labeler, now))
        .await
        .map(Json)
}

async fn skip_item(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Result<Json<QueueItem>, ApiError> {
    checked_id(&id, "pair")?;
    svc.write(move |store, _| store.skip(&id)).await.map(Json)
}

async fn run_steps(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let dir = svc.dir.clone();
    let steps = tokio::task::spawn_blocking(move || read_run_steps(&dir, &id))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(steps).into_response())
}

async fn human_labels(State(svc): State<Arc<Service>>) -> Json<Vec<ConsistencyLabel>> {
    let snap = svc.snapshot.load();
    let gold = |task_id: &str| {
        svc.tasks
            .get(task_id)
            .map(|t| t.gold_answer.clone())
            .unwrap_or_default()
    };
    Json(labels_from(snap.queue.values(), gold))
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, svc: Arc<Service>) -> std::io::Result<()> {
    axum::serve(listener, svc.router()).await
}
