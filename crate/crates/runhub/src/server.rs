//! HTTP/JSON service for the annotation UI.
//!
//! Reads are served concurrently. Unlearning requests go through a FIFO
//! queue drained by a single background worker; completed and failed runs
//! are persisted as manifests, so a restarted service still answers for
//! them.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Notify;

use scrub_core::genmodels::{generate_batch, latent_at};
use scrub_core::metrics::EvalConfig;
use scrub_core::synthdata::FeatureName;
use scrub_core::unlearner::{LossCurves, UnlearnConfig};

use crate::config::{EvalRun, IdentifyRun, UnlearnRun, CONFIG_VERSION};
use crate::error::RunError;
use crate::imaging::png_base64;
use crate::pipeline::{self, load_model};
use crate::workspace::{
    latent_id, new_run_id, parse_latent_id, timestamp, ArtifactKind, ArtifactMeta, RunManifest,
    RunStatus, SelectionSet, Workspace,
};

pub const DEFAULT_QUEUE_DEPTH: usize = 8;
/// Upper bound on images per sample or compare request, and on latent indices.
pub const MAX_BATCH: usize = 1000;
pub const MAX_LATENT_INDEX: u64 = 100_000;
const RETRY_AFTER_SECS: u64 = 30;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    details: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            details: None,
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }
}

impl From<RunError> for ApiError {
    fn from(e: RunError) -> Self {
        let status = match &e {
            RunError::UnknownId { .. } => StatusCode::NOT_FOUND,
            RunError::Schema { .. } | RunError::Invalid(_) | RunError::Missing { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            RunError::Runtime(_) | RunError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut err = ApiError::new(status, e.to_string());
        if let RunError::Schema { pointer, .. } = &e {
            err.details = Some(json!({ "pointer": pointer }));
        }
        err
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(Value::Object(extra)) = self.details {
            for (k, v) in extra {
                body[k] = v;
            }
        }
        let mut resp = (self.status, Json(body)).into_response();
        if self.status == StatusCode::CONFLICT {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, RETRY_AFTER_SECS.into());
        }
        resp
    }
}

/// JSON body extractor: wrong content type is 415, anything that does not
/// match the schema is 422 with a JSON pointer.
pub struct ApiJson<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let is_json = req
            .headers()
            .get(header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.trim_start().starts_with("application/json"));
        if !is_json {
            return Err(ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "expected content type application/json",
            ));
        }
        let bytes = Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
        let de = &mut serde_json::Deserializer::from_slice(&bytes);
        serde_path_to_error::deserialize(de).map(ApiJson).map_err(|e| {
            let pointer: String = e
                .path()
                .iter()
                .map(|seg| format!("/{seg}"))
                .collect();
            ApiError::unprocessable(e.inner().to_string())
                .with_details(json!({ "pointer": if pointer.is_empty() { "/".into() } else { pointer } }))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Debug)]
struct LiveRun {
    status: JobStatus,
    curves: LossCurves,
    steps_per_epoch: usize,
    error: Option<String>,
}

/// Body of `POST /api/runs/unlearn`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnRequest {
    pub model_id: String,
    #[serde(default)]
    pub selection_id: Option<String>,
    /// Probe used to label samples when no selection is given; also the
    /// probe that scores the result.
    #[serde(default)]
    pub probe: Option<String>,
    #[serde(default)]
    pub config: UnlearnConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub identify: IdentifySamples,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifySamples {
    pub n: usize,
    pub seed: u64,
}

impl Default for IdentifySamples {
    fn default() -> Self {
        let d = IdentifyRun::default();
        Self { n: d.n, seed: d.seed }
    }
}

struct Job {
    run_id: String,
    request: UnlearnRequest,
}

struct QueueState {
    pending: VecDeque<Job>,
    running: Option<String>,
    paused: bool,
    runs: HashMap<String, LiveRun>,
}

/// Single-worker FIFO queue. At most `depth` jobs wait behind the running one.
pub struct JobQueue {
    state: Mutex<QueueState>,
    wake: Notify,
    depth: usize,
}

impl JobQueue {
    fn new(depth: usize, paused: bool) -> Self {
        Self {
            state: Mutex::new(QueueState {
                pending: VecDeque::new(),
                running: None,
                paused,
                runs: HashMap::new(),
            }),
            wake: Notify::new(),
            depth,
        }
    }

    fn lock(&self) -> MutexGuard<'_, QueueState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Enqueues and returns the queue position (0 = next to run).
    fn submit(&self, job: Job) -> Result<usize, ApiError> {
        let mut st = self.lock();
        let occupied = st.pending.len() + usize::from(st.running.is_some());
        if occupied > self.depth {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("job queue is full ({} waiting)", st.pending.len()),
            ));
        }
        st.runs.insert(
            job.run_id.clone(),
            LiveRun {
                status: JobStatus::Queued,
                curves: LossCurves::default(),
                steps_per_epoch: 0,
                error: None,
            },
        );
        st.pending.push_back(job);
        let position = st.pending.len() - 1;
        drop(st);
        self.wake.notify_one();
        Ok(position)
    }

    pub fn pause(&self) {
        self.lock().paused = true;
    }

    pub fn resume(&self) {
        self.lock().paused = false;
        self.wake.notify_one();
    }

    pub fn len(&self) -> usize {
        let st = self.lock();
        st.pending.len() + usize::from(st.running.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn position(&self, run_id: &str) -> Option<usize> {
        self.lock().pending.iter().position(|j| j.run_id == run_id)
    }

    async fn next(&self) -> Job {
        loop {
            let notified = self.wake.notified();
            {
                let mut st = self.lock();
                if !st.paused && st.running.is_none() {
                    if let Some(job) = st.pending.pop_front() {
                        st.running = Some(job.run_id.clone());
                        if let Some(r) = st.runs.get_mut(&job.run_id) {
                            r.status = JobStatus::Running;
                        }
                        return job;
                    }
                }
            }
            notified.await;
        }
    }

    fn update(&self, run_id: &str, f: impl FnOnce(&mut LiveRun)) {
        if let Some(r) = self.lock().runs.get_mut(run_id) {
            f(r);
        }
    }

    fn finish(&self, run_id: &str, result: Result<(), String>) {
        let mut st = self.lock();
        st.running = None;
        if let Some(r) = st.runs.get_mut(run_id) {
            match result {
                Ok(()) => r.status = JobStatus::Completed,
                Err(e) => {
                    r.status = JobStatus::Failed;
                    r.error = Some(e);
                }
            }
        }
        drop(st);
        self.wake.notify_one();
    }
}

#[derive(Clone, Debug)]
pub struct ServerOptions {
    pub queue_depth: usize,
    /// Start with the worker paused; jobs are accepted but not run until
    /// [`JobQueue::resume`].
    pub start_paused: bool,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            queue_depth: DEFAULT_QUEUE_DEPTH,
            start_paused: false,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub ws: Workspace,
    pub queue: Arc<JobQueue>,
}

impl AppState {
    /// Creates the state and spawns the worker on the current tokio runtime.
    pub fn start(ws: Workspace, opts: ServerOptions) -> Self {
        let state = Self {
            ws,
            queue: Arc::new(JobQueue::new(opts.queue_depth, opts.start_paused)),
        };
        tokio::spawn(worker(state.clone()));
        state
    }
}

async fn worker(state: AppState) {
    loop {
        let job = state.queue.next().await;
        let run_id = job.run_id.clone();
        let ws = state.ws.clone();
        let queue = state.queue.clone();
        let result = tokio::task::spawn_blocking(move || execute_job(&ws, &queue, job))
            .await
            .unwrap_or_else(|e| Err(format!("worker panicked: {e}")));
        state.queue.finish(&run_id, result);
    }
}

/// Identify, unlearn and (when a probe is available) evaluate.
fn execute_job(ws: &Workspace, queue: &JobQueue, job: Job) -> Result<(), String> {
    let started_at = timestamp();
    let run_id = job.run_id.clone();
    let result = run_job(ws, queue, &job);
    if let Err(e) = &result {
        let manifest = RunManifest {
            run_id: run_id.clone(),
            stage: "unlearn".into(),
            command: "api".into(),
            status: RunStatus::Failed,
            error: Some(e.to_string()),
            config: serde_json::to_value(&job.request).unwrap_or(Value::Null),
            inputs: Default::default(),
            outputs: Vec::new(),
            seeds: Default::default(),
            started_at,
            finished_at: timestamp(),
            metrics: Value::Null,
        };
        let _ = ws.write_manifest(&manifest);
    }
    result.map_err(|e| e.to_string())
}

fn run_job(ws: &Workspace, queue: &JobQueue, job: &Job) -> Result<(), RunError> {
    let req = &job.request;
    let identified = pipeline::identify(
        ws,
        IdentifyRun {
            version: CONFIG_VERSION,
            model: Some(req.model_id.clone()),
            probe: req.probe.clone(),
            selection: req.selection_id.clone(),
            feature: req.config.feature,
            n: req.identify.n,
            seed: req.identify.seed,
        },
    )?;
    let target = identified.metrics["target"].as_str().map(str::to_string);
    let steps_per_epoch = req.config.samples_per_epoch.div_ceil(req.config.batch.max(1));
    queue.update(&job.run_id, |r| r.steps_per_epoch = steps_per_epoch);
    let mut on_step = |_: usize, l: &scrub_core::unlearner::LossBreakdown| {
        queue.update(&job.run_id, |r| {
            r.curves.recon.push(l.recon);
            r.curves.unlearn.push(l.unlearn);
            r.curves.percep.push(l.percep);
            r.curves.total.push(l.total);
        })
    };
    let mut manifest = pipeline::unlearn_stage(
        ws,
        UnlearnRun {
            version: CONFIG_VERSION,
            model: Some(req.model_id.clone()),
            target,
            unlearn: req.config.clone(),
        },
        Some(job.run_id.clone()),
        &mut on_step,
    )?;
    manifest.command = "api".into();
    let probe = match &req.probe {
        Some(p) => Some(p.clone()),
        None => ws.latest(&[ArtifactKind::Probe])?.map(|m| m.id),
    };
    if let (Some(probe), Some(model)) = (probe, manifest.metrics["model"].as_str()) {
        let eval = pipeline::eval_stage(
            ws,
            EvalRun {
                version: CONFIG_VERSION,
                model: Some(model.to_string()),
                probe: Some(probe),
                dataset: None,
                target: None,
                feature: req.config.feature,
                eval: req.eval.clone(),
            },
        )?;
        if let Some(report) = eval.metrics["report"].as_str() {
            manifest.outputs.push(report.to_string());
            manifest.metrics["eval"] = json!(report);
        }
    }
    manifest.finished_at = timestamp();
    ws.write_manifest(&manifest)?;
    Ok(())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/models", get(list_models))
        .route("/api/models/{id}/samples", post(samples))
        .route("/api/models/{id}/compare/{other}", get(compare))
        .route("/api/selections", post(post_selection))
        .route("/api/selections/{id}", get(get_selection))
        .route("/api/runs/unlearn", post(post_unlearn))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/metrics", get(get_metrics))
        .route("/api/reviews", post(post_review))
        .route("/api/reviews/{id}", get(get_review))
        .with_state(state)
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Serialize)]
struct ModelInfo {
    id: String,
    kind: ArtifactKind,
    stage: String,
    created_at: String,
    inputs: std::collections::BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature: Option<FeatureName>,
}

impl From<ArtifactMeta> for ModelInfo {
    fn from(m: ArtifactMeta) -> Self {
        Self {
            id: m.id,
            kind: m.kind,
            stage: m.stage,
            created_at: m.created_at,
            inputs: m.inputs,
            feature: m.feature,
        }
    }
}

async fn list_models(State(st): State<AppState>) -> ApiResult<Json<Vec<ModelInfo>>> {
    let metas = st
        .ws
        .list(Some(&[ArtifactKind::Gan, ArtifactKind::Vae, ArtifactKind::Probe]))?;
    Ok(Json(metas.into_iter().map(ModelInfo::from).collect()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Sample {
    pub latent_id: String,
    pub image_png_base64: String,
    pub latent: Vec<f64>,
}

fn check_batch(n: usize) -> ApiResult<()> {
    if n == 0 || n > MAX_BATCH {
        return Err(ApiError::unprocessable(format!("n must be in 1..={MAX_BATCH}, got {n}"))
            .with_details(json!({ "pointer": "/n" })));
    }
    Ok(())
}

fn generator_of(ws: &Workspace, id: &str) -> ApiResult<pipeline::LoadedModel> {
    let meta = ws.meta(id)?;
    if !meta.kind.is_generator() {
        return Err(ApiError::unprocessable(format!("`{id}` is a {}, not a generator", meta.kind)));
    }
    Ok(load_model(ws, meta)?)
}

fn render(model: &pipeline::LoadedModel, n: usize, seed: u64) -> ApiResult<(Vec<Vec<f64>>, Vec<String>)> {
    let dim = model.generator.latent_dim();
    let side = model.generator.arch.side;
    let latents: Vec<Vec<f64>> = (0..n as u64).map(|i| latent_at(seed, i, dim)).collect();
    let images = generate_batch(&model.generator, &latents).map_err(RunError::from)?;
    let pngs = images
        .data()
        .chunks(side * side)
        .map(|px| png_base64(px, side))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((latents, pngs))
}

async fn samples(
    State(st): State<AppState>,
    Path(id): Path<String>,
    ApiJson(req): ApiJson<SampleRequest>,
) -> ApiResult<Json<Vec<Sample>>> {
    check_batch(req.n)?;
    blocking(move || {
        let model = generator_of(&st.ws, &id)?;
        let (latents, pngs) = render(&model, req.n, req.seed)?;
        Ok(Json(
            latents
                .into_iter()
                .zip(pngs)
                .enumerate()
                .map(|(i, (latent, png))| Sample {
                    latent_id: latent_id(req.seed, i as u64),
                    image_png_base64: png,
                    latent,
                })
                .collect(),
        ))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareQuery {
    #[serde(default = "CompareQuery::default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

impl CompareQuery {
    fn default_n() -> usize {
        16
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ComparePair {
    pub latent_id: String,
    pub left_png_base64: String,
    pub right_png_base64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompareResponse {
    pub left_model: String,
    pub right_model: String,
    pub pairs: Vec<ComparePair>,
}

async fn compare(
    State(st): State<AppState>,
    Path((id, other)): Path<(String, String)>,
    query: Result<Query<CompareQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<CompareResponse>> {
    let Query(q) = query.map_err(|e| ApiError::unprocessable(e.body_text()))?;
    check_batch(q.n)?;
    blocking(move || {
        let left = generator_of(&st.ws, &id)?;
        let right = generator_of(&st.ws, &other)?;
        if left.generator.latent_dim() != right.generator.latent_dim() {
            return Err(ApiError::unprocessable("models have different latent dimensions"));
        }
        let (_, lp) = render(&left, q.n, q.seed)?;
        let (_, rp) = render(&right, q.n, q.seed)?;
        let pairs = lp
            .into_iter()
            .zip(rp)
            .enumerate()
            .map(|(i, (l, r))| ComparePair {
                latent_id: latent_id(q.seed, i as u64),
                left_png_base64: l,
                right_png_base64: r,
            })
            .collect();
        Ok(Json(CompareResponse {
            left_model: id,
            right_model: other,
            pairs,
        }))
    })
    .await
}

/// Latent ids that are malformed, out of range, duplicated or from a second
/// sample batch.
fn bad_latent_ids(set: &SelectionSet) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut first_seed = None;
    let mut bad = Vec::new();
    for e in &set.selections {
        let ok = match parse_latent_id(&e.latent_id) {
            Some((seed, index)) => {
                let seed_ok = *first_seed.get_or_insert(seed) == seed;
                seed_ok && index < MAX_LATENT_INDEX && seen.insert(index)
            }
            None => false,
        };
        if !ok {
            bad.push(e.latent_id.clone());
        }
    }
    bad
}

async fn post_selection(
    State(st): State<AppState>,
    ApiJson(set): ApiJson<SelectionSet>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let meta = st.ws.meta(&set.model_id)?;
    if !meta.kind.is_generator() {
        return Err(ApiError::unprocessable(format!(
            "`{}` is a {}, not a generator",
            set.model_id, meta.kind
        )));
    }
    if set.selections.is_empty() {
        return Err(ApiError::unprocessable("selection set is empty"));
    }
    let bad = bad_latent_ids(&set);
    if !bad.is_empty() {
        return Err(ApiError::unprocessable(format!("{} unknown or repeated latent ids", bad.len()))
            .with_details(json!({ "latent_ids": bad })));
    }
    let id = st.ws.put_selection(&set)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn get_selection(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SelectionSet>> {
    Ok(Json(st.ws.selection(&id)?))
}

async fn post_unlearn(
    State(st): State<AppState>,
    ApiJson(req): ApiJson<UnlearnRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    req.config.validate().map_err(RunError::from)?;
    let model = st.ws.meta(&req.model_id)?;
    if !model.kind.is_generator() {
        return Err(ApiError::unprocessable(format!("`{}` is not a generator", req.model_id)));
    }
    match (&req.selection_id, &req.probe) {
        (None, None) => {
            return Err(ApiError::unprocessable("either selection_id or probe is required"))
        }
        (Some(sel), _) => {
            let set = st.ws.selection(sel)?;
            if set.model_id != req.model_id {
                return Err(ApiError::unprocessable(format!(
                    "selection `{sel}` belongs to model `{}`",
                    set.model_id
                )));
            }
            if set.feature != req.config.feature {
                return Err(ApiError::unprocessable(format!(
                    "selection is for `{}` but config.feature is `{}`",
                    set.feature, req.config.feature
                ))
                .with_details(json!({ "pointer": "/config/feature" })));
            }
        }
        _ => {}
    }
    if let Some(p) = &req.probe {
        st.ws.meta_of(p, &[ArtifactKind::Probe])?;
    }
    let run_id = new_run_id();
    let position = st.queue.submit(Job {
        run_id: run_id.clone(),
        request: req,
    })?;
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "run_id": run_id, "status": JobStatus::Queued, "position": position })),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunStatusResponse {
    pub run_id: String,
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    pub steps_per_epoch: usize,
    pub epochs_completed: usize,
    pub curves: LossCurves,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics_id: Option<String>,
}

fn status_from_manifest(ws: &Workspace, m: &RunManifest) -> ApiResult<RunStatusResponse> {
    let mut curves = LossCurves::default();
    let mut steps_per_epoch = 0;
    if let Some(report) = m.metrics.get("report").and_then(Value::as_str) {
        if let Ok(meta) = ws.meta_of(report, &[ArtifactKind::Unlearn]) {
            let v: Value = ws.load_json(&meta)?;
            curves = serde_json::from_value(v["curves"].clone()).map_err(RunError::from)?;
            steps_per_epoch = v["steps_per_epoch"].as_u64().unwrap_or(0) as usize;
        }
    }
    Ok(RunStatusResponse {
        run_id: m.run_id.clone(),
        status: match m.status {
            RunStatus::Completed => JobStatus::Completed,
            RunStatus::Failed => JobStatus::Failed,
        },
        position: None,
        epochs_completed: curves.len().checked_div(steps_per_epoch).unwrap_or(0),
        steps_per_epoch,
        curves,
        error: m.error.clone(),
        model_id: m.metrics.get("model").and_then(Value::as_str).map(str::to_string),
        metrics_id: m.metrics.get("eval").and_then(Value::as_str).map(str::to_string),
    })
}

async fn get_run(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<RunStatusResponse>> {
    let live = st.queue.lock().runs.get(&id).cloned();
    if let Some(live) = live {
        if matches!(live.status, JobStatus::Queued | JobStatus::Running) {
            return Ok(Json(RunStatusResponse {
                run_id: id.clone(),
                status: live.status,
                position: st.queue.position(&id),
                epochs_completed: live.curves.len().checked_div(live.steps_per_epoch).unwrap_or(0),
                steps_per_epoch: live.steps_per_epoch,
                curves: live.curves,
                error: None,
                model_id: None,
                metrics_id: None,
            }));
        }
    }
    blocking(move || {
        let m = st.ws.manifest(&id)?;
        status_from_manifest(&st.ws, &m).map(Json)
    })
    .await
}

async fn get_metrics(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let m = st.ws.manifest(&id)?;
    let report = match m.stage.as_str() {
        "eval" => m.metrics.get("report"),
        _ => m.metrics.get("eval"),
    }
    .and_then(Value::as_str)
    .ok_or_else(|| ApiError::not_found(format!("run `{id}` has no evaluation report")))?;
    let report = pipeline::load_eval_report(&st.ws, report)?;
    Ok(Json(serde_json::to_value(report).map_err(RunError::from)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewTask {
    Tfr,
    Quality,
    Pinpoint,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewRequest {
    pub run_id: String,
    pub task: ReviewTask,
    pub answers: Vec<Value>,
    #[serde(default)]
    pub annotator: Option<String>,
    /// Resubmitting with the same key returns the first review's id.
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

async fn post_review(
    State(st): State<AppState>,
    headers: HeaderMap,
    ApiJson(mut req): ApiJson<ReviewRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    if req.idempotency_key.is_none() {
        req.idempotency_key = headers
            .get("idempotency-key")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
    }
    st.ws.manifest(&req.run_id)?;
    blocking(move || {
        if let Some(key) = &req.idempotency_key {
            if let Some(id) = find_review(&st.ws, key)? {
                return Ok((StatusCode::OK, Json(json!({ "id": id }))));
            }
        }
        let mut record = serde_json::to_value(&req).map_err(RunError::from)?;
        record["submitted_at"] = json!(timestamp());
        let id = st.ws.put_review(&record)?;
        Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
    })
    .await
}

fn find_review(ws: &Workspace, key: &str) -> Result<Option<String>, RunError> {
    for entry in std::fs::read_dir(ws.reviews_dir())? {
        let path = entry?.path();
        let v: Value = match std::fs::read(&path).map(|b| serde_json::from_slice(&b)) {
            Ok(Ok(v)) => v,
            _ => continue,
        };
        if v["idempotency_key"].as_str() == Some(key) {
            return Ok(path.file_stem().and_then(|s| s.to_str()).map(str::to_string));
        }
    }
    Ok(None)
}

async fn get_review(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(st.ws.review(&id)?))
}

/// Serves until ctrl-c.
pub async fn serve(ws: Workspace, addr: std::net::SocketAddr) -> Result<(), RunError> {
    let state = AppState::start(ws, ServerOptions::default());
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
