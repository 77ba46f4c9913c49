//! HTTP job service over the transfer pipeline.
//!
//! ```text
//! POST /jobs                multipart: image, mask, material, prompts, config
//! GET  /jobs                all jobs
//! GET  /jobs/{id}           status JSON
//! GET  /jobs/{id}/preview   latest preview PNG
//! GET  /jobs/{id}/result    result PNG
//! POST /jobs/{id}/cancel
//! GET  /healthz
//! ```
//!
//! Jobs run on a pool of worker threads, each with its own backend. Every
//! state change is appended to `jobs.log`; on start, jobs the log leaves
//! unfinished are marked failed with reason `interrupted`.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use crate::cli::BackendArgs;
use crate::config::make_config;
use crate::denoiser::{BackendSpec, Denoiser};
use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::latent::PromptSet;
use crate::mask::BinaryMask;
use crate::pipeline::{material_transfer_with, Phase, RunDir, RunOptions, StepRecord, TrajectoryCache, TransferObserver, TransferRequest};

const LOG_FILE: &str = "jobs.log";
const GUIDANCE_TAIL: usize = 5;
const MAX_UPLOAD: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Inverting,
    Sampling,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Cancelled)
    }

    /// Forward moves along queued -> inverting -> sampling -> done, plus
    /// failure or cancellation from any non-terminal state.
    pub fn can_move_to(self, next: JobState) -> bool {
        use JobState::*;
        match (self, next) {
            (Queued, Inverting) | (Inverting, Sampling) | (Sampling, Done) => true,
            (from, Failed | Cancelled) => !from.is_terminal(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceSettings {
    pub data_dir: PathBuf,
    pub workers: usize,
    pub backend: BackendArgs,
    pub preview_every: usize,
}

#[derive(Debug)]
struct Job {
    state: JobState,
    created: u64,
    total_steps: usize,
    steps_done: usize,
    inversion_done: usize,
    preview_index: Option<usize>,
    error: Option<String>,
    run_dir: PathBuf,
    lambda: f64,
    tail: VecDeque<StepRecord>,
    cancel: Arc<AtomicBool>,
    request: Option<Arc<TransferRequest>>,
}

/// Status document of `GET /jobs/{id}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobView {
    pub id: String,
    pub state: JobState,
    pub progress: f64,
    pub steps_done: usize,
    pub total_steps: usize,
    pub inversion_done: usize,
    pub lambda: f64,
    pub preview: Option<String>,
    pub preview_index: Option<usize>,
    pub result: Option<String>,
    pub error: Option<String>,
    pub guidance_tail: Vec<StepRecord>,
    pub created: u64,
}

impl Job {
    fn view(&self, id: &Uuid) -> JobView {
        let progress = if self.state == JobState::Done {
            1.0
        } else {
            self.steps_done as f64 / self.total_steps.max(1) as f64
        };
        JobView {
            id: id.to_string(),
            state: self.state,
            progress,
            steps_done: self.steps_done,
            total_steps: self.total_steps,
            inversion_done: self.inversion_done,
            lambda: self.lambda,
            preview: self.preview_index.map(|_| format!("/jobs/{id}/preview")),
            preview_index: self.preview_index,
            result: (self.state == JobState::Done).then(|| format!("/jobs/{id}/result")),
            error: self.error.clone(),
            guidance_tail: self.tail.iter().cloned().collect(),
            created: self.created,
        }
    }
}

/// One line of the append-only job log.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LogEntry {
    ts: u64,
    id: Uuid,
    state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    total_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

struct Inner {
    settings: ServiceSettings,
    jobs: Mutex<HashMap<Uuid, Job>>,
    queue: Mutex<VecDeque<Uuid>>,
    wake: Condvar,
    log: Mutex<File>,
    cache: TrajectoryCache,
    shutdown: AtomicBool,
}

impl Inner {
    fn append_log(&self, entry: &LogEntry) {
        let mut line = serde_json::to_string(entry).expect("log entry serializes");
        line.push('\n');
        let mut f = self.log.lock().expect("log lock");
        if let Err(e) = f.write_all(line.as_bytes()).and_then(|_| f.flush()) {
            log::error!("cannot append to job log: {e}");
        }
    }

    /// Applies a state change if the state machine allows it; logs it.
    fn transition(&self, id: &Uuid, next: JobState, reason: Option<String>) -> bool {
        let mut jobs = self.jobs.lock().expect("jobs lock");
        let Some(job) = jobs.get_mut(id) else { return false };
        if !job.state.can_move_to(next) {
            return false;
        }
        job.state = next;
        if next == JobState::Failed || next == JobState::Cancelled {
            job.error = reason.clone();
        }
        if next.is_terminal() {
            job.request = None;
        }
        // log under the registry lock so log order equals transition order
        self.append_log(&LogEntry {
            ts: now(),
            id: *id,
            state: next,
            reason,
            run_dir: None,
            total_steps: None,
            lambda: None,
        });
        true
    }

    fn update(&self, id: &Uuid, f: impl FnOnce(&mut Job)) {
        if let Some(job) = self.jobs.lock().expect("jobs lock").get_mut(id) {
            f(job);
        }
    }
}

/// Handle to a running service: registry, workers and router state.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl Service {
    /// Opens the data directory, recovers the job log and starts workers.
    pub fn start(settings: ServiceSettings) -> Result<Self> {
        for sub in ["uploads", "runs", "trajectories"] {
            let d = settings.data_dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let log_path = settings.data_dir.join(LOG_FILE);
        let recovered = recover(&log_path)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let inner = Arc::new(Inner {
            cache: TrajectoryCache::new(settings.data_dir.join("trajectories")),
            settings,
            jobs: Mutex::new(HashMap::new()),
            queue: Mutex::new(VecDeque::new()),
            wake: Condvar::new(),
            log: Mutex::new(log),
            shutdown: AtomicBool::new(false),
        });
        {
            let mut jobs = inner.jobs.lock().expect("jobs lock");
            for (id, job) in recovered {
                let interrupted = !job.state.is_terminal();
                jobs.insert(id, job);
                if interrupted {
                    drop(jobs);
                    inner.transition(&id, JobState::Failed, Some("interrupted".into()));
                    jobs = inner.jobs.lock().expect("jobs lock");
                }
            }
        }
        let workers = (0..inner.settings.workers.max(1))
            .map(|i| {
                let inner = inner.clone();
                std::thread::Builder::new()
                    .name(format!("matfuse-worker-{i}"))
                    .spawn(move || worker_loop(&inner))
                    .expect("spawn worker")
            })
            .collect();
        Ok(Self {
            inner,
            workers: Arc::new(Mutex::new(workers)),
        })
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/healthz", get(healthz))
            .route("/jobs", post(submit_job).get(list_jobs))
            .route("/jobs/{id}", get(get_status))
            .route("/jobs/{id}/preview", get(get_preview))
            .route("/jobs/{id}/result", get(get_result))
            .route("/jobs/{id}/cancel", post(cancel_job))
            .layer(DefaultBodyLimit::max(MAX_UPLOAD))
            .with_state(self.clone())
    }

    /// Queues a validated request; returns the new job id.
    pub fn submit(&self, req: TransferRequest) -> Result<Uuid> {
        let inner = &self.inner;
        let mut jobs = inner.jobs.lock().expect("jobs lock");
        let mut id = Uuid::new_v4();
        while jobs.contains_key(&id) {
            id = Uuid::new_v4();
        }
        let run_dir = inner.settings.data_dir.join("runs").join(id.to_string());
        let total = req.config.steps;
        let lambda = req.config.lam;
        jobs.insert(
            id,
            Job {
                state: JobState::Queued,
                created: now(),
                total_steps: total,
                steps_done: 0,
                inversion_done: 0,
                preview_index: None,
                error: None,
                run_dir: run_dir.clone(),
                lambda,
                tail: VecDeque::new(),
                cancel: Arc::new(AtomicBool::new(false)),
                request: Some(Arc::new(req)),
            },
        );
        inner.append_log(&LogEntry {
            ts: now(),
            id,
            state: JobState::Queued,
            reason: None,
            run_dir: Some(run_dir),
            total_steps: Some(total),
            lambda: Some(lambda),
        });
        drop(jobs);
        inner.queue.lock().expect("queue lock").push_back(id);
        inner.wake.notify_one();
        Ok(id)
    }

    pub fn status(&self, id: &Uuid) -> Option<JobView> {
        self.inner.jobs.lock().expect("jobs lock").get(id).map(|j| j.view(id))
    }

    /// Requests cancellation. Returns `None` for unknown ids and
    /// `Some(false)` when the job had already finished.
    pub fn cancel(&self, id: &Uuid) -> Option<bool> {
        let (state, flag) = {
            let jobs = self.inner.jobs.lock().expect("jobs lock");
            let job = jobs.get(id)?;
            (job.state, job.cancel.clone())
        };
        if state.is_terminal() {
            return Some(false);
        }
        flag.store(true, Ordering::SeqCst);
        if state == JobState::Queued {
            // never picked up: finish it here
            self.inner.queue.lock().expect("queue lock").retain(|q| q != id);
            self.inner.transition(id, JobState::Cancelled, Some("cancelled before start".into()));
        }
        Some(true)
    }

    /// Stops the workers after their current step.
    pub fn shutdown(&self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        for job in self.inner.jobs.lock().expect("jobs lock").values() {
            job.cancel.store(true, Ordering::SeqCst);
        }
        self.inner.wake.notify_all();
        let handles: Vec<_> = self.workers.lock().expect("workers lock").drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }

    pub fn data_dir(&self) -> &Path {
        &self.inner.settings.data_dir
    }
}

/// Replays the job log into a registry (states only; requests are not
/// durable).
fn recover(path: &Path) -> Result<Vec<(Uuid, Job)>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut order = Vec::new();
    let mut jobs: HashMap<Uuid, Job> = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let entry: LogEntry = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("skipping unreadable job log line: {e}");
                continue;
            }
        };
        let job = jobs.entry(entry.id).or_insert_with(|| {
            order.push(entry.id);
            Job {
                state: JobState::Queued,
                created: entry.ts,
                total_steps: 0,
                steps_done: 0,
                inversion_done: 0,
                preview_index: None,
                error: None,
                run_dir: PathBuf::new(),
                lambda: 0.0,
                tail: VecDeque::new(),
                cancel: Arc::new(AtomicBool::new(false)),
                request: None,
            }
        });
        job.state = entry.state;
        if let Some(d) = entry.run_dir {
            job.run_dir = d;
        }
        if let Some(t) = entry.total_steps {
            job.total_steps = t;
        }
        if let Some(l) = entry.lambda {
            job.lambda = l;
        }
        if entry.reason.is_some() {
            job.error = entry.reason;
        }
        if entry.state == JobState::Done {
            job.steps_done = job.total_steps;
        }
    }
    Ok(order.into_iter().map(|id| {
        let job = jobs.remove(&id).expect("ordered id present");
        (id, job)
    }).collect())
}

struct JobObserver<'a> {
    inner: &'a Inner,
    id: Uuid,
    dir: &'a mut RunDir,
    cancel: Arc<AtomicBool>,
    preview_error: Option<Error>,
}

impl TransferObserver for JobObserver<'_> {
    fn phase(&mut self, phase: Phase) {
        if phase == Phase::Sampling {
            self.inner.transition(&self.id, JobState::Sampling, None);
        }
    }

    fn inversion_step(&mut self, done: usize, _total: usize) {
        self.inner.update(&self.id, |j| j.inversion_done = j.inversion_done.max(done));
    }

    fn step(&mut self, record: &StepRecord) {
        if let Err(e) = self.dir.record_step(record) {
            self.preview_error.get_or_insert(e);
        }
        self.inner.update(&self.id, |j| {
            j.steps_done = j.steps_done.max(record.step);
            j.tail.push_back(record.clone());
            while j.tail.len() > GUIDANCE_TAIL {
                j.tail.pop_front();
            }
        });
    }

    fn preview(&mut self, step: usize, image: &ImageRGB) {
        match self.dir.write_preview(step, image) {
            Ok(_) => self.inner.update(&self.id, |j| j.preview_index = Some(step)),
            Err(e) => {
                self.preview_error.get_or_insert(e);
            }
        }
    }

    fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }
}

fn worker_loop(inner: &Inner) {
    let mut backend: Option<(BackendSpec, Box<dyn Denoiser>)> = None;
    loop {
        let id = {
            let mut q = inner.queue.lock().expect("queue lock");
            loop {
                if inner.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                if let Some(id) = q.pop_front() {
                    break id;
                }
                q = inner.wake.wait(q).expect("queue lock");
            }
        };
        let claimed = {
            let jobs = inner.jobs.lock().expect("jobs lock");
            jobs.get(&id).and_then(|j| j.request.clone().map(|r| (r, j.cancel.clone(), j.run_dir.clone())))
        };
        let Some((req, cancel, run_dir)) = claimed else { continue };
        if !inner.transition(&id, JobState::Inverting, None) {
            continue;
        }
        let outcome = run_job(inner, id, &req, &cancel, &run_dir, &mut backend);
        match outcome {
            Ok(()) => {
                inner.transition(&id, JobState::Done, None);
            }
            Err(Error::Cancelled { step }) => {
                inner.transition(&id, JobState::Cancelled, Some(format!("cancelled at step {step}")));
            }
            Err(e) => {
                log::warn!("job {id} failed: {e}");
                inner.transition(&id, JobState::Failed, Some(e.to_string()));
            }
        }
    }
}

fn run_job(
    inner: &Inner,
    id: Uuid,
    req: &TransferRequest,
    cancel: &Arc<AtomicBool>,
    run_dir: &Path,
    backend: &mut Option<(BackendSpec, Box<dyn Denoiser>)>,
) -> Result<()> {
    let spec = inner.settings.backend.spec(req.config.seed, req.x_init.height(), req.x_init.width());
    if backend.as_ref().is_none_or(|(s, _)| *s != spec) {
        *backend = Some((spec.clone(), spec.build()?));
    }
    let b = backend.as_ref().expect("backend just built").1.as_ref();
    let opts = RunOptions {
        preview_every: inner.settings.preview_every,
        ..Default::default()
    };
    let mut dir = RunDir::create(run_dir, req, b.manifest(), &opts, false)?;
    let mut obs = JobObserver {
        inner,
        id,
        dir: &mut dir,
        cancel: cancel.clone(),
        preview_error: None,
    };
    let result = inner
        .cache
        .get_or_invert(req, b, &mut obs)
        .and_then(|(traj, key, _)| {
            obs.dir.write_trajectory(&traj, &key)?;
            material_transfer_with(req, b, &opts, &mut obs, Some(&traj))
        });
    if let Some(e) = obs.preview_error.take() {
        log::warn!("job {id}: artifact write failed: {e}");
    }
    match result {
        Ok(res) => {
            dir.finish(&res)?;
            Ok(())
        }
        Err(e) => {
            let status = if matches!(e, Error::Cancelled { .. }) { "cancelled" } else { "failed" };
            let _ = dir.mark(status);
            Err(e)
        }
    }
}

/// JSON error response.
fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn parse_id(raw: &str) -> std::result::Result<Uuid, Response> {
    Uuid::parse_str(raw).map_err(|_| error(StatusCode::NOT_FOUND, format!("unknown job {raw}")))
}

async fn healthz(State(svc): State<Service>) -> Json<Value> {
    let queued = svc.inner.queue.lock().expect("queue lock").len();
    Json(json!({
        "status": "ok",
        "workers": svc.inner.settings.workers,
        "queued": queued,
        "backend": format!("{:?}", svc.inner.settings.backend.backend).to_lowercase(),
    }))
}

#[derive(Debug, Serialize)]
struct FieldError {
    field: String,
    message: String,
}

/// Stores `bytes` under their SHA-256 in `uploads/`.
fn store_upload(dir: &Path, bytes: &[u8]) -> Result<PathBuf> {
    let name = hex::encode(Sha256::digest(bytes));
    let path = dir.join("uploads").join(name);
    if !path.exists() {
        let tmp = path.with_extension(format!("tmp-{}", Uuid::new_v4()));
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    }
    Ok(path)
}

#[derive(Deserialize)]
struct PromptsField {
    y_src: String,
    #[serde(default)]
    y_trg: String,
}

/// Parses and validates a submission, collecting every field failure.
fn build_request(fields: &HashMap<String, Bytes>) -> std::result::Result<TransferRequest, Vec<FieldError>> {
    let mut errors = Vec::new();
    let mut fail = |field: &str, message: String| {
        errors.push(FieldError {
            field: field.into(),
            message,
        })
    };
    let image = |name: &str, fail: &mut dyn FnMut(&str, String)| -> Option<ImageRGB> {
        match fields.get(name) {
            None => {
                fail(name, "missing".into());
                None
            }
            Some(b) => ImageRGB::decode_bytes(b).map_err(|e| fail(name, e.to_string())).ok(),
        }
    };
    let x = image("image", &mut fail);
    let material = image("material", &mut fail);
    let mask = match fields.get("mask") {
        None => {
            fail("mask", "missing".into());
            None
        }
        Some(b) => match BinaryMask::decode_bytes(b) {
            Ok(m) if m.is_empty() => {
                fail("mask", "mask empty".into());
                None
            }
            Ok(m) => Some(m),
            Err(e) => {
                fail("mask", e.to_string());
                None
            }
        },
    };
    let prompts = match (fields.get("prompts"), fields.get("y_src")) {
        (Some(p), _) => serde_json::from_slice::<PromptsField>(p)
            .map_err(|e| e.to_string())
            .and_then(|p| PromptSet::new(p.y_src, p.y_trg).map_err(|e| e.to_string())),
        (None, Some(src)) => {
            let trg = fields.get("y_trg").map(|b| String::from_utf8_lossy(b).into_owned()).unwrap_or_default();
            PromptSet::new(String::from_utf8_lossy(src).into_owned(), trg).map_err(|e| e.to_string())
        }
        (None, None) => Err("missing".into()),
    }
    .map_err(|m| fail("prompts", m))
    .ok();
    let config = match fields.get("config") {
        None => make_config(&Map::new()).map_err(|e| e.to_string()),
        Some(b) => match serde_json::from_slice::<Value>(b) {
            Ok(Value::Object(m)) => make_config(&m).map_err(|e| e.to_string()),
            Ok(_) => Err("config must be a JSON object".into()),
            Err(e) => Err(e.to_string()),
        },
    }
    .map_err(|m| fail("config", m))
    .ok();
    if let (Some(x), Some(m)) = (&x, &mask) {
        if x.dims() != m.dims() {
            fail("mask", format!("mask is {:?} but image is {:?}", m.dims(), x.dims()));
        } else if let Err(e) = x.ensure_latent_compatible() {
            fail("image", e.to_string());
        }
    }
    match (x, mask, material, prompts, config) {
        (Some(x), Some(m), Some(mat), Some(p), Some(c)) if errors.is_empty() => {
            TransferRequest::new(x, m, mat, p, c).map_err(|e| vec![FieldError { field: "request".into(), message: e.to_string() }])
        }
        _ => Err(errors),
    }
}

async fn submit_job(State(svc): State<Service>, mut multipart: Multipart) -> Response {
    let mut fields = HashMap::new();
    loop {
        match multipart.next_field().await {
            Ok(Some(field)) => {
                let name = field.name().unwrap_or_default().to_string();
                match field.bytes().await {
                    Ok(b) => {
                        fields.insert(name, b);
                    }
                    Err(e) => return error(StatusCode::BAD_REQUEST, format!("reading field {name}: {e}")),
                }
            }
            Ok(None) => break,
            Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed multipart body: {e}")),
        }
    }
    let req = match build_request(&fields) {
        Ok(r) => r,
        Err(errs) => {
            return (StatusCode::BAD_REQUEST, Json(json!({ "error": "validation failed", "fields": errs }))).into_response();
        }
    };
    let data_dir = svc.data_dir().to_path_buf();
    for name in ["image", "mask", "material"] {
        if let Err(e) = store_upload(&data_dir, &fields[name]) {
            return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
        }
    }
    match svc.submit(req) {
        Ok(id) => (StatusCode::ACCEPTED, Json(json!({ "id": id.to_string(), "state": JobState::Queued }))).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn list_jobs(State(svc): State<Service>) -> Json<Vec<JobView>> {
    let jobs = svc.inner.jobs.lock().expect("jobs lock");
    let mut views: Vec<JobView> = jobs.iter().map(|(id, j)| j.view(id)).collect();
    views.sort_by(|a, b| a.created.cmp(&b.created).then_with(|| a.id.cmp(&b.id)));
    Json(views)
}

async fn get_status(State(svc): State<Service>, UrlPath(raw): UrlPath<String>) -> Response {
    let id = match parse_id(&raw) {
        Ok(id) => id,
        Err(r) => return r,
    };
    match svc.status(&id) {
        Some(v) => Json(v).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown job {raw}")),
    }
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")], bytes).into_response()
}

async fn get_preview(State(svc): State<Service>, UrlPath(raw): UrlPath<String>) -> Response {
    let id = match parse_id(&raw) {
        Ok(id) => id,
        Err(r) => return r,
    };
    let dir = match svc.inner.jobs.lock().expect("jobs lock").get(&id) {
        Some(j) => j.run_dir.clone(),
        None => return error(StatusCode::NOT_FOUND, format!("unknown job {raw}")),
    };
    match tokio::fs::read(dir.join("preview.png")).await {
        Ok(b) => png(b),
        Err(_) => error(StatusCode::NOT_FOUND, "no preview yet"),
    }
}

async fn get_result(State(svc): State<Service>, UrlPath(raw): UrlPath<String>) -> Response {
    let id = match parse_id(&raw) {
        Ok(id) => id,
        Err(r) => return r,
    };
    let (state, dir) = match svc.inner.jobs.lock().expect("jobs lock").get(&id) {
        Some(j) => (j.state, j.run_dir.clone()),
        None => return error(StatusCode::NOT_FOUND, format!("unknown job {raw}")),
    };
    if state != JobState::Done {
        return error(StatusCode::CONFLICT, format!("job is {}", serde_json::to_value(state).unwrap_or_default().as_str().unwrap_or("")));
    }
    match tokio::fs::read(dir.join("result.png")).await {
        Ok(b) => png(b),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("result unreadable: {e}")),
    }
}

async fn cancel_job(State(svc): State<Service>, UrlPath(raw): UrlPath<String>) -> Response {
    let id = match parse_id(&raw) {
        Ok(id) => id,
        Err(r) => return r,
    };
    match svc.cancel(&id) {
        None => error(StatusCode::NOT_FOUND, format!("unknown job {raw}")),
        Some(accepted) => {
            let state = svc.status(&id).map(|v| v.state);
            Json(json!({ "id": raw, "accepted": accepted, "noop": !accepted, "state": state })).into_response()
        }
    }
}
