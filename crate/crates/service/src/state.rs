//! Open documents, generation jobs and persistence hooks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::time::Duration;

use loom_core::branching::{ExpansionError, ExpansionReport, NodeSink};
use loom_core::persistence::{self, Autosave, PersistError};
use loom_core::{
    Committed, Document, DocumentStore, GenMeta, LanguageModel, Mutation, MutationOutcome, NodeId, ProviderConfig,
    StoreError,
};
use serde::Serialize;
use tokio::sync::{mpsc, watch, OwnedSemaphorePermit, Semaphore};

use crate::error::{ApiError, ApiResult};
use crate::events::{EventBody, EventLog};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Documents are read from and written to this directory.
    pub doc_dir: PathBuf,
    /// Generation jobs allowed to run at once; others queue.
    pub max_jobs: usize,
    /// Snapshot interval; `None` disables periodic snapshots.
    pub autosave_every: Option<Duration>,
    pub snapshots: usize,
    /// Shared bearer token required on every request when set.
    pub token: Option<String>,
    /// Provider for documents that do not configure one.
    pub default_provider: Option<ProviderConfig>,
}

impl ServiceConfig {
    pub fn new(doc_dir: impl Into<PathBuf>) -> Self {
        Self {
            doc_dir: doc_dir.into(),
            max_jobs: 2,
            autosave_every: Some(Duration::from_secs(30)),
            snapshots: persistence::DEFAULT_SNAPSHOTS,
            token: None,
            default_provider: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobStatus {
    pub id: String,
    pub kind: String,
    pub node: NodeId,
    pub state: JobState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<ExpansionReport>,
}

struct Job {
    status: JobStatus,
    cancel: Arc<AtomicBool>,
}

type CachedModel = (ProviderConfig, Arc<dyn LanguageModel>);

pub struct OpenDoc {
    pub id: String,
    pub path: PathBuf,
    pub store: DocumentStore,
    pub events: EventLog,
    jobs: Mutex<BTreeMap<String, Job>>,
    autosave: Mutex<Autosave>,
    model: Mutex<Option<CachedModel>>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl OpenDoc {
    fn new(id: String, path: PathBuf, doc: Document, snapshot_dir: PathBuf, keep: usize) -> Self {
        Self {
            id,
            path,
            store: DocumentStore::new(doc),
            events: EventLog::new(),
            jobs: Mutex::new(BTreeMap::new()),
            autosave: Mutex::new(Autosave::new(snapshot_dir, keep)),
            model: Mutex::new(None),
        }
    }

    /// Apply a mutation and publish it, in commit order.
    pub fn apply(
        &self,
        mutation: Mutation,
        base_seq: Option<u64>,
        job: Option<&str>,
    ) -> Result<Committed<MutationOutcome>, StoreError> {
        let op = mutation.op();
        let copy = mutation.clone();
        self.store.apply(mutation, base_seq, |c| {
            self.events.publish(EventBody::Mutation {
                seq: c.seq,
                op,
                mutation: Box::new(copy),
                outcome: c.value.clone(),
                touched: c.touched.clone(),
                job: job.map(str::to_owned),
            });
        })
    }

    pub fn save(&self) -> Result<u64, PersistError> {
        let doc = self.store.stamp_saved(persistence::now_timestamp);
        persistence::write(&doc, &self.path)?;
        let seq = self.store.seq();
        self.events.publish(EventBody::Saved { seq, path: self.path.display().to_string() });
        Ok(seq)
    }

    pub fn autosave_tick(&self) -> Result<Option<PathBuf>, PersistError> {
        let doc = self.store.snapshot();
        lock(&self.autosave).tick(&doc)
    }

    /// The document's provider, or `fallback` when it has none.
    pub fn model(&self, fallback: Option<&ProviderConfig>, base_dir: &Path) -> ApiResult<Arc<dyn LanguageModel>> {
        let doc = self.store.snapshot();
        let config = doc
            .provider_config()
            .or(fallback)
            .ok_or_else(|| ApiError::bad_request("no provider configured for this document").code("no_provider"))?
            .clone();
        let mut cache = lock(&self.model);
        if let Some((c, m)) = cache.as_ref() {
            if *c == config {
                return Ok(m.clone());
            }
        }
        let model = config.build(Some(base_dir))?;
        *cache = Some((config, model.clone()));
        Ok(model)
    }

    pub fn jobs(&self) -> Vec<JobStatus> {
        lock(&self.jobs).values().map(|j| j.status.clone()).collect()
    }

    pub fn job(&self, id: &str) -> Option<JobStatus> {
        lock(&self.jobs).get(id).map(|j| j.status.clone())
    }

    /// Ask a job to stop. Nodes it already created stay.
    pub fn cancel_job(&self, id: &str) -> Option<JobStatus> {
        let jobs = lock(&self.jobs);
        let job = jobs.get(id)?;
        job.cancel.store(true, Ordering::SeqCst);
        Some(job.status.clone())
    }

    fn set_job(&self, id: &str, f: impl FnOnce(&mut JobStatus)) {
        if let Some(j) = lock(&self.jobs).get_mut(id) {
            f(&mut j.status);
        }
    }
}

/// Commits generated nodes through the store as they appear.
pub struct JobSink<'a> {
    pub doc: &'a OpenDoc,
    pub job: &'a str,
    pub cancel: &'a AtomicBool,
}

impl NodeSink for JobSink<'_> {
    fn create(&mut self, parent: NodeId, text: String, meta: GenMeta) -> Result<NodeId, ExpansionError> {
        let committed = self
            .doc
            .apply(Mutation::CreateChild { parent, text, gen_meta: Some(meta) }, None, Some(self.job))
            .map_err(|e| ExpansionError::Document(e.to_string()))?;
        Ok(committed.value.nodes[0])
    }

    fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }
}

type QueuedJob = Box<dyn FnOnce(OwnedSemaphorePermit) + Send>;

pub struct AppState {
    pub config: ServiceConfig,
    docs: RwLock<BTreeMap<String, Arc<OpenDoc>>>,
    job_gate: Arc<Semaphore>,
    /// Queued jobs, handed a slot in submission order.
    job_queue: OnceLock<mpsc::UnboundedSender<QueuedJob>>,
    next_job: AtomicU64,
    shutdown: watch::Sender<bool>,
}

/// Document id for a file name: the name without its loom extension.
pub fn doc_id_for(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    let stem = [".loom.json.gz", ".loom.json", ".json.gz", ".json"]
        .iter()
        .find_map(|ext| name.strip_suffix(ext))
        .unwrap_or(name);
    valid_id(stem).then(|| stem.to_owned())
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl AppState {
    pub fn new(config: ServiceConfig) -> std::io::Result<Arc<Self>> {
        std::fs::create_dir_all(&config.doc_dir)?;
        std::fs::read_dir(&config.doc_dir)?;
        let gate = Arc::new(Semaphore::new(config.max_jobs.max(1)));
        Ok(Arc::new(Self {
            config,
            docs: RwLock::new(BTreeMap::new()),
            job_gate: gate,
            job_queue: OnceLock::new(),
            next_job: AtomicU64::new(1),
            shutdown: watch::channel(false).0,
        }))
    }

    pub fn doc(&self, id: &str) -> ApiResult<Arc<OpenDoc>> {
        self.docs
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no open document {id:?}")))
    }

    pub fn docs(&self) -> Vec<Arc<OpenDoc>> {
        self.docs.read().unwrap_or_else(|p| p.into_inner()).values().cloned().collect()
    }

    fn snapshot_dir(&self, id: &str) -> PathBuf {
        self.config.doc_dir.join(".snapshots").join(id)
    }

    fn insert(&self, id: String, path: PathBuf, doc: Document) -> ApiResult<Arc<OpenDoc>> {
        let mut docs = self.docs.write().unwrap_or_else(|p| p.into_inner());
        if let Some(existing) = docs.get(&id) {
            return Ok(existing.clone());
        }
        let open = Arc::new(OpenDoc::new(id.clone(), path, doc, self.snapshot_dir(&id), self.config.snapshots));
        docs.insert(id, open.clone());
        Ok(open)
    }

    /// Open a document file; an already open id is returned as is.
    pub fn open_file(&self, path: &Path) -> ApiResult<Arc<OpenDoc>> {
        let id = doc_id_for(path)
            .ok_or_else(|| ApiError::bad_request(format!("cannot derive a document id from {}", path.display())))?;
        if let Ok(open) = self.doc(&id) {
            return Ok(open);
        }
        let doc = persistence::load(path)?;
        self.insert(id, path.to_owned(), doc)
    }

    /// Open `{doc_dir}/{id}.loom.json`, or create it with `prompt`.
    pub fn open_or_create(&self, id: &str, prompt: Option<String>) -> ApiResult<(Arc<OpenDoc>, bool)> {
        if !valid_id(id) {
            return Err(ApiError::bad_request(format!("invalid document id {id:?}")));
        }
        let path = self.config.doc_dir.join(format!("{id}{}", persistence::EXTENSION));
        let open = self.doc(id).ok();
        match (open, prompt) {
            (Some(_), Some(_)) => Err(ApiError::new(
                axum::http::StatusCode::CONFLICT,
                "exists",
                format!("document {id:?} is already open"),
            )),
            (Some(doc), None) => Ok((doc, false)),
            (None, None) => Ok((self.open_file(&path)?, false)),
            (None, Some(_)) if path.exists() => Err(ApiError::new(
                axum::http::StatusCode::CONFLICT,
                "exists",
                format!("{} already exists", path.display()),
            )),
            (None, Some(prompt)) => Ok((self.insert(id.to_owned(), path, Document::new(prompt))?, true)),
        }
    }

    pub fn model_for(&self, doc: &OpenDoc) -> ApiResult<Arc<dyn LanguageModel>> {
        doc.model(self.config.default_provider.as_ref(), &self.config.doc_dir)
    }

    /// Register a generation job and run `work` on a blocking thread once a
    /// slot is free. A job cancelled while queued finishes without running.
    pub fn spawn_job<F>(self: &Arc<Self>, doc: Arc<OpenDoc>, kind: &str, node: NodeId, work: F) -> JobStatus
    where
        F: FnOnce(&OpenDoc, &str, &AtomicBool) -> ExpansionReport + Send + 'static,
    {
        let id = format!("job-{}", self.next_job.fetch_add(1, Ordering::SeqCst));
        let cancel = Arc::new(AtomicBool::new(false));
        let status = JobStatus { id: id.clone(), kind: kind.to_owned(), node, state: JobState::Queued, report: None };
        lock(&doc.jobs).insert(id.clone(), Job { status: status.clone(), cancel: cancel.clone() });
        let kind = kind.to_owned();
        self.enqueue(Box::new(move |permit| {
            tokio::spawn(async move {
                let _permit = permit;
                let report = if cancel.load(Ordering::SeqCst) {
                    ExpansionReport { error: Some(ExpansionError::Cancelled), ..ExpansionReport::default() }
                } else {
                    doc.set_job(&id, |s| s.state = JobState::Running);
                    doc.events.publish(EventBody::JobStarted { job: id.clone(), kind, node });
                    let d = doc.clone();
                    let job = id.clone();
                    tokio::task::spawn_blocking(move || work(&d, &job, &cancel)).await.unwrap_or_else(|e| {
                        ExpansionReport {
                            error: Some(ExpansionError::Document(format!("job panicked: {e}"))),
                            ..ExpansionReport::default()
                        }
                    })
                };
                let state = match &report.error {
                    None => JobState::Done,
                    Some(ExpansionError::Cancelled) => JobState::Cancelled,
                    Some(_) => JobState::Failed,
                };
                doc.set_job(&id, |s| {
                    s.state = state;
                    s.report = Some(report.clone());
                });
                let state =
                    serde_json::to_value(state).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
                doc.events.publish(EventBody::JobFinished { job: id, state, report });
            });
        }));
        status
    }

    /// Pass `job` to a single dispatcher that waits for a free slot for
    /// each job in turn, so jobs start in the order they were submitted.
    fn enqueue(&self, job: QueuedJob) {
        let tx = self.job_queue.get_or_init(|| {
            let (tx, mut rx) = mpsc::unbounded_channel::<QueuedJob>();
            let gate = self.job_gate.clone();
            tokio::spawn(async move {
                while let Some(job) = rx.recv().await {
                    let Ok(permit) = gate.clone().acquire_owned().await else { return };
                    job(permit);
                }
            });
            tx
        });
        let _ = tx.send(job);
    }

    pub fn shutdown_signal(&self) -> watch::Receiver<bool> {
        self.shutdown.subscribe()
    }

    /// Save every document with unsaved changes and take a final snapshot.
    pub fn flush(&self) -> Vec<(String, Result<(), PersistError>)> {
        self.docs()
            .into_iter()
            .map(|d| {
                let result = (|| {
                    if d.store.snapshot().is_dirty() || !d.path.exists() {
                        d.save()?;
                    }
                    d.autosave_tick().map(drop)
                })();
                (d.id.clone(), result)
            })
            .collect()
    }

    pub fn cancel_all_jobs(&self) {
        for d in self.docs() {
            for j in lock(&d.jobs).values() {
                j.cancel.store(true, Ordering::SeqCst);
            }
        }
    }

    /// Wait until no job holds a slot, or `limit` passes.
    pub async fn drain_jobs(&self, limit: Duration) {
        let all = self.config.max_jobs.max(1) as u32;
        let _ = tokio::time::timeout(limit, self.job_gate.acquire_many(all)).await;
    }

    pub(crate) fn begin_shutdown(&self) {
        self.shutdown.send_replace(true);
    }
}
