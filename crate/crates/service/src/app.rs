//! Service facade: everything the HTTP layer and the CLI call.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use perspectra_core::adapter::{refine_model, accepted_labels, AdapterConfig, AdapterError};
use perspectra_core::clustering::{ClusterConfig, ClusterId, OUTLIER};
use perspectra_core::corpus::{ingest_jsonl, Corpus, CorpusError, FieldMapping};
use perspectra_core::evalharness::{run_grid, CellResult, EvalConfig, EvalError, ExperimentGrid};
use perspectra_core::geometry::ReductionConfig;
use perspectra_core::pipeline::{
    build, dashboard, export_tags, rewrite_corpus, Dashboard, Perspective, PerspectiveStatus, PipelineError,
    TemplateLibrary, TextMode,
};
use perspectra_core::providers::Providers;
use perspectra_core::refine::{ClusteringState, Op, RefineContext, RefineError, Session, Snapshot, DEFAULT_TAU, split_params};
use perspectra_core::representation::{ctfidf, RepresentationConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::jobs::{JobCtx, JobKind, JobRecord, JobRunner};
use crate::store::{valid_id, ProjectStore, StoreError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{message}")]
    Conflict { message: String, job_id: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Upstream(String),
    #[error("{0}")]
    Internal(String),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { .. } => ServiceError::NotFound(e.to_string()),
            StoreError::InvalidId(_) => ServiceError::Invalid(e.to_string()),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl From<PipelineError> for ServiceError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Provider(_) => ServiceError::Upstream(e.to_string()),
            PipelineError::Geometry(_) | PipelineError::Clustering(_) | PipelineError::Representation(_) => {
                ServiceError::Internal(e.to_string())
            }
            other => ServiceError::Invalid(other.to_string()),
        }
    }
}

impl From<RefineError> for ServiceError {
    fn from(e: RefineError) -> Self {
        match e {
            RefineError::Invariant(_) | RefineError::Representation(_) | RefineError::Clustering(_) => {
                ServiceError::Internal(e.to_string())
            }
            RefineError::Provider(_) => ServiceError::Upstream(e.to_string()),
            other => ServiceError::Invalid(other.to_string()),
        }
    }
}

impl From<AdapterError> for ServiceError {
    fn from(e: AdapterError) -> Self {
        match e {
            AdapterError::Pipeline(p) => p.into(),
            AdapterError::Geometry(_) => ServiceError::Internal(e.to_string()),
            other => ServiceError::Invalid(other.to_string()),
        }
    }
}

impl From<CorpusError> for ServiceError {
    fn from(e: CorpusError) -> Self {
        ServiceError::Invalid(e.to_string())
    }
}

impl From<EvalError> for ServiceError {
    fn from(e: EvalError) -> Self {
        ServiceError::Invalid(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub id: String,
    pub name: String,
    pub n_docs: usize,
    pub rejected_lines: Vec<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateRef {
    pub task: String,
    #[serde(default)]
    pub mode: TextMode,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreatePerspective {
    pub id: Option<String>,
    pub name: Option<String>,
    pub corpus_id: String,
    pub instruction: Option<String>,
    pub rewrite_prompt: Option<String>,
    pub template: Option<TemplateRef>,
    pub seed: Option<u64>,
    pub reduction: Option<ReductionConfig>,
    pub cluster: Option<ClusterConfig>,
    pub cluster_dims: Option<usize>,
    pub representation: Option<RepresentationConfig>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PerspectiveInfo {
    #[serde(flatten)]
    pub perspective: Perspective,
    pub active_job: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub doc_id: String,
    pub x: f64,
    pub y: f64,
    pub cluster_id: ClusterId,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPayload {
    pub perspective_id: String,
    pub version: u64,
    pub generation: u64,
    pub points: Vec<MapPoint>,
    #[serde(flatten)]
    pub dashboard: Dashboard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub version: u64,
    pub op: Op,
    pub timestamp_ms: u64,
    pub generation: u64,
    pub n_clusters: usize,
    pub n_outliers: usize,
    pub n_accepted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpResponse {
    /// New version, or the unchanged current one when the op was a no-op.
    pub version: u64,
    pub changed: bool,
    pub new_clusters: Vec<ClusterId>,
    pub message: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DocInfo {
    pub doc_id: String,
    pub text: String,
    pub metadata: BTreeMap<String, String>,
    pub tags: Vec<String>,
    pub cluster_id: ClusterId,
    pub cluster_name: Option<String>,
    pub accepted: bool,
    pub version: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRequest {
    pub corpus_id: String,
    #[serde(default = "default_task")]
    pub task: String,
    pub modes: Vec<TextMode>,
    pub instruction: Vec<bool>,
    pub shots: Vec<usize>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    #[serde(default)]
    pub reduction: Option<ReductionConfig>,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
}

fn default_task() -> String {
    "topic".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocIds {
    doc_ids: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChangeBody {
    doc_ids: Vec<String>,
    target: ClusterId,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AddTextBody {
    name: String,
    #[serde(default)]
    description: String,
    tau: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MergeBody {
    a: ClusterId,
    b: ClusterId,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterBody {
    cluster: ClusterId,
    min_samples: Option<usize>,
    min_cluster_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VersionBody {
    version: u64,
}

pub const OP_NAMES: [&str; 9] = [
    "change", "add-docs", "add-text", "merge", "remove", "split", "accept", "unaccept", "revert",
];

fn body<T: serde::de::DeserializeOwned>(v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| ServiceError::Invalid(format!("invalid request body: {e}")))
}

/// Turns an `ops/{name}` request into an [`Op`].
pub fn parse_op(name: &str, v: Value, p: &Perspective) -> Result<Op> {
    Ok(match name {
        "change" => {
            let b: ChangeBody = body(v)?;
            Op::ChangeCluster {
                doc_ids: b.doc_ids,
                target: b.target,
            }
        }
        "add-docs" => Op::AddClusterFromDocs {
            doc_ids: body::<DocIds>(v)?.doc_ids,
        },
        "add-text" => {
            let b: AddTextBody = body(v)?;
            Op::AddClusterFromText {
                name: b.name,
                description: b.description,
                tau: b.tau.unwrap_or(DEFAULT_TAU),
            }
        }
        "merge" => {
            let b: MergeBody = body(v)?;
            Op::Merge { a: b.a, b: b.b }
        }
        "remove" => {
            let b: ClusterBody = body(v)?;
            Op::Remove { cluster: b.cluster }
        }
        "split" => {
            let b: ClusterBody = body(v)?;
            let (ms, mcs) = split_params(&p.cluster);
            Op::Split {
                cluster: b.cluster,
                min_samples: b.min_samples.unwrap_or(ms),
                min_cluster_size: b.min_cluster_size.unwrap_or(mcs),
            }
        }
        "accept" => Op::Accept {
            doc_ids: body::<DocIds>(v)?.doc_ids,
        },
        "unaccept" => Op::Unaccept {
            doc_ids: body::<DocIds>(v)?.doc_ids,
        },
        "revert" => Op::Revert {
            version: body::<VersionBody>(v)?.version,
        },
        other => return Err(ServiceError::NotFound(format!("unknown operation {other:?}"))),
    })
}

/// Cached history of one perspective; its mutex is the perspective's
/// write lock.
#[derive(Default)]
struct Slot {
    session: Option<Session>,
    loaded: bool,
}

pub struct Service {
    store: ProjectStore,
    providers: Providers,
    jobs: JobRunner,
    templates: TemplateLibrary,
    slots: Mutex<BTreeMap<String, Arc<Mutex<Slot>>>>,
    /// Serialises corpus creation and tag writes.
    corpus_lock: Mutex<()>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service").field("root", &self.store.root()).finish()
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn history_entry(s: &Snapshot) -> HistoryEntry {
    let c = &s.content;
    HistoryEntry {
        version: s.version,
        op: s.op.op.clone(),
        timestamp_ms: s.op.timestamp_ms,
        generation: c.generation,
        n_clusters: c.labeling.n_clusters(),
        n_outliers: c.labeling.n_outliers(),
        n_accepted: c.accepted.len(),
    }
}

impl Service {
    pub fn open(root: impl Into<PathBuf>, providers: Providers) -> Result<Arc<Self>> {
        Ok(Arc::new(Self {
            store: ProjectStore::open(root)?,
            providers,
            jobs: JobRunner::new(),
            templates: TemplateLibrary::bundled(),
            slots: Mutex::new(BTreeMap::new()),
            corpus_lock: Mutex::new(()),
        }))
    }

    pub fn store(&self) -> &ProjectStore {
        &self.store
    }

    pub fn providers(&self) -> &Providers {
        &self.providers
    }

    pub fn jobs(&self) -> &JobRunner {
        &self.jobs
    }

    fn slot(&self, pid: &str) -> Arc<Mutex<Slot>> {
        Arc::clone(lock(&self.slots).entry(pid.to_string()).or_default())
    }

    fn ensure_loaded(&self, slot: &mut Slot, pid: &str) -> Result<()> {
        if !slot.loaded {
            slot.session = self.store.load_history(pid)?.map(Session::from_history);
            slot.loaded = true;
        }
        Ok(())
    }

    /// Drops the cached history so the next access rereads the store.
    fn invalidate(slot: &mut Slot) {
        slot.session = None;
        slot.loaded = false;
    }

    fn no_job(&self, pid: &str) -> Result<()> {
        match self.jobs.active_for(pid) {
            Some(j) => Err(ServiceError::Conflict {
                message: format!("perspective {pid:?} is locked by {:?} job {}", j.kind, j.id),
                job_id: j.id,
            }),
            None => Ok(()),
        }
    }

    fn perspective(&self, pid: &str) -> Result<Perspective> {
        Ok(self.store.load_perspective(pid)?)
    }

    fn with_session<T>(&self, pid: &str, f: impl FnOnce(&Session) -> Result<T>) -> Result<T> {
        self.perspective(pid)?;
        let slot = self.slot(pid);
        let mut s = lock(&slot);
        self.ensure_loaded(&mut s, pid)?;
        match s.session.as_ref() {
            Some(sess) => f(sess),
            None => Err(ServiceError::NotFound(format!("perspective {pid:?} has not been built"))),
        }
    }

    fn state_at(&self, pid: &str, version: Option<u64>) -> Result<ClusteringState> {
        self.with_session(pid, |sess| match version {
            None => Ok(sess.current()),
            Some(v) => sess
                .history()
                .get(v)
                .ok_or_else(|| ServiceError::NotFound(format!("perspective {pid:?} has no version {v}"))),
        })
    }

    // ---- corpora ----

    pub fn create_corpus(&self, id: Option<&str>, name: Option<&str>, jsonl: &[u8], mapping: &FieldMapping) -> Result<CorpusSummary> {
        let (docs, report) = ingest_jsonl(jsonl, mapping)?;
        let _g = lock(&self.corpus_lock);
        let id = match id {
            Some(id) => {
                valid_id(id)?;
                if self.store.corpus_exists(id) {
                    return Err(ServiceError::Invalid(format!("corpus {id:?} already exists")));
                }
                id.to_string()
            }
            None => (1..)
                .map(|i| format!("corpus-{i}"))
                .find(|c| !self.store.corpus_exists(c))
                .expect("unbounded"),
        };
        let corpus = Corpus::new(id.clone(), name.unwrap_or(id.as_str()), docs)?;
        if corpus.is_empty() {
            return Err(ServiceError::Invalid("corpus has no documents".into()));
        }
        self.store.save_corpus(&corpus)?;
        Ok(CorpusSummary {
            n_docs: corpus.len(),
            id,
            name: corpus.name,
            rejected_lines: report.empty_text_lines,
        })
    }

    pub fn list_corpora(&self) -> Result<Vec<CorpusSummary>> {
        self.store
            .list_corpora()?
            .iter()
            .map(|id| {
                let c = self.store.load_corpus(id)?;
                Ok(CorpusSummary {
                    id: c.id,
                    name: c.name,
                    n_docs: c.documents.len(),
                    rejected_lines: Vec::new(),
                })
            })
            .collect()
    }

    // ---- perspectives ----

    pub fn create_perspective(&self, req: CreatePerspective) -> Result<PerspectiveInfo> {
        if !self.store.corpus_exists(&req.corpus_id) {
            return Err(ServiceError::NotFound(format!("corpus {:?} not found", req.corpus_id)));
        }
        let id = match &req.id {
            Some(id) => {
                valid_id(id)?;
                id.clone()
            }
            None => (1..)
                .map(|i| format!("perspective-{i}"))
                .find(|p| !self.store.perspective_exists(p))
                .expect("unbounded"),
        };
        if self.store.perspective_exists(&id) {
            return Err(ServiceError::Invalid(format!("perspective {id:?} already exists")));
        }
        let mut p = match (&req.template, &req.instruction) {
            (Some(t), _) => Perspective::from_template(&id, &req.corpus_id, &self.templates, &t.task, t.mode)?,
            (None, Some(instr)) => Perspective::new(&id, &req.corpus_id, &id, instr)?,
            (None, None) => return Err(ServiceError::Invalid("give an instruction or a template".into())),
        };
        if let Some(instr) = req.instruction.filter(|_| req.template.is_some()) {
            p.embedding_instruction = instr;
        }
        if req.rewrite_prompt.is_some() {
            p.rewrite_prompt = req.rewrite_prompt;
        }
        if let Some(n) = req.name {
            p.name = n;
        }
        if let Some(s) = req.seed {
            p.seed = s;
        }
        if let Some(r) = req.reduction {
            p.reduction = r;
        }
        if let Some(c) = req.cluster {
            p.cluster = c;
        }
        if let Some(d) = req.cluster_dims {
            p.cluster_dims = d;
        }
        if let Some(r) = req.representation {
            p.representation = r;
        }
        p.validate()?;
        self.store.save_perspective(&p)?;
        Ok(PerspectiveInfo {
            perspective: p,
            active_job: None,
        })
    }

    pub fn perspective_info(&self, pid: &str) -> Result<PerspectiveInfo> {
        let mut p = self.perspective(pid)?;
        let active = self.jobs.active_for(pid);
        let slot = self.slot(pid);
        let mut s = lock(&slot);
        self.ensure_loaded(&mut s, pid)?;
        p.status = match (&active, &s.session) {
            (Some(j), _) if j.kind == JobKind::Build => PerspectiveStatus::Building,
            (_, Some(sess)) => PerspectiveStatus::Built { version: sess.version() },
            _ => PerspectiveStatus::Unbuilt,
        };
        Ok(PerspectiveInfo {
            perspective: p,
            active_job: active.map(|j| j.id),
        })
    }

    pub fn list_perspectives(&self) -> Result<Vec<PerspectiveInfo>> {
        self.store.list_perspectives()?.iter().map(|id| self.perspective_info(id)).collect()
    }

    // ---- jobs ----

    pub fn job(&self, id: &str) -> Result<JobRecord> {
        self.jobs
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("job {id:?} not found")))
    }

    pub fn cancel_job(&self, id: &str) -> Result<JobRecord> {
        self.jobs
            .cancel(id)
            .ok_or_else(|| ServiceError::NotFound(format!("job {id:?} not found")))
    }

    fn submit(self: &Arc<Self>, kind: JobKind, pid: Option<&str>, f: impl FnOnce(&Service, &JobCtx) -> Result<Value> + Send + 'static) -> JobRecord {
        let this = Arc::clone(self);
        self.jobs.submit(
            kind,
            pid.map(str::to_string),
            Box::new(move |ctx| f(&this, ctx).map_err(|e| e.to_string())),
        )
    }

    pub fn submit_build(self: &Arc<Self>, pid: &str) -> Result<JobRecord> {
        let p = self.perspective(pid)?;
        if !self.store.corpus_exists(&p.corpus_id) {
            return Err(ServiceError::NotFound(format!("corpus {:?} not found", p.corpus_id)));
        }
        let pid = pid.to_string();
        Ok(self.submit(JobKind::Build, Some(&pid.clone()), move |svc, ctx| svc.run_build(&pid, ctx)))
    }

    pub fn submit_rewrite(self: &Arc<Self>, pid: &str) -> Result<JobRecord> {
        self.perspective(pid)?;
        let pid = pid.to_string();
        Ok(self.submit(JobKind::Rewrite, Some(&pid.clone()), move |svc, ctx| {
            let p = svc.perspective(&pid)?;
            let corpus = svc.store.load_corpus(&p.corpus_id)?;
            let r = rewrite_corpus(&p, &corpus, &svc.providers, ctx)?;
            Ok(json!({
                "rewritten": r.rewritten,
                "failed": r.failed,
                "texts": corpus.ids().into_iter().zip(r.texts).collect::<BTreeMap<_, _>>(),
            }))
        }))
    }

    pub fn submit_refine_model(self: &Arc<Self>, pid: &str, cfg: AdapterConfig) -> Result<JobRecord> {
        cfg.validate()?;
        self.no_job(pid)?;
        let cur = self.state_at(pid, None)?;
        let mut counts: BTreeMap<ClusterId, usize> = BTreeMap::new();
        for (_, c) in accepted_labels(&cur) {
            *counts.entry(c).or_insert(0) += 1;
        }
        let found = counts.values().filter(|&&n| n >= 2).count();
        if found < 2 {
            return Err(AdapterError::InsufficientLabels { found }.into());
        }
        let pid = pid.to_string();
        Ok(self.submit(JobKind::RefineModel, Some(&pid.clone()), move |svc, ctx| {
            svc.run_refine_model(&pid, &cfg, ctx)
        }))
    }

    pub fn submit_eval(self: &Arc<Self>, req: EvalRequest) -> Result<JobRecord> {
        let corpus = self.store.load_corpus(&req.corpus_id)?;
        let grid = ExperimentGrid {
            task: req.task.clone(),
            modes: req.modes.clone(),
            instruction: req.instruction.clone(),
            shots: req.shots.clone(),
        };
        grid.cells()?;
        let cfg = req.eval.clone().unwrap_or_default();
        cfg.validate()?;
        Ok(self.submit(JobKind::Eval, None, move |svc, ctx| {
            let results = svc.run_eval(&corpus, &grid, &req, &cfg)?;
            ctx.set_progress(None, 0.99);
            Ok(json!({ "results": results, "k": cfg.k }))
        }))
    }

    pub fn run_eval(&self, corpus: &Corpus, grid: &ExperimentGrid, req: &EvalRequest, cfg: &EvalConfig) -> Result<Vec<CellResult>> {
        Ok(run_grid(
            corpus,
            grid,
            &self.providers,
            &req.reduction.clone().unwrap_or_default(),
            &req.adapter.clone().unwrap_or_default(),
            cfg,
        )?)
    }

    /// Full build; commits a new version on success and leaves the stored
    /// state untouched on failure or cancellation.
    pub fn run_build(&self, pid: &str, ctx: &JobCtx) -> Result<Value> {
        let p = self.perspective(pid)?;
        let corpus = self.store.load_corpus(&p.corpus_id)?;
        let slot = self.slot(pid);
        let version = {
            let mut s = lock(&slot);
            self.ensure_loaded(&mut s, pid)?;
            s.session.as_ref().map_or(0, |x| x.version() + 1)
        };
        let generation = self.store.next_generation(pid)?;
        let out = build(&p, &corpus, &self.providers, None, version, generation, ctx)?;
        out.state.check_invariants().map_err(ServiceError::Internal)?;
        let hash = out.state.geometry.meta.doc_order_hash.clone();
        let n_clusters = out.state.labeling.n_clusters();

        let mut s = lock(&slot);
        self.ensure_loaded(&mut s, pid)?;
        if ctx.cancel_requested() {
            return Err(ServiceError::Invalid("cancelled".into()));
        }
        let res = (|| {
            self.store.save_geometry(pid, &out.state.geometry)?;
            self.store.save_raw_embeddings(pid, &out.raw_embeddings, &hash)?;
            Ok::<_, ServiceError>(())
        })();
        res?;
        let op = Op::Build { generation };
        let v = match s.session.as_mut() {
            Some(sess) => sess.commit(out.state, op),
            None => {
                s.session = Some(Session::new(out.state, op));
                version
            }
        };
        self.persist_latest(&mut s, pid)?;
        Ok(json!({
            "version": v,
            "generation": generation,
            "n_clusters": n_clusters,
            "rewrite_failed": out.rewrite.failed,
        }))
    }

    pub fn run_refine_model(&self, pid: &str, cfg: &AdapterConfig, ctx: &JobCtx) -> Result<Value> {
        let p = self.perspective(pid)?;
        let cur = self.state_at(pid, None)?;
        let raw = self.store.load_raw_embeddings(pid, &cur.geometry.meta.doc_order_hash)?;
        let generation = self.store.next_generation(pid)?;
        let out = refine_model(&p, &cur, &raw, cfg, &self.providers, generation, ctx)?;
        out.state.check_invariants().map_err(ServiceError::Internal)?;
        let n_clusters = out.state.labeling.n_clusters();

        let slot = self.slot(pid);
        let mut s = lock(&slot);
        self.ensure_loaded(&mut s, pid)?;
        if ctx.cancel_requested() {
            return Err(ServiceError::Invalid("cancelled".into()));
        }
        self.store.save_geometry(pid, &out.state.geometry)?;
        let sess = s
            .session
            .as_mut()
            .ok_or_else(|| ServiceError::Internal("history vanished during model refinement".into()))?;
        let v = sess.commit(out.state, out.op);
        self.persist_latest(&mut s, pid)?;
        Ok(json!({
            "version": v,
            "generation": generation,
            "n_clusters": n_clusters,
            "report": out.report,
        }))
    }

    /// Writes the newest snapshot. On failure the cached history is
    /// dropped, so memory never runs ahead of disk.
    fn persist_latest(&self, s: &mut Slot, pid: &str) -> Result<()> {
        let sess = s.session.as_ref().expect("session exists after a commit");
        let snap = sess.history().snapshots().last().cloned().expect("session has a snapshot");
        let current = sess.current();
        if let Err(e) = self.store.append_snapshot(pid, &snap) {
            Self::invalidate(s);
            return Err(e.into());
        }
        self.store.write_clusters_copy(pid, &current);
        Ok(())
    }

    // ---- refinement ----

    pub fn apply_op(&self, pid: &str, name: &str, body: Value) -> Result<OpResponse> {
        let p = self.perspective(pid)?;
        let op = parse_op(name, body, &p)?;
        self.no_job(pid)?;
        let slot = self.slot(pid);
        let mut s = lock(&slot);
        self.ensure_loaded(&mut s, pid)?;
        let sess = s
            .session
            .as_mut()
            .ok_or_else(|| ServiceError::Invalid(format!("perspective {pid:?} has not been built")))?;
        let ctx = RefineContext {
            providers: &self.providers,
            perspective: &p,
        };
        let res = match sess.apply(op, ctx) {
            Ok(r) => r,
            Err(e) => {
                if matches!(e, RefineError::Invariant(_)) {
                    Self::invalidate(&mut s);
                }
                return Err(e.into());
            }
        };
        let Some(version) = res.version else {
            return Ok(OpResponse {
                version: sess.version(),
                changed: false,
                new_clusters: res.new_clusters,
                message: res.message,
            });
        };
        if let Err(msg) = sess.current().check_invariants() {
            Self::invalidate(&mut s);
            return Err(ServiceError::Internal(format!("invariant violated after {name}: {msg}")));
        }
        self.persist_latest(&mut s, pid)?;
        Ok(OpResponse {
            version,
            changed: true,
            new_clusters: res.new_clusters,
            message: res.message,
        })
    }

    // ---- reads ----

    pub fn map(&self, pid: &str, version: Option<u64>) -> Result<MapPayload> {
        let st = self.state_at(pid, version)?;
        let g = &st.geometry;
        let points = (0..g.ids.len())
            .map(|i| MapPoint {
                doc_id: g.ids[i].clone(),
                x: g.map2d.get(i, 0),
                y: g.map2d.get(i, 1),
                cluster_id: st.labeling.labels[i],
                accepted: st.accepted.contains(&g.ids[i]),
            })
            .collect();
        Ok(MapPayload {
            perspective_id: pid.to_string(),
            version: st.version,
            generation: g.generation,
            points,
            dashboard: dashboard(&st),
        })
    }

    pub fn map_json(&self, pid: &str, version: Option<u64>) -> Result<Vec<u8>> {
        serde_json::to_vec(&self.map(pid, version)?).map_err(|e| ServiceError::Internal(e.to_string()))
    }

    pub fn history(&self, pid: &str) -> Result<Vec<HistoryEntry>> {
        self.with_session(pid, |s| Ok(s.history().snapshots().iter().map(history_entry).collect()))
    }

    pub fn search(&self, pid: &str, q: Option<&str>, meta: &BTreeMap<String, String>) -> Result<Vec<String>> {
        let p = self.perspective(pid)?;
        let corpus = self.store.load_corpus(&p.corpus_id)?;
        Ok(corpus.filter(q.filter(|s| !s.is_empty()), meta))
    }

    pub fn doc(&self, pid: &str, doc_id: &str, version: Option<u64>) -> Result<DocInfo> {
        let p = self.perspective(pid)?;
        let corpus = self.store.load_corpus(&p.corpus_id)?;
        let i = corpus
            .index_of(doc_id)
            .ok_or_else(|| ServiceError::NotFound(format!("document {doc_id:?} not found")))?;
        let st = self.state_at(pid, version)?;
        let cluster_id = st.cluster_of(doc_id).unwrap_or(OUTLIER);
        let d = &corpus.documents[i];
        Ok(DocInfo {
            doc_id: d.id.clone(),
            text: d.text.clone(),
            metadata: d.metadata.clone(),
            tags: corpus.tag_assignments.get(doc_id).cloned().unwrap_or_default(),
            cluster_name: st.representations.get(&cluster_id).map(|r| r.name.clone()),
            cluster_id,
            accepted: st.accepted.contains(doc_id),
            version: st.version,
        })
    }

    /// Distinctive keywords of an arbitrary selection against the rest of
    /// the corpus.
    pub fn selection_keywords(&self, pid: &str, doc_ids: &[String], top_n: usize) -> Result<Vec<(String, f64)>> {
        let p = self.perspective(pid)?;
        let st = self.state_at(pid, None)?;
        let g = &st.geometry;
        let mut chosen = BTreeSet::new();
        for id in doc_ids {
            chosen.insert(g.index_of(id).ok_or_else(|| ServiceError::Invalid(format!("unknown document {id:?}")))?);
        }
        if chosen.is_empty() {
            return Ok(Vec::new());
        }
        let (inside, outside): (Vec<_>, Vec<_>) = (0..g.ids.len()).partition(|i| chosen.contains(i));
        let classes = vec![
            inside.iter().map(|&i| g.texts[i].as_str()).collect::<Vec<_>>(),
            outside.iter().map(|&i| g.texts[i].as_str()).collect(),
        ];
        match ctfidf(&classes, &p.representation.tokenizer, top_n) {
            Ok(mut k) => Ok(k.swap_remove(0)),
            Err(_) => Ok(Vec::new()),
        }
    }

    /// Writes cluster names of the chosen version into the corpus tags and
    /// returns the full tag map.
    pub fn export_tags(&self, pid: &str, version: Option<u64>) -> Result<BTreeMap<String, Vec<String>>> {
        let p = self.perspective(pid)?;
        let st = self.state_at(pid, version)?;
        let _g = lock(&self.corpus_lock);
        let mut corpus = self.store.load_corpus(&p.corpus_id)?;
        let tags = export_tags(&corpus, &st)?;
        corpus.tag_assignments = tags.clone();
        self.store.save_corpus(&corpus)?;
        Ok(tags)
    }
}
