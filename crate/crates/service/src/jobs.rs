//! Single-worker FIFO job runner.
//!
//! Jobs run one at a time on a dedicated thread, so two jobs on the same
//! perspective never overlap. A perspective counts as locked while it has
//! a queued or running job.

use std::collections::{BTreeMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use perspectra_core::pipeline::{Observer, Phase};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Rewrite,
    Build,
    RefineModel,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_active(self) -> bool {
        matches!(self, JobStatus::Queued | JobStatus::Running)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub perspective_id: Option<String>,
    pub status: JobStatus,
    pub progress: f64,
    pub phase: Option<Phase>,
    pub error: Option<String>,
    pub result: Option<Value>,
}

pub type JobFn = Box<dyn FnOnce(&JobCtx) -> Result<Value, String> + Send>;

struct Entry {
    record: JobRecord,
    cancel: Arc<AtomicBool>,
}

#[derive(Default)]
struct State {
    jobs: BTreeMap<u64, Entry>,
    queue: VecDeque<(u64, JobFn)>,
}

struct Inner {
    state: Mutex<State>,
    wake: Condvar,
    next_id: AtomicU64,
}

/// Handed to a running job: progress sink and cancellation flag.
pub struct JobCtx {
    inner: Arc<Inner>,
    key: u64,
    kind: JobKind,
    cancel: Arc<AtomicBool>,
}

/// Share of overall progress each phase covers, by job kind.
fn phase_span(kind: JobKind, phase: Phase) -> (f64, f64) {
    use Phase::*;
    let weights: &[(Phase, f64)] = match kind {
        JobKind::Rewrite => &[(Rewrite, 1.0)],
        JobKind::Build | JobKind::RefineModel => &[
            (Rewrite, 0.10),
            (Embed, 0.25),
            (ReduceClusterSpace, 0.35),
            (ReduceMap, 0.20),
            (Cluster, 0.05),
            (Represent, 0.05),
        ],
        JobKind::Eval => &[(Rewrite, 0.2), (Embed, 0.3), (ReduceMap, 0.5)],
    };
    let mut start = 0.0;
    for &(p, w) in weights {
        if p == phase {
            return (start, w);
        }
        start += w;
    }
    (start.min(1.0), 0.0)
}

impl JobCtx {
    pub fn cancel_requested(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    /// Sets overall progress; values below the current one are ignored.
    pub fn set_progress(&self, phase: Option<Phase>, value: f64) {
        let mut st = self.inner.state.lock().unwrap();
        if let Some(e) = st.jobs.get_mut(&self.key) {
            let v = value.clamp(0.0, 1.0);
            if v >= e.record.progress {
                e.record.progress = v;
                if phase.is_some() {
                    e.record.phase = phase;
                }
            }
        }
    }
}

impl Observer for JobCtx {
    fn progress(&self, phase: Phase, fraction: f64) {
        let (start, width) = phase_span(self.kind, phase);
        // stay below 1 until the job has actually finished
        self.set_progress(Some(phase), (start + width * fraction.clamp(0.0, 1.0)).min(0.99));
    }

    fn cancelled(&self) -> bool {
        self.cancel_requested()
    }
}

#[derive(Clone)]
pub struct JobRunner {
    inner: Arc<Inner>,
}

impl Default for JobRunner {
    fn default() -> Self {
        Self::new()
    }
}

pub fn job_key(id: &str) -> Option<u64> {
    id.strip_prefix("job-")?.parse().ok()
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("worker panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("worker panicked: {s}")
    } else {
        "worker panicked".into()
    }
}

impl JobRunner {
    pub fn new() -> Self {
        let inner = Arc::new(Inner {
            state: Mutex::new(State::default()),
            wake: Condvar::new(),
            next_id: AtomicU64::new(1),
        });
        let worker = Arc::clone(&inner);
        thread::Builder::new()
            .name("perspectra-jobs".into())
            .spawn(move || worker_loop(worker))
            .expect("spawn job worker");
        Self { inner }
    }

    /// Queues a job and returns its record.
    pub fn submit(&self, kind: JobKind, perspective_id: Option<String>, work: JobFn) -> JobRecord {
        let key = self.inner.next_id.fetch_add(1, Ordering::SeqCst);
        let record = JobRecord {
            id: format!("job-{key}"),
            kind,
            perspective_id,
            status: JobStatus::Queued,
            progress: 0.0,
            phase: None,
            error: None,
            result: None,
        };
        let mut st = self.inner.state.lock().unwrap();
        st.jobs.insert(
            key,
            Entry {
                record: record.clone(),
                cancel: Arc::new(AtomicBool::new(false)),
            },
        );
        st.queue.push_back((key, work));
        self.inner.wake.notify_all();
        record
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        let key = job_key(id)?;
        self.inner.state.lock().unwrap().jobs.get(&key).map(|e| e.record.clone())
    }

    pub fn list(&self) -> Vec<JobRecord> {
        self.inner.state.lock().unwrap().jobs.values().map(|e| e.record.clone()).collect()
    }

    /// Requests cancellation. A queued job fails without running; a running
    /// job stops at its next checkpoint. Returns `None` for unknown ids.
    pub fn cancel(&self, id: &str) -> Option<JobRecord> {
        let key = job_key(id)?;
        let mut st = self.inner.state.lock().unwrap();
        let queued = st.queue.iter().position(|(k, _)| *k == key);
        if let Some(i) = queued {
            st.queue.remove(i);
        }
        let e = st.jobs.get_mut(&key)?;
        e.cancel.store(true, Ordering::SeqCst);
        if queued.is_some() {
            e.record.status = JobStatus::Failed;
            e.record.error = Some("cancelled".into());
        }
        let rec = e.record.clone();
        self.inner.wake.notify_all();
        Some(rec)
    }

    /// The queued or running job holding `perspective_id`, if any.
    pub fn active_for(&self, perspective_id: &str) -> Option<JobRecord> {
        self.inner
            .state
            .lock()
            .unwrap()
            .jobs
            .values()
            .find(|e| e.record.status.is_active() && e.record.perspective_id.as_deref() == Some(perspective_id))
            .map(|e| e.record.clone())
    }

    /// Blocks until the job is no longer active.
    pub fn wait(&self, id: &str) -> Option<JobRecord> {
        let key = job_key(id)?;
        let mut st = self.inner.state.lock().unwrap();
        loop {
            let rec = st.jobs.get(&key)?.record.clone();
            if !rec.status.is_active() {
                return Some(rec);
            }
            st = self.inner.wake.wait(st).unwrap();
        }
    }
}

fn worker_loop(inner: Arc<Inner>) {
    loop {
        let (key, work, ctx) = {
            let mut st = inner.state.lock().unwrap();
            loop {
                // the runner handle and the worker each hold one reference
                if st.queue.is_empty() && Arc::strong_count(&inner) == 1 {
                    return;
                }
                if let Some((key, work)) = st.queue.pop_front() {
                    let e = st.jobs.get_mut(&key).expect("queued job has an entry");
                    e.record.status = JobStatus::Running;
                    let ctx = JobCtx {
                        inner: Arc::clone(&inner),
                        key,
                        kind: e.record.kind,
                        cancel: Arc::clone(&e.cancel),
                    };
                    break (key, work, ctx);
                }
                let (g, _) = inner.wake.wait_timeout(st, std::time::Duration::from_millis(200)).unwrap();
                st = g;
            }
        };
        inner.wake.notify_all();
        let outcome = catch_unwind(AssertUnwindSafe(|| work(&ctx))).unwrap_or_else(|p| Err(panic_message(p)));
        let mut st = inner.state.lock().unwrap();
        if let Some(e) = st.jobs.get_mut(&key) {
            match outcome {
                Ok(v) => {
                    e.record.status = JobStatus::Done;
                    e.record.progress = 1.0;
                    e.record.result = Some(v);
                }
                Err(msg) => {
                    tracing::warn!(job = %e.record.id, error = %msg, "job failed");
                    e.record.status = JobStatus::Failed;
                    e.record.error = Some(msg);
                }
            }
        }
        drop(ctx);
        inner.wake.notify_all();
    }
}
