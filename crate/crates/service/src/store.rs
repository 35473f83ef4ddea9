//! On-disk project layout.
//!
//! ```text
//! root/
//!   corpora/{id}.json
//!   perspectives/{id}/config.json
//!   perspectives/{id}/embeddings.f32 + embeddings.json    provider vectors
//!   perspectives/{id}/builds/{g}/geometry.json            written last
//!   perspectives/{id}/builds/{g}/{embeddings,reduced128,map2d,adapter}.f32 (+ .json)
//!   perspectives/{id}/history/{version}.json               one snapshot each
//!   perspectives/{id}/clusters.json                        latest clustering, by doc id
//! ```
//!
//! Every file is replaced atomically (temp file, fsync, rename). The
//! history directory is the source of truth; `clusters.json` is a
//! convenience copy and build directories without a snapshot referencing
//! them are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use perspectra_core::adapter::LinearAdapter;
use perspectra_core::corpus::Corpus;
use perspectra_core::geometry::{Matrix, MatrixSidecar};
use perspectra_core::pipeline::{BuildMeta, Geometry, Perspective};
use perspectra_core::clustering::ClusterId;
use perspectra_core::refine::{ClusteringState, History, Snapshot};
use perspectra_core::representation::ClusterRepresentation;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{kind} {id:?} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("invalid id {0:?}: use letters, digits, '-' and '_'")]
    InvalidId(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("corrupt project data: {0}")]
    Corrupt(String),
    #[error("injected fault before renaming {0}")]
    InjectedFault(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Makes the n-th atomic write (counting from when it is armed) stop after
/// the temp file is written, as a crash would.
#[derive(Debug, Default)]
pub struct FaultInjector {
    countdown: AtomicUsize,
}

impl FaultInjector {
    pub fn arm(&self, nth_write: usize) {
        self.countdown.store(nth_write, Ordering::SeqCst);
    }

    pub fn disarm(&self) {
        self.countdown.store(0, Ordering::SeqCst);
    }

    fn trips(&self) -> bool {
        let prev = self
            .countdown
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| c.checked_sub(1))
            .unwrap_or(0);
        prev == 1
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GeometryRecord {
    generation: u64,
    ids: Vec<String>,
    texts: Vec<String>,
    meta: BuildMeta,
    adapter: Option<AdapterRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdapterRecord {
    trained_on_version: Option<u64>,
    config_hash: String,
}

const TMP_SUFFIX: &str = ".tmp";

#[derive(Clone, Debug)]
pub struct ProjectStore {
    root: PathBuf,
    faults: Arc<FaultInjector>,
}

pub fn valid_id(id: &str) -> Result<(), StoreError> {
    if !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

fn remove_temp_files(dir: &Path) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            remove_temp_files(&p);
        } else if p.to_string_lossy().ends_with(TMP_SUFFIX) {
            let _ = fs::remove_file(&p);
        }
    }
}

impl ProjectStore {
    /// Opens (creating if needed) a project root and sweeps temp files
    /// left by interrupted writes.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["corpora", "perspectives"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        remove_temp_files(&root);
        Ok(Self {
            root,
            faults: Arc::new(FaultInjector::default()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn faults(&self) -> &FaultInjector {
        &self.faults
    }

    pub fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        let dir = path.parent().expect("store paths have a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = PathBuf::from(format!("{}{TMP_SUFFIX}", path.display()));
        {
            let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(bytes).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        if self.faults.trips() {
            return Err(StoreError::InjectedFault(path.to_path_buf()));
        }
        fs::rename(&tmp, path).map_err(io_err(path))?;
        if let Ok(d) = fs::File::open(dir) {
            let _ = d.sync_all();
        }
        Ok(())
    }

    fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec_pretty(value).map_err(|source| StoreError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_atomic(path, &bytes)
    }

    fn read_json<T: DeserializeOwned>(&self, path: &Path) -> Result<T, StoreError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&bytes).map_err(|source| StoreError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    fn write_matrix(&self, path: &Path, m: &Matrix, doc_order_hash: &str) -> Result<(), StoreError> {
        self.write_atomic(path, &m.to_f32_le_bytes())?;
        let side = MatrixSidecar {
            rows: m.rows(),
            cols: m.cols(),
            doc_order_hash: doc_order_hash.to_string(),
        };
        self.write_json(&path.with_extension("json"), &side)
    }

    fn read_matrix(&self, path: &Path, expected_hash: Option<&str>) -> Result<Matrix, StoreError> {
        let side: MatrixSidecar = self.read_json(&path.with_extension("json"))?;
        if let Some(h) = expected_hash {
            if side.doc_order_hash != h {
                return Err(StoreError::Corrupt(format!("{} has a different document order", path.display())));
            }
        }
        let bytes = fs::read(path).map_err(io_err(path))?;
        Matrix::from_f32_le_bytes(side.rows, side.cols, &bytes)
            .map_err(|e| StoreError::Corrupt(format!("{}: {e}", path.display())))
    }

    // ---- corpora ----

    fn corpus_path(&self, id: &str) -> PathBuf {
        self.root.join("corpora").join(format!("{id}.json"))
    }

    pub fn save_corpus(&self, corpus: &Corpus) -> Result<(), StoreError> {
        valid_id(&corpus.id)?;
        self.write_json(&self.corpus_path(&corpus.id), corpus)
    }

    pub fn load_corpus(&self, id: &str) -> Result<Corpus, StoreError> {
        valid_id(id)?;
        let p = self.corpus_path(id);
        if !p.exists() {
            return Err(StoreError::NotFound { kind: "corpus", id: id.into() });
        }
        self.read_json(&p)
    }

    pub fn corpus_exists(&self, id: &str) -> bool {
        valid_id(id).is_ok() && self.corpus_path(id).exists()
    }

    fn list_dir(&self, sub: &str, json_files: bool) -> Result<Vec<String>, StoreError> {
        let d = self.root.join(sub);
        let mut out = Vec::new();
        for e in fs::read_dir(&d).map_err(io_err(&d))?.flatten() {
            let name = e.file_name().to_string_lossy().to_string();
            let id = if json_files {
                match name.strip_suffix(".json") {
                    Some(s) => s.to_string(),
                    None => continue,
                }
            } else if e.path().join("config.json").exists() {
                name
            } else {
                continue;
            };
            out.push(id);
        }
        out.sort();
        Ok(out)
    }

    pub fn list_corpora(&self) -> Result<Vec<String>, StoreError> {
        self.list_dir("corpora", true)
    }

    // ---- perspectives ----

    fn pdir(&self, id: &str) -> PathBuf {
        self.root.join("perspectives").join(id)
    }

    pub fn save_perspective(&self, p: &Perspective) -> Result<(), StoreError> {
        valid_id(&p.id)?;
        self.write_json(&self.pdir(&p.id).join("config.json"), p)
    }

    pub fn load_perspective(&self, id: &str) -> Result<Perspective, StoreError> {
        valid_id(id)?;
        let p = self.pdir(id).join("config.json");
        if !p.exists() {
            return Err(StoreError::NotFound {
                kind: "perspective",
                id: id.into(),
            });
        }
        self.read_json(&p)
    }

    pub fn perspective_exists(&self, id: &str) -> bool {
        valid_id(id).is_ok() && self.pdir(id).join("config.json").exists()
    }

    pub fn list_perspectives(&self) -> Result<Vec<String>, StoreError> {
        self.list_dir("perspectives", false)
    }

    pub fn save_raw_embeddings(&self, pid: &str, m: &Matrix, doc_order_hash: &str) -> Result<(), StoreError> {
        self.write_matrix(&self.pdir(pid).join("embeddings.f32"), m, doc_order_hash)
    }

    pub fn load_raw_embeddings(&self, pid: &str, doc_order_hash: &str) -> Result<Matrix, StoreError> {
        self.read_matrix(&self.pdir(pid).join("embeddings.f32"), Some(doc_order_hash))
    }

    fn builds(&self, pid: &str) -> PathBuf {
        self.pdir(pid).join("builds")
    }

    /// First generation number with no build directory, committed or not.
    pub fn next_generation(&self, pid: &str) -> Result<u64, StoreError> {
        let d = self.builds(pid);
        if !d.exists() {
            return Ok(0);
        }
        let max = fs::read_dir(&d)
            .map_err(io_err(&d))?
            .flatten()
            .filter_map(|e| e.file_name().to_string_lossy().parse::<u64>().ok())
            .max();
        Ok(max.map_or(0, |m| m + 1))
    }

    pub fn save_geometry(&self, pid: &str, g: &Geometry) -> Result<(), StoreError> {
        let d = self.builds(pid).join(g.generation.to_string());
        let h = &g.meta.doc_order_hash;
        self.write_matrix(&d.join("embeddings.f32"), &g.embeddings, h)?;
        self.write_matrix(&d.join("reduced128.f32"), &g.reduced, h)?;
        self.write_matrix(&d.join("map2d.f32"), &g.map2d, h)?;
        if let Some(a) = &g.adapter {
            self.write_matrix(&d.join("adapter.f32"), &a.w, "")?;
        }
        let rec = GeometryRecord {
            generation: g.generation,
            ids: g.ids.clone(),
            texts: g.texts.clone(),
            meta: g.meta.clone(),
            adapter: g.adapter.as_ref().map(|a| AdapterRecord {
                trained_on_version: a.trained_on_version,
                config_hash: a.config_hash.clone(),
            }),
        };
        self.write_json(&d.join("geometry.json"), &rec)
    }

    pub fn load_geometry(&self, pid: &str, generation: u64) -> Result<Geometry, StoreError> {
        let d = self.builds(pid).join(generation.to_string());
        let rec: GeometryRecord = self.read_json(&d.join("geometry.json"))?;
        if rec.generation != generation {
            return Err(StoreError::Corrupt(format!("build {generation} records generation {}", rec.generation)));
        }
        let h = Some(rec.meta.doc_order_hash.as_str());
        let embeddings = self.read_matrix(&d.join("embeddings.f32"), h)?;
        let reduced = self.read_matrix(&d.join("reduced128.f32"), h)?;
        let map2d = self.read_matrix(&d.join("map2d.f32"), h)?;
        let n = rec.ids.len();
        if [embeddings.rows(), reduced.rows(), map2d.rows(), rec.texts.len()].iter().any(|&r| r != n) {
            return Err(StoreError::Corrupt(format!("build {generation} has inconsistent row counts")));
        }
        let adapter = match rec.adapter {
            Some(a) => Some(LinearAdapter {
                w: self.read_matrix(&d.join("adapter.f32"), None)?,
                trained_on_version: a.trained_on_version,
                config_hash: a.config_hash,
            }),
            None => None,
        };
        Ok(Geometry {
            generation,
            ids: rec.ids,
            texts: rec.texts,
            embeddings,
            reduced,
            map2d,
            adapter,
            meta: rec.meta,
        })
    }

    fn history_dir(&self, pid: &str) -> PathBuf {
        self.pdir(pid).join("history")
    }

    pub fn append_snapshot(&self, pid: &str, s: &Snapshot) -> Result<(), StoreError> {
        self.write_json(&self.history_dir(pid).join(format!("{:08}.json", s.version)), s)
    }

    /// The stored history, or `None` for a perspective never built.
    pub fn load_history(&self, pid: &str) -> Result<Option<History>, StoreError> {
        let d = self.history_dir(pid);
        if !d.exists() {
            return Ok(None);
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&d)
            .map_err(io_err(&d))?
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Ok(None);
        }
        let snapshots: Vec<Snapshot> = files.iter().map(|f| self.read_json(f)).collect::<Result<_, _>>()?;
        let mut geometries = BTreeMap::new();
        for s in &snapshots {
            let g = s.content.generation;
            if !geometries.contains_key(&g) {
                geometries.insert(g, Arc::new(self.load_geometry(pid, g)?));
            }
        }
        History::from_parts(snapshots, geometries).map(Some).map_err(StoreError::Corrupt)
    }
}

/// Human-readable copy of the latest clustering, keyed by document id.
/// Carries no version or build number, so equal clusterings give equal
/// files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClustersFile {
    pub assignments: BTreeMap<String, ClusterId>,
    pub clusters: Vec<ClusterRepresentation>,
    pub accepted: Vec<String>,
}

impl ClustersFile {
    pub fn of(state: &ClusteringState) -> Self {
        let g = &state.geometry;
        Self {
            assignments: g.ids.iter().cloned().zip(state.labeling.labels.iter().copied()).collect(),
            clusters: state.representations.values().cloned().collect(),
            accepted: state.accepted.iter().cloned().collect(),
        }
    }
}

impl ProjectStore {
    /// Refreshes `clusters.json`. Best effort: the history is authoritative.
    pub fn write_clusters_copy(&self, pid: &str, state: &ClusteringState) {
        if let Err(e) = self.write_json(&self.pdir(pid).join("clusters.json"), &ClustersFile::of(state)) {
            tracing::warn!(perspective = pid, error = %e, "could not refresh clusters.json");
        }
    }

    pub fn clusters_path(&self, pid: &str) -> PathBuf {
        self.pdir(pid).join("clusters.json")
    }
}
