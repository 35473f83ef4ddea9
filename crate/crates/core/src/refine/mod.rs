//! Refinement operations over a built clustering, with an append-only
//! snapshot history.
//!
//! Every mutation goes through [`Session::apply`], which records the
//! operation and the resulting state. Cosine decisions use the
//! full-dimensional embeddings; splitting re-clusters in the reduced space.

mod state;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{cluster_subset, ClusterConfig, ClusterId, ClusteringError, Labeling, OUTLIER};
use crate::geometry::{cosine, norm};
use crate::pipeline::{Geometry, Perspective};
use crate::providers::{ProviderError, Providers};
use crate::representation::{describe_clusters, name_clusters, ClusterRepresentation, RepresentationError};

pub use state::{ClusteringState, History, OpRecord, Snapshot, StateContent};

/// Default similarity an outlier needs to join a text-defined cluster.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("unknown cluster {0}")]
    UnknownCluster(ClusterId),
    #[error("unknown document {0:?}")]
    UnknownDoc(String),
    #[error("no documents selected")]
    EmptySelection,
    #[error("cannot merge a cluster with itself ({0})")]
    SameCluster(ClusterId),
    #[error("document {0:?} is an outlier and cannot be accepted")]
    AcceptOutlier(String),
    #[error("cluster {cluster} has {size} documents; splitting needs at least {required}")]
    TooSmallToSplit { cluster: ClusterId, size: usize, required: usize },
    #[error("unknown version {0}")]
    UnknownVersion(u64),
    #[error("cluster name must not be empty")]
    EmptyName,
    #[error("text embedding is degenerate")]
    DegenerateEmbedding,
    #[error("operation {0} cannot be replayed without rebuilding")]
    NotReplayable(&'static str),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
}

/// A recorded state transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    Build {
        generation: u64,
    },
    RefineModel {
        generation: u64,
        labeled: usize,
        classes: usize,
        pairs: usize,
    },
    ChangeCluster {
        doc_ids: Vec<String>,
        target: ClusterId,
    },
    AddClusterFromDocs {
        doc_ids: Vec<String>,
    },
    AddClusterFromText {
        name: String,
        description: String,
        tau: f64,
    },
    Merge {
        a: ClusterId,
        b: ClusterId,
    },
    Remove {
        cluster: ClusterId,
    },
    Split {
        cluster: ClusterId,
        min_samples: usize,
        min_cluster_size: usize,
    },
    Accept {
        doc_ids: Vec<String>,
    },
    Unaccept {
        doc_ids: Vec<String>,
    },
    Revert {
        version: u64,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Build { .. } => "build",
            Op::RefineModel { .. } => "refine-model",
            Op::ChangeCluster { .. } => "change",
            Op::AddClusterFromDocs { .. } => "add-docs",
            Op::AddClusterFromText { .. } => "add-text",
            Op::Merge { .. } => "merge",
            Op::Remove { .. } => "remove",
            Op::Split { .. } => "split",
            Op::Accept { .. } => "accept",
            Op::Unaccept { .. } => "unaccept",
            Op::Revert { .. } => "revert",
        }
    }
}

/// Relaxed split parameters: a quarter of the build's, but at least 5.
pub fn split_params(cfg: &ClusterConfig) -> (usize, usize) {
    (
        (cfg.min_samples / 4).max(5),
        (cfg.effective_min_cluster_size() / 4).max(5),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpResult {
    /// New version, or `None` when the operation left the state unchanged.
    pub version: Option<u64>,
    pub new_clusters: Vec<ClusterId>,
    pub message: Option<String>,
}

/// What operations need besides the state: providers for naming and
/// text embedding, and the perspective's settings.
#[derive(Clone, Copy)]
pub struct RefineContext<'a> {
    pub providers: &'a Providers,
    pub perspective: &'a Perspective,
}

/// A perspective's clustering history and the operations on it.
#[derive(Clone, Debug)]
pub struct Session {
    history: History,
}

struct Draft {
    labels: Vec<ClusterId>,
    accepted: BTreeSet<String>,
    dirty: BTreeSet<ClusterId>,
    next_cluster_id: ClusterId,
    /// Representations supplied by the operation itself (text-defined
    /// clusters), overriding recomputation of name and, when empty, the
    /// whole entry.
    provided: BTreeMap<ClusterId, ClusterRepresentation>,
    removed: BTreeSet<ClusterId>,
}

impl Session {
    /// Starts a history whose first snapshot is `initial`.
    pub fn new(initial: ClusteringState, op: Op) -> Self {
        let mut history = History::default();
        history.push(initial, op);
        Self { history }
    }

    pub fn from_history(history: History) -> Self {
        assert!(!history.is_empty(), "history must have at least one snapshot");
        Self { history }
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn into_history(self) -> History {
        self.history
    }

    pub fn current(&self) -> ClusteringState {
        self.history.latest()
    }

    pub fn version(&self) -> u64 {
        self.history.latest_version()
    }

    /// Appends an externally computed state (rebuild, model refinement).
    pub fn commit(&mut self, mut state: ClusteringState, op: Op) -> u64 {
        state.version = self.version() + 1;
        let v = state.version;
        self.history.push(state, op);
        v
    }

    /// Rebuilds a session from an initial state and an op log.
    pub fn replay(initial: ClusteringState, ops: &[Op], ctx: RefineContext<'_>) -> Result<Session, RefineError> {
        let mut s = Session::new(initial, Op::Build { generation: 0 });
        for op in ops {
            s.apply(op.clone(), ctx)?;
        }
        Ok(s)
    }

    pub fn apply(&mut self, op: Op, ctx: RefineContext<'_>) -> Result<OpResult, RefineError> {
        let cur = self.current();
        let draft = match &op {
            Op::Build { .. } => return Err(RefineError::NotReplayable("build")),
            Op::RefineModel { .. } => return Err(RefineError::NotReplayable("refine-model")),
            Op::Revert { version } => {
                let snap = self.history.get(*version).ok_or(RefineError::UnknownVersion(*version))?;
                let v = self.commit(snap, op.clone());
                return Ok(OpResult {
                    version: Some(v),
                    new_clusters: Vec::new(),
                    message: None,
                });
            }
            Op::ChangeCluster { doc_ids, target } => change_cluster(&cur, doc_ids, *target)?,
            Op::AddClusterFromDocs { doc_ids } => add_from_docs(&cur, doc_ids)?,
            Op::AddClusterFromText { name, description, tau } => add_from_text(&cur, name, description, *tau, ctx)?,
            Op::Merge { a, b } => merge(&cur, *a, *b)?,
            Op::Remove { cluster } => remove(&cur, *cluster)?,
            Op::Split {
                cluster,
                min_samples,
                min_cluster_size,
            } => match split(&cur, *cluster, *min_samples, *min_cluster_size)? {
                Some(d) => d,
                None => {
                    return Ok(OpResult {
                        version: None,
                        new_clusters: Vec::new(),
                        message: Some("no split found".into()),
                    })
                }
            },
            Op::Accept { doc_ids } => accept(&cur, doc_ids)?,
            Op::Unaccept { doc_ids } => unaccept(&cur, doc_ids)?,
        };
        let new_clusters: Vec<ClusterId> = (cur.next_cluster_id..draft.next_cluster_id).collect();
        let next = finish(&cur, draft, ctx)?;
        next.check_invariants().map_err(RefineError::Invariant)?;
        let v = self.commit(next, op);
        Ok(OpResult {
            version: Some(v),
            new_clusters,
            message: None,
        })
    }

    pub fn change_cluster(&mut self, doc_ids: &[String], target: ClusterId, ctx: RefineContext<'_>) -> Result<OpResult, RefineError> {
        self.apply(Op::ChangeCluster { doc_ids: doc_ids.to_vec(), target }, ctx)
    }

    pub fn add_cluster_from_docs(&mut self, doc_ids: &[String], ctx: RefineContext<'_>) -> Result<OpResult, RefineError> {
        self.apply(Op::AddClusterFromDocs { doc_ids: doc_ids.to_vec() }, ctx)
    }

    pub fn add_cluster_from_text(
        &mut self,
        name: &str,
        description: &str,
        tau: Option<f64>,
        ctx: RefineContext<'_>,
    ) -> Result<OpResult, RefineError> {
        self.apply(
            Op::AddClusterFromText {
                name: name.into(),
                description: description.into(),
                tau: tau.unwrap_or(DEFAULT_TAU),
            },
            ctx,
        )
    }

    pub fn merge_clusters(&mut self, a: ClusterId, b: ClusterId, ctx: RefineContext<'_>) -> Result<OpResult, RefineError> {
        self.apply(Op::Merge { a, b }, ctx)
    }

    pub fn remove_cluster(&mut self, cluster: ClusterId, ctx: RefineContext<'_>) -> Result<OpResult, RefineError> {
        self.apply(Op::Remove { cluster }, ctx)
    }

    /// Splits with the relaxed defaults from [`split_params`].
    pub fn split_cluster(&mut self, cluster: ClusterId, ctx: RefineContext<'_>) -> Result<OpResult, RefineError> {
        let (min_samples, min_cluster_size) = split_params(&ctx.perspective.cluster);
        self.apply(
            Op::Split {
                cluster,
                min_samples,
                min_cluster_size,
            },
            ctx,
        )
    }

    pub fn accept(&mut self, doc_ids: &[String], ctx: RefineContext<'_>) -> Result<OpResult, RefineError> {
        self.apply(Op::Accept { doc_ids: doc_ids.to_vec() }, ctx)
    }

    pub fn unaccept(&mut self, doc_ids: &[String], ctx: RefineContext<'_>) -> Result<OpResult, RefineError> {
        self.apply(Op::Unaccept { doc_ids: doc_ids.to_vec() }, ctx)
    }

    pub fn revert(&mut self, version: u64, ctx: RefineContext<'_>) -> Result<OpResult, RefineError> {
        self.apply(Op::Revert { version }, ctx)
    }
}

fn draft(cur: &ClusteringState) -> Draft {
    Draft {
        labels: cur.labeling.labels.clone(),
        accepted: cur.accepted.clone(),
        dirty: BTreeSet::new(),
        next_cluster_id: cur.next_cluster_id,
        provided: BTreeMap::new(),
        removed: BTreeSet::new(),
    }
}

fn resolve_docs(g: &Geometry, doc_ids: &[String]) -> Result<Vec<usize>, RefineError> {
    if doc_ids.is_empty() {
        return Err(RefineError::EmptySelection);
    }
    let index: BTreeMap<&str, usize> = g.ids.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
    let mut rows: Vec<usize> = doc_ids
        .iter()
        .map(|d| index.get(d.as_str()).copied().ok_or_else(|| RefineError::UnknownDoc(d.clone())))
        .collect::<Result<_, _>>()?;
    rows.sort_unstable();
    rows.dedup();
    Ok(rows)
}

fn require_cluster(cur: &ClusteringState, c: ClusterId) -> Result<(), RefineError> {
    if cur.representations.contains_key(&c) {
        Ok(())
    } else {
        Err(RefineError::UnknownCluster(c))
    }
}

/// Moves `rows` to `target`, dropping acceptance of docs that change
/// cluster.
fn move_rows(d: &mut Draft, g: &Geometry, rows: &[usize], target: ClusterId) {
    for &i in rows {
        let old = d.labels[i];
        if old == target {
            continue;
        }
        if old != OUTLIER {
            d.dirty.insert(old);
        }
        d.labels[i] = target;
        d.accepted.remove(&g.ids[i]);
    }
    if target != OUTLIER {
        d.dirty.insert(target);
    }
}

fn change_cluster(cur: &ClusteringState, doc_ids: &[String], target: ClusterId) -> Result<Draft, RefineError> {
    let g = &cur.geometry;
    let rows = resolve_docs(g, doc_ids)?;
    if target != OUTLIER {
        require_cluster(cur, target)?;
    }
    let mut d = draft(cur);
    move_rows(&mut d, g, &rows, target);
    Ok(d)
}

fn add_from_docs(cur: &ClusteringState, doc_ids: &[String]) -> Result<Draft, RefineError> {
    let g = &cur.geometry;
    let rows = resolve_docs(g, doc_ids)?;
    let mut d = draft(cur);
    let id = d.next_cluster_id;
    d.next_cluster_id += 1;
    move_rows(&mut d, g, &rows, id);
    Ok(d)
}

/// Unit-norm embedding of "name. description" in the state's space.
fn embed_cluster_text(
    cur: &ClusteringState,
    name: &str,
    description: &str,
    ctx: RefineContext<'_>,
) -> Result<Vec<f64>, RefineError> {
    let text = if description.trim().is_empty() {
        format!("{}.", name.trim())
    } else {
        format!("{}. {}", name.trim(), description.trim())
    };
    let m = ctx
        .providers
        .embed_texts(&[text], Some(&ctx.perspective.embedding_instruction), &mut |_, _| Ok(()))?;
    let mut v = m.row(0).to_vec();
    if let Some(a) = &cur.geometry.adapter {
        v = a.apply_vec(&v);
    }
    let n = norm(&v);
    if !(n >= 1e-12) || v.len() != cur.geometry.embeddings.cols() {
        return Err(RefineError::DegenerateEmbedding);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

fn add_from_text(
    cur: &ClusteringState,
    name: &str,
    description: &str,
    tau: f64,
    ctx: RefineContext<'_>,
) -> Result<Draft, RefineError> {
    if name.trim().is_empty() {
        return Err(RefineError::EmptyName);
    }
    let g = &cur.geometry;
    let center = embed_cluster_text(cur, name, description, ctx)?;
    let mut d = draft(cur);
    let id = d.next_cluster_id;
    d.next_cluster_id += 1;
    let rows: Vec<usize> = (0..g.ids.len())
        .filter(|&i| {
            let e = g.embeddings.row(i);
            let sim = cosine(e, &center);
            match cur.labeling.labels[i] {
                OUTLIER => sim >= tau,
                l => sim > cosine(e, &cur.representations[&l].centroid),
            }
        })
        .collect();
    move_rows(&mut d, g, &rows, id);
    d.provided.insert(
        id,
        ClusterRepresentation {
            cluster_id: id,
            size: 0,
            keywords: Vec::new(),
            centroid: center,
            representative_doc_ids: Vec::new(),
            name: name.trim().to_string(),
            description: description.trim().to_string(),
            user_named: true,
        },
    );
    Ok(d)
}

fn merge(cur: &ClusteringState, a: ClusterId, b: ClusterId) -> Result<Draft, RefineError> {
    if a == b {
        return Err(RefineError::SameCluster(a));
    }
    require_cluster(cur, a)?;
    require_cluster(cur, b)?;
    let mut d = draft(cur);
    let id = d.next_cluster_id;
    d.next_cluster_id += 1;
    for l in d.labels.iter_mut() {
        if *l == a || *l == b {
            *l = id;
        }
    }
    d.dirty.insert(id);
    d.removed.extend([a, b]);
    Ok(d)
}

/// Index of the most similar centroid, ties to the lower cluster id.
pub fn nearest_centroid<'a>(e: &[f64], centroids: impl IntoIterator<Item = (ClusterId, &'a [f64])>) -> Option<ClusterId> {
    let mut best: Option<(ClusterId, f64)> = None;
    for (c, centroid) in centroids {
        let s = cosine(e, centroid);
        match best {
            Some((bc, bs)) if s < bs || (s == bs && c > bc) => {}
            _ => best = Some((c, s)),
        }
    }
    best.map(|(c, _)| c)
}

fn remove(cur: &ClusteringState, cluster: ClusterId) -> Result<Draft, RefineError> {
    require_cluster(cur, cluster)?;
    let g = &cur.geometry;
    let remaining: Vec<(ClusterId, &[f64])> = cur
        .representations
        .iter()
        .filter(|(&c, _)| c != cluster)
        .map(|(&c, r)| (c, r.centroid.as_slice()))
        .collect();
    let mut d = draft(cur);
    for i in 0..d.labels.len() {
        if d.labels[i] == cluster {
            let target = nearest_centroid(g.embeddings.row(i), remaining.iter().copied()).unwrap_or(OUTLIER);
            move_rows(&mut d, g, &[i], target);
        }
    }
    d.dirty.remove(&cluster);
    d.removed.insert(cluster);
    Ok(d)
}

fn split(
    cur: &ClusteringState,
    cluster: ClusterId,
    min_samples: usize,
    min_cluster_size: usize,
) -> Result<Option<Draft>, RefineError> {
    require_cluster(cur, cluster)?;
    let g = &cur.geometry;
    let rows = cur.labeling.members(cluster);
    let cfg = ClusterConfig::new(min_samples, min_cluster_size);
    cfg.validate()?;
    let required = (2 * cfg.effective_min_cluster_size()).max(min_samples + 1);
    if rows.len() < required {
        return Err(RefineError::TooSmallToSplit {
            cluster,
            size: rows.len(),
            required,
        });
    }
    let local = cluster_subset(&g.reduced, &rows, &cfg)?;
    if local.n_clusters() < 2 {
        return Ok(None);
    }
    let mut d = draft(cur);
    let base = d.next_cluster_id;
    d.next_cluster_id += local.n_clusters() as ClusterId;
    for (k, &i) in rows.iter().enumerate() {
        let target = match local.labels[k] {
            OUTLIER => OUTLIER,
            l => base + l,
        };
        move_rows(&mut d, g, &[i], target);
    }
    d.dirty.remove(&cluster);
    d.removed.insert(cluster);
    Ok(Some(d))
}

fn accept(cur: &ClusteringState, doc_ids: &[String]) -> Result<Draft, RefineError> {
    let g = &cur.geometry;
    let rows = resolve_docs(g, doc_ids)?;
    let mut d = draft(cur);
    for i in rows {
        if cur.labeling.labels[i] == OUTLIER {
            return Err(RefineError::AcceptOutlier(g.ids[i].clone()));
        }
        d.accepted.insert(g.ids[i].clone());
    }
    Ok(d)
}

fn unaccept(cur: &ClusteringState, doc_ids: &[String]) -> Result<Draft, RefineError> {
    let g = &cur.geometry;
    let rows = resolve_docs(g, doc_ids)?;
    let mut d = draft(cur);
    for i in rows {
        d.accepted.remove(&g.ids[i]);
    }
    Ok(d)
}

/// Recomputes representations for the draft labeling. Names carry over
/// for untouched clusters and user-named clusters; touched clusters are
/// renamed. A text-defined cluster that never had members is kept as an
/// empty anchor.
fn finish(cur: &ClusteringState, d: Draft, ctx: RefineContext<'_>) -> Result<ClusteringState, RefineError> {
    let g = &cur.geometry;
    let labeling = Labeling { labels: d.labels };
    let cfg = &ctx.perspective.representation;
    let mut reps = describe_clusters(g.view(), &labeling, cfg)?;
    let mut to_name = BTreeSet::new();
    for (c, r) in reps.iter_mut() {
        let source = d.provided.get(c).or_else(|| cur.representations.get(c));
        match source {
            Some(prev) if prev.user_named || !d.dirty.contains(c) => {
                r.name = prev.name.clone();
                r.description = prev.description.clone();
                r.user_named = prev.user_named;
            }
            _ => {
                to_name.insert(*c);
            }
        }
    }
    let anchors: Vec<(ClusterId, ClusterRepresentation)> = cur
        .representations
        .iter()
        .filter(|(c, _)| !d.removed.contains(c))
        .chain(d.provided.iter())
        .filter(|(c, r)| r.size == 0 && !reps.contains_key(c))
        .map(|(c, r)| (*c, r.clone()))
        .collect();
    reps.extend(anchors);
    name_clusters(
        &mut reps,
        &to_name,
        g.view(),
        Some(&ctx.perspective.embedding_instruction),
        ctx.providers,
        cfg,
    );
    Ok(ClusteringState {
        version: cur.version,
        labeling,
        representations: reps,
        accepted: d.accepted,
        next_cluster_id: d.next_cluster_id,
        geometry: Arc::clone(&cur.geometry),
    })
}
