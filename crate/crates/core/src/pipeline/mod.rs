//! Perspectives and the build: rewrite, embed, reduce, cluster, describe.

mod templates;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::LinearAdapter;
use crate::clustering::{hdbscan, ClusterConfig, ClusterId, ClusteringError, Labeling, OUTLIER};
use crate::corpus::{doc_order_hash, Corpus, CorpusError};
use crate::geometry::{cosine, umap_embed, FuzzyGraph, GeometryError, Matrix, ReductionConfig};
use crate::providers::{GenerationRequest, ProviderError, Providers};
use crate::refine::ClusteringState;
use crate::representation::{describe_clusters, name_clusters, DocView, RepresentationConfig, RepresentationError};

pub use templates::{TaskInstructions, TaskRewrites, TaskTemplate, TemplateLibrary, TemplatePair};

/// Marker between a rewrite prompt and the document it applies to.
pub const DOCUMENT_MARKER: &str = "\n\nDocument:\n";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid perspective: {0}")]
    Config(String),
    #[error("{n} documents cannot support n_neighbors={n_neighbors}; need at least n_neighbors + 1 documents")]
    TooFewDocuments { n: usize, n_neighbors: usize },
    #[error("rewriting failed for {} of {total} documents (more than 10%): {}", failed.len(), failed.join(", "))]
    RewriteFailures { failed: Vec<String>, total: usize },
    #[error("cancelled")]
    Cancelled,
    #[error(transparent)]
    Provider(ProviderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl From<ProviderError> for PipelineError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::Cancelled => PipelineError::Cancelled,
            other => PipelineError::Provider(other),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    #[default]
    Text,
    Summary,
    Keyphrases,
}

impl std::fmt::Display for TextMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TextMode::Text => "text",
            TextMode::Summary => "summary",
            TextMode::Keyphrases => "keyphrases",
        })
    }
}

impl std::str::FromStr for TextMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(TextMode::Text),
            "summary" | "summ" => Ok(TextMode::Summary),
            "keyphrases" | "keyp" => Ok(TextMode::Keyphrases),
            other => Err(format!("unknown text mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum PerspectiveStatus {
    Unbuilt,
    Building,
    Built { version: u64 },
}

/// An analytical lens over a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perspective {
    pub id: String,
    pub corpus_id: String,
    pub name: String,
    pub embedding_instruction: String,
    #[serde(default)]
    pub rewrite_prompt: Option<String>,
    /// UMAP settings shared by both reductions; `n_components` and `seed`
    /// are overridden per reduction.
    #[serde(default)]
    pub reduction: ReductionConfig,
    #[serde(default = "default_cluster_dims")]
    pub cluster_dims: usize,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub representation: RepresentationConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "unbuilt")]
    pub status: PerspectiveStatus,
}

fn default_cluster_dims() -> usize {
    128
}

fn unbuilt() -> PerspectiveStatus {
    PerspectiveStatus::Unbuilt
}

impl Perspective {
    pub fn new(id: &str, corpus_id: &str, name: &str, instruction: &str) -> Result<Self, PipelineError> {
        let p = Self {
            id: id.into(),
            corpus_id: corpus_id.into(),
            name: name.into(),
            embedding_instruction: instruction.into(),
            rewrite_prompt: None,
            reduction: ReductionConfig::default(),
            cluster_dims: default_cluster_dims(),
            cluster: ClusterConfig::default(),
            representation: RepresentationConfig::default(),
            seed: 0,
            status: PerspectiveStatus::Unbuilt,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_template(
        id: &str,
        corpus_id: &str,
        lib: &TemplateLibrary,
        task: &str,
        mode: TextMode,
    ) -> Result<Self, PipelineError> {
        let pair = lib
            .get(task, mode)
            .ok_or_else(|| PipelineError::Config(format!("unknown template {task:?}")))?;
        let mut p = Self::new(id, corpus_id, task, &pair.embedding_instruction)?;
        p.rewrite_prompt = pair.rewrite_prompt;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.embedding_instruction.trim().is_empty() {
            return Err(PipelineError::Config("embedding_instruction must not be empty".into()));
        }
        if self.rewrite_prompt.as_deref().is_some_and(|r| r.trim().is_empty()) {
            return Err(PipelineError::Config("rewrite_prompt, when given, must not be empty".into()));
        }
        if self.cluster_dims == 0 {
            return Err(PipelineError::Config("cluster_dims must be >= 1".into()));
        }
        self.cluster.validate()?;
        Ok(())
    }

    pub fn built_version(&self) -> Option<u64> {
        match self.status {
            PerspectiveStatus::Built { version } => Some(version),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Rewrite,
    Embed,
    ReduceClusterSpace,
    ReduceMap,
    Cluster,
    Represent,
}

/// Progress sink and cancellation source for long-running work.
pub trait Observer: Sync {
    fn progress(&self, _phase: Phase, _fraction: f64) {}
    fn cancelled(&self) -> bool {
        false
    }
}

pub struct Silent;
impl Observer for Silent {}

fn checkpoint(obs: &dyn Observer) -> Result<(), PipelineError> {
    if obs.cancelled() {
        Err(PipelineError::Cancelled)
    } else {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewriteReport {
    /// Text to embed, one per document: rewritten, or the original on
    /// failure or when no rewrite prompt is set.
    pub texts: Vec<String>,
    pub rewritten: bool,
    pub failed: Vec<String>,
}

pub fn rewrite_prompt_for(prompt: &str, text: &str) -> String {
    format!("{prompt}{DOCUMENT_MARKER}{text}")
}

/// Rewrites every document with the perspective's prompt. Individual
/// failures fall back to the original text; more than 10% failures is an
/// error.
pub fn rewrite_corpus(
    p: &Perspective,
    corpus: &Corpus,
    providers: &Providers,
    obs: &dyn Observer,
) -> Result<RewriteReport, PipelineError> {
    let originals: Vec<String> = corpus.documents.iter().map(|d| d.text.clone()).collect();
    obs.progress(Phase::Rewrite, 0.0);
    let Some(prompt) = &p.rewrite_prompt else {
        obs.progress(Phase::Rewrite, 1.0);
        return Ok(RewriteReport {
            texts: originals,
            rewritten: false,
            failed: Vec::new(),
        });
    };
    let n = corpus.len();
    let mut texts = Vec::with_capacity(n);
    let mut failed = Vec::new();
    for (c, chunk) in corpus.documents.chunks(providers.config.batch_size.max(1)).enumerate() {
        checkpoint(obs)?;
        let outs: Vec<Option<String>> = chunk
            .par_iter()
            .map(|d| {
                let req = GenerationRequest {
                    prompt: rewrite_prompt_for(prompt, &d.text),
                    max_tokens: 512,
                    schema: None,
                };
                providers.generate(&req).ok().filter(|s| !s.trim().is_empty())
            })
            .collect();
        for (d, out) in chunk.iter().zip(outs) {
            match out {
                Some(t) => texts.push(t),
                None => {
                    failed.push(d.id.clone());
                    texts.push(d.text.clone());
                }
            }
        }
        let done = (c * providers.config.batch_size + chunk.len()).min(n);
        obs.progress(Phase::Rewrite, done as f64 / n as f64);
    }
    if failed.len() * 10 > n {
        return Err(PipelineError::RewriteFailures { failed, total: n });
    }
    if !failed.is_empty() {
        tracing::warn!(count = failed.len(), "rewrites fell back to original text");
    }
    Ok(RewriteReport {
        texts,
        rewritten: true,
        failed,
    })
}

/// Unit-norm embeddings of `texts` under the perspective's instruction.
pub fn embed_documents(
    p: &Perspective,
    texts: &[String],
    providers: &Providers,
    obs: &dyn Observer,
) -> Result<Matrix, PipelineError> {
    obs.progress(Phase::Embed, 0.0);
    let m = providers.embed_texts(texts, Some(&p.embedding_instruction), &mut |done, total| {
        obs.progress(Phase::Embed, done as f64 / total as f64);
        if obs.cancelled() {
            Err(ProviderError::Cancelled)
        } else {
            Ok(())
        }
    })?;
    Ok(m)
}

/// Independent stream seeds from one perspective seed (splitmix64).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Settings a build actually ran with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildMeta {
    pub reduction_cluster: ReductionConfig,
    pub reduction_map: ReductionConfig,
    pub n_epochs: usize,
    pub cluster: ClusterConfig,
    pub min_cluster_size: usize,
    pub embedding_dim: usize,
    pub n_docs: usize,
    pub doc_order_hash: String,
    pub adapter: bool,
    pub seed: u64,
    pub rewritten: bool,
    pub rewrite_failed: Vec<String>,
}

/// Everything a build computes that stays fixed until the next build.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub generation: u64,
    pub ids: Vec<String>,
    /// Text used for keywords and naming (rewritten when available).
    pub texts: Vec<String>,
    /// Full-dimensional unit-norm embeddings, adapter applied.
    pub embeddings: Matrix,
    pub reduced: Matrix,
    pub map2d: Matrix,
    pub adapter: Option<LinearAdapter>,
    pub meta: BuildMeta,
}

impl Geometry {
    /// A geometry over precomputed coordinates, with default build
    /// settings recorded.
    pub fn fixed(ids: Vec<String>, texts: Vec<String>, embeddings: Matrix, reduced: Matrix, map2d: Matrix) -> Self {
        let n = ids.len();
        let meta = BuildMeta {
            reduction_cluster: ReductionConfig::default(),
            reduction_map: ReductionConfig::default(),
            n_epochs: 0,
            cluster: ClusterConfig::default(),
            min_cluster_size: ClusterConfig::default().effective_min_cluster_size(),
            embedding_dim: embeddings.cols(),
            n_docs: n,
            doc_order_hash: doc_order_hash(ids.iter().map(String::as_str)),
            adapter: false,
            seed: 0,
            rewritten: false,
            rewrite_failed: Vec::new(),
        };
        Self {
            generation: 0,
            ids,
            texts,
            embeddings,
            reduced,
            map2d,
            adapter: None,
            meta,
        }
    }

    pub fn view(&self) -> DocView<'_> {
        DocView {
            ids: &self.ids,
            texts: &self.texts,
            embeddings: &self.embeddings,
        }
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|d| d == id)
    }
}

fn reduction_for(p: &Perspective, dims: usize, stream: u64) -> ReductionConfig {
    ReductionConfig {
        n_components: dims,
        seed: derive_seed(p.seed, stream),
        ..p.reduction.clone()
    }
}

/// Reduction and clustering over precomputed embeddings (no provider
/// calls).
#[allow(clippy::too_many_arguments)]
pub fn build_geometry(
    p: &Perspective,
    ids: Vec<String>,
    texts: Vec<String>,
    raw: &Matrix,
    adapter: Option<&LinearAdapter>,
    generation: u64,
    rewrite: Option<&RewriteReport>,
    obs: &dyn Observer,
) -> Result<(Geometry, Labeling), PipelineError> {
    p.validate()?;
    let n = raw.rows();
    if ids.len() != n || texts.len() != n {
        return Err(PipelineError::Config(format!(
            "{} ids and {} texts for {n} embeddings",
            ids.len(),
            texts.len()
        )));
    }
    if n <= p.reduction.n_neighbors {
        return Err(PipelineError::TooFewDocuments {
            n,
            n_neighbors: p.reduction.n_neighbors,
        });
    }
    if raw.has_non_finite() {
        return Err(GeometryError::NonFinite.into());
    }
    // everything a build produces is stored as f32; round now so a reloaded
    // geometry is bit-identical to the in-memory one
    let mut embeddings = match adapter {
        Some(a) => a.apply(raw)?,
        None => raw.clone(),
    };
    embeddings.round_to_f32();
    checkpoint(obs)?;

    let red_cfg = reduction_for(p, p.cluster_dims, 1);
    red_cfg.validate(n)?;
    let graph = FuzzyGraph::build(&embeddings, &red_cfg)?;
    checkpoint(obs)?;
    let mut reduced = umap_embed(&graph, &red_cfg, &|f| obs.progress(Phase::ReduceClusterSpace, f))?;
    reduced.round_to_f32();
    checkpoint(obs)?;
    let map_cfg = reduction_for(p, 2, 2);
    let mut map2d = umap_embed(&graph, &map_cfg, &|f| obs.progress(Phase::ReduceMap, f))?;
    map2d.round_to_f32();
    checkpoint(obs)?;

    let labeling = hdbscan(&reduced, &p.cluster)?.labeling;
    obs.progress(Phase::Cluster, 1.0);
    checkpoint(obs)?;

    let meta = BuildMeta {
        n_epochs: red_cfg.epochs_for(n),
        reduction_cluster: red_cfg,
        reduction_map: map_cfg,
        cluster: p.cluster.clone(),
        min_cluster_size: p.cluster.effective_min_cluster_size(),
        embedding_dim: raw.cols(),
        n_docs: n,
        doc_order_hash: doc_order_hash(ids.iter().map(String::as_str)),
        adapter: adapter.is_some(),
        seed: p.seed,
        rewritten: rewrite.is_some_and(|r| r.rewritten),
        rewrite_failed: rewrite.map(|r| r.failed.clone()).unwrap_or_default(),
    };
    Ok((
        Geometry {
            generation,
            ids,
            texts,
            embeddings,
            reduced,
            map2d,
            adapter: adapter.cloned(),
            meta,
        },
        labeling,
    ))
}

/// Wraps a geometry and labeling into a fresh state with every cluster
/// described and named.
pub fn initial_state(
    p: &Perspective,
    geometry: Geometry,
    labeling: Labeling,
    version: u64,
    providers: &Providers,
    obs: &dyn Observer,
) -> Result<ClusteringState, PipelineError> {
    let mut reps = describe_clusters(geometry.view(), &labeling, &p.representation)?;
    let all: BTreeSet<ClusterId> = reps.keys().copied().collect();
    name_clusters(
        &mut reps,
        &all,
        geometry.view(),
        Some(&p.embedding_instruction),
        providers,
        &p.representation,
    );
    obs.progress(Phase::Represent, 1.0);
    let next = labeling.labels.iter().copied().max().unwrap_or(OUTLIER).max(OUTLIER) + 1;
    Ok(ClusteringState {
        version,
        labeling,
        representations: reps,
        accepted: BTreeSet::new(),
        next_cluster_id: next,
        geometry: Arc::new(geometry),
    })
}

#[derive(Clone, Debug)]
pub struct BuildOutput {
    pub state: ClusteringState,
    /// Provider embeddings before any adapter, kept for model refinement.
    pub raw_embeddings: Matrix,
    pub rewrite: RewriteReport,
}

/// The full build from a corpus.
pub fn build(
    p: &Perspective,
    corpus: &Corpus,
    providers: &Providers,
    adapter: Option<&LinearAdapter>,
    version: u64,
    generation: u64,
    obs: &dyn Observer,
) -> Result<BuildOutput, PipelineError> {
    p.validate()?;
    if corpus.is_empty() {
        return Err(PipelineError::Config("corpus is empty".into()));
    }
    if corpus.len() <= p.reduction.n_neighbors {
        return Err(PipelineError::TooFewDocuments {
            n: corpus.len(),
            n_neighbors: p.reduction.n_neighbors,
        });
    }
    let rewrite = rewrite_corpus(p, corpus, providers, obs)?;
    checkpoint(obs)?;
    let mut raw = embed_documents(p, &rewrite.texts, providers, obs)?;
    raw.round_to_f32();
    checkpoint(obs)?;
    let (geometry, labeling) = build_geometry(
        p,
        corpus.ids(),
        rewrite.texts.clone(),
        &raw,
        adapter,
        generation,
        Some(&rewrite),
        obs,
    )?;
    let state = initial_state(p, geometry, labeling, version, providers, obs)?;
    Ok(BuildOutput {
        state,
        raw_embeddings: raw,
        rewrite,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DashboardCluster {
    pub id: ClusterId,
    pub name: String,
    pub description: String,
    pub keywords: Vec<(String, f64)>,
    pub representative_doc_ids: Vec<String>,
    pub size: usize,
    pub frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dashboard {
    pub clusters: Vec<DashboardCluster>,
    /// Cosine similarity of centroids, in `clusters` order.
    pub similarity: Vec<Vec<f64>>,
    pub n_outliers: usize,
}

pub fn dashboard(state: &ClusteringState) -> Dashboard {
    let clustered = state.labeling.labels.iter().filter(|&&l| l != OUTLIER).count();
    let clusters: Vec<DashboardCluster> = state
        .representations
        .values()
        .map(|r| DashboardCluster {
            id: r.cluster_id,
            name: r.name.clone(),
            description: r.description.clone(),
            keywords: r.keywords.clone(),
            representative_doc_ids: r.representative_doc_ids.clone(),
            size: r.size,
            frequency: if clustered == 0 { 0.0 } else { r.size as f64 / clustered as f64 },
        })
        .collect();
    let reps: Vec<&Vec<f64>> = state.representations.values().map(|r| &r.centroid).collect();
    let similarity = reps
        .iter()
        .map(|a| reps.iter().map(|b| cosine(a, b)).collect())
        .collect();
    Dashboard {
        clusters,
        similarity,
        n_outliers: state.labeling.n_outliers(),
    }
}

/// Tags every clustered document with its cluster name, on top of the
/// corpus's existing tags.
pub fn export_tags(corpus: &Corpus, state: &ClusteringState) -> Result<BTreeMap<String, Vec<String>>, PipelineError> {
    let g = &state.geometry;
    if g.ids.len() != corpus.len() || g.meta.doc_order_hash != corpus.doc_order_hash() {
        return Err(PipelineError::Config("state does not belong to this corpus".into()));
    }
    let pairs: Vec<(&str, &str)> = state
        .labeling
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != OUTLIER)
        .filter_map(|(i, l)| state.representations.get(l).map(|r| (g.ids[i].as_str(), r.name.as_str())))
        .filter(|(_, name)| !name.trim().is_empty())
        .collect();
    Ok(corpus.merge_tags(pairs)?)
}
