//! HDBSCAN over the reduced embedding space.
//!
//! The pipeline is the textbook one: core distances, a minimum spanning tree
//! of the mutual-reachability graph, a single-linkage hierarchy, the
//! condensed tree, and excess-of-mass selection. Merges at identical heights
//! are collapsed into a single multi-way node, which makes the result
//! independent of how equal-weight MST edges happen to be ordered.

mod condense;
mod mst;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{knn_exact, GeometryError, Matrix, Metric};

pub use condense::{condense, select_clusters, CondensedCluster, CondensedEntry, CondensedTree};
pub use mst::{mst_mutual_reachability, MstEdge};

pub type ClusterId = i32;
pub const OUTLIER: ClusterId = -1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusteringError {
    #[error("{n} points are not enough for min_samples={min_samples}; use a smaller min_samples")]
    TooFewPoints { n: usize, min_samples: usize },
    #[error("invalid cluster config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub min_samples: usize,
    /// Defaults to `min_samples` (at least 2) when unset.
    pub min_cluster_size: Option<usize>,
    /// Whether the root of the condensed tree may be selected, yielding a
    /// single cluster.
    pub allow_single_cluster: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            min_samples: 40,
            min_cluster_size: None,
            allow_single_cluster: false,
        }
    }
}

impl ClusterConfig {
    pub fn new(min_samples: usize, min_cluster_size: usize) -> Self {
        Self {
            min_samples,
            min_cluster_size: Some(min_cluster_size),
            allow_single_cluster: false,
        }
    }

    pub fn effective_min_cluster_size(&self) -> usize {
        self.min_cluster_size.unwrap_or(self.min_samples).max(2)
    }

    pub fn validate(&self) -> Result<(), ClusteringError> {
        if self.min_samples < 1 {
            return Err(ClusteringError::Config("min_samples must be >= 1".into()));
        }
        if self.min_cluster_size.is_some_and(|m| m < 2) {
            return Err(ClusteringError::Config("min_cluster_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Cluster label per point; `OUTLIER` for noise. Fresh clusterings number
/// ids densely from 0 by the smallest point index each cluster contains;
/// refinement leaves gaps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    pub labels: Vec<ClusterId>,
}

impl Labeling {
    pub fn n_clusters(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l != OUTLIER)
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    }

    pub fn n_outliers(&self) -> usize {
        self.labels.iter().filter(|&&l| l == OUTLIER).count()
    }

    pub fn members(&self, cluster: ClusterId) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }
}

#[derive(Clone, Debug)]
pub struct HdbscanResult {
    pub labeling: Labeling,
    pub tree: CondensedTree,
}

/// Distance from each point to its `min_samples`-th nearest neighbour,
/// excluding itself.
pub fn core_distances(x: &Matrix, min_samples: usize) -> Result<Vec<f64>, ClusteringError> {
    let n = x.rows();
    if min_samples == 0 {
        return Err(ClusteringError::Config("min_samples must be >= 1".into()));
    }
    if n <= min_samples {
        return Err(ClusteringError::TooFewPoints { n, min_samples });
    }
    let knn = knn_exact(x, min_samples, Metric::Euclidean)?;
    Ok(knn.distances.iter().map(|d| d[min_samples - 1]).collect())
}

pub fn hdbscan(x: &Matrix, cfg: &ClusterConfig) -> Result<HdbscanResult, ClusteringError> {
    cfg.validate()?;
    let cores = core_distances(x, cfg.min_samples)?;
    let mst = mst_mutual_reachability(x, &cores);
    let tree = condense(&mst, x.rows(), cfg.effective_min_cluster_size());
    let selected = select_clusters(&tree, cfg.allow_single_cluster);
    let labeling = tree.labeling(&selected);
    Ok(HdbscanResult { labeling, tree })
}

/// HDBSCAN restricted to `rows` of `x`; labels are local to the subset.
pub fn cluster_subset(
    x: &Matrix,
    rows: &[usize],
    cfg: &ClusterConfig,
) -> Result<Labeling, ClusteringError> {
    Ok(hdbscan(&x.select_rows(rows), cfg)?.labeling)
}
