//! Vector math, exact nearest-neighbour search and UMAP.
//!
//! UMAP here is built in four steps that can be used separately:
//! [`knn_exact`] → [`FuzzyGraph::from_knn`] → [`fit_curve`] → [`umap_embed`].
//! [`reduce`] chains them for the common case.

mod curve;
mod fuzzy;
mod knn;
mod matrix;
mod spectral;
mod trust;
mod umap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use curve::{fit_curve, CurveFit};
pub use fuzzy::{smooth_knn_residual, FuzzyGraph, GraphEdge};
pub use knn::{knn_exact, pairwise_distance, KnnResult};
pub use matrix::{cosine, dot, euclidean, norm, normalize, squared_euclidean, Matrix, MatrixSidecar};
pub use spectral::spectral_init;
pub use trust::trustworthiness;
pub use umap::{reduce, umap_embed};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("input contains NaN or infinite values")]
    NonFinite,
    #[error("k={k} must be smaller than the number of points n={n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("{n} points cannot support n_neighbors={n_neighbors}; need n >= n_neighbors + 1")]
    NeighborsExceedPoints { n: usize, n_neighbors: usize },
    #[error("invalid reduction config: {0}")]
    Config(String),
    #[error("curve fit did not converge (final residual {residual:.3e})")]
    CurveFit { residual: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl Metric {
    #[inline]
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => euclidean(a, b),
            Metric::Cosine => 1.0 - cosine(a, b),
        }
    }
}

/// UMAP parameters. Defaults are the production settings: 15 neighbours,
/// `min_dist` 0.0, cosine metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReductionConfig {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub metric: Metric,
    pub n_components: usize,
    /// `None` picks 500 epochs, or 200 above 5,000 points.
    pub n_epochs: Option<usize>,
    pub negative_sample_rate: usize,
    pub seed: u64,
    pub a: Option<f64>,
    pub b: Option<f64>,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            min_dist: 0.0,
            spread: 1.0,
            metric: Metric::Cosine,
            n_components: 2,
            n_epochs: None,
            negative_sample_rate: 5,
            seed: 0,
            a: None,
            b: None,
        }
    }
}

impl ReductionConfig {
    pub fn validate(&self, n: usize) -> Result<(), GeometryError> {
        if self.n_neighbors < 2 {
            return Err(GeometryError::Config("n_neighbors must be at least 2".into()));
        }
        if n <= self.n_neighbors {
            return Err(GeometryError::NeighborsExceedPoints {
                n,
                n_neighbors: self.n_neighbors,
            });
        }
        if !(self.min_dist >= 0.0) {
            return Err(GeometryError::Config("min_dist must be >= 0".into()));
        }
        if !(self.spread > 0.0) {
            return Err(GeometryError::Config("spread must be > 0".into()));
        }
        if self.n_components == 0 {
            return Err(GeometryError::Config("n_components must be >= 1".into()));
        }
        if self.n_epochs == Some(0) {
            return Err(GeometryError::Config("n_epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn epochs_for(&self, n: usize) -> usize {
        self.n_epochs
            .unwrap_or(if n > 5_000 { 200 } else { 500 })
    }
}
