//! Fuzzy simplicial set (weighted kNN graph) construction.

use std::collections::BTreeMap;

use super::{knn_exact, GeometryError, KnnResult, Matrix, ReductionConfig};

const SIGMA_LO: f64 = 1e-8;
const SIGMA_HI: f64 = 1e8;
const SIGMA_ITERATIONS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphEdge {
    pub head: usize,
    pub tail: usize,
    pub weight: f64,
}

/// Symmetric sparse membership graph plus the per-point smoothing terms.
///
/// `edges` lists every non-zero entry of the symmetric matrix, so each
/// undirected edge appears twice, sorted by `(head, tail)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FuzzyGraph {
    pub n: usize,
    pub edges: Vec<GraphEdge>,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl FuzzyGraph {
    pub fn build(x: &Matrix, cfg: &ReductionConfig) -> Result<Self, GeometryError> {
        cfg.validate(x.rows())?;
        let knn = knn_exact(x, cfg.n_neighbors, cfg.metric)?;
        Ok(Self::from_knn(&knn))
    }

    /// Smooth-kNN memberships, symmetrised by probabilistic union.
    pub fn from_knn(knn: &KnnResult) -> Self {
        let n = knn.n();
        let target = (knn.k as f64).log2();
        let mut rho = vec![0.0; n];
        let mut sigma = vec![0.0; n];
        let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();

        for i in 0..n {
            let dists = &knn.distances[i];
            rho[i] = dists.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0);
            sigma[i] = solve_sigma(dists, rho[i], target);
            for (&j, &d) in knn.indices[i].iter().zip(dists) {
                let w = membership(d, rho[i], sigma[i]);
                if w > 0.0 {
                    directed.insert((i, j), w);
                }
            }
        }

        let mut sym: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (&(i, j), &w) in &directed {
            let back = directed.get(&(j, i)).copied().unwrap_or(0.0);
            // w + b - wb, written so that a 1 on either side stays exactly 1
            let u = if back == 0.0 { w } else { 1.0 - (1.0 - w) * (1.0 - back) };
            sym.insert((i, j), u);
            sym.insert((j, i), u);
        }

        let edges = sym
            .into_iter()
            .filter(|&(_, w)| w > 0.0)
            .map(|((head, tail), weight)| GraphEdge { head, tail, weight })
            .collect();
        FuzzyGraph {
            n,
            edges,
            rho,
            sigma,
        }
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.edges
            .binary_search_by(|e| (e.head, e.tail).cmp(&(i, j)))
            .map(|p| self.edges[p].weight)
            .unwrap_or(0.0)
    }

    pub fn max_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.edges
            .iter()
            .all(|e| (self.weight(e.tail, e.head) - e.weight).abs() <= tol)
    }
}

#[inline]
fn membership(d: f64, rho: f64, sigma: f64) -> f64 {
    (-(d - rho).max(0.0) / sigma).exp()
}

fn membership_sum(dists: &[f64], rho: f64, sigma: f64) -> f64 {
    dists.iter().map(|&d| membership(d, rho, sigma)).sum()
}

/// Bisection in log space over `[1e-8, 1e8]`. The sum is increasing in
/// sigma; when even the floor overshoots the target the floor is returned.
fn solve_sigma(dists: &[f64], rho: f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (SIGMA_LO, SIGMA_HI);
    for _ in 0..SIGMA_ITERATIONS {
        let mid = (lo * hi).sqrt();
        if membership_sum(dists, rho, mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (lo * hi).sqrt()
}

/// `|Σ_j exp(-max(0, d_ij - rho_i)/sigma_i) - log2(k)|` for point `i`.
pub fn smooth_knn_residual(knn: &KnnResult, graph: &FuzzyGraph, i: usize) -> f64 {
    (membership_sum(&knn.distances[i], graph.rho[i], graph.sigma[i]) - (knn.k as f64).log2()).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Metric;

    #[test]
    fn nearest_neighbour_gets_full_membership() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [3.0], [7.0], [8.5]]).unwrap();
        let knn = knn_exact(&x, 3, Metric::Euclidean).unwrap();
        for i in 0..5 {
            let d0 = knn.distances[i][0];
            let g = FuzzyGraph::from_knn(&knn);
            assert_eq!(membership(d0, g.rho[i], g.sigma[i]), 1.0);
        }
    }

    #[test]
    fn union_of_one_and_zero_is_one() {
        // 0 and 1 are mutual nearest neighbours; both directed weights are 1
        let x = Matrix::from_rows(&[[0.0], [1.0], [10.0]]).unwrap();
        let knn = knn_exact(&x, 2, Metric::Euclidean).unwrap();
        let g = FuzzyGraph::from_knn(&knn);
        assert_eq!(g.weight(0, 1), 1.0);
        // 2 -> 1 is a nearest-neighbour edge (w=1); 1 -> 2 is the far one
        assert_eq!(g.weight(1, 2), 1.0);
        assert!(g.is_symmetric(1e-12));
    }

    #[test]
    fn identical_points_floor_sigma() {
        let x = Matrix::from_rows(&vec![vec![0.5, 0.5]; 6]).unwrap();
        let knn = knn_exact(&x, 4, Metric::Euclidean).unwrap();
        let g = FuzzyGraph::from_knn(&knn);
        assert!(g.rho.iter().all(|&r| r == 0.0));
        assert!(g.sigma.iter().all(|&s| s < 1e-7));
        assert!(g.edges.iter().all(|e| e.weight == 1.0));
    }
}
