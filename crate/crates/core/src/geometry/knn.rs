//! Brute-force k-nearest-neighbour search.

use std::cmp::Ordering;

use rayon::prelude::*;

use super::{GeometryError, Matrix, Metric};

/// Row `i` holds the `k` nearest neighbours of point `i`, closest first.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub k: usize,
    pub indices: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

impl KnnResult {
    pub fn n(&self) -> usize {
        self.indices.len()
    }
}

/// Exact kNN. Self is excluded; ties in distance go to the lower index.
pub fn knn_exact(x: &Matrix, k: usize, metric: Metric) -> Result<KnnResult, GeometryError> {
    let n = x.rows();
    if k >= n {
        return Err(GeometryError::TooFewPoints { k, n });
    }
    if x.has_non_finite() {
        return Err(GeometryError::NonFinite);
    }

    let rows: Vec<(Vec<usize>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (metric.distance(xi, x.row(j)), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
                a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
            };
            if k > 0 && k < cand.len() {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_unstable_by(cmp);
            cand.into_iter().map(|(d, j)| (j, d)).unzip()
        })
        .collect();

    let (indices, distances) = rows.into_iter().unzip();
    Ok(KnnResult {
        k,
        indices,
        distances,
    })
}

/// Full distance matrix as nested vectors. Quadratic; meant for small inputs.
pub fn pairwise_distance(x: &Matrix, metric: Metric) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| (0..x.rows()).map(|j| metric.distance(x.row(i), x.row(j))).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f64]) -> Matrix {
        let rows: Vec<Vec<f64>> = points.iter().map(|&p| vec![p]).collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn collinear_points() {
        let knn = knn_exact(&line(&[0.0, 1.0, 3.0]), 1, Metric::Euclidean).unwrap();
        let nn: Vec<usize> = knn.indices.iter().map(|r| r[0]).collect();
        assert_eq!(nn, vec![1, 0, 1]);
        assert_eq!(knn.distances[2], vec![2.0]);
    }

    #[test]
    fn duplicates_tie_to_lower_index() {
        let x = line(&[5.0, 5.0, 5.0, 9.0]);
        let knn = knn_exact(&x, 2, Metric::Euclidean).unwrap();
        assert_eq!(knn.indices[0], vec![1, 2]);
        assert_eq!(knn.indices[2], vec![0, 1]);
        assert_eq!(knn.distances[1], vec![0.0, 0.0]);
        // 9.0 is equidistant from the three copies of 5.0
        assert_eq!(knn.indices[3], vec![0, 1]);
    }

    #[test]
    fn nan_rejected() {
        let x = Matrix::from_rows(&[[0.0, f64::NAN], [1.0, 1.0]]).unwrap();
        assert_eq!(knn_exact(&x, 1, Metric::Euclidean), Err(GeometryError::NonFinite));
    }

    #[test]
    fn k_must_be_below_n() {
        assert!(matches!(
            knn_exact(&line(&[0.0, 1.0]), 2, Metric::Euclidean),
            Err(GeometryError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn cosine_order_matches_euclidean_on_unit_vectors() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap().normalized_rows();
        let a = knn_exact(&x, 5, Metric::Cosine).unwrap();
        let b = knn_exact(&x, 5, Metric::Euclidean).unwrap();
        // ||u-v||^2 = 2 - 2cos on the unit sphere, so orderings agree
        assert_eq!(a.indices, b.indices);
    }
}
