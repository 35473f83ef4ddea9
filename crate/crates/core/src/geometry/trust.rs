use super::{knn_exact, GeometryError, Matrix, Metric};

/// Trustworthiness of embedding `y` with respect to `x` (euclidean in both
/// spaces). 1.0 means every embedded neighbourhood is a true neighbourhood.
pub fn trustworthiness(x: &Matrix, y: &Matrix, k: usize) -> Result<f64, GeometryError> {
    let n = x.rows();
    if y.rows() != n {
        return Err(GeometryError::Shape(format!(
            "x has {n} rows but y has {}",
            y.rows()
        )));
    }
    if k == 0 || 2 * k >= n {
        return Err(GeometryError::Config(format!(
            "trustworthiness needs 0 < k < n/2 (k={k}, n={n})"
        )));
    }

    // full rank table in the input space
    let x_rank = knn_exact(x, n - 1, Metric::Euclidean)?;
    let y_knn = knn_exact(y, k, Metric::Euclidean)?;

    let mut penalty = 0.0;
    let mut rank_of = vec![0usize; n];
    for i in 0..n {
        for (r, &j) in x_rank.indices[i].iter().enumerate() {
            rank_of[j] = r + 1;
        }
        for &j in &y_knn.indices[i] {
            let r = rank_of[j];
            if r > k {
                penalty += (r - k) as f64;
            }
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    Ok(1.0 - 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0)) * penalty)
}
