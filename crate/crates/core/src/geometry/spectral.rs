//! Spectral initialisation from the normalised graph Laplacian.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FuzzyGraph, Matrix};

/// Above this many points the dense eigen-solve is replaced by subspace
/// iteration on the sparse graph.
const DENSE_LIMIT: usize = 2_000;
const SUBSPACE_ITERATIONS: usize = 150;

/// Eigenvectors 1..=dim of `I - D^{-1/2} W D^{-1/2}` (the trivial one is
/// dropped), scaled so the largest coordinate is 10. Returns `None` when the
/// solve is not possible (too few points, non-finite output).
pub fn spectral_init(graph: &FuzzyGraph, dim: usize, seed: u64) -> Option<Matrix> {
    let n = graph.n;
    if dim + 1 >= n || graph.edges.is_empty() {
        return None;
    }

    let mut degree = vec![0.0; n];
    for e in &graph.edges {
        degree[e.head] += e.weight;
    }
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();

    let vectors = if n <= DENSE_LIMIT {
        dense_smallest(graph, &inv_sqrt, dim + 1)
    } else {
        subspace_smallest(graph, &inv_sqrt, dim + 1, seed)
    }?;

    let mut out = Matrix::zeros(n, dim);
    for i in 0..n {
        for c in 0..dim {
            out.set(i, c, vectors[(i, c + 1)]);
        }
    }
    if out.has_non_finite() {
        return None;
    }
    let max_abs = out.as_slice().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return None;
    }
    let scale = 10.0 / max_abs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    for v in out.as_mut_slice() {
        // tiny jitter breaks exact ties between coincident rows
        let noise: f64 = rng.gen_range(-1.0..1.0) * 1e-4;
        *v = *v * scale + noise;
    }
    Some(out)
}

/// Columns are eigenvectors sorted by ascending Laplacian eigenvalue.
fn dense_smallest(graph: &FuzzyGraph, inv_sqrt: &[f64], k: usize) -> Option<DMatrix<f64>> {
    let n = graph.n;
    let mut lap = DMatrix::<f64>::identity(n, n);
    for e in &graph.edges {
        lap[(e.head, e.tail)] -= e.weight * inv_sqrt[e.head] * inv_sqrt[e.tail];
    }
    let eig = SymmetricEigen::try_new(lap, 1e-12, 10_000)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut out = DMatrix::<f64>::zeros(n, k);
    for (c, &src) in order.iter().take(k).enumerate() {
        out.set_column(c, &eig.eigenvectors.column(src));
    }
    Some(out)
}

/// Orthogonal iteration on `(I + D^{-1/2} W D^{-1/2}) / 2`, whose largest
/// eigenvectors are the Laplacian's smallest, then a Rayleigh–Ritz rotation.
fn subspace_smallest(
    graph: &FuzzyGraph,
    inv_sqrt: &[f64],
    k: usize,
    seed: u64,
) -> Option<DMatrix<f64>> {
    let n = graph.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DMatrix::<f64>::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0));
    orthonormalize(&mut v);

    let apply = |v: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = v * 0.5;
        for e in &graph.edges {
            let w = 0.5 * e.weight * inv_sqrt[e.head] * inv_sqrt[e.tail];
            for c in 0..k {
                out[(e.head, c)] += w * v[(e.tail, c)];
            }
        }
        out
    };

    for _ in 0..SUBSPACE_ITERATIONS {
        let mut next = apply(&v);
        orthonormalize(&mut next);
        v = next;
    }

    let mv = apply(&v);
    let t = v.transpose() * &mv;
    let eig = SymmetricEigen::try_new(t, 1e-12, 10_000)?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut rot = DMatrix::<f64>::zeros(k, k);
    for (c, &src) in order.iter().enumerate() {
        rot.set_column(c, &eig.eigenvectors.column(src));
    }
    Some(v * rot)
}

fn orthonormalize(v: &mut DMatrix<f64>) {
    let k = v.ncols();
    for c in 0..k {
        for p in 0..c {
            let proj = v.column(c).dot(&v.column(p));
            let prev = v.column(p).clone_owned();
            v.column_mut(c).axpy(-proj, &prev, 1.0);
        }
        let nrm = v.column(c).norm();
        if nrm > 1e-300 {
            v.column_mut(c).scale_mut(1.0 / nrm);
        }
    }
}
