use perspectra_core::geometry::{
    fit_curve, knn_exact, reduce, smooth_knn_residual, trustworthiness, FuzzyGraph, Matrix, Metric, ReductionConfig,
};
use perspectra_core::synthetic::five_blobs;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sse(min_dist: f64, a: f64, b: f64) -> f64 {
    (0..300)
        .map(|i| {
            let x = i as f64 * 3.0 / 299.0;
            let y = if x <= min_dist { 1.0 } else { (-(x - min_dist)).exp() };
            let f = 1.0 / (1.0 + a * x.powf(2.0 * b));
            (f - y) * (f - y)
        })
        .sum()
}

/// Coarse-to-fine grid search over (a, b), independent of the fitter.
fn grid_fit(min_dist: f64) -> (f64, f64) {
    let (mut ca, mut cb, mut span) = (2.0, 1.0, 1.9);
    for _ in 0..12 {
        let mut best = (f64::INFINITY, ca, cb);
        for i in 0..=40 {
            for j in 0..=40 {
                let a = (ca - span + 2.0 * span * i as f64 / 40.0).max(1e-6);
                let b = (cb - span + 2.0 * span * j as f64 / 40.0).max(1e-6);
                let e = sse(min_dist, a, b);
                if e < best.0 {
                    best = (e, a, b);
                }
            }
        }
        (ca, cb) = (best.1, best.2);
        span *= 0.25;
    }
    (ca, cb)
}

#[test]
fn curve_fit_matches_grid_search() {
    for md in [0.0, 0.1, 0.5] {
        let fit = fit_curve(md, 1.0).unwrap();
        let (a, b) = grid_fit(md);
        assert!((fit.a - a).abs() < 1e-3 && (fit.b - b).abs() < 1e-3, "md={md}: {fit:?} vs ({a}, {b})");
    }
}

#[test]
fn curve_fit_min_dist_point_one() {
    let (a, b) = grid_fit(0.1);
    assert!((a - 1.58).abs() <= 0.05 && (b - 0.90).abs() <= 0.05, "oracle gives ({a}, {b})");
    let fit = fit_curve(0.1, 1.0).unwrap();
    assert!((fit.a - 1.58).abs() <= 0.05 && (fit.b - 0.90).abs() <= 0.05, "{fit:?}");
}

#[test]
fn smooth_knn_constraint_holds_on_blobs() {
    let blobs = five_blobs(11);
    let cfg = ReductionConfig::default();
    let x = blobs.points.normalized_rows();
    let knn = knn_exact(&x, cfg.n_neighbors, cfg.metric).unwrap();
    let g = FuzzyGraph::from_knn(&knn);
    for i in 0..x.rows() {
        assert!(smooth_knn_residual(&knn, &g, i) < 1e-5, "point {i}");
    }
    assert!(g.is_symmetric(1e-9));
    assert!(g.edges.iter().all(|e| e.weight > 0.0 && e.weight <= 1.0));
}

#[test]
fn trustworthiness_of_reversed_line_pairs() {
    // hand ranks: x = 0,1,2,3 mapped to y = 3,2,1,0 is an isometry (score 1);
    // swapping the middle pair breaks neighbourhoods
    let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0], [4.0]]).unwrap();
    let rev = Matrix::from_rows(&[[4.0], [3.0], [2.0], [1.0], [0.0]]).unwrap();
    assert_eq!(trustworthiness(&x, &rev, 1).unwrap(), 1.0);
    let y = Matrix::from_rows(&[[0.0], [3.0], [2.0], [1.0], [4.0]]).unwrap();
    assert!(trustworthiness(&x, &y, 1).unwrap() < 1.0);
}

#[test]
fn trustworthiness_of_random_layout_is_low() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let mut scores = Vec::new();
    for s in 0..5 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + s);
        let y: Vec<Vec<f64>> = (0..200).map(|_| vec![r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)]).collect();
        scores.push(trustworthiness(&x, &Matrix::from_rows(&y).unwrap(), 15).unwrap());
    }
    let mean = scores.iter().sum::<f64>() / 5.0;
    // a random layout sits near 0.5
    assert!(scores.iter().all(|&t| t < 0.8), "{scores:?}");
    assert!((mean - 0.5).abs() < 0.1, "{mean}");
}

#[test]
fn umap_on_blobs_is_trustworthy() {
    let blobs = five_blobs(7);
    let x = blobs.points.normalized_rows();
    let cfg = ReductionConfig { n_components: 2, seed: 7, ..Default::default() };
    let y = reduce(&x, &cfg).unwrap();
    let t = trustworthiness(&x, &y, 15).unwrap();
    assert!(t >= 0.95, "trustworthiness {t}");
}

#[test]
fn cosine_and_euclidean_agree_on_unit_vectors() {
    let x = five_blobs(2).points.normalized_rows();
    let a = knn_exact(&x, 10, Metric::Cosine).unwrap();
    let b = knn_exact(&x, 10, Metric::Euclidean).unwrap();
    let same = a.indices.iter().zip(&b.indices).filter(|(p, q)| p == q).count();
    assert!(same as f64 >= 0.99 * x.rows() as f64);
}
