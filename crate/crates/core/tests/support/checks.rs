#![allow(dead_code)]

use perspectra_core::adapter::{loss_and_grad, pair_loss, AdapterConfig, ContrastivePair};
use perspectra_core::evalharness::{canonical_order, fewshot_accuracy, knn_accuracy, stratified_folds, EvalConfig};
use perspectra_core::geometry::{Matrix, ReductionConfig};
use perspectra_core::synthetic::{overlapping_blobs, OverlapSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::oracles::knn_bruteforce;

/// Class 0 along y=0 with one stray point beside class 1; class 1 along
/// y=20. Every stratified split puts one point of each class in each
/// fold. The stray point is always misclassified and everything else is
/// right, so the fold holding it scores 1/2 and the rest score 1.
pub fn knn_hand_instance() -> (Matrix, Vec<usize>) {
    let pts = [
        [0.0, 0.0],
        [1.0, 0.0],
        [2.0, 0.0],
        [3.0, 0.0],
        [20.0, 20.0],
        [0.0, 20.0],
        [1.0, 20.0],
        [2.0, 20.0],
        [3.0, 20.0],
        [21.0, 20.0],
    ];
    (Matrix::from_rows(&pts).unwrap(), vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1])
}

pub fn ranks(order: &[usize]) -> Vec<usize> {
    let mut r = vec![0; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        r[i] = pos;
    }
    r
}

/// Library accuracy and brute-force accuracy on the same folds.
pub fn knn_pair(m: &Matrix, labels: &[usize], seed: u64) -> (f64, f64) {
    let cfg = EvalConfig { seed, ..Default::default() };
    let acc = knn_accuracy(m, labels, &cfg).unwrap();
    let fold = stratified_folds(m, labels, &cfg).unwrap();
    let rank = ranks(&canonical_order(m, labels));
    (acc, knn_bruteforce(m, labels, &fold, &rank, cfg.folds, cfg.k))
}

pub fn knn_random_instance(seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(15..60);
    let classes = rng.gen_range(2..4);
    let rows: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.iter_mut().for_each(|l| {
        if rng.gen_bool(0.3) {
            *l = rng.gen_range(0..classes);
        }
    });
    // keep every class stratifiable
    for c in 0..classes {
        for j in 0..5 {
            labels[c * 5 + j] = c;
        }
    }
    (Matrix::from_rows(&rows).unwrap(), labels)
}

/// Rotated, scaled and shifted copy of a 2D point set.
pub fn rigid_copy(m: &Matrix, rng: &mut ChaCha8Rng) -> Matrix {
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let scale: f64 = rng.gen_range(0.1..10.0);
    let (tx, ty): (f64, f64) = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
    let moved: Vec<[f64; 2]> = m
        .iter_rows()
        .map(|r| {
            let (x, y) = (r[0], r[1]);
            [
                scale * (theta.cos() * x - theta.sin() * y) + tx,
                scale * (theta.sin() * x + theta.cos() * y) + ty,
            ]
        })
        .collect();
    Matrix::from_rows(&moved).unwrap()
}

/// Instances whose accuracy changes under a rigid transform, out of `n`.
pub fn rigid_violations(n: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..n)
        .filter(|&inst| {
            let (m, labels) = knn_random_instance(1000 + inst);
            let moved = rigid_copy(&m, &mut rng);
            let cfg = EvalConfig { seed: inst, ..Default::default() };
            knn_accuracy(&m, &labels, &cfg).unwrap() != knn_accuracy(&moved, &labels, &cfg).unwrap()
        })
        .collect()
}

pub fn adapter_problem(d: usize, seed: u64) -> (Matrix, Matrix, Vec<ContrastivePair>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 12;
    let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect())
        .unwrap()
        .normalized_rows();
    let mut w = Matrix::identity(d);
    for v in w.as_mut_slice() {
        *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    let pairs = (0..30)
        .map(|_| ContrastivePair {
            a: rng.gen_range(0..n),
            b: rng.gen_range(0..n),
            label: rng.gen_range(0..2),
        })
        .filter(|p| p.a != p.b)
        .collect();
    (x, w, pairs)
}

/// Largest relative error between the analytic gradient and central
/// differences with step 1e-5.
pub fn gradient_check(d: usize) -> f64 {
    let (x, w, pairs) = adapter_problem(d, d as u64);
    let (_, g) = loss_and_grad(&w, &pairs, &x);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..d * d {
        let mut wp = w.clone();
        wp.as_mut_slice()[k] += h;
        let mut wm = w.clone();
        wm.as_mut_slice()[k] -= h;
        let fd = (pair_loss(&wp, &pairs, &x) - pair_loss(&wm, &pairs, &x)) / (2.0 * h);
        let a = g.as_slice()[k];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    worst
}

/// Mean 2D KNN accuracy over 10 seeds for each shot count, on the
/// overlapping-blob fixture.
pub fn shot_curve(shots: &[usize]) -> Vec<f64> {
    let spec = OverlapSpec::default();
    let mut means = vec![0.0; shots.len()];
    for seed in 0..10u64 {
        let p = overlapping_blobs(&spec, seed);
        let x = p.points.normalized_rows();
        for (j, &s) in shots.iter().enumerate() {
            let acc = fewshot_accuracy(
                &x,
                &p.labels,
                s,
                seed,
                &ReductionConfig::default(),
                &AdapterConfig::default(),
                &EvalConfig::default(),
            )
            .unwrap();
            means[j] += acc / 10.0;
        }
    }
    means
}
