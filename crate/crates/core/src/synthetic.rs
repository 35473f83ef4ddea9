//! Seeded fixture generators shared by tests, benches and the CLI demo data.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::geometry::Matrix;

#[derive(Clone, Debug)]
pub struct Planted {
    pub points: Matrix,
    pub labels: Vec<usize>,
}

/// Gaussian blobs with an optional low-rank shape.
///
/// Centres are standard normal vectors times `center_scale`. Each blob
/// spreads with `local_std` along its own random `intrinsic_dim`-dimensional
/// subspace plus isotropic noise `std` in all directions. Labels go
/// round-robin so every class has `n / k` (±1) points.
#[derive(Clone, Debug)]
pub struct BlobSpec {
    pub n: usize,
    pub k: usize,
    pub dim: usize,
    pub center_scale: f64,
    pub intrinsic_dim: usize,
    pub local_std: f64,
    pub std: f64,
}

impl BlobSpec {
    pub fn isotropic(n: usize, k: usize, dim: usize, std: f64) -> Self {
        Self { n, k, dim, center_scale: 1.0, intrinsic_dim: 0, local_std: 0.0, std }
    }
}

pub fn gaussian_blobs(spec: &BlobSpec, seed: u64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || rng.sample::<f64, _>(StandardNormal);
    let (k, dim, r) = (spec.k, spec.dim, spec.intrinsic_dim.min(spec.dim));
    let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| spec.center_scale * normal()).collect()).collect();
    let bases: Vec<DMatrix<f64>> = (0..k)
        .map(|_| {
            if r == 0 {
                return DMatrix::zeros(dim, 0);
            }
            DMatrix::from_fn(dim, r, |_, _| normal()).qr().q()
        })
        .collect();
    let mut data = Vec::with_capacity(spec.n * dim);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let c = i % k;
        labels.push(c);
        let local = DVector::from_fn(r, |_, _| spec.local_std * normal());
        let offset = &bases[c] * local;
        for (j, v) in centers[c].iter().enumerate() {
            data.push(v + offset[j] + spec.std * normal());
        }
    }
    Planted {
        points: Matrix::from_vec(spec.n, dim, data).expect("consistent shape"),
        labels,
    }
}

/// The pipeline-recovery fixture: 5 blobs, 500 points, 64 dims, each blob
/// stretched along a 4-dimensional subspace.
pub fn five_blobs(seed: u64) -> Planted {
    let spec = BlobSpec {
        n: 500,
        k: 5,
        dim: 64,
        center_scale: 1.0,
        intrinsic_dim: 4,
        local_std: 0.4,
        std: 0.03,
    };
    gaussian_blobs(&spec, seed)
}

/// Classes that share space with a stronger, class-independent structure.
///
/// Each point has a class (weak signal in the first `signal_dims`
/// coordinates) and an unrelated nuisance group (strong offset in the
/// remaining coordinates). Unsupervised maps mostly follow the nuisance
/// groups; a linear map that suppresses the nuisance coordinates recovers
/// the classes.
#[derive(Clone, Debug)]
pub struct OverlapSpec {
    pub classes: usize,
    pub per_class: usize,
    pub nuisance_groups: usize,
    pub signal_dims: usize,
    pub nuisance_dims: usize,
    pub signal: f64,
    pub nuisance: f64,
    pub noise: f64,
}

impl Default for OverlapSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 80,
            nuisance_groups: 4,
            signal_dims: 8,
            nuisance_dims: 24,
            signal: 0.4,
            nuisance: 2.5,
            noise: 0.6,
        }
    }
}

pub fn overlapping_blobs(spec: &OverlapSpec, seed: u64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = spec.signal_dims + spec.nuisance_dims;
    let mut normal = |scale: f64| scale * rng.sample::<f64, _>(StandardNormal);
    let class_means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.signal_dims).map(|_| normal(spec.signal)).collect())
        .collect();
    let group_means: Vec<Vec<f64>> = (0..spec.nuisance_groups)
        .map(|_| (0..spec.nuisance_dims).map(|_| normal(spec.nuisance)).collect())
        .collect();

    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        let g = (i / spec.classes) % spec.nuisance_groups;
        labels.push(c);
        for v in &class_means[c] {
            data.push(v + normal(spec.noise));
        }
        for v in &group_means[g] {
            data.push(v + normal(spec.noise));
        }
    }
    Planted {
        points: Matrix::from_vec(n, dim, data).expect("consistent shape"),
        labels,
    }
}

const FILLER: &[&str] = &[
    "the", "report", "said", "people", "year", "new", "time", "today", "many", "also", "week", "city",
];

const TOPICS: &[(&str, &[&str])] = &[
    ("climate", &["climate", "emissions", "carbon", "warming", "glacier", "drought", "heatwave", "renewable"]),
    ("football", &["football", "goal", "striker", "league", "coach", "stadium", "penalty", "midfield"]),
    ("markets", &["stocks", "inflation", "bonds", "investors", "earnings", "rates", "currency", "shares"]),
    ("health", &["vaccine", "hospital", "patients", "doctors", "virus", "clinic", "treatment", "nurses"]),
    ("space", &["rocket", "orbit", "astronaut", "satellite", "launch", "mars", "telescope", "lunar"]),
];

/// Short synthetic documents, `per_topic` for each of the first `topics`
/// built-in topics. Returns `(text, topic name)` pairs in round-robin order.
pub fn topic_corpus(topics: usize, per_topic: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topics = &TOPICS[..topics.min(TOPICS.len())];
    let mut out = Vec::with_capacity(topics.len() * per_topic);
    for _ in 0..per_topic {
        for (name, words) in topics {
            let len = rng.gen_range(10..18);
            let text: Vec<&str> = (0..len)
                .map(|_| {
                    if rng.gen_bool(0.65) {
                        *words.choose(&mut rng).unwrap()
                    } else {
                        *FILLER.choose(&mut rng).unwrap()
                    }
                })
                .collect();
            out.push((text.join(" "), name.to_string()));
        }
    }
    out
}
