//! Stochastic layout optimisation over a [`FuzzyGraph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fit_curve, spectral_init, FuzzyGraph, GeometryError, Matrix, ReductionConfig};

const GRADIENT_CLIP: f64 = 4.0;
const REPULSION_EPSILON: f64 = 1e-3;
const INIT_RANGE: f64 = 10.0;

/// Embeds the graph into `cfg.n_components` dimensions.
///
/// `progress` receives values in `[0, 1]` once per epoch decile. All
/// randomness comes from `cfg.seed`; the loop is single-threaded so the
/// output is bitwise reproducible on one platform.
pub fn umap_embed(
    graph: &FuzzyGraph,
    cfg: &ReductionConfig,
    progress: &dyn Fn(f64),
) -> Result<Matrix, GeometryError> {
    let n = graph.n;
    let dim = cfg.n_components;
    if dim == 0 {
        return Err(GeometryError::Config("n_components must be >= 1".into()));
    }
    let (a, b) = match (cfg.a, cfg.b) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            let fit = fit_curve(cfg.min_dist, cfg.spread)?;
            (fit.a, fit.b)
        }
    };
    let n_epochs = cfg.epochs_for(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut y = match spectral_init(graph, dim, cfg.seed) {
        Some(init) => init,
        None => {
            let mut m = Matrix::zeros(n, dim);
            for v in m.as_mut_slice() {
                *v = rng.gen_range(-INIT_RANGE..INIT_RANGE);
            }
            m
        }
    };
    rescale_columns(&mut y);

    // sampling schedule: edge e fires every max_w / w_e epochs; edges too
    // weak to fire even once are dropped
    let max_w = graph.max_weight();
    let threshold = max_w / n_epochs as f64;
    let edges: Vec<(usize, usize, f64)> = graph
        .edges
        .iter()
        .filter(|e| e.weight >= threshold && e.weight > 0.0)
        .map(|e| (e.head, e.tail, max_w / e.weight))
        .collect();
    let neg_rate = cfg.negative_sample_rate.max(1) as f64;
    let mut next_sample: Vec<f64> = edges.iter().map(|e| e.2).collect();
    let per_negative: Vec<f64> = edges.iter().map(|e| e.2 / neg_rate).collect();
    let mut next_negative: Vec<f64> = per_negative.clone();

    let mut delta = vec![0.0; dim];
    let mut last_decile = 0;
    for epoch in 0..n_epochs {
        let alpha = 1.0 - epoch as f64 / n_epochs as f64;
        let ep = epoch as f64;
        for (e, &(head, tail, every)) in edges.iter().enumerate() {
            if next_sample[e] > ep {
                continue;
            }

            let d2 = row_sq_dist(&y, head, tail);
            let coeff = if d2 > 0.0 {
                -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0)
            } else {
                0.0
            };
            for c in 0..dim {
                let g = clip(coeff * (y.get(head, c) - y.get(tail, c)));
                delta[c] = g * alpha;
            }
            for c in 0..dim {
                let h = y.get(head, c) + delta[c];
                y.set(head, c, h);
                let t = y.get(tail, c) - delta[c];
                y.set(tail, c, t);
            }
            next_sample[e] += every;

            let n_neg = ((ep - next_negative[e]) / per_negative[e]).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let other = rng.gen_range(0..n);
                if other == head {
                    continue;
                }
                let d2 = row_sq_dist(&y, head, other);
                let coeff = if d2 > 0.0 {
                    2.0 * b / ((REPULSION_EPSILON + d2) * (a * d2.powf(b) + 1.0))
                } else {
                    0.0
                };
                for c in 0..dim {
                    let g = if coeff > 0.0 {
                        clip(coeff * (y.get(head, c) - y.get(other, c)))
                    } else {
                        GRADIENT_CLIP
                    };
                    let h = y.get(head, c) + g * alpha;
                    y.set(head, c, h);
                }
            }
            next_negative[e] += n_neg as f64 * per_negative[e];
        }
        let decile = (epoch + 1) * 10 / n_epochs;
        if decile > last_decile {
            last_decile = decile;
            progress(decile as f64 / 10.0);
        }
    }
    Ok(y)
}

/// kNN → fuzzy graph → layout.
pub fn reduce(x: &Matrix, cfg: &ReductionConfig) -> Result<Matrix, GeometryError> {
    let graph = FuzzyGraph::build(x, cfg)?;
    umap_embed(&graph, cfg, &|_| {})
}

#[inline]
fn clip(v: f64) -> f64 {
    v.clamp(-GRADIENT_CLIP, GRADIENT_CLIP)
}

#[inline]
fn row_sq_dist(y: &Matrix, i: usize, j: usize) -> f64 {
    super::squared_euclidean(y.row(i), y.row(j))
}

/// Maps every column onto `[0, 10]`.
fn rescale_columns(y: &mut Matrix) {
    for c in 0..y.cols() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..y.rows() {
            lo = lo.min(y.get(i, c));
            hi = hi.max(y.get(i, c));
        }
        let span = hi - lo;
        if span > 0.0 && span.is_finite() {
            for i in 0..y.rows() {
                let v = INIT_RANGE * (y.get(i, c) - lo) / span;
                y.set(i, c, v);
            }
        }
    }
}
