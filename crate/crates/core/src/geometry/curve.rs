//! Fit of the low-dimensional similarity curve `1 / (1 + a x^(2b))`.

use super::GeometryError;

const SAMPLES: usize = 300;
const MAX_ITERATIONS: usize = 100;
const TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveFit {
    pub a: f64,
    pub b: f64,
    /// Sum of squared residuals over the sampled curve.
    pub residual: f64,
}

impl CurveFit {
    pub fn eval(&self, x: f64) -> f64 {
        1.0 / (1.0 + self.a * x.powf(2.0 * self.b))
    }
}

fn target(x: f64, min_dist: f64, spread: f64) -> f64 {
    if x <= min_dist {
        1.0
    } else {
        (-(x - min_dist) / spread).exp()
    }
}

fn sse(xs: &[f64], ys: &[f64], a: f64, b: f64) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let r = 1.0 / (1.0 + a * x.powf(2.0 * b)) - y;
            r * r
        })
        .sum()
}

/// Levenberg–Marquardt least squares of the curve against
/// `1` for `x <= min_dist`, `exp(-(x - min_dist)/spread)` beyond, sampled at
/// 300 points on `[0, 3·spread]`.
pub fn fit_curve(min_dist: f64, spread: f64) -> Result<CurveFit, GeometryError> {
    if !(min_dist >= 0.0) || !(spread > 0.0) {
        return Err(GeometryError::Config(format!(
            "curve fit needs min_dist >= 0 and spread > 0 (got {min_dist}, {spread})"
        )));
    }
    let step = 3.0 * spread / (SAMPLES - 1) as f64;
    let xs: Vec<f64> = (0..SAMPLES).map(|i| i as f64 * step).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| target(x, min_dist, spread)).collect();

    let (mut a, mut b) = (1.0_f64, 1.0_f64);
    let mut cost = sse(&xs, &ys, a, b);
    let mut damping = 1e-3;

    for _ in 0..MAX_ITERATIONS {
        // normal equations J^T J and J^T r
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.iter().zip(&ys) {
            let x2b = if x > 0.0 { x.powf(2.0 * b) } else { 0.0 };
            let denom = 1.0 + a * x2b;
            let r = 1.0 / denom - y;
            let da = -x2b / (denom * denom);
            let db = if x > 0.0 {
                -a * x2b * 2.0 * x.ln() / (denom * denom)
            } else {
                0.0
            };
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }

        let mut improved = false;
        for _ in 0..30 {
            let m_aa = jaa * (1.0 + damping);
            let m_bb = jbb * (1.0 + damping);
            let det = m_aa * m_bb - jab * jab;
            if det.abs() < f64::MIN_POSITIVE {
                damping *= 10.0;
                continue;
            }
            let step_a = -(m_bb * ga - jab * gb) / det;
            let step_b = -(m_aa * gb - jab * ga) / det;
            let na = (a + step_a).max(1e-6);
            let nb = (b + step_b).max(1e-6);
            let new_cost = sse(&xs, &ys, na, nb);
            if new_cost < cost {
                let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                a = na;
                b = nb;
                cost = new_cost;
                damping = (damping / 10.0).max(1e-12);
                improved = true;
                if rel < TOLERANCE {
                    return Ok(CurveFit { a, b, residual: cost });
                }
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            // no descent direction left: stationary point
            return Ok(CurveFit { a, b, residual: cost });
        }
    }
    Err(GeometryError::CurveFit { residual: cost })
}
