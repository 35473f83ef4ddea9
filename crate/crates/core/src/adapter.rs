//! Linear adapter trained from accepted assignments.
//!
//! A square matrix `W` re-shapes the embedding space: first with a
//! cosine-similarity regression over same/different-class pairs, then
//! end-to-end with a throwaway softmax head. The adapted embeddings
//! `normalize(W e)` are re-reduced and re-clustered.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clustering::{ClusterId, OUTLIER};
use crate::geometry::{cosine, dot, norm, GeometryError, Matrix};
use crate::pipeline::{build_geometry, Observer, Perspective, PipelineError, RewriteReport};
use crate::providers::Providers;
use crate::refine::{ClusteringState, Op};
use crate::representation::{centroid, describe_clusters, name_clusters};

/// Minimum cosine between an old and a new centroid for the new cluster to
/// keep the old name.
pub const NAME_TRANSFER_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("labeled documents span a single class; contrastive pairs need at least two")]
    SingleClass,
    #[error("need at least two labeled documents")]
    TooFewDocuments,
    #[error("no class has two labeled documents, so there are no positive pairs")]
    NoPositives,
    #[error("model refinement needs at least 2 classes with 2 accepted documents each; found {found} such classes")]
    InsufficientLabels { found: usize },
    #[error("training diverged (loss {loss:.4} > 10x initial {initial:.4}); lower the learning rate")]
    Diverged { loss: f64, initial: f64 },
    #[error("invalid adapter config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub learning_rate: f64,
    pub pair_cap: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub stage2_enabled: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            epochs_stage1: 1,
            epochs_stage2: 16,
            learning_rate: 1e-2,
            pair_cap: 10_000,
            batch_size: 64,
            seed: 0,
            stage2_enabled: true,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return Err(AdapterError::Config("epochs must be >= 1".into()));
        }
        if self.pair_cap < 2 {
            return Err(AdapterError::Config("pair_cap must be >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(AdapterError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(AdapterError::Config("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// `W` plus where it came from. Applied as `x ↦ normalize(W x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearAdapter {
    pub w: Matrix,
    pub trained_on_version: Option<u64>,
    pub config_hash: String,
}

impl LinearAdapter {
    pub fn identity(d: usize) -> Self {
        Self {
            w: Matrix::identity(d),
            trained_on_version: None,
            config_hash: String::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    pub fn is_identity(&self) -> bool {
        let d = self.w.rows();
        self.w.cols() == d
            && (0..d).all(|i| (0..d).all(|j| self.w.get(i, j) == if i == j { 1.0 } else { 0.0 }))
    }

    /// `normalize(W x)` for every row. The identity returns its input
    /// unchanged, bit for bit.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix, GeometryError> {
        if x.cols() != self.w.cols() {
            return Err(GeometryError::Shape(format!(
                "adapter is {}x{}, embeddings have {} columns",
                self.w.rows(),
                self.w.cols(),
                x.cols()
            )));
        }
        if self.is_identity() {
            return Ok(x.clone());
        }
        Ok(x.mul_transpose(&self.w)?.normalized_rows())
    }

    /// `W v`, not normalised.
    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        if self.is_identity() {
            return v.to_vec();
        }
        self.w.iter_rows().map(|r| dot(r, v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub a: usize,
    pub b: usize,
    /// 1 for same class, 0 otherwise.
    pub label: u8,
}

/// All unordered pairs of `items` (row, class), balanced by resampling the
/// smaller side with replacement, then capped at `pair_cap` keeping the
/// two sides within one of each other.
pub fn build_pairs(items: &[(usize, ClusterId)], cfg: &AdapterConfig) -> Result<Vec<ContrastivePair>, AdapterError> {
    if items.len() < 2 {
        return Err(AdapterError::TooFewDocuments);
    }
    let classes: BTreeSet<ClusterId> = items.iter().map(|&(_, c)| c).collect();
    if classes.len() < 2 {
        return Err(AdapterError::SingleClass);
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let same = items[i].1 == items[j].1;
            let p = ContrastivePair {
                a: items[i].0,
                b: items[j].0,
                label: same as u8,
            };
            if same {
                pos.push(p);
            } else {
                neg.push(p);
            }
        }
    }
    if pos.is_empty() {
        return Err(AdapterError::NoPositives);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (small, large) = if pos.len() < neg.len() { (&mut pos, &neg) } else { (&mut neg, &pos) };
    let base = small.len();
    while small.len() < large.len() {
        let k = rng.gen_range(0..base);
        small.push(small[k]);
    }
    if pos.len() + neg.len() > cfg.pair_cap {
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        pos.truncate(cfg.pair_cap / 2);
        neg.truncate(cfg.pair_cap - cfg.pair_cap / 2);
    }
    let mut out = pos;
    out.extend(neg);
    Ok(out)
}

/// Rows of `x` multiplied by `W`, for the rows `pairs` touch.
fn transformed(w: &Matrix, x: &Matrix, rows: &BTreeSet<usize>) -> BTreeMap<usize, Vec<f64>> {
    rows.iter()
        .map(|&r| (r, w.iter_rows().map(|wr| dot(wr, x.row(r))).collect()))
        .collect()
}

/// Mean of `(y - cos(W u, W v))²` over pairs and its gradient in `W`.
pub fn loss_and_grad(w: &Matrix, pairs: &[ContrastivePair], x: &Matrix) -> (f64, Matrix) {
    let d = w.rows();
    let rows: BTreeSet<usize> = pairs.iter().flat_map(|p| [p.a, p.b]).collect();
    let y = transformed(w, x, &rows);
    // upstream gradient per transformed row, then G = Σ_r g_r x_rᵀ
    let mut up: BTreeMap<usize, Vec<f64>> = rows.iter().map(|&r| (r, vec![0.0; d])).collect();
    let mut loss = 0.0;
    let m = pairs.len().max(1) as f64;
    for p in pairs {
        let (pa, pb) = (&y[&p.a], &y[&p.b]);
        let (na, nb) = (norm(pa), norm(pb));
        if na == 0.0 || nb == 0.0 {
            loss += f64::from(p.label).powi(2) / m;
            continue;
        }
        let c = dot(pa, pb) / (na * nb);
        let r = f64::from(p.label) - c;
        loss += r * r / m;
        let dc = -2.0 * r / m;
        let ga: Vec<f64> = (0..d).map(|k| dc * (pb[k] / (na * nb) - c * pa[k] / (na * na))).collect();
        let gb: Vec<f64> = (0..d).map(|k| dc * (pa[k] / (na * nb) - c * pb[k] / (nb * nb))).collect();
        up.get_mut(&p.a).unwrap().iter_mut().zip(&ga).for_each(|(u, g)| *u += g);
        up.get_mut(&p.b).unwrap().iter_mut().zip(&gb).for_each(|(u, g)| *u += g);
    }
    let mut grad = Matrix::zeros(d, w.cols());
    for (r, g) in &up {
        let xr = x.row(*r);
        for i in 0..d {
            if g[i] == 0.0 {
                continue;
            }
            let gi = g[i];
            grad.row_mut(i).iter_mut().zip(xr).for_each(|(o, xv)| *o += gi * xv);
        }
    }
    (loss, grad)
}

pub fn pair_loss(w: &Matrix, pairs: &[ContrastivePair], x: &Matrix) -> f64 {
    let rows: BTreeSet<usize> = pairs.iter().flat_map(|p| [p.a, p.b]).collect();
    let y = transformed(w, x, &rows);
    pairs
        .iter()
        .map(|p| {
            let r = f64::from(p.label) - cosine(&y[&p.a], &y[&p.b]);
            r * r
        })
        .sum::<f64>()
        / pairs.len().max(1) as f64
}

/// Adam state for one parameter block.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * grad[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * grad[k] * grad[k];
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

fn check_divergence(loss: f64, initial: f64) -> Result<(), AdapterError> {
    if !loss.is_finite() || loss > 10.0 * initial.max(1e-12) {
        return Err(AdapterError::Diverged { loss, initial });
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub pairs: usize,
    pub labeled: usize,
    pub classes: usize,
    pub stage1_initial_loss: f64,
    pub stage1_final_loss: f64,
    pub stage2_initial_loss: Option<f64>,
    pub stage2_final_loss: Option<f64>,
    pub stage2_accuracy: Option<f64>,
}

/// Contrastive stage from `W = I`: Adam over shuffled mini-batches. The
/// returned `W` is the epoch-end iterate with the lowest full loss, so the
/// loss never ends above where it started.
pub fn train_stage1(x: &Matrix, pairs: &[ContrastivePair], cfg: &AdapterConfig) -> Result<(Matrix, f64, f64), AdapterError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(AdapterError::TooFewDocuments);
    }
    let d = x.cols();
    let mut w = Matrix::identity(d);
    let initial = pair_loss(&w, pairs, x);
    let (mut best, mut best_loss) = (w.clone(), initial);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5151);
    let mut adam = Adam::new(d * d);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..cfg.epochs_stage1 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ContrastivePair> = chunk.iter().map(|&i| pairs[i]).collect();
            let (_, g) = loss_and_grad(&w, &batch, x);
            adam.step(w.as_mut_slice(), g.as_slice(), cfg.learning_rate);
        }
        let l = pair_loss(&w, pairs, x);
        check_divergence(l, initial)?;
        if l < best_loss {
            best = w.clone();
            best_loss = l;
        }
    }
    Ok((best, initial, best_loss))
}

struct Head {
    h: Matrix,
    bias: Vec<f64>,
}

/// Mean cross-entropy, accuracy, and gradients of W, head and bias.
fn softmax_step(
    w: &Matrix,
    head: &Head,
    x: &Matrix,
    batch: &[(usize, usize)],
) -> (f64, f64, Matrix, Matrix, Vec<f64>) {
    let (d, k) = (w.rows(), head.h.rows());
    let mut gw = Matrix::zeros(d, w.cols());
    let mut gh = Matrix::zeros(k, d);
    let mut gb = vec![0.0; k];
    let (mut loss, mut correct) = (0.0, 0usize);
    let m = batch.len().max(1) as f64;
    for &(row, class) in batch {
        let xr = x.row(row);
        let z: Vec<f64> = w.iter_rows().map(|wr| dot(wr, xr)).collect();
        let logits: Vec<f64> = (0..k).map(|c| dot(head.h.row(c), &z) + head.bias[c]).collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = exps.iter().sum();
        loss -= (exps[class] / s).ln() / m;
        let pred = (0..k).fold(0, |b, c| if logits[c] > logits[b] { c } else { b });
        correct += (pred == class) as usize;
        let dlog: Vec<f64> = (0..k)
            .map(|c| (exps[c] / s - if c == class { 1.0 } else { 0.0 }) / m)
            .collect();
        let mut dz = vec![0.0; d];
        for c in 0..k {
            gb[c] += dlog[c];
            let hr = head.h.row(c);
            for j in 0..d {
                dz[j] += dlog[c] * hr[j];
            }
            gh.row_mut(c).iter_mut().zip(&z).for_each(|(g, zv)| *g += dlog[c] * zv);
        }
        for i in 0..d {
            let di = dz[i];
            gw.row_mut(i).iter_mut().zip(xr).for_each(|(g, xv)| *g += di * xv);
        }
    }
    (loss, correct as f64 / m, gw, gh, gb)
}

/// End-to-end stage: a softmax head on `W x`, trained jointly with `W`
/// for `epochs_stage2` epochs with the learning rate halved each epoch.
/// Only `W` is returned.
pub fn train_stage2(
    x: &Matrix,
    labeled: &[(usize, ClusterId)],
    w: Matrix,
    cfg: &AdapterConfig,
) -> Result<(Matrix, f64, f64, f64), AdapterError> {
    cfg.validate()?;
    let classes: Vec<ClusterId> = labeled.iter().map(|&(_, c)| c).collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(AdapterError::SingleClass);
    }
    let items: Vec<(usize, usize)> = labeled
        .iter()
        .map(|&(r, c)| (r, classes.binary_search(&c).expect("class listed")))
        .collect();
    let d = w.rows();
    let mut w = w;
    let mut head = Head {
        h: Matrix::zeros(classes.len(), d),
        bias: vec![0.0; classes.len()],
    };
    let (mut aw, mut ah, mut ab) = (Adam::new(d * w.cols()), Adam::new(classes.len() * d), Adam::new(classes.len()));
    let (initial, _, _, _, _) = softmax_step(&w, &head, x, &items);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa5a5);
    let mut order = items.clone();
    let mut lr = cfg.learning_rate;
    for _ in 0..cfg.epochs_stage2 {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, _, gw, gh, gb) = softmax_step(&w, &head, x, batch);
            aw.step(w.as_mut_slice(), gw.as_slice(), lr);
            ah.step(head.h.as_mut_slice(), gh.as_slice(), lr);
            ab.step(&mut head.bias, &gb, lr);
        }
        let (l, _, _, _, _) = softmax_step(&w, &head, x, &items);
        check_divergence(l, initial)?;
        lr *= 0.5;
    }
    let (final_loss, acc, _, _, _) = softmax_step(&w, &head, x, &items);
    Ok((w, initial, final_loss, acc))
}

/// Pairs, stage 1 and (optionally) stage 2 on the rows of `x` named in
/// `labeled`.
pub fn train_adapter(
    x: &Matrix,
    labeled: &[(usize, ClusterId)],
    cfg: &AdapterConfig,
) -> Result<(LinearAdapter, TrainReport), AdapterError> {
    cfg.validate()?;
    let pairs = build_pairs(labeled, cfg)?;
    let (w, l0, l1) = train_stage1(x, &pairs, cfg)?;
    let mut report = TrainReport {
        pairs: pairs.len(),
        labeled: labeled.len(),
        classes: labeled.iter().map(|&(_, c)| c).collect::<BTreeSet<_>>().len(),
        stage1_initial_loss: l0,
        stage1_final_loss: l1,
        ..Default::default()
    };
    let w = if cfg.stage2_enabled {
        let (w, s0, s1, acc) = train_stage2(x, labeled, w, cfg)?;
        report.stage2_initial_loss = Some(s0);
        report.stage2_final_loss = Some(s1);
        report.stage2_accuracy = Some(acc);
        w
    } else {
        w
    };
    Ok((
        LinearAdapter {
            w,
            trained_on_version: None,
            config_hash: cfg.hash(),
        },
        report,
    ))
}

/// Accepted documents as `(row, cluster)`, in row order.
pub fn accepted_labels(state: &ClusteringState) -> Vec<(usize, ClusterId)> {
    let g = &state.geometry;
    (0..g.ids.len())
        .filter(|&i| state.accepted.contains(&g.ids[i]) && state.labeling.labels[i] != OUTLIER)
        .map(|i| (i, state.labeling.labels[i]))
        .collect()
}

#[derive(Clone, Debug)]
pub struct RefineModelOutput {
    pub state: ClusteringState,
    pub adapter: LinearAdapter,
    pub report: TrainReport,
    pub op: Op,
}

/// Trains an adapter from the accepted documents of `cur`, applies it to
/// the provider embeddings `raw`, and rebuilds. New clusters inherit the
/// name of the most similar old cluster when their centroids are at least
/// [`NAME_TRANSFER_THRESHOLD`] apart in cosine.
#[allow(clippy::too_many_arguments)]
pub fn refine_model(
    p: &Perspective,
    cur: &ClusteringState,
    raw: &Matrix,
    cfg: &AdapterConfig,
    providers: &Providers,
    generation: u64,
    obs: &dyn Observer,
) -> Result<RefineModelOutput, AdapterError> {
    let labeled = accepted_labels(cur);
    let mut counts: BTreeMap<ClusterId, usize> = BTreeMap::new();
    for &(_, c) in &labeled {
        *counts.entry(c).or_insert(0) += 1;
    }
    let found = counts.values().filter(|&&n| n >= 2).count();
    if found < 2 {
        return Err(AdapterError::InsufficientLabels { found });
    }
    let (mut adapter, report) = train_adapter(raw, &labeled, cfg)?;
    adapter.trained_on_version = Some(cur.version);
    // stored as f32
    adapter.w.round_to_f32();

    let g = &cur.geometry;
    let rewrite = RewriteReport {
        texts: g.texts.clone(),
        rewritten: g.meta.rewritten,
        failed: g.meta.rewrite_failed.clone(),
    };
    let (geometry, labeling) = build_geometry(
        p,
        g.ids.clone(),
        g.texts.clone(),
        raw,
        Some(&adapter),
        generation,
        Some(&rewrite),
        obs,
    )?;
    let mut reps = describe_clusters(geometry.view(), &labeling, &p.representation).map_err(PipelineError::from)?;

    // old memberships, measured in the new space
    let old: Vec<(ClusterId, Vec<f64>)> = cur
        .representations
        .keys()
        .filter_map(|&c| {
            let rows = cur.labeling.members(c);
            centroid(rows.iter().map(|&i| geometry.embeddings.row(i))).ok().map(|v| (c, v))
        })
        .collect();
    let mut inherited: BTreeMap<ClusterId, ClusterId> = BTreeMap::new();
    let mut to_name = BTreeSet::new();
    for (c, r) in reps.iter_mut() {
        let best = crate::refine::nearest_centroid(&r.centroid, old.iter().map(|(o, v)| (*o, v.as_slice())));
        match best {
            Some(o) if cosine(&r.centroid, &old.iter().find(|(x, _)| *x == o).unwrap().1) >= NAME_TRANSFER_THRESHOLD => {
                let prev = &cur.representations[&o];
                r.name = prev.name.clone();
                r.description = prev.description.clone();
                r.user_named = prev.user_named;
                inherited.insert(*c, o);
            }
            _ => {
                to_name.insert(*c);
            }
        }
    }
    name_clusters(
        &mut reps,
        &to_name,
        geometry.view(),
        Some(&p.embedding_instruction),
        providers,
        &p.representation,
    );
    let accepted = cur
        .accepted
        .iter()
        .filter(|id| {
            let Some(i) = geometry.index_of(id) else { return false };
            let new = labeling.labels[i];
            new != OUTLIER && inherited.get(&new) == Some(&cur.labeling.labels[i])
        })
        .cloned()
        .collect();
    let next = labeling.labels.iter().copied().max().unwrap_or(OUTLIER).max(OUTLIER) + 1;
    let op = Op::RefineModel {
        generation,
        labeled: report.labeled,
        classes: report.classes,
        pairs: report.pairs,
    };
    Ok(RefineModelOutput {
        state: ClusteringState {
            version: cur.version,
            labeling,
            representations: reps,
            accepted,
            next_cluster_id: next,
            geometry: Arc::new(geometry),
        },
        adapter,
        report,
        op,
    })
}
