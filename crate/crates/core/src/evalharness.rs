//! KNN accuracy on 2D maps and the rewrite × instruction × shots grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{train_adapter, AdapterConfig, AdapterError};
use crate::corpus::Corpus;
use crate::geometry::{reduce, GeometryError, Matrix, ReductionConfig};
use crate::pipeline::{derive_seed, rewrite_corpus, Perspective, PipelineError, Silent, TemplateLibrary, TextMode};
use crate::providers::{ProviderError, Providers};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("class {class} has {count} members, fewer than {folds} folds")]
    CannotStratify { class: usize, count: usize, folds: usize },
    #[error("need at least two classes")]
    SingleClass,
    #[error("{0} documents have no gold label")]
    MissingLabels(usize),
    #[error("class {class:?} has {have} documents, cannot sample {shots} shots")]
    TooFewShots { class: String, have: usize, shots: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub folds: usize,
    pub seed: u64,
    pub repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            folds: 5,
            seed: 0,
            repeats: 10,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.folds < 2 {
            return Err(EvalError::Config("folds must be >= 2".into()));
        }
        if self.k == 0 {
            return Err(EvalError::Config("k must be >= 1".into()));
        }
        if self.repeats == 0 {
            return Err(EvalError::Config("repeats must be >= 1".into()));
        }
        Ok(())
    }
}

fn sq_dist(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Point order independent of input order and of rigid motions: by label,
/// then by distance to the mean point (quantised relative to the mean
/// spread), then by input index.
pub fn canonical_order(points: &Matrix, labels: &[usize]) -> Vec<usize> {
    let n = points.rows();
    let d = points.cols();
    let mut mean = vec![0.0; d];
    for r in points.iter_rows() {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
    }
    let dist: Vec<f64> = points.iter_rows().map(|r| sq_dist(r, &mean)).collect();
    let scale = dist.iter().sum::<f64>() / n as f64;
    let key: Vec<i64> = dist
        .iter()
        .map(|&v| if scale > 0.0 { (v / scale * 1e9).round() as i64 } else { 0 })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (labels[i], key[i], i));
    order
}

/// Fold of each point (indexed like the input). Within each class the
/// canonically ordered members are shuffled with the seed and dealt
/// round-robin.
pub fn stratified_folds(points: &Matrix, labels: &[usize], cfg: &EvalConfig) -> Result<Vec<usize>, EvalError> {
    cfg.validate()?;
    let order = canonical_order(points, labels);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &order {
        by_class.entry(labels[i]).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(EvalError::SingleClass);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fold = vec![0; labels.len()];
    let mut offset = 0;
    for (&class, members) in by_class.iter_mut() {
        if members.len() < cfg.folds {
            return Err(EvalError::CannotStratify {
                class,
                count: members.len(),
                folds: cfg.folds,
            });
        }
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            fold[i] = (offset + j) % cfg.folds;
        }
        offset += members.len();
    }
    Ok(fold)
}

/// Majority class among the `k` nearest `train` points to `q`. `train`
/// is in canonical order, which breaks distance ties.
fn knn_predict(points: &Matrix, labels: &[usize], train: &[usize], q: usize, k: usize) -> usize {
    let mut near: Vec<(f64, usize, usize)> = train
        .iter()
        .enumerate()
        .map(|(pos, &j)| (sq_dist(points.row(q), points.row(j)), pos, labels[j]))
        .collect();
    let k = k.min(near.len());
    near.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    near.truncate(k);
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for &(_, _, l) in &near {
        *votes.entry(l).or_insert(0) += 1;
    }
    let top = *votes.values().max().expect("k >= 1");
    let tied: BTreeSet<usize> = votes.iter().filter(|(_, &v)| v == top).map(|(&l, _)| l).collect();
    if tied.len() == 1 {
        return *tied.iter().next().unwrap();
    }
    near.iter().find(|x| tied.contains(&x.2)).expect("some tied class is present").2
}

/// Stratified k-fold KNN accuracy, averaged over folds.
pub fn knn_accuracy(points: &Matrix, labels: &[usize], cfg: &EvalConfig) -> Result<f64, EvalError> {
    if labels.len() != points.rows() {
        return Err(EvalError::Config(format!("{} labels for {} points", labels.len(), points.rows())));
    }
    if points.rows() < cfg.folds {
        return Err(EvalError::Config(format!("{} points for {} folds", points.rows(), cfg.folds)));
    }
    let fold = stratified_folds(points, labels, cfg)?;
    let order = canonical_order(points, labels);
    let mut total = 0.0;
    for f in 0..cfg.folds {
        let train: Vec<usize> = order.iter().copied().filter(|&i| fold[i] != f).collect();
        if train.len() < cfg.k {
            return Err(EvalError::Config(format!("fold {f} trains on {} < k points", train.len())));
        }
        let test: Vec<usize> = order.iter().copied().filter(|&i| fold[i] == f).collect();
        let correct = test
            .iter()
            .filter(|&&q| knn_predict(points, labels, &train, q, cfg.k) == labels[q])
            .count();
        total += correct as f64 / test.len() as f64;
    }
    Ok(total / cfg.folds as f64)
}

/// Adjusted Rand index between two labelings (outliers are just another
/// label here).
pub fn adjusted_rand_index<A: Ord + Copy, B: Ord + Copy>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mut table: BTreeMap<(A, B), f64> = BTreeMap::new();
    let mut ra: BTreeMap<A, f64> = BTreeMap::new();
    let mut rb: BTreeMap<B, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_insert(0.0) += 1.0;
        *ra.entry(x).or_insert(0.0) += 1.0;
        *rb.entry(y).or_insert(0.0) += 1.0;
    }
    let c2 = |v: f64| v * (v - 1.0) / 2.0;
    let index: f64 = table.values().copied().map(c2).sum();
    let sa: f64 = ra.values().copied().map(c2).sum();
    let sb: f64 = rb.values().copied().map(c2).sum();
    let expected = sa * sb / c2(n);
    let max = (sa + sb) / 2.0;
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Dedicated 2D reduction for scoring.
pub fn map_2d(embeddings: &Matrix, reduction: &ReductionConfig, seed: u64) -> Result<Matrix, EvalError> {
    let cfg = ReductionConfig {
        n_components: 2,
        seed,
        ..reduction.clone()
    };
    Ok(reduce(embeddings, &cfg)?)
}

/// `shots` random members of every class, as `(row, class)`.
pub fn sample_shots(labels: &[usize], shots: usize, seed: u64) -> Result<Vec<(usize, i32)>, EvalError> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (class, members) in by_class {
        if members.len() < shots {
            return Err(EvalError::TooFewShots {
                class: class.to_string(),
                have: members.len(),
                shots,
            });
        }
        out.extend(members.choose_multiple(&mut rng, shots).map(|&i| (i, class as i32)));
    }
    out.sort_unstable();
    Ok(out)
}

/// 2D KNN accuracy after training an adapter on `shots` labeled documents
/// per class. `shots == 0` measures the unadapted embeddings.
pub fn fewshot_accuracy(
    embeddings: &Matrix,
    labels: &[usize],
    shots: usize,
    seed: u64,
    reduction: &ReductionConfig,
    adapter: &AdapterConfig,
    cfg: &EvalConfig,
) -> Result<f64, EvalError> {
    let map_seed = derive_seed(seed, 2);
    let x = if shots == 0 {
        embeddings.clone()
    } else {
        let labeled = sample_shots(labels, shots, derive_seed(seed, 7))?;
        let acfg = AdapterConfig {
            seed: derive_seed(seed, 8),
            ..adapter.clone()
        };
        let (a, _) = train_adapter(embeddings, &labeled, &acfg)?;
        a.apply(embeddings)?
    };
    let map = map_2d(&x, reduction, map_seed)?;
    knn_accuracy(&map, labels, &EvalConfig { seed, ..cfg.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    pub mode: TextMode,
    pub instruction: bool,
    pub shots: usize,
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.mode)?;
        if self.instruction {
            write!(f, "+inst")?;
        }
        if self.shots > 0 {
            write!(f, " {}-shot", self.shots)?;
        }
        Ok(())
    }
}

pub const ALLOWED_SHOTS: [usize; 5] = [0, 2, 4, 8, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub task: String,
    pub modes: Vec<TextMode>,
    pub instruction: Vec<bool>,
    pub shots: Vec<usize>,
}

impl ExperimentGrid {
    pub fn cells(&self) -> Result<Vec<GridCell>, EvalError> {
        if let Some(s) = self.shots.iter().find(|s| !ALLOWED_SHOTS.contains(s)) {
            return Err(EvalError::Config(format!("shots must be one of {ALLOWED_SHOTS:?}, got {s}")));
        }
        let mut cells = BTreeSet::new();
        for &mode in &self.modes {
            for &instruction in &self.instruction {
                for &shots in &self.shots {
                    cells.insert(GridCell { mode, instruction, shots });
                }
            }
        }
        if cells.is_empty() {
            return Err(EvalError::Config("empty grid".into()));
        }
        Ok(cells.into_iter().collect())
    }
}

/// Parses `on,off` style lists.
pub fn parse_switches(s: &str) -> Result<Vec<bool>, EvalError> {
    s.split(',')
        .map(|t| match t.trim() {
            "on" | "true" | "1" => Ok(true),
            "off" | "false" | "0" => Ok(false),
            other => Err(EvalError::Config(format!("expected on/off, got {other:?}"))),
        })
        .collect()
}

pub fn parse_modes(s: &str) -> Result<Vec<TextMode>, EvalError> {
    s.split(',')
        .map(|t| TextMode::from_str(t.trim()).map_err(|e| EvalError::Config(e.to_string())))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub mean_acc: f64,
    pub std: f64,
    pub n: usize,
    pub seed: u64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Gold labels of a corpus as dense class indices plus the class names.
pub fn gold_labels(corpus: &Corpus) -> Result<(Vec<usize>, Vec<String>), EvalError> {
    let missing = corpus.documents.iter().filter(|d| d.label().is_none()).count();
    if missing > 0 {
        return Err(EvalError::MissingLabels(missing));
    }
    let names: Vec<String> = corpus
        .documents
        .iter()
        .map(|d| d.label().unwrap().to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let labels = corpus
        .documents
        .iter()
        .map(|d| names.binary_search_by(|n| n.as_str().cmp(d.label().unwrap())).unwrap())
        .collect();
    Ok((labels, names))
}

/// Every grid cell over a gold-labeled corpus. Zero-shot cells run once;
/// few-shot cells run `cfg.repeats` times with different shot samples.
pub fn run_grid(
    corpus: &Corpus,
    grid: &ExperimentGrid,
    providers: &Providers,
    reduction: &ReductionConfig,
    adapter: &AdapterConfig,
    cfg: &EvalConfig,
) -> Result<Vec<CellResult>, EvalError> {
    cfg.validate()?;
    let (labels, _) = gold_labels(corpus)?;
    let cells = grid.cells()?;
    let lib = TemplateLibrary::bundled();

    // one embedding matrix per (mode, instruction)
    let mut embeddings: BTreeMap<(TextMode, bool), Matrix> = BTreeMap::new();
    let mut texts: BTreeMap<TextMode, Vec<String>> = BTreeMap::new();
    for c in &cells {
        if embeddings.contains_key(&(c.mode, c.instruction)) {
            continue;
        }
        let p = Perspective::from_template("eval", &corpus.id, &lib, &grid.task, c.mode)?;
        if !texts.contains_key(&c.mode) {
            texts.insert(c.mode, rewrite_corpus(&p, corpus, providers, &Silent)?.texts);
        }
        let instruction = c.instruction.then_some(p.embedding_instruction.as_str());
        let m = providers.embed_texts(&texts[&c.mode], instruction, &mut |_, _| Ok(()))?;
        embeddings.insert((c.mode, c.instruction), m);
    }

    cells
        .par_iter()
        .map(|c| {
            let x = &embeddings[&(c.mode, c.instruction)];
            let runs = if c.shots == 0 { 1 } else { cfg.repeats };
            let accs = (0..runs)
                .map(|r| fewshot_accuracy(x, &labels, c.shots, derive_seed(cfg.seed, r as u64), reduction, adapter, cfg))
                .collect::<Result<Vec<f64>, _>>()?;
            let (mean_acc, std) = mean_std(&accs);
            Ok(CellResult {
                cell: c.to_string(),
                mean_acc,
                std,
                n: runs,
                seed: cfg.seed,
            })
        })
        .collect()
}

/// CSV with columns cell, mean_acc, std, n, seed, k.
pub fn write_csv<W: std::io::Write>(results: &[CellResult], cfg: &EvalConfig, out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cell", "mean_acc", "std", "n", "seed", "k"])?;
    for r in results {
        w.write_record([
            r.cell.clone(),
            format!("{:.6}", r.mean_acc),
            format!("{:.6}", r.std),
            r.n.to_string(),
            r.seed.to_string(),
            cfg.k.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
