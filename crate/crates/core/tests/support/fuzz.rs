#![allow(dead_code)]

use perspectra_core::clustering::{ClusterId, OUTLIER};
use perspectra_core::geometry::{cosine, Matrix};
use perspectra_core::pipeline::Perspective;
use perspectra_core::providers::Providers;
use perspectra_core::refine::{ClusteringState, Op, RefineError, Session};
use perspectra_core::representation::describe_clusters;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::fixtures::{ctx, hand_state, session, words};

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn fuzz_state(seed: u64, pr: &Providers, p: &Perspective) -> ClusteringState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 48;
    let k = 3;
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..6).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut red = Vec::new();
    let mut emb = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % k;
        let v: Vec<f64> = centers[c].iter().map(|x| x + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        emb.push(unit(&v));
        red.push(v[..4].to_vec());
        labels.push(if rng.gen_bool(0.1) { OUTLIER } else { c as ClusterId });
    }
    hand_state(
        Matrix::from_rows(&emb).unwrap(),
        Some(Matrix::from_rows(&red).unwrap()),
        labels,
        (0..n).map(|i| words(i * 7 + seed as usize)).collect(),
        pr,
        p,
    )
}

pub fn random_op(rng: &mut ChaCha8Rng, s: &ClusteringState, version: u64) -> Op {
    let n = s.n_docs();
    let clusters: Vec<ClusterId> = s.representations.keys().copied().collect();
    let pick_docs = |rng: &mut ChaCha8Rng, m: usize| -> Vec<String> {
        (0..m).map(|_| format!("d{}", rng.gen_range(0..n))).collect()
    };
    let any_cluster = |rng: &mut ChaCha8Rng| -> ClusterId {
        if clusters.is_empty() || rng.gen_bool(0.05) {
            rng.gen_range(0..20)
        } else {
            *clusters.choose(rng).unwrap()
        }
    };
    match rng.gen_range(0..10) {
        0 => {
            let m = rng.gen_range(1..4);
            let target = if rng.gen_bool(0.2) { OUTLIER } else { any_cluster(rng) };
            Op::ChangeCluster {
                doc_ids: pick_docs(rng, m),
                target,
            }
        }
        1 => {
            let m = rng.gen_range(1..6);
            Op::AddClusterFromDocs {
                doc_ids: pick_docs(rng, m),
            }
        }
        2 => Op::AddClusterFromText {
            name: words(rng.gen_range(0..50)),
            description: if rng.gen_bool(0.5) { words(rng.gen_range(0..50)) } else { String::new() },
            tau: rng.gen_range(0.0..0.9),
        },
        3 => Op::Merge {
            a: any_cluster(rng),
            b: any_cluster(rng),
        },
        4 => Op::Remove {
            cluster: any_cluster(rng),
        },
        5 => Op::Split {
            cluster: any_cluster(rng),
            min_samples: 5,
            min_cluster_size: 5,
        },
        6 | 7 => {
            let docs: Vec<String> = (0..n)
                .filter(|&i| s.labeling.labels[i] != OUTLIER && rng.gen_bool(0.2))
                .map(|i| format!("d{i}"))
                .collect();
            Op::Accept {
                doc_ids: if docs.is_empty() { pick_docs(rng, 1) } else { docs },
            }
        }
        8 => {
            let m = rng.gen_range(1..5);
            Op::Unaccept {
                doc_ids: pick_docs(rng, m),
            }
        }
        _ => Op::Revert {
            version: rng.gen_range(0..=version),
        },
    }
}

/// Representations equal a from-scratch recomputation, apart from names.
pub fn check_fresh(s: &ClusteringState, p: &Perspective) -> Result<(), String> {
    let fresh = describe_clusters(s.geometry.view(), &s.labeling, &p.representation).map_err(|e| e.to_string())?;
    for (c, r) in &s.representations {
        match fresh.get(c) {
            Some(f) => {
                ensure!(r.size == f.size, "cluster {c}: size {} vs {}", r.size, f.size);
                ensure!(r.keywords == f.keywords, "cluster {c}: stale keywords");
                ensure!(r.centroid == f.centroid, "cluster {c}: stale centroid");
                ensure!(r.representative_doc_ids == f.representative_doc_ids, "cluster {c}: stale representatives");
            }
            None => ensure!(r.size == 0, "stale representation for {c}"),
        }
    }
    for c in fresh.keys() {
        ensure!(s.representations.contains_key(c), "missing representation for {c}");
    }
    Ok(())
}

/// The base states the fuzz sequences start from.
pub fn fuzz_bases(pr: &Providers, p: &Perspective) -> Vec<ClusteringState> {
    (0..8).map(|i| fuzz_state(i, pr, p)).collect()
}

/// One random op sequence: partition, acceptance and freshness after every
/// step, then replay determinism of the whole log.
pub fn fuzz_sequence(seq: u64, bases: &[ClusteringState], pr: &Providers, p: &Perspective) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seq);
    let initial = bases[(seq % bases.len() as u64) as usize].clone();
    let mut s = session(initial.clone());
    let steps = rng.gen_range(3..10);
    for _ in 0..steps {
        let before = s.current();
        let op = random_op(&mut rng, &before, s.version());
        let prev_len = s.history().len();
        match s.apply(op.clone(), ctx(pr, p)) {
            Ok(r) => {
                let expected = prev_len + usize::from(r.version.is_some());
                ensure!(s.history().len() == expected, "seq {seq} {op:?}: history length");
            }
            Err(e) => {
                ensure!(
                    !matches!(e, RefineError::Invariant(_) | RefineError::Provider(_)),
                    "seq {seq} {op:?}: {e}"
                );
                ensure!(s.history().len() == prev_len, "seq {seq}: failed op appended");
            }
        }
        let cur = s.current();
        cur.check_invariants().map_err(|e| format!("seq {seq} after {op:?}: {e}"))?;
        for id in &cur.accepted {
            ensure!(cur.cluster_of(id) != Some(OUTLIER), "seq {seq}: accepted outlier {id}");
        }
        // accepted docs keep their cluster unless moved, merged away or
        // their cluster was rebuilt under a new id
        for id in &cur.accepted {
            if before.accepted.contains(id) && !matches!(op, Op::Revert { .. }) {
                let (b, a) = (before.cluster_of(id).unwrap(), cur.cluster_of(id).unwrap());
                ensure!(
                    a == b || !cur.representations.contains_key(&b) || matches!(op, Op::Merge { .. }),
                    "seq {seq}: accepted {id} moved {b} -> {a} under {op:?}"
                );
            }
        }
        check_fresh(&cur, p).map_err(|e| format!("seq {seq} after {op:?}: {e}"))?;
    }
    let ops: Vec<Op> = s.history().ops().into_iter().skip(1).collect();
    let replayed = Session::replay(initial, &ops, ctx(pr, p)).map_err(|e| format!("seq {seq}: replay failed: {e}"))?;
    ensure!(replayed.history().len() == s.history().len(), "seq {seq}: replay length");
    for (a, b) in replayed.history().snapshots().iter().zip(s.history().snapshots()) {
        ensure!(a.version == b.version && a.content == b.content, "seq {seq}: replay diverged at version {}", a.version);
    }
    Ok(())
}

/// remove_cluster against a per-document scan of every remaining centroid.
pub fn remove_vs_bruteforce(trials: usize, pr: &Providers, p: &Perspective) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..trials {
        let n = 40;
        let k = rng.gen_range(2..6);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| unit(&(0..5).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>()))
            .collect();
        let labels: Vec<ClusterId> = (0..n).map(|i| (i % k) as ClusterId).collect();
        let st = hand_state(Matrix::from_rows(&rows).unwrap(), None, labels, (0..n).map(words).collect(), pr, p);
        let victim = rng.gen_range(0..k) as ClusterId;
        let expected: Vec<ClusterId> = (0..n)
            .map(|i| {
                let l = st.labeling.labels[i];
                if l != victim {
                    return l;
                }
                let mut best = (OUTLIER, f64::NEG_INFINITY);
                for c in 0..k as ClusterId {
                    if c == victim {
                        continue;
                    }
                    let s = cosine(&rows[i], &st.representations[&c].centroid);
                    if s > best.1 {
                        best = (c, s);
                    }
                }
                best.0
            })
            .collect();
        let mut s = session(st);
        s.remove_cluster(victim, ctx(pr, p)).map_err(|e| e.to_string())?;
        ensure!(s.current().labeling.labels == expected, "trial {trial}: assignments differ from brute force");
    }
    Ok(())
}
