//! Brute-force HDBSCAN used as a test oracle for tiny inputs.
//!
//! Works directly on the complete mutual-reachability graph: for every
//! distinct edge weight h (largest first) each live cluster is split into the
//! connected components of the edges lighter than h. Selection enumerates
//! every antichain of the cluster tree.

#![allow(dead_code)]

pub const MIN_HEIGHT: f64 = 1e-12;

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn core_distances(pts: &[Vec<f64>], min_samples: usize) -> Vec<f64> {
    (0..pts.len())
        .map(|i| {
            let mut d: Vec<f64> = (0..pts.len()).filter(|&j| j != i).map(|j| dist(&pts[i], &pts[j])).collect();
            d.sort_by(f64::total_cmp);
            d[min_samples - 1]
        })
        .collect()
}

pub fn mutual_reachability(pts: &[Vec<f64>], core: &[f64]) -> Vec<Vec<f64>> {
    let n = pts.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m[i][j] = dist(&pts[i], &pts[j]).max(core[i]).max(core[j]);
            }
        }
    }
    m
}

/// Minimum spanning tree weight by enumerating every (n-1)-edge subset.
pub fn brute_force_mst_weight(mr: &[Vec<f64>]) -> f64 {
    let n = mr.len();
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let mut best = f64::INFINITY;
    let mut pick = Vec::new();
    enumerate_trees(&edges, 0, n - 1, n, &mut pick, &mut |tree| {
        let w: f64 = tree.iter().map(|&(i, j)| mr[i][j]).sum();
        if w < best {
            best = w;
        }
    });
    best
}

/// Calls `f` on every spanning tree of the complete graph on `n` vertices.
pub fn for_each_spanning_tree(n: usize, f: &mut dyn FnMut(&[(usize, usize)])) {
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let mut pick = Vec::new();
    enumerate_trees(&edges, 0, n - 1, n, &mut pick, f);
}

fn enumerate_trees(
    edges: &[(usize, usize)],
    from: usize,
    need: usize,
    n: usize,
    pick: &mut Vec<(usize, usize)>,
    f: &mut dyn FnMut(&[(usize, usize)]),
) {
    if pick.len() == need {
        if is_spanning_tree(pick, n) {
            f(pick);
        }
        return;
    }
    if edges.len() - from < need - pick.len() {
        return;
    }
    for e in from..edges.len() {
        pick.push(edges[e]);
        enumerate_trees(edges, e + 1, need, n, pick, f);
        pick.pop();
    }
}

fn is_spanning_tree(tree: &[(usize, usize)], n: usize) -> bool {
    let mut label: Vec<usize> = (0..n).collect();
    for &(a, b) in tree {
        let (la, lb) = (label[a], label[b]);
        if la == lb {
            return false;
        }
        for l in label.iter_mut() {
            if *l == lb {
                *l = la;
            }
        }
    }
    true
}

#[derive(Clone, Debug)]
pub struct RefCluster {
    pub parent: Option<usize>,
    pub members: Vec<usize>,
    pub birth: f64,
    pub stability: f64,
}

fn components(set: &[usize], mr: &[Vec<f64>], below: f64) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mr.len()];
    let mut out = Vec::new();
    for &s in set {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![s];
        let mut k = 0;
        while k < comp.len() {
            let u = comp[k];
            for &v in set {
                if !seen[v] && mr[u][v] < below {
                    seen[v] = true;
                    comp.push(v);
                }
            }
            k += 1;
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

pub fn condensed_clusters(mr: &[Vec<f64>], min_cluster_size: usize) -> Vec<RefCluster> {
    let n = mr.len();
    let mut levels: Vec<f64> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            levels.push(mr[i][j]);
        }
    }
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();

    let mut clusters = vec![RefCluster { parent: None, members: (0..n).collect(), birth: 0.0, stability: 0.0 }];
    // (cluster id, points still inside it)
    let mut live: Vec<(usize, Vec<usize>)> = vec![(0, (0..n).collect())];
    for &h in &levels {
        let lambda = 1.0 / h.max(MIN_HEIGHT);
        let mut next = Vec::new();
        for (c, set) in live {
            let comps = components(&set, mr, h);
            if comps.len() == 1 {
                next.push((c, set));
                continue;
            }
            let big: Vec<&Vec<usize>> = comps.iter().filter(|s| s.len() >= min_cluster_size).collect();
            let birth = clusters[c].birth;
            for s in comps.iter().filter(|s| s.len() < min_cluster_size) {
                clusters[c].stability += (lambda - birth) * s.len() as f64;
            }
            if big.len() == 1 {
                next.push((c, big[0].clone()));
            } else if big.len() >= 2 {
                for s in big {
                    clusters[c].stability += (lambda - birth) * s.len() as f64;
                    clusters.push(RefCluster { parent: Some(c), members: s.clone(), birth: lambda, stability: 0.0 });
                    next.push((clusters.len() - 1, s.clone()));
                }
            }
        }
        live = next;
    }
    // whatever is left falls out at the smallest level
    let last = 1.0 / levels.last().copied().unwrap_or(0.0).max(MIN_HEIGHT);
    for (c, set) in live {
        let birth = clusters[c].birth;
        clusters[c].stability += (last - birth) * set.len() as f64;
    }
    clusters
}

fn is_ancestor(clusters: &[RefCluster], a: usize, mut b: usize) -> bool {
    while let Some(p) = clusters[b].parent {
        if p == a {
            return true;
        }
        b = p;
    }
    false
}

/// Best total stability over all antichains, and every antichain reaching it
/// (within `tol`).
pub fn best_antichains(clusters: &[RefCluster], allow_root: bool, tol: f64) -> (f64, Vec<Vec<usize>>) {
    let candidates: Vec<usize> = (0..clusters.len()).filter(|&c| c != 0 || allow_root).collect();
    let m = candidates.len();
    let mut all = Vec::new();
    for mask in 0u32..(1 << m) {
        let chosen: Vec<usize> = (0..m).filter(|&b| mask >> b & 1 == 1).map(|b| candidates[b]).collect();
        let ok = chosen.iter().all(|&a| chosen.iter().all(|&b| a == b || !is_ancestor(clusters, a, b)));
        if ok {
            let total: f64 = chosen.iter().map(|&c| clusters[c].stability).sum();
            all.push((total, chosen));
        }
    }
    let best = all.iter().map(|a| a.0).fold(f64::NEG_INFINITY, f64::max);
    let winners = all.into_iter().filter(|a| a.0 >= best - tol).map(|a| a.1).collect();
    (best, winners)
}

pub fn labels_for(clusters: &[RefCluster], chosen: &[usize], n: usize) -> Vec<i32> {
    let mut owner = vec![usize::MAX; n];
    for &c in chosen {
        for &p in &clusters[c].members {
            owner[p] = c;
        }
    }
    let mut remap: Vec<usize> = Vec::new();
    owner
        .iter()
        .map(|&o| {
            if o == usize::MAX {
                return -1;
            }
            match remap.iter().position(|&r| r == o) {
                Some(p) => p as i32,
                None => {
                    remap.push(o);
                    remap.len() as i32 - 1
                }
            }
        })
        .collect()
}

/// Random tiny instance on an integer grid (so distance ties are common).
pub fn tiny_instance(seed: u64) -> (Vec<Vec<f64>>, usize, usize, bool) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=8);
    let dim = rng.gen_range(1..=2);
    let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(0..5) as f64).collect()).collect();
    let min_samples = rng.gen_range(1..=3.min(n - 1));
    let mcs = rng.gen_range(2..=4);
    let allow_single = rng.gen_bool(0.3);
    (pts, min_samples, mcs, allow_single)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Runs the library and the oracle on one instance and reports the first
/// disagreement.
pub fn compare_with_library(
    pts: &[Vec<f64>],
    min_samples: usize,
    mcs: usize,
    allow_single: bool,
) -> Result<(), String> {
    use perspectra_core::clustering::{hdbscan, ClusterConfig};
    use perspectra_core::geometry::Matrix;

    let n = pts.len();
    let x = Matrix::from_rows(pts).map_err(|e| e.to_string())?;
    let mut cfg = ClusterConfig::new(min_samples, mcs);
    cfg.allow_single_cluster = allow_single;
    let res = hdbscan(&x, &cfg).map_err(|e| e.to_string())?;

    let core = core_distances(pts, min_samples);
    let mr = mutual_reachability(pts, &core);
    let reference = condensed_clusters(&mr, mcs);

    // every library cluster, as (sorted member set, stability)
    let tree = &res.tree;
    let mut lib: Vec<(Vec<usize>, f64)> = (0..tree.clusters.len())
        .map(|c| {
            let members = (0..n)
                .filter(|&p| {
                    let mut k = tree.point_cluster[p];
                    loop {
                        if k == c {
                            return true;
                        }
                        match tree.clusters[k].parent {
                            Some(up) => k = up,
                            None => return false,
                        }
                    }
                })
                .collect();
            (members, tree.clusters[c].stability)
        })
        .collect();
    let mut refs: Vec<(Vec<usize>, f64)> = reference.iter().map(|c| (c.members.clone(), c.stability)).collect();
    lib.sort_by(|a, b| a.0.cmp(&b.0));
    refs.sort_by(|a, b| a.0.cmp(&b.0));
    if lib.len() != refs.len() || lib.iter().zip(&refs).any(|(a, b)| a.0 != b.0 || !close(a.1, b.1)) {
        return Err(format!("condensed trees differ:\n lib {lib:?}\n ref {refs:?}"));
    }

    let (best, winners) = best_antichains(&reference, allow_single, 1e-9 * reference[0].stability.abs().max(1.0));
    let selected = perspectra_core::clustering::select_clusters(tree, allow_single);
    let total = tree.total_stability(&selected);
    if !close(total, best) {
        return Err(format!("selected stability {total} but best antichain has {best}"));
    }
    let candidates: Vec<Vec<i32>> = winners.iter().map(|w| labels_for(&reference, w, n)).collect();
    if !candidates.contains(&res.labeling.labels) {
        return Err(format!("labels {:?} not among optimal {:?}", res.labeling.labels, candidates));
    }
    Ok(())
}
