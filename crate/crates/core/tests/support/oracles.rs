#![allow(dead_code)]

use perspectra_core::geometry::Matrix;

/// ARI from explicit pair counts over all n(n-1)/2 pairs.
pub fn ari_pairs<A: PartialEq, B: PartialEq>(a: &[A], b: &[B]) -> f64 {
    let (mut both, mut only_a, mut only_b, mut neither) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let num = 2.0 * (both * neither - only_a * only_b);
    let den = (both + only_a) * (only_a + neither) + (both + only_b) * (only_b + neither);
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// KNN accuracy given explicit fold assignments and a tie-break rank per
/// point: full sort of every training point, first k, vote, ties to the
/// nearest.
pub fn knn_bruteforce(points: &Matrix, labels: &[usize], fold: &[usize], rank: &[usize], folds: usize, k: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for f in 0..folds {
        let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
        let mut correct = 0;
        for &q in &test {
            let mut cands: Vec<(f64, usize, usize)> = (0..n)
                .filter(|&j| fold[j] != f)
                .map(|j| {
                    let p = points.row(q);
                    let r = points.row(j);
                    let d = (p[0] - r[0]).powi(2) + (p[1] - r[1]).powi(2);
                    (d, rank[j], labels[j])
                })
                .collect();
            cands.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
            let top = &cands[..k];
            let max_label = labels.iter().max().unwrap() + 1;
            let mut votes = vec![0; max_label];
            for c in top {
                votes[c.2] += 1;
            }
            let best = *votes.iter().max().unwrap();
            let pred = top.iter().find(|c| votes[c.2] == best).unwrap().2;
            if pred == labels[q] {
                correct += 1;
            }
        }
        total += correct as f64 / test.len() as f64;
    }
    total / folds as f64
}
