use crate::geometry::{euclidean, Matrix};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Prim's algorithm over the complete mutual-reachability graph
/// `max(core[i], core[j], d(i, j))`. O(n²) time, O(n) memory. Ties pick the
/// lower vertex index.
pub fn mst_mutual_reachability(x: &Matrix, core: &[f64]) -> Vec<MstEdge> {
    let n = x.rows();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);

    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let row = x.row(current);
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let mr = euclidean(row, x.row(j)).max(core[current]).max(core[j]);
            if mr < best[j] {
                best[j] = mr;
                from[j] = current;
            }
        }
        let mut next = usize::MAX;
        for j in 0..n {
            if !in_tree[j] && (next == usize::MAX || best[j] < best[next]) {
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push(MstEdge {
            a: from[next].min(next),
            b: from[next].max(next),
            weight: best[next],
        });
        current = next;
    }
    edges
}
