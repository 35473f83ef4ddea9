use serde::{Deserialize, Serialize};

use super::{ClusterId, Labeling, MstEdge, OUTLIER};

const MIN_HEIGHT: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondensedCluster {
    pub parent: Option<usize>,
    pub lambda_birth: f64,
    pub size: usize,
    pub stability: f64,
    pub children: Vec<usize>,
}

/// A point or a child cluster leaving `parent` at `lambda`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondensedEntry {
    pub parent: usize,
    pub child: usize,
    pub child_is_cluster: bool,
    pub lambda: f64,
    pub size: usize,
}

/// Cluster 0 is the root; a child always has a larger id than its parent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondensedTree {
    pub n_points: usize,
    pub clusters: Vec<CondensedCluster>,
    pub entries: Vec<CondensedEntry>,
    /// Cluster each point falls out of.
    pub point_cluster: Vec<usize>,
    pub point_lambda: Vec<f64>,
}

fn lambda_of(height: f64) -> f64 {
    1.0 / height.max(MIN_HEIGHT)
}

struct Dendrogram {
    n: usize,
    /// Internal node `n + k` has `children[k]` and `heights[k]`.
    children: Vec<Vec<usize>>,
    heights: Vec<f64>,
    sizes: Vec<usize>,
    min_leaf: Vec<usize>,
}

impl Dendrogram {
    fn root(&self) -> usize {
        self.n + self.children.len() - 1
    }

    fn size(&self, node: usize) -> usize {
        if node < self.n {
            1
        } else {
            self.sizes[node - self.n]
        }
    }

    fn min_leaf(&self, node: usize) -> usize {
        if node < self.n {
            node
        } else {
            self.min_leaf[node - self.n]
        }
    }

    fn leaves(&self, node: usize, out: &mut Vec<usize>) {
        let mut stack = vec![node];
        while let Some(v) = stack.pop() {
            if v < self.n {
                out.push(v);
            } else {
                stack.extend(&self.children[v - self.n]);
            }
        }
    }
}

fn find(parent: &mut [usize], mut v: usize) -> usize {
    while parent[v] != v {
        parent[v] = parent[parent[v]];
        v = parent[v];
    }
    v
}

/// Single-linkage hierarchy in which all MST edges of one weight merge in a
/// single step, so a node may have more than two children.
fn dendrogram(mst: &[MstEdge], n: usize) -> Dendrogram {
    let mut edges = mst.to_vec();
    edges.sort_by(|x, y| x.weight.total_cmp(&y.weight).then((x.a, x.b).cmp(&(y.a, y.b))));

    let mut uf: Vec<usize> = (0..n).collect();
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut d = Dendrogram { n, children: Vec::new(), heights: Vec::new(), sizes: Vec::new(), min_leaf: Vec::new() };

    let mut i = 0;
    while i < edges.len() {
        let w = edges[i].weight;
        let mut j = i;
        while j < edges.len() && edges[j].weight == w {
            j += 1;
        }
        let mut touched = Vec::new();
        for e in &edges[i..j] {
            touched.push(find(&mut uf, e.a));
            touched.push(find(&mut uf, e.b));
        }
        touched.sort_unstable();
        touched.dedup();
        let pre_nodes: Vec<(usize, usize)> = touched.iter().map(|&r| (r, node_of[r])).collect();
        for e in &edges[i..j] {
            let (ra, rb) = (find(&mut uf, e.a), find(&mut uf, e.b));
            if ra != rb {
                uf[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (r, node) in pre_nodes {
            let root = find(&mut uf, r);
            match groups.iter_mut().find(|g| g.0 == root) {
                Some(g) => g.1.push(node),
                None => groups.push((root, vec![node])),
            }
        }
        for (root, kids) in groups {
            let size = kids.iter().map(|&k| d.size(k)).sum();
            let lo = kids.iter().map(|&k| d.min_leaf(k)).min().unwrap_or(usize::MAX);
            d.min_leaf.push(lo);
            d.children.push(kids);
            d.heights.push(w);
            d.sizes.push(size);
            node_of[root] = n + d.children.len() - 1;
        }
        i = j;
    }
    d
}

/// Condenses the MST hierarchy with minimum cluster size `min_cluster_size`.
///
/// At every split, children with at least `min_cluster_size` points are
/// "large". Two or more large children each start a new cluster; exactly one
/// continues its parent's cluster; all other points fall out of the current
/// cluster at the split's lambda.
pub fn condense(mst: &[MstEdge], n: usize, min_cluster_size: usize) -> CondensedTree {
    let mut tree = CondensedTree {
        n_points: n,
        clusters: vec![CondensedCluster {
            parent: None,
            lambda_birth: 0.0,
            size: n,
            stability: 0.0,
            children: Vec::new(),
        }],
        entries: Vec::new(),
        point_cluster: vec![0; n],
        point_lambda: vec![0.0; n],
    };
    if n == 0 {
        return tree;
    }
    if n == 1 {
        tree.point_lambda[0] = lambda_of(0.0);
        tree.entries.push(CondensedEntry {
            parent: 0,
            child: 0,
            child_is_cluster: false,
            lambda: lambda_of(0.0),
            size: 1,
        });
        return tree;
    }

    let d = dendrogram(mst, n);
    let mut buf = Vec::new();
    // (dendrogram node, condensed cluster it belongs to)
    let mut stack = vec![(d.root(), 0usize)];
    while let Some((node, cluster)) = stack.pop() {
        let k = node - n;
        let lambda = lambda_of(d.heights[k]);
        let mut kids = d.children[k].clone();
        kids.sort_by_key(|&c| d.min_leaf(c));
        let large: Vec<usize> = kids.iter().copied().filter(|&c| d.size(c) >= min_cluster_size).collect();

        for &c in &kids {
            if large.contains(&c) {
                continue;
            }
            buf.clear();
            d.leaves(c, &mut buf);
            for &p in &buf {
                tree.point_cluster[p] = cluster;
                tree.point_lambda[p] = lambda;
                tree.entries.push(CondensedEntry {
                    parent: cluster,
                    child: p,
                    child_is_cluster: false,
                    lambda,
                    size: 1,
                });
            }
        }

        if large.len() == 1 {
            stack.push((large[0], cluster));
        } else if large.len() >= 2 {
            // lowest-index child gets the lowest id and is expanded first
            let mut new_ids = Vec::new();
            for &c in &large {
                let id = tree.clusters.len();
                tree.clusters.push(CondensedCluster {
                    parent: Some(cluster),
                    lambda_birth: lambda,
                    size: d.size(c),
                    stability: 0.0,
                    children: Vec::new(),
                });
                tree.clusters[cluster].children.push(id);
                tree.entries.push(CondensedEntry {
                    parent: cluster,
                    child: id,
                    child_is_cluster: true,
                    lambda,
                    size: d.size(c),
                });
                new_ids.push((c, id));
            }
            for (c, id) in new_ids.into_iter().rev() {
                stack.push((c, id));
            }
        }
    }

    for e in &tree.entries {
        let birth = tree.clusters[e.parent].lambda_birth;
        tree.clusters[e.parent].stability += (e.lambda - birth) * e.size as f64;
    }
    tree
}

/// Excess-of-mass selection. A cluster is kept when its stability is at
/// least the best total its descendants can reach. The root is only eligible
/// with `allow_single_cluster`.
pub fn select_clusters(tree: &CondensedTree, allow_single_cluster: bool) -> Vec<usize> {
    let m = tree.clusters.len();
    let mut best = vec![0.0; m];
    let mut keep = vec![false; m];
    for c in (0..m).rev() {
        let node = &tree.clusters[c];
        let below: f64 = node.children.iter().map(|&ch| best[ch]).sum();
        let eligible = c != 0 || allow_single_cluster;
        if node.children.is_empty() {
            best[c] = node.stability;
            keep[c] = eligible;
        } else if eligible && node.stability >= below {
            best[c] = node.stability;
            keep[c] = true;
        } else {
            best[c] = below;
        }
    }
    // top-down: a kept cluster hides everything beneath it
    let mut selected = Vec::new();
    let mut stack = vec![0usize];
    while let Some(c) = stack.pop() {
        if keep[c] {
            selected.push(c);
        } else {
            stack.extend(&tree.clusters[c].children);
        }
    }
    selected.sort_unstable();
    selected
}

impl CondensedTree {
    pub fn labeling(&self, selected: &[usize]) -> Labeling {
        let n = self.n_points;
        let mut is_selected = vec![false; self.clusters.len()];
        for &c in selected {
            is_selected[c] = true;
        }
        let mut owner = vec![usize::MAX; n];
        for p in 0..n {
            let mut c = self.point_cluster[p];
            loop {
                if is_selected[c] {
                    owner[p] = c;
                    break;
                }
                match self.clusters[c].parent {
                    Some(up) => c = up,
                    None => break,
                }
            }
        }
        // dense ids ordered by each cluster's smallest point index
        let mut remap: Vec<(usize, ClusterId)> = Vec::new();
        let labels = owner
            .iter()
            .map(|&o| {
                if o == usize::MAX {
                    return OUTLIER;
                }
                if let Some(&(_, id)) = remap.iter().find(|r| r.0 == o) {
                    return id;
                }
                let id = remap.len() as ClusterId;
                remap.push((o, id));
                id
            })
            .collect();
        Labeling { labels }
    }

    /// Sum of stabilities of the given clusters.
    pub fn total_stability(&self, selected: &[usize]) -> f64 {
        selected.iter().map(|&c| self.clusters[c].stability).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge(a: usize, b: usize, weight: f64) -> MstEdge {
        MstEdge { a, b, weight }
    }

    #[test]
    fn equal_weights_merge_in_one_node() {
        let d = dendrogram(&[edge(0, 1, 1.0), edge(1, 2, 1.0), edge(2, 3, 2.0)], 4);
        assert_eq!(d.children.len(), 2);
        assert_eq!(d.children[0].len(), 3);
        assert_eq!(d.sizes, vec![3, 4]);
    }

    #[test]
    fn edge_order_does_not_matter() {
        let a = [edge(0, 1, 1.0), edge(2, 3, 1.0), edge(1, 2, 1.0), edge(3, 4, 5.0), edge(4, 5, 1.0)];
        let mut b = a;
        b.reverse();
        let ta = condense(&a, 6, 2);
        let tb = condense(&b, 6, 2);
        assert_eq!(ta.labeling(&select_clusters(&ta, false)), tb.labeling(&select_clusters(&tb, false)));
    }

    #[test]
    fn single_split_into_two_clusters() {
        // {0,1,2} and {3,4,5} tight, joined at height 10
        let mst = [
            edge(0, 1, 1.0),
            edge(1, 2, 1.0),
            edge(3, 4, 1.0),
            edge(4, 5, 1.0),
            edge(2, 3, 10.0),
        ];
        let t = condense(&mst, 6, 3);
        assert_eq!(t.clusters.len(), 3);
        let sel = select_clusters(&t, false);
        assert_eq!(sel, vec![1, 2]);
        assert_eq!(t.labeling(&sel).labels, vec![0, 0, 0, 1, 1, 1]);
        // stability of child: 3 points × (1/1 - 1/10)
        assert!((t.clusters[1].stability - 2.7).abs() < 1e-12);
    }

    #[test]
    fn root_only_with_allow_single_cluster() {
        let mst = [edge(0, 1, 1.0), edge(1, 2, 1.0), edge(2, 3, 1.0)];
        let t = condense(&mst, 4, 2);
        assert!(select_clusters(&t, false).is_empty());
        assert_eq!(select_clusters(&t, true), vec![0]);
        assert_eq!(t.labeling(&[0]).labels, vec![0; 4]);
    }
}
