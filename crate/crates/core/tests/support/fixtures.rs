#![allow(dead_code)]

use perspectra_core::clustering::{ClusterConfig, ClusterId, Labeling};
use perspectra_core::geometry::Matrix;
use perspectra_core::pipeline::{initial_state, Geometry, Perspective, Silent};
use perspectra_core::providers::Providers;
use perspectra_core::refine::{ClusteringState, RefineContext, Session, Op};

pub fn perspective() -> Perspective {
    let mut p = Perspective::new("p", "c", "test", "Identify the topic").unwrap();
    p.cluster = ClusterConfig::new(5, 5);
    p
}

/// A built state over hand-given embeddings; `reduced` defaults to the
/// embeddings themselves and the map to their first two coordinates.
pub fn hand_state(
    embeddings: Matrix,
    reduced: Option<Matrix>,
    labels: Vec<ClusterId>,
    texts: Vec<String>,
    providers: &Providers,
    p: &Perspective,
) -> ClusteringState {
    let n = embeddings.rows();
    let ids: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
    let reduced = reduced.unwrap_or_else(|| embeddings.clone());
    let map: Vec<Vec<f64>> = reduced.iter_rows().map(|r| vec![r[0], *r.get(1).unwrap_or(&0.0)]).collect();
    let g = Geometry::fixed(ids, texts, embeddings, reduced, Matrix::from_rows(&map).unwrap());
    initial_state(p, g, Labeling { labels }, 0, providers, &Silent).unwrap()
}

pub fn session(state: ClusteringState) -> Session {
    Session::new(state, Op::Build { generation: 0 })
}

pub fn ctx<'a>(providers: &'a Providers, p: &'a Perspective) -> RefineContext<'a> {
    RefineContext {
        providers,
        perspective: p,
    }
}

pub fn words(i: usize) -> String {
    const W: &[&str] = &["apple", "pear", "plum", "fig", "kiwi", "lime", "date", "peach"];
    format!("{} {} {}", W[i % W.len()], W[(i / 2) % W.len()], W[(i * 3 + 1) % W.len()])
}
