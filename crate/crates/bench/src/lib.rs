//! Fixtures shared by the criterion benches.

use perspectra_core::clustering::ClusterConfig;
use perspectra_core::corpus::{Corpus, Document};
use perspectra_core::pipeline::{build, Perspective, Silent};
use perspectra_core::providers::Providers;
use perspectra_core::refine::ClusteringState;
use perspectra_core::synthetic::topic_corpus;

pub fn topic_fixture(topics: usize, per_topic: usize) -> Corpus {
    let docs = topic_corpus(topics, per_topic, 9)
        .into_iter()
        .enumerate()
        .map(|(i, (t, label))| Document::new(format!("doc{i}"), t).with_meta("label", &label))
        .collect();
    Corpus::new("bench", "bench", docs).unwrap()
}

pub fn topic_perspective() -> Perspective {
    let mut p = Perspective::new("p", "bench", "topic", "Identify the topic").unwrap();
    p.cluster = ClusterConfig::new(5, 15);
    p.cluster_dims = 8;
    p
}

/// A built state on the mock provider, ready for refinement ops.
pub fn built_state(corpus: &Corpus, p: &Perspective, providers: &Providers) -> ClusteringState {
    build(p, corpus, providers, None, 0, 0, &Silent).unwrap().state
}
