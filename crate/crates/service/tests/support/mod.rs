#![allow(dead_code)]

pub mod scenarios;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use perspectra_core::providers::{Embedder, MockEmbedder, ProviderError, Providers};
use perspectra_core::synthetic::topic_corpus;
use perspectra_service::api::router;
use perspectra_service::Service;
use serde_json::{json, Value};
use tower::ServiceExt;

pub fn topic_jsonl(topics: usize, per_topic: usize, seed: u64) -> String {
    topic_corpus(topics, per_topic, seed)
        .into_iter()
        .enumerate()
        .map(|(i, (text, label))| json!({"id": format!("doc{i:03}"), "text": text, "label": label}).to_string() + "\n")
        .collect()
}

pub fn perspective_body(corpus_id: &str, id: &str) -> Value {
    json!({
        "id": id,
        "corpus_id": corpus_id,
        "instruction": "Identify the topic",
        "cluster": {"min_samples": 5, "min_cluster_size": 15},
        "cluster_dims": 8,
        "seed": 3,
    })
}

/// Mock embedder that blocks inside `embed_batch` while `hold` is set.
pub struct GatedEmbedder {
    inner: MockEmbedder,
    pub hold: AtomicBool,
    pub entered: AtomicBool,
}

impl GatedEmbedder {
    pub fn new(dim: usize) -> Arc<Self> {
        Arc::new(Self {
            inner: MockEmbedder::new(dim),
            hold: AtomicBool::new(false),
            entered: AtomicBool::new(false),
        })
    }
}

impl Embedder for GatedEmbedder {
    fn model(&self) -> &str {
        self.inner.model()
    }

    fn embed_batch(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        self.entered.store(true, Ordering::SeqCst);
        while self.hold.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(5));
        }
        self.inner.embed_batch(inputs)
    }
}

pub fn gated_providers(gate: &Arc<GatedEmbedder>) -> Providers {
    Providers {
        embedder: Arc::clone(gate) as Arc<dyn Embedder>,
        ..Providers::mock(64)
    }
}

pub struct Api {
    pub svc: Arc<Service>,
    pub app: Router,
}

impl Api {
    pub fn new(svc: Arc<Service>) -> Self {
        let app = router(Arc::clone(&svc));
        Self { svc, app }
    }

    pub async fn raw(&self, method: Method, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(Body::from(body))
            .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
        (status, bytes.to_vec())
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Value) {
        let (s, b) = self.raw(Method::GET, uri, Vec::new()).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    pub async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        let (s, b) = self.raw(Method::POST, uri, serde_json::to_vec(&body).unwrap()).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    pub async fn ingest(&self, id: &str, jsonl: &str) {
        let (s, v) = self.raw(Method::POST, &format!("/corpora?id={id}"), jsonl.as_bytes().to_vec()).await;
        assert_eq!(s, StatusCode::CREATED, "{}", String::from_utf8_lossy(&v));
    }

    pub async fn create(&self, corpus: &str, pid: &str) {
        let (s, v) = self.post("/perspectives", perspective_body(corpus, pid)).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
    }

    /// Polls a job to completion, returning the final record and every
    /// progress value seen.
    pub async fn wait_job(&self, id: &str) -> (Value, Vec<(String, f64)>) {
        let mut seen = Vec::new();
        loop {
            let (s, rec) = self.get(&format!("/jobs/{id}")).await;
            assert_eq!(s, StatusCode::OK);
            let status = rec["status"].as_str().unwrap().to_string();
            seen.push((status.clone(), rec["progress"].as_f64().unwrap()));
            if status == "done" || status == "failed" {
                return (rec, seen);
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    pub async fn build(&self, pid: &str) -> Value {
        let (s, job) = self.post(&format!("/perspectives/{pid}/build"), json!({})).await;
        assert_eq!(s, StatusCode::ACCEPTED, "{job}");
        let (rec, _) = self.wait_job(job["id"].as_str().unwrap()).await;
        assert_eq!(rec["status"], "done", "{rec}");
        rec
    }

    pub async fn map_bytes(&self, pid: &str) -> Vec<u8> {
        let (s, b) = self.raw(Method::GET, &format!("/perspectives/{pid}/map"), Vec::new()).await;
        assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
        b
    }
}

/// Partition and acceptance checks on a /map payload.
pub fn check_map(map: &Value, n_docs: usize) {
    let points = map["points"].as_array().unwrap();
    assert_eq!(points.len(), n_docs);
    let mut sizes = std::collections::BTreeMap::<i64, usize>::new();
    for p in points {
        let c = p["cluster_id"].as_i64().unwrap();
        if c >= 0 {
            *sizes.entry(c).or_default() += 1;
        } else {
            assert!(!p["accepted"].as_bool().unwrap(), "accepted outlier {p}");
        }
    }
    let outliers = points.len() - sizes.values().sum::<usize>();
    assert_eq!(map["n_outliers"].as_u64().unwrap() as usize, outliers);
    let listed: std::collections::BTreeMap<i64, usize> = map["clusters"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["size"].as_u64().unwrap() > 0)
        .map(|c| (c["id"].as_i64().unwrap(), c["size"].as_u64().unwrap() as usize))
        .collect();
    assert_eq!(listed, sizes);
}

pub fn clusters_by_size(map: &Value) -> Vec<(i64, usize)> {
    let mut v: Vec<(i64, usize)> = map["clusters"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["id"].as_i64().unwrap(), c["size"].as_u64().unwrap() as usize))
        .filter(|&(_, s)| s > 0)
        .collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}
