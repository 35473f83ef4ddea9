use std::path::Path;

use axum::http::{Method, StatusCode};
use perspectra_core::providers::Providers;
use perspectra_service::store::ProjectStore;
use perspectra_service::Service;
use serde_json::{json, Value};

use super::*;

fn labels_of(map: &Value) -> Vec<(String, i64)> {
    map["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| (p["doc_id"].as_str().unwrap().to_string(), p["cluster_id"].as_i64().unwrap()))
        .collect()
}

/// ingest, build, map, merge, split, accept, revert, search, export-tags
/// and reload, all through the HTTP router.
pub async fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::new(Service::open(dir.path(), Providers::mock(64)).unwrap());
    api.ingest("topics", &topic_jsonl(3, 60, 9)).await;
    let (s, list) = api.get("/corpora").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(list[0]["n_docs"], 180);
    api.create("topics", "p").await;

    let (s, job) = api.post("/perspectives/p/build", json!({})).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let (rec, seen) = api.wait_job(job["id"].as_str().unwrap()).await;
    assert_eq!(rec["status"], "done", "{rec}");
    assert_eq!(rec["kind"], "build");
    for w in seen.windows(2) {
        assert!(w[1].1 >= w[0].1, "progress went backwards: {seen:?}");
    }
    assert_eq!(rec["progress"], 1.0);

    let (_, info) = api.get("/perspectives/p").await;
    assert_eq!(info["status"], json!({"state": "built", "version": 0}));

    // map is byte-stable between mutations
    let m0 = api.map_bytes("p").await;
    assert_eq!(m0, api.map_bytes("p").await);
    let map0: Value = serde_json::from_slice(&m0).unwrap();
    check_map(&map0, 180);
    let big = clusters_by_size(&map0);
    assert!(big.len() >= 2, "{big:?}");

    // merge the two largest clusters
    let (a, b) = (big[0].0, big[1].0);
    let (s, r) = api.post("/perspectives/p/ops/merge", json!({"a": a, "b": b})).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    assert_eq!(r["version"], 1);
    let map1: Value = serde_json::from_slice(&api.map_bytes("p").await).unwrap();
    check_map(&map1, 180);
    let merged_size = big[0].1 + big[1].1;
    let merged = clusters_by_size(&map1).into_iter().find(|&(_, s)| s == merged_size);
    let (merged_id, _) = merged.expect("merged cluster present");

    // split it back
    let (s, r) = api.post("/perspectives/p/ops/split", json!({"cluster": merged_id})).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    let map2: Value = serde_json::from_slice(&api.map_bytes("p").await).unwrap();
    check_map(&map2, 180);
    let split_version = r["version"].as_u64().unwrap();
    assert!(split_version >= 1);

    // accept a few docs, then revert to the initial build
    let accept: Vec<String> = map2["points"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| p["cluster_id"].as_i64().unwrap() >= 0)
        .take(4)
        .map(|p| p["doc_id"].as_str().unwrap().to_string())
        .collect();
    let (s, r) = api.post("/perspectives/p/ops/accept", json!({"doc_ids": accept})).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    let (s, r) = api.post("/perspectives/p/ops/revert", json!({"version": 0})).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    let latest = r["version"].as_u64().unwrap();
    let map3: Value = serde_json::from_slice(&api.map_bytes("p").await).unwrap();
    check_map(&map3, 180);
    assert_eq!(labels_of(&map3), labels_of(&map0));
    assert_eq!(map3["clusters"], map0["clusters"]);
    assert!(map3["points"].as_array().unwrap().iter().all(|p| p["accepted"] == false));

    // history browsing
    let (s, v1) = api.get("/perspectives/p/map?version=1").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(labels_of(&v1), labels_of(&map1));
    let (s, _) = api.get("/perspectives/p/map?version=999").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (_, hist) = api.get("/perspectives/p/history").await;
    let ops: Vec<&str> = hist.as_array().unwrap().iter().map(|h| h["op"]["kind"].as_str().unwrap()).collect();
    assert_eq!(ops.first(), Some(&"build"));
    assert_eq!(ops.last(), Some(&"revert"));
    assert_eq!(hist.as_array().unwrap().last().unwrap()["version"].as_u64(), Some(latest));

    // search is corpus.filter
    let (s, hits) = api.get("/perspectives/p/search?q=the").await;
    assert_eq!(s, StatusCode::OK);
    let corpus: perspectra_core::corpus::Corpus = api.svc.store().load_corpus("topics").unwrap();
    assert_eq!(
        hits,
        json!(corpus.filter(Some("the"), &Default::default()))
    );
    let label = corpus.documents[0].label().unwrap().to_string();
    let (_, hits) = api.get(&format!("/perspectives/p/search?meta=label:{label}")).await;
    assert_eq!(hits.as_array().unwrap().len(), 60);

    // export tags: every clustered doc tagged with its cluster's name
    let (s, tags) = api.post("/perspectives/p/export-tags", json!({})).await;
    assert_eq!(s, StatusCode::OK, "{tags}");
    let names: std::collections::BTreeMap<i64, String> = map3["clusters"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["id"].as_i64().unwrap(), c["name"].as_str().unwrap().to_string()))
        .collect();
    for (doc, c) in labels_of(&map3) {
        let t = tags.get(&doc).cloned().unwrap_or(json!([]));
        if c < 0 {
            assert_eq!(t, json!([]), "{doc}");
        } else {
            assert_eq!(t, json!([names[&c]]), "{doc}");
        }
    }
    let stored = api.svc.store().load_corpus("topics").unwrap();
    assert_eq!(json!(stored.tag_assignments), tags);

    // doc details and selection keywords
    let (s, d) = api.get("/perspectives/p/docs/doc000").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(d["text"], corpus.documents[0].text);
    let (s, kw) = api.post("/perspectives/p/selection", json!({"doc_ids": ["doc000", "doc003"], "top_n": 3})).await;
    assert_eq!(s, StatusCode::OK, "{kw}");
    assert!(kw["keywords"].as_array().unwrap().len() <= 3);

    // a fresh process sees the same map
    let before = api.map_bytes("p").await;
    let api2 = Api::new(Service::open(dir.path(), Providers::mock(64)).unwrap());
    assert_eq!(api2.map_bytes("p").await, before);
    for h in hist.as_array().unwrap() {
        let v = h["version"].as_u64().unwrap();
        let (s, a) = api.raw(Method::GET, &format!("/perspectives/p/map?version={v}"), vec![]).await;
        let (s2, b) = api2.raw(Method::GET, &format!("/perspectives/p/map?version={v}"), vec![]).await;
        assert_eq!((s, s2), (StatusCode::OK, StatusCode::OK));
        assert_eq!(a, b, "version {v} differs after reload");
    }
}

pub fn temp_files(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap().flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(temp_files(&p));
        } else if p.to_string_lossy().ends_with(".tmp") {
            out.push(p.display().to_string());
        }
    }
    out
}

/// Reopens the project as a new process would and checks every stored
/// version of `pid`. Returns the latest version.
pub fn verify_store(root: &Path, pid: &str) -> u64 {
    let store = ProjectStore::open(root).unwrap();
    assert!(temp_files(root).is_empty(), "stale temp files after open");
    let corpus = store.load_corpus("topics").unwrap();
    let history = store.load_history(pid).unwrap().expect("perspective was built");
    for s in history.snapshots() {
        let st = history.get(s.version).unwrap();
        st.check_invariants().unwrap_or_else(|e| panic!("version {}: {e}", s.version));
        assert_eq!(st.geometry.meta.doc_order_hash, corpus.doc_order_hash());
    }
    let latest = history.latest();
    let raw = store.load_raw_embeddings(pid, &corpus.doc_order_hash()).unwrap();
    assert_eq!(raw.rows(), corpus.len());
    latest.version
}

/// Faults injected at every write of ops and builds never leave a
/// perspective unreadable or inconsistent.
pub async fn crash_injection() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::new(Service::open(dir.path(), Providers::mock(64)).unwrap());
    api.ingest("topics", &topic_jsonl(3, 60, 9)).await;
    api.create("topics", "p").await;
    api.build("p").await;
    let map = serde_json::from_slice(&api.map_bytes("p").await).unwrap();
    let big = clusters_by_size(&map);
    let (s, _) = api.post("/perspectives/p/ops/merge", json!({"a": big[0].0, "b": big[1].0})).await;
    assert_eq!(s, StatusCode::OK);
    let mut version = verify_store(dir.path(), "p");
    assert_eq!(version, 1);
    let faults = || api.svc.store().faults();

    // ops: the snapshot is the one write that matters
    let docs: Vec<String> = map["points"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| p["cluster_id"].as_i64().unwrap() >= 0)
        .take(3)
        .map(|p| p["doc_id"].as_str().unwrap().to_string())
        .collect();
    for (nth, op, body) in [
        (1, "accept", json!({"doc_ids": docs})),
        (2, "accept", json!({"doc_ids": docs})),
        (1, "revert", json!({"version": 0})),
    ] {
        let before = api.map_bytes("p").await;
        faults().arm(nth);
        let (s, v) = api.post(&format!("/perspectives/p/ops/{op}"), body).await;
        faults().disarm();
        if nth == 1 {
            assert_eq!(s, StatusCode::INTERNAL_SERVER_ERROR, "{v}");
            assert_eq!(api.map_bytes("p").await, before, "failed op must not change the state");
        } else {
            // the clusters.json copy failed; the op itself is durable
            assert_eq!(s, StatusCode::OK, "{v}");
            version += 1;
        }
        assert_eq!(verify_store(dir.path(), "p"), version);
        let fresh = Api::new(Service::open(dir.path(), Providers::mock(64)).unwrap());
        assert_eq!(fresh.map_bytes("p").await, api.map_bytes("p").await);
    }

    // builds: every write up to and including the snapshot is fatal
    let mut failed = 0;
    for nth in 1..=12 {
        let before = api.map_bytes("p").await;
        faults().arm(nth);
        let (_, job) = api.post("/perspectives/p/build", json!({})).await;
        let (rec, _) = api.wait_job(job["id"].as_str().unwrap()).await;
        faults().disarm();
        if rec["status"] == "failed" {
            failed += 1;
            assert!(rec["error"].as_str().unwrap().contains("injected fault"), "{rec}");
            assert_eq!(api.map_bytes("p").await, before);
        } else {
            version += 1;
        }
        assert_eq!(verify_store(dir.path(), "p"), version, "after fault at write {nth}");
        let fresh = Api::new(Service::open(dir.path(), Providers::mock(64)).unwrap());
        assert_eq!(fresh.map_bytes("p").await, api.map_bytes("p").await, "after fault at write {nth}");
    }
    assert_eq!(failed, 10, "a build makes ten essential writes");

    // still fully usable afterwards
    let (s, _) = api.post("/perspectives/p/ops/revert", json!({"version": 1})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(verify_store(dir.path(), "p"), version + 1);
}

