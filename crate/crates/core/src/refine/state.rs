use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::Op;
use crate::clustering::{ClusterId, Labeling, OUTLIER};
use crate::geometry::norm;
use crate::pipeline::Geometry;
use crate::representation::ClusterRepresentation;

/// One version of a perspective's clustering.
#[derive(Clone, Debug)]
pub struct ClusteringState {
    pub version: u64,
    pub labeling: Labeling,
    pub representations: BTreeMap<ClusterId, ClusterRepresentation>,
    pub accepted: BTreeSet<String>,
    pub next_cluster_id: ClusterId,
    pub geometry: Arc<Geometry>,
}

/// The versioned part of a state; matrices are referenced by generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateContent {
    pub labeling: Labeling,
    pub representations: BTreeMap<ClusterId, ClusterRepresentation>,
    pub accepted: BTreeSet<String>,
    pub next_cluster_id: ClusterId,
    pub generation: u64,
}

impl ClusteringState {
    pub fn content(&self) -> StateContent {
        StateContent {
            labeling: self.labeling.clone(),
            representations: self.representations.clone(),
            accepted: self.accepted.clone(),
            next_cluster_id: self.next_cluster_id,
            generation: self.geometry.generation,
        }
    }

    pub fn from_content(version: u64, content: StateContent, geometry: Arc<Geometry>) -> Self {
        assert_eq!(content.generation, geometry.generation, "geometry generation mismatch");
        Self {
            version,
            labeling: content.labeling,
            representations: content.representations,
            accepted: content.accepted,
            next_cluster_id: content.next_cluster_id,
            geometry,
        }
    }

    pub fn n_docs(&self) -> usize {
        self.labeling.labels.len()
    }

    pub fn cluster_of(&self, doc_id: &str) -> Option<ClusterId> {
        self.geometry.index_of(doc_id).map(|i| self.labeling.labels[i])
    }

    pub fn member_ids(&self, cluster: ClusterId) -> Vec<String> {
        self.labeling
            .members(cluster)
            .into_iter()
            .map(|i| self.geometry.ids[i].clone())
            .collect()
    }

    /// Partition, acceptance and representation-shape invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        let g = &self.geometry;
        let n = g.ids.len();
        if self.labeling.labels.len() != n {
            return Err(format!("{} labels for {n} documents", self.labeling.labels.len()));
        }
        let mut sizes: BTreeMap<ClusterId, usize> = BTreeMap::new();
        for &l in &self.labeling.labels {
            if l < OUTLIER {
                return Err(format!("invalid label {l}"));
            }
            if l != OUTLIER {
                *sizes.entry(l).or_insert(0) += 1;
            }
        }
        let clustered: usize = sizes.values().sum();
        if clustered + self.labeling.n_outliers() != n {
            return Err("cluster sizes and outliers do not add up to n".into());
        }
        for (c, size) in &sizes {
            let r = self
                .representations
                .get(c)
                .ok_or_else(|| format!("cluster {c} has members but no representation"))?;
            if r.size != *size {
                return Err(format!("cluster {c} representation size {} but {size} members", r.size));
            }
        }
        for (c, r) in &self.representations {
            if *c == OUTLIER {
                return Err("outliers must not have a representation".into());
            }
            if r.cluster_id != *c {
                return Err(format!("representation keyed {c} claims id {}", r.cluster_id));
            }
            if *c >= self.next_cluster_id {
                return Err(format!("cluster {c} not below next id {}", self.next_cluster_id));
            }
            if r.size == 0 && sizes.contains_key(c) {
                return Err(format!("cluster {c} marked empty but has members"));
            }
            if r.size > 0 && !sizes.contains_key(c) {
                return Err(format!("cluster {c} has a representation but no members"));
            }
            if (norm(&r.centroid) - 1.0).abs() > 1e-6 {
                return Err(format!("cluster {c} centroid is not unit norm"));
            }
            for id in &r.representative_doc_ids {
                match g.index_of(id) {
                    Some(i) if self.labeling.labels[i] == *c => {}
                    _ => return Err(format!("representative {id:?} is not a member of cluster {c}")),
                }
            }
            if r.keywords.iter().any(|(_, s)| *s < 0.0) {
                return Err(format!("cluster {c} has negative keyword scores"));
            }
            if r.keywords.windows(2).any(|w| w[0].1 < w[1].1) {
                return Err(format!("cluster {c} keywords not sorted"));
            }
        }
        for id in &self.accepted {
            match g.index_of(id) {
                None => return Err(format!("accepted document {id:?} does not exist")),
                Some(i) if self.labeling.labels[i] == OUTLIER => {
                    return Err(format!("accepted document {id:?} is an outlier"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub op: Op,
    pub timestamp_ms: u64,
}

impl OpRecord {
    pub fn now(op: Op) -> Self {
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Self { op, timestamp_ms }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u64,
    pub content: StateContent,
    pub op: OpRecord,
}

/// Linear, append-only list of snapshots plus the geometries they use.
#[derive(Clone, Debug, Default)]
pub struct History {
    snapshots: Vec<Snapshot>,
    geometries: BTreeMap<u64, Arc<Geometry>>,
}

impl History {
    pub fn push(&mut self, state: ClusteringState, op: Op) {
        if let Some(last) = self.snapshots.last() {
            assert!(state.version > last.version, "versions must increase");
        }
        self.geometries
            .entry(state.geometry.generation)
            .or_insert_with(|| Arc::clone(&state.geometry));
        self.snapshots.push(Snapshot {
            version: state.version,
            content: state.content(),
            op: OpRecord::now(op),
        });
    }

    /// Reassembles a history from stored parts.
    pub fn from_parts(snapshots: Vec<Snapshot>, geometries: BTreeMap<u64, Arc<Geometry>>) -> Result<Self, String> {
        for w in snapshots.windows(2) {
            if w[1].version <= w[0].version {
                return Err("snapshot versions must increase".into());
            }
        }
        for s in &snapshots {
            if !geometries.contains_key(&s.content.generation) {
                return Err(format!("missing geometry generation {}", s.content.generation));
            }
        }
        Ok(Self { snapshots, geometries })
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn geometries(&self) -> &BTreeMap<u64, Arc<Geometry>> {
        &self.geometries
    }

    pub fn latest_version(&self) -> u64 {
        self.snapshots.last().map_or(0, |s| s.version)
    }

    pub fn latest_generation(&self) -> u64 {
        self.geometries.keys().next_back().copied().unwrap_or(0)
    }

    pub fn get(&self, version: u64) -> Option<ClusteringState> {
        let i = self.snapshots.binary_search_by_key(&version, |s| s.version).ok()?;
        let s = &self.snapshots[i];
        let g = Arc::clone(&self.geometries[&s.content.generation]);
        Some(ClusteringState::from_content(s.version, s.content.clone(), g))
    }

    pub fn latest(&self) -> ClusteringState {
        self.get(self.latest_version()).expect("history is not empty")
    }

    pub fn ops(&self) -> Vec<Op> {
        self.snapshots.iter().map(|s| s.op.op.clone()).collect()
    }
}
