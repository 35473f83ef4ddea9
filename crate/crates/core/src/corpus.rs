//! Documents, JSONL ingestion, search and tag bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Metadata key that carries the gold class for evaluation.
pub const LABEL_KEY: &str = "label";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("document text must not be empty ({0})")]
    EmptyText(String),
    #[error("tag names must not be empty")]
    EmptyTag,
    #[error("unknown document id {0:?}")]
    UnknownDoc(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: &str) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn label(&self) -> Option<&str> {
        self.metadata.get(LABEL_KEY).map(String::as_str)
    }
}

/// Which JSON fields feed a [`Document`]. Every other field becomes
/// metadata unless `metadata` names an explicit subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMapping {
    pub text: String,
    pub id: String,
    pub metadata: Option<Vec<String>>,
}

impl Default for FieldMapping {
    fn default() -> Self {
        Self {
            text: "text".into(),
            id: "id".into(),
            metadata: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionReport {
    /// 1-based line numbers of rejected lines.
    pub empty_text_lines: Vec<usize>,
}

impl RejectionReport {
    pub fn rejected(&self) -> usize {
        self.empty_text_lines.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub id: String,
    pub name: String,
    pub documents: Vec<Document>,
    #[serde(default)]
    pub tag_assignments: BTreeMap<String, Vec<String>>,
}

fn value_to_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Reads one JSON object per line. Blank lines are skipped; documents
/// without an id get their zero-based line ordinal, zero-padded to 6 digits.
pub fn ingest_jsonl<R: BufRead>(
    reader: R,
    mapping: &FieldMapping,
) -> Result<(Vec<Document>, RejectionReport), CorpusError> {
    let mut docs = Vec::new();
    let mut report = RejectionReport::default();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| CorpusError::Line { line: line_no, message };
        let obj: Map<String, Value> = match serde_json::from_str(&line) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err(err("expected a JSON object".into())),
            Err(e) => return Err(err(format!("malformed JSON: {e}"))),
        };
        let text = match obj.get(&mapping.text) {
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(err(format!("field {:?} is not a string", mapping.text))),
            None => return Err(err(format!("missing text field {:?}", mapping.text))),
        };
        if text.trim().is_empty() {
            report.empty_text_lines.push(line_no);
            continue;
        }
        let id = match obj.get(&mapping.id) {
            Some(v) => value_to_string(v),
            None => format!("{idx:06}"),
        };
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId(id));
        }
        let metadata = obj
            .iter()
            .filter(|(k, _)| *k != &mapping.text && *k != &mapping.id)
            .filter(|(k, _)| mapping.metadata.as_ref().map_or(true, |keep| keep.contains(k)))
            .map(|(k, v)| (k.clone(), value_to_string(v)))
            .collect();
        docs.push(Document { id, text, metadata });
    }
    Ok((docs, report))
}

impl Corpus {
    pub fn new(id: impl Into<String>, name: impl Into<String>, documents: Vec<Document>) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for d in &documents {
            if d.text.is_empty() {
                return Err(CorpusError::EmptyText(d.id.clone()));
            }
            if !seen.insert(d.id.as_str()) {
                return Err(CorpusError::DuplicateId(d.id.clone()));
            }
        }
        Ok(Self {
            id: id.into(),
            name: name.into(),
            documents,
            tag_assignments: BTreeMap::new(),
        })
    }

    pub fn from_texts<S: AsRef<str>>(id: &str, texts: &[S]) -> Self {
        let docs = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document::new(format!("{i:06}"), t.as_ref()))
            .collect();
        Self::new(id, id, docs).expect("generated ids are unique")
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.documents.iter().map(|d| d.id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.documents.iter().position(|d| d.id == id)
    }

    /// Row order fingerprint stored next to every matrix.
    pub fn doc_order_hash(&self) -> String {
        doc_order_hash(self.documents.iter().map(|d| d.id.as_str()))
    }

    /// Ids of documents whose text contains `query` (case-insensitive) and
    /// whose metadata matches every `metadata_eq` pair.
    pub fn filter(&self, query: Option<&str>, metadata_eq: &BTreeMap<String, String>) -> Vec<String> {
        let needle = query.map(str::to_lowercase);
        self.documents
            .iter()
            .filter(|d| needle.as_ref().map_or(true, |q| d.text.to_lowercase().contains(q.as_str())))
            .filter(|d| metadata_eq.iter().all(|(k, v)| d.metadata.get(k) == Some(v)))
            .map(|d| d.id.clone())
            .collect()
    }

    /// Adds `(doc_id, tag)` pairs on top of the existing assignments,
    /// skipping tags a document already has.
    pub fn merge_tags<'a>(
        &self,
        new: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<BTreeMap<String, Vec<String>>, CorpusError> {
        let mut out = self.tag_assignments.clone();
        for (doc, tag) in new {
            if tag.trim().is_empty() {
                return Err(CorpusError::EmptyTag);
            }
            if self.index_of(doc).is_none() {
                return Err(CorpusError::UnknownDoc(doc.to_string()));
            }
            let tags = out.entry(doc.to_string()).or_default();
            if !tags.iter().any(|t| t == tag) {
                tags.push(tag.to_string());
            }
        }
        Ok(out)
    }

    /// Inverse of [`ingest_jsonl`] with the default mapping.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for d in &self.documents {
            let mut obj = Map::new();
            obj.insert("id".into(), Value::String(d.id.clone()));
            obj.insert("text".into(), Value::String(d.text.clone()));
            for (k, v) in &d.metadata {
                obj.insert(k.clone(), Value::String(v.clone()));
            }
            serde_json::to_writer(&mut out, &Value::Object(obj))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn doc_order_hash<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
