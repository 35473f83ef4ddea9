use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Key over everything that determines an embedding: model, the formatted
/// instruction template and the text.
pub fn cache_key(model: &str, instruction: Option<&str>, template: &str, text: &str) -> String {
    let mut h = Sha256::new();
    for part in [model, instruction.unwrap_or(""), template, text] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    vector: Vec<f32>,
}

/// Embedding cache persisted as JSON lines. Vectors are stored as f32, the
/// same precision as every other persisted matrix.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingCache {
    map: HashMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.map.get(key).map(Vec::as_slice)
    }

    pub fn insert(&mut self, key: String, vector: Vec<f64>) {
        self.map.insert(key, vector);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let mut cache = Self::default();
        if !path.exists() {
            return Ok(cache);
        }
        for line in BufReader::new(fs::File::open(path)?).lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let e: Entry = serde_json::from_str(&line)?;
            cache.map.insert(e.key, e.vector.into_iter().map(f64::from).collect());
        }
        Ok(cache)
    }

    /// Writes to a temporary file and renames it over `path`.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            let mut keys: Vec<&String> = self.map.keys().collect();
            keys.sort();
            for k in keys {
                let e = Entry {
                    key: k.clone(),
                    vector: self.map[k].iter().map(|&v| v as f32).collect(),
                };
                serde_json::to_writer(&mut f, &e)?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
        }
        fs::rename(tmp, path)
    }
}
