//! Deterministic offline stand-ins for the model endpoints.

use serde_json::{json, Value};
use unicode_segmentation::UnicodeSegmentation;

use super::{format_input, Embedder, Generator, ProviderError, DEFAULT_TEMPLATE};

pub const MOCK_MODEL: &str = "mock";

/// Lowercased unicode words.
pub fn mock_tokens(text: &str) -> Vec<String> {
    text.unicode_words().map(str::to_lowercase).collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bucket index and sign of `token` for a `d`-dimensional mock vector.
pub fn mock_bucket(token: &str, d: usize) -> (usize, f64) {
    let h = fnv1a(token.as_bytes());
    let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
    ((h % d as u64) as usize, sign)
}

/// Signed feature hashing of the unigram tokens of the formatted input,
/// L2-normalised. Inputs whose buckets cancel out map to a unit vector
/// chosen by hashing the whole input.
pub fn mock_embed(text: &str, instruction: Option<&str>, d: usize) -> Vec<f64> {
    assert!(d >= 2, "mock embeddings need d >= 2");
    embed_formatted(&format_input(DEFAULT_TEMPLATE, instruction, text), d)
}

fn embed_formatted(input: &str, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for t in mock_tokens(input) {
        let (i, s) = mock_bucket(&t, d);
        v[i] += s;
    }
    let n = crate::geometry::norm(&v);
    if n == 0.0 {
        v[(fnv1a(input.as_bytes()) % d as u64) as usize] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

#[derive(Clone, Debug)]
pub struct MockEmbedder {
    pub dim: usize,
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 2, "mock embeddings need d >= 2");
        Self { dim }
    }
}

impl Embedder for MockEmbedder {
    fn model(&self) -> &str {
        MOCK_MODEL
    }

    fn embed_batch(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(inputs.iter().map(|s| embed_formatted(s, self.dim)).collect())
    }
}

/// Rules, in order:
/// - with a schema and a `Keywords:` line: `{"title": first three keywords
///   joined by spaces, "description": "Documents about ..."}`;
/// - with a `Document:` section: the first five tokens of the document;
/// - otherwise the first five tokens of the prompt.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockGenerator;

pub(crate) const DOCUMENT_MARKER: &str = "\n\nDocument:\n";

fn first_tokens(text: &str, n: usize) -> String {
    text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

impl Generator for MockGenerator {
    fn complete(&self, prompt: &str, _max_tokens: usize, schema: Option<&Value>) -> Result<String, ProviderError> {
        if schema.is_some() {
            let keywords: Vec<&str> = prompt
                .lines()
                .find_map(|l| l.strip_prefix("Keywords:"))
                .map(|rest| rest.split(',').map(str::trim).filter(|k| !k.is_empty()).collect())
                .unwrap_or_default();
            let title = if keywords.is_empty() {
                first_tokens(prompt, 5)
            } else {
                keywords[..keywords.len().min(3)].join(" ")
            };
            let description = format!("Documents about {}.", keywords[..keywords.len().min(3)].join(", "));
            return Ok(json!({ "title": title, "description": description }).to_string());
        }
        let body = prompt.split_once(DOCUMENT_MARKER).map_or(prompt, |(_, doc)| doc);
        Ok(first_tokens(body, 5))
    }
}
