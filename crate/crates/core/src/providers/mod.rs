//! Embedding and text-generation clients.
//!
//! All model access goes through [`Embedder`] and [`Generator`]. [`embed`]
//! and [`generate`] add batching, retries, normalisation and output
//! validation on top of any implementation, and record every attempt in a
//! [`CallLog`].

mod cache;
mod http;
mod mock;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{normalize, Matrix};

pub use cache::{cache_key, EmbeddingCache};
pub use http::{HttpEmbedder, HttpGenerator};
pub use mock::{mock_bucket, mock_embed, mock_tokens, MockEmbedder, MockGenerator, MOCK_MODEL};

pub const DEFAULT_TEMPLATE: &str = "Instruct: {instruction}\nQuery: {text}";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("output failed schema validation after {attempts} attempts: {reason}; last output: {last_output}")]
    Schema {
        attempts: usize,
        reason: String,
        last_output: String,
    },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("cancelled")]
    Cancelled,
}

impl ProviderError {
    fn retryable(&self) -> bool {
        matches!(self, ProviderError::Transport(_))
    }
}

pub trait Embedder: Send + Sync {
    fn model(&self) -> &str;
    /// One vector per input, in order. Inputs are already formatted.
    fn embed_batch(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

pub trait Generator: Send + Sync {
    fn complete(&self, prompt: &str, max_tokens: usize, schema: Option<&Value>) -> Result<String, ProviderError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts per call, including the first.
    pub max_attempts: usize,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_ms: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub base_url: String,
    pub embedding_model: String,
    pub generation_model: String,
    pub batch_size: usize,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
    pub instruction_template: String,
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000".into(),
            embedding_model: "intfloat/multilingual-e5-large-instruct".into(),
            generation_model: "google/gemma-3-27b-it".into(),
            batch_size: 32,
            timeout_ms: 60_000,
            retry: RetryPolicy::default(),
            instruction_template: DEFAULT_TEMPLATE.into(),
            api_key: None,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.batch_size == 0 {
            return Err(ProviderError::Invalid("batch_size must be >= 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(ProviderError::Invalid("retry.max_attempts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn format_input(&self, instruction: Option<&str>, text: &str) -> String {
        format_input(&self.instruction_template, instruction, text)
    }
}

/// Applies the instruction template; without an instruction the text is
/// sent unchanged.
pub fn format_input(template: &str, instruction: Option<&str>, text: &str) -> String {
    match instruction {
        Some(inst) if !inst.is_empty() => template.replace("{instruction}", inst).replace("{text}", text),
        _ => text.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub texts: Vec<String>,
    pub instruction: Option<String>,
    pub normalize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub schema: Option<Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallKind {
    Embed,
    Generate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub kind: CallKind,
    /// Number of inputs sent (1 for generation).
    pub items: usize,
    /// 1-based attempt number for this call.
    pub attempt: usize,
    pub ok: bool,
}

/// Shared, append-only record of provider attempts.
#[derive(Clone, Debug, Default)]
pub struct CallLog(Arc<Mutex<Vec<CallRecord>>>);

impl CallLog {
    pub fn push(&self, r: CallRecord) {
        self.0.lock().expect("call log poisoned").push(r);
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.0.lock().expect("call log poisoned").clone()
    }

    pub fn attempts(&self, kind: CallKind) -> usize {
        self.records().iter().filter(|r| r.kind == kind).count()
    }
}

fn with_retry<T>(
    cfg: &ProviderConfig,
    log: &CallLog,
    kind: CallKind,
    items: usize,
    mut call: impl FnMut() -> Result<T, ProviderError>,
) -> Result<T, ProviderError> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        let res = call();
        log.push(CallRecord {
            kind,
            items,
            attempt,
            ok: res.is_ok(),
        });
        match res {
            Err(e) if e.retryable() && attempt < cfg.retry.max_attempts => {
                let wait = cfg.retry.backoff_ms.saturating_mul(1 << (attempt - 1).min(10));
                std::thread::sleep(Duration::from_millis(wait));
            }
            other => return other,
        }
    }
}

/// Embeds `req.texts` in batches of `cfg.batch_size`. `on_batch` is called
/// with `(done, total)` after each batch and may abort with an error.
pub fn embed(
    embedder: &dyn Embedder,
    req: &EmbeddingRequest,
    cfg: &ProviderConfig,
    log: &CallLog,
    on_batch: &mut dyn FnMut(usize, usize) -> Result<(), ProviderError>,
) -> Result<Matrix, ProviderError> {
    cfg.validate()?;
    if req.texts.is_empty() {
        return Err(ProviderError::Invalid("texts must not be empty".into()));
    }
    let inputs: Vec<String> = req
        .texts
        .iter()
        .map(|t| cfg.format_input(req.instruction.as_deref(), t))
        .collect();
    let total = inputs.len();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut dim = None;
    for chunk in inputs.chunks(cfg.batch_size) {
        let out = with_retry(cfg, log, CallKind::Embed, chunk.len(), || embedder.embed_batch(chunk))?;
        if out.len() != chunk.len() {
            return Err(ProviderError::Protocol(format!(
                "sent {} inputs, received {} vectors",
                chunk.len(),
                out.len()
            )));
        }
        for v in out {
            let d = *dim.get_or_insert(v.len());
            if v.len() != d || d == 0 {
                return Err(ProviderError::Protocol(format!("embedding dimension changed from {d} to {}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ProviderError::Protocol("embedding contains non-finite values".into()));
            }
            rows.push(v);
        }
        on_batch(rows.len(), total)?;
    }
    if req.normalize {
        for r in rows.iter_mut() {
            normalize(r);
        }
    }
    Matrix::from_rows(&rows).map_err(|e| ProviderError::Protocol(e.to_string()))
}

/// Runs a completion. With a schema, the output must parse as JSON and
/// validate; invalid outputs are retried up to `cfg.retry.max_attempts`
/// times in total.
pub fn generate(
    generator: &dyn Generator,
    req: &GenerationRequest,
    cfg: &ProviderConfig,
    log: &CallLog,
) -> Result<String, ProviderError> {
    cfg.validate()?;
    if req.max_tokens == 0 {
        return Err(ProviderError::Invalid("max_tokens must be >= 1".into()));
    }
    let Some(schema) = &req.schema else {
        return with_retry(cfg, log, CallKind::Generate, 1, || {
            generator.complete(&req.prompt, req.max_tokens, None)
        });
    };
    let validator = jsonschema::JSONSchema::compile(schema)
        .map_err(|e| ProviderError::Invalid(format!("bad schema: {e}")))?;
    let mut last = (String::new(), String::new());
    for _ in 0..cfg.retry.max_attempts {
        let out = with_retry(cfg, log, CallKind::Generate, 1, || {
            generator.complete(&req.prompt, req.max_tokens, Some(schema))
        })?;
        match serde_json::from_str::<Value>(&out) {
            Ok(v) => {
                let reason = match validator.validate(&v) {
                    Ok(()) => return Ok(out),
                    Err(errors) => errors.map(|e| e.to_string()).collect::<Vec<_>>().join("; "),
                };
                last = (out, reason);
            }
            Err(e) => last = (out, format!("not JSON: {e}")),
        }
    }
    Err(ProviderError::Schema {
        attempts: cfg.retry.max_attempts,
        reason: last.1,
        last_output: last.0,
    })
}

/// Embedder, generator, settings and shared log in one handle.
#[derive(Clone)]
pub struct Providers {
    pub embedder: Arc<dyn Embedder>,
    pub generator: Arc<dyn Generator>,
    pub config: ProviderConfig,
    pub log: CallLog,
    pub cache: Option<Arc<Mutex<EmbeddingCache>>>,
}

impl std::fmt::Debug for Providers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Providers")
            .field("embedding_model", &self.embedder.model())
            .field("config", &self.config)
            .finish()
    }
}

impl Providers {
    /// Deterministic offline providers with `dim`-dimensional embeddings.
    pub fn mock(dim: usize) -> Self {
        Self {
            embedder: Arc::new(MockEmbedder::new(dim)),
            generator: Arc::new(MockGenerator),
            config: ProviderConfig {
                embedding_model: MOCK_MODEL.into(),
                generation_model: MOCK_MODEL.into(),
                retry: RetryPolicy { max_attempts: 3, backoff_ms: 0 },
                ..Default::default()
            },
            log: CallLog::default(),
            cache: None,
        }
    }

    pub fn http(config: ProviderConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        Ok(Self {
            embedder: Arc::new(HttpEmbedder::new(&config)?),
            generator: Arc::new(HttpGenerator::new(&config)?),
            config,
            log: CallLog::default(),
            cache: None,
        })
    }

    pub fn with_cache(mut self, cache: EmbeddingCache) -> Self {
        self.cache = Some(Arc::new(Mutex::new(cache)));
        self
    }

    /// Normalised embeddings of `texts`, served from the cache where
    /// possible.
    pub fn embed_texts(
        &self,
        texts: &[String],
        instruction: Option<&str>,
        on_batch: &mut dyn FnMut(usize, usize) -> Result<(), ProviderError>,
    ) -> Result<Matrix, ProviderError> {
        let model = self.embedder.model().to_string();
        let keys: Vec<String> = texts
            .iter()
            .map(|t| cache_key(&model, instruction, &self.config.instruction_template, t))
            .collect();
        let mut found: Vec<Option<Vec<f64>>> = match &self.cache {
            Some(c) => {
                let c = c.lock().expect("cache poisoned");
                keys.iter().map(|k| c.get(k).map(<[f64]>::to_vec)).collect()
            }
            None => vec![None; texts.len()],
        };
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| found[i].is_none()).collect();
        if !missing.is_empty() {
            let req = EmbeddingRequest {
                texts: missing.iter().map(|&i| texts[i].clone()).collect(),
                instruction: instruction.map(str::to_string),
                normalize: true,
            };
            let m = embed(self.embedder.as_ref(), &req, &self.config, &self.log, on_batch)?;
            let mut cache = self.cache.as_ref().map(|c| c.lock().expect("cache poisoned"));
            for (r, &i) in missing.iter().enumerate() {
                let v = m.row(r).to_vec();
                if let Some(c) = cache.as_mut() {
                    c.insert(keys[i].clone(), v.clone());
                }
                found[i] = Some(v);
            }
        } else {
            on_batch(texts.len(), texts.len())?;
        }
        let rows: Vec<Vec<f64>> = found.into_iter().map(|v| v.expect("filled above")).collect();
        Matrix::from_rows(&rows).map_err(|e| ProviderError::Protocol(e.to_string()))
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<String, ProviderError> {
        generate(self.generator.as_ref(), req, &self.config, &self.log)
    }
}
