//! Clients for OpenAI-compatible `/v1/embeddings` and
//! `/v1/chat/completions` endpoints.

use reqwest::blocking::Client;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{Embedder, Generator, ProviderConfig, ProviderError};

fn client(cfg: &ProviderConfig) -> Result<Client, ProviderError> {
    Client::builder()
        .timeout(cfg.timeout())
        .build()
        .map_err(|e| ProviderError::Transport(e.to_string()))
}

fn endpoint(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

fn post(client: &Client, url: &str, key: Option<&str>, body: &Value) -> Result<Value, ProviderError> {
    let mut req = client.post(url).json(body);
    if let Some(k) = key {
        req = req.bearer_auth(k);
    }
    let resp = req.send().map_err(|e| ProviderError::Transport(e.to_string()))?;
    let status = resp.status();
    if status.is_server_error() || status.as_u16() == 429 {
        return Err(ProviderError::Transport(format!("{url} returned {status}")));
    }
    if !status.is_success() {
        let text = resp.text().unwrap_or_default();
        return Err(ProviderError::Protocol(format!("{url} returned {status}: {text}")));
    }
    resp.json().map_err(|e| ProviderError::Protocol(format!("bad JSON from {url}: {e}")))
}

pub struct HttpEmbedder {
    client: Client,
    url: String,
    model: String,
    key: Option<String>,
}

impl HttpEmbedder {
    pub fn new(cfg: &ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            client: client(cfg)?,
            url: endpoint(&cfg.base_url, "v1/embeddings"),
            model: cfg.embedding_model.clone(),
            key: cfg.api_key.clone(),
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

impl Embedder for HttpEmbedder {
    fn model(&self) -> &str {
        &self.model
    }

    fn embed_batch(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let body = json!({ "model": self.model, "input": inputs });
        let value = post(&self.client, &self.url, self.key.as_deref(), &body)?;
        let mut resp: EmbeddingResponse =
            serde_json::from_value(value).map_err(|e| ProviderError::Protocol(e.to_string()))?;
        if resp.data.iter().all(|d| d.index.is_some()) {
            resp.data.sort_by_key(|d| d.index);
        }
        Ok(resp.data.into_iter().map(|d| d.embedding).collect())
    }
}

pub struct HttpGenerator {
    client: Client,
    url: String,
    model: String,
    key: Option<String>,
}

impl HttpGenerator {
    pub fn new(cfg: &ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            client: client(cfg)?,
            url: endpoint(&cfg.base_url, "v1/chat/completions"),
            model: cfg.generation_model.clone(),
            key: cfg.api_key.clone(),
        })
    }
}

impl Generator for HttpGenerator {
    fn complete(&self, prompt: &str, max_tokens: usize, schema: Option<&Value>) -> Result<String, ProviderError> {
        let mut body = json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": prompt }],
            "max_tokens": max_tokens,
        });
        if let Some(s) = schema {
            body["response_format"] = json!({
                "type": "json_schema",
                "json_schema": { "name": "output", "schema": s },
            });
        }
        let value = post(&self.client, &self.url, self.key.as_deref(), &body)?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Protocol("response has no choices[0].message.content".into()))
    }
}
