//! HTTP routes. Handlers move core work onto the blocking pool.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use perspectra_core::adapter::AdapterConfig;
use perspectra_core::corpus::FieldMapping;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::app::{CreatePerspective, EvalRequest, Service, ServiceError};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, extra) = match &self {
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, Value::Null),
            ServiceError::Conflict { job_id, .. } => (StatusCode::CONFLICT, json!(job_id)),
            ServiceError::Invalid(_) => (StatusCode::UNPROCESSABLE_ENTITY, Value::Null),
            ServiceError::Upstream(_) => (StatusCode::BAD_GATEWAY, Value::Null),
            ServiceError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, Value::Null),
        };
        let mut body = json!({ "error": self.to_string() });
        if !extra.is_null() {
            body["job_id"] = extra;
        }
        (status, Json(body)).into_response()
    }
}

type Svc = Arc<Service>;
type ApiResult = Result<Response, ServiceError>;

async fn blocking<T, F>(f: F) -> Result<T, ServiceError>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("handler panicked: {e}")))?
}

fn ok<T: serde::Serialize>(v: T) -> ApiResult {
    Ok(Json(v).into_response())
}

fn accepted<T: serde::Serialize>(v: T) -> ApiResult {
    Ok((StatusCode::ACCEPTED, Json(v)).into_response())
}

fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T, ServiceError> {
    let bytes: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) { b"{}" } else { bytes };
    serde_json::from_slice(bytes).map_err(|e| ServiceError::Invalid(format!("invalid request body: {e}")))
}

pub fn router(svc: Svc) -> Router {
    Router::new()
        .route("/corpora", get(list_corpora).post(create_corpus))
        .route("/perspectives", get(list_perspectives).post(create_perspective))
        .route("/perspectives/:id", get(get_perspective))
        .route("/perspectives/:id/build", post(build))
        .route("/perspectives/:id/rewrite", post(rewrite))
        .route("/perspectives/:id/refine-model", post(refine_model))
        .route("/perspectives/:id/map", get(map))
        .route("/perspectives/:id/ops/:op", post(op))
        .route("/perspectives/:id/search", get(search))
        .route("/perspectives/:id/history", get(history))
        .route("/perspectives/:id/docs/:doc", get(doc))
        .route("/perspectives/:id/selection", post(selection))
        .route("/perspectives/:id/export-tags", post(export_tags))
        .route("/eval", post(eval))
        .route("/jobs", get(list_jobs))
        .route("/jobs/:id", get(get_job))
        .route("/jobs/:id/cancel", post(cancel_job))
        .with_state(svc)
}

#[derive(Debug, Default, Deserialize)]
struct CorpusParams {
    id: Option<String>,
    name: Option<String>,
    text_field: Option<String>,
    id_field: Option<String>,
}

async fn create_corpus(State(s): State<Svc>, Query(q): Query<CorpusParams>, body: Bytes) -> ApiResult {
    let summary = blocking(move || {
        let mut mapping = FieldMapping::default();
        if let Some(t) = q.text_field {
            mapping.text = t;
        }
        if let Some(i) = q.id_field {
            mapping.id = i;
        }
        s.create_corpus(q.id.as_deref(), q.name.as_deref(), &body, &mapping)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(summary)).into_response())
}

async fn list_corpora(State(s): State<Svc>) -> ApiResult {
    ok(blocking(move || s.list_corpora()).await?)
}

async fn create_perspective(State(s): State<Svc>, body: Bytes) -> ApiResult {
    let req: CreatePerspective = parse_json(&body)?;
    let info = blocking(move || s.create_perspective(req)).await?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn list_perspectives(State(s): State<Svc>) -> ApiResult {
    ok(blocking(move || s.list_perspectives()).await?)
}

async fn get_perspective(State(s): State<Svc>, Path(id): Path<String>) -> ApiResult {
    ok(blocking(move || s.perspective_info(&id)).await?)
}

async fn build(State(s): State<Svc>, Path(id): Path<String>) -> ApiResult {
    accepted(blocking(move || s.submit_build(&id)).await?)
}

async fn rewrite(State(s): State<Svc>, Path(id): Path<String>) -> ApiResult {
    accepted(blocking(move || s.submit_rewrite(&id)).await?)
}

async fn refine_model(State(s): State<Svc>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let cfg: AdapterConfig = parse_json(&body)?;
    accepted(blocking(move || s.submit_refine_model(&id, cfg)).await?)
}

#[derive(Debug, Default, Deserialize)]
struct VersionQuery {
    version: Option<u64>,
}

async fn map(State(s): State<Svc>, Path(id): Path<String>, Query(q): Query<VersionQuery>) -> ApiResult {
    let bytes = blocking(move || s.map_json(&id, q.version)).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn op(State(s): State<Svc>, Path((id, op)): Path<(String, String)>, body: Bytes) -> ApiResult {
    let v: Value = parse_json(&body)?;
    ok(blocking(move || s.apply_op(&id, &op, v)).await?)
}

async fn search(State(s): State<Svc>, Path(id): Path<String>, Query(q): Query<Vec<(String, String)>>) -> ApiResult {
    let mut text = None;
    let mut meta = BTreeMap::new();
    for (k, v) in q {
        match k.as_str() {
            "q" => text = Some(v),
            "meta" => {
                let (mk, mv) = v
                    .split_once(':')
                    .ok_or_else(|| ServiceError::Invalid(format!("meta filter {v:?} is not key:value")))?;
                meta.insert(mk.to_string(), mv.to_string());
            }
            other => return Err(ServiceError::Invalid(format!("unknown query parameter {other:?}"))),
        }
    }
    ok(blocking(move || s.search(&id, text.as_deref(), &meta)).await?)
}

async fn history(State(s): State<Svc>, Path(id): Path<String>) -> ApiResult {
    ok(blocking(move || s.history(&id)).await?)
}

async fn doc(State(s): State<Svc>, Path((id, doc)): Path<(String, String)>, Query(q): Query<VersionQuery>) -> ApiResult {
    ok(blocking(move || s.doc(&id, &doc, q.version)).await?)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionBody {
    doc_ids: Vec<String>,
    #[serde(default = "default_top")]
    top_n: usize,
}

fn default_top() -> usize {
    10
}

async fn selection(State(s): State<Svc>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let b: SelectionBody = parse_json(&body)?;
    let kw = blocking(move || s.selection_keywords(&id, &b.doc_ids, b.top_n)).await?;
    ok(json!({ "keywords": kw }))
}

async fn export_tags(State(s): State<Svc>, Path(id): Path<String>, Query(q): Query<VersionQuery>) -> ApiResult {
    ok(blocking(move || s.export_tags(&id, q.version)).await?)
}

async fn eval(State(s): State<Svc>, body: Bytes) -> ApiResult {
    let req: EvalRequest = parse_json(&body)?;
    accepted(blocking(move || s.submit_eval(req)).await?)
}

async fn list_jobs(State(s): State<Svc>) -> ApiResult {
    ok(s.jobs().list())
}

async fn get_job(State(s): State<Svc>, Path(id): Path<String>) -> ApiResult {
    ok(s.job(&id)?)
}

async fn cancel_job(State(s): State<Svc>, Path(id): Path<String>) -> ApiResult {
    ok(s.cancel_job(&id)?)
}

/// Serves until the listener fails or the process is stopped.
pub async fn serve(svc: Svc, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(svc)).await
}
