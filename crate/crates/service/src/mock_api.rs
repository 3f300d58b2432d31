//! OpenAI-compatible stand-ins for the generation, embedding and rerank
//! services, backed by the deterministic in-process mocks.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use ragforge_core::dense::EmbeddingBackend;
use ragforge_core::generate::{GenerationParams, Message, Role};
use ragforge_core::mock::{HashEmbedder, MockCrossEncoder, MockGenerator};
use ragforge_core::retrieval::Reranker;
use ragforge_core::{Generator, RetrievedPassage};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::ApiError;

#[derive(Clone)]
pub struct MockBackends {
    pub generator: Arc<dyn Generator>,
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub reranker: Arc<dyn Reranker>,
}

impl Default for MockBackends {
    fn default() -> Self {
        Self {
            generator: Arc::new(MockGenerator::new()),
            embedder: Arc::new(HashEmbedder::default()),
            reranker: Arc::new(MockCrossEncoder),
        }
    }
}

impl MockBackends {
    pub fn with_generator(mut self, g: Arc<dyn Generator>) -> Self {
        self.generator = g;
        self
    }
}

/// Routes: `POST /v1/chat/completions`, `POST /v1/embeddings`, `POST /v1/rerank`.
pub fn mock_router(backends: MockBackends) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat).get(ready))
        .route("/v1/embeddings", post(embeddings).get(ready))
        .route("/v1/rerank", post(rerank).get(ready))
        .with_state(Arc::new(backends))
}

async fn ready() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Deserialize)]
struct ChatRequest {
    #[serde(default)]
    model: String,
    messages: Vec<Message>,
    #[serde(default)]
    max_tokens: Option<usize>,
    #[serde(default)]
    temperature: f64,
    #[serde(default)]
    logprobs: bool,
    #[serde(default)]
    echo: bool,
    #[serde(default)]
    stop: Option<Stop>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Stop {
    One(String),
    Many(Vec<String>),
}

fn blocking_error(e: tokio::task::JoinError) -> ApiError {
    ApiError::internal(e.to_string())
}

async fn chat(State(b): State<Arc<MockBackends>>, Json(req): Json<ChatRequest>) -> Result<Json<Value>, ApiError> {
    let g = b.generator.clone();
    let model = req.model.clone();
    let body = tokio::task::spawn_blocking(move || -> Result<Value, ApiError> {
        let fail = |e: ragforge_core::generate::GenerateError| ApiError::new(StatusCode::BAD_REQUEST, "generate", e.to_string());
        // Echo scoring: logprobs of a trailing assistant message given the rest.
        if req.echo {
            let (last, context) = req
                .messages
                .split_last()
                .filter(|(m, _)| m.role == Role::Assistant)
                .ok_or_else(|| ApiError::bad_request("messages", "echo needs a trailing assistant message"))?;
            let toks = g.score_tokens(context, &last.content).map_err(fail)?;
            return Ok(json!({
                "object": "chat.completion",
                "model": model,
                "choices": [{
                    "index": 0,
                    "message": { "role": "assistant", "content": "" },
                    "logprobs": { "content": toks },
                    "finish_reason": "length",
                }],
                "usage": { "completion_tokens": 0 },
            }));
        }
        let defaults = GenerationParams::default();
        let params = GenerationParams {
            max_new_tokens: req.max_tokens.unwrap_or(defaults.max_new_tokens),
            temperature: req.temperature,
            logprobs: req.logprobs,
            stop: match req.stop {
                None => Vec::new(),
                Some(Stop::One(s)) => vec![s],
                Some(Stop::Many(v)) => v,
            },
            ..defaults
        };
        let out = g.complete(&req.messages, &params).map_err(fail)?;
        let mut choice = json!({
            "index": 0,
            "message": { "role": "assistant", "content": out.text },
            "finish_reason": out.finish_reason,
        });
        if let Some(lp) = out.token_logprobs {
            choice["logprobs"] = json!({ "content": lp });
        }
        Ok(json!({
            "object": "chat.completion",
            "model": model,
            "choices": [choice],
            "usage": { "completion_tokens": out.token_count },
        }))
    })
    .await
    .map_err(blocking_error)??;
    Ok(Json(body))
}

#[derive(Deserialize)]
struct EmbeddingRequest {
    #[serde(default)]
    model: String,
    input: Input,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Input {
    One(String),
    Many(Vec<String>),
}

async fn embeddings(State(b): State<Arc<MockBackends>>, Json(req): Json<EmbeddingRequest>) -> Result<Json<Value>, ApiError> {
    let inputs = match req.input {
        Input::One(s) => vec![s],
        Input::Many(v) => v,
    };
    let e = b.embedder.clone();
    let model = req.model;
    let body = tokio::task::spawn_blocking(move || -> Result<Value, ApiError> {
        let vs = e
            .embed_batch(&model, &inputs)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "embed", e.to_string()))?;
        let data: Vec<Value> = vs
            .into_iter()
            .enumerate()
            .map(|(i, v)| json!({ "object": "embedding", "index": i, "embedding": v }))
            .collect();
        Ok(json!({ "object": "list", "model": model, "data": data }))
    })
    .await
    .map_err(blocking_error)??;
    Ok(Json(body))
}

#[derive(Deserialize)]
struct RerankRequest {
    #[serde(default)]
    model: String,
    query: String,
    documents: Vec<String>,
}

async fn rerank(State(b): State<Arc<MockBackends>>, Json(req): Json<RerankRequest>) -> Result<Json<Value>, ApiError> {
    let r = b.reranker.clone();
    let body = tokio::task::spawn_blocking(move || -> Result<Value, ApiError> {
        let candidates: Vec<RetrievedPassage> = req
            .documents
            .iter()
            .enumerate()
            .map(|(i, d)| RetrievedPassage {
                id: i.to_string(),
                title: String::new(),
                contents: d.clone(),
                score: 0.0,
                rank: i + 1,
            })
            .collect();
        let scores = r
            .score(&req.query, &candidates)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "rerank", e.to_string()))?;
        let results: Vec<Value> = scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| json!({ "index": i, "relevance_score": s }))
            .collect();
        Ok(json!({ "model": req.model, "results": results }))
    })
    .await
    .map_err(blocking_error)??;
    Ok(Json(body))
}
