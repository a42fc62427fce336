//! HTTP inference service. Stateless: every request carries the full
//! history, and loaded models are shared read-only across requests.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use moodgen_core::corpus::SentimentLabel;
use moodgen_core::generator::DecodeMode;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::model::{LoadedModel, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RespondRequest {
    pub history: String,
    pub sentiment: String,
    pub model_id: String,
    pub mode: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RespondResponse {
    pub response: String,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `null` when the run has no classifier checkpoint.
    pub classifier_sentiment: Option<Verdict>,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub family: String,
    pub vocab_size: usize,
    pub classifier: bool,
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type Models = Arc<BTreeMap<String, Arc<LoadedModel>>>;

pub fn router(models: Vec<LoadedModel>) -> Router {
    let models: Models = Arc::new(models.into_iter().map(|m| (m.id.clone(), Arc::new(m))).collect());
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/models", get(list_models))
        .route("/v1/respond", post(respond))
        .layer(CorsLayer::permissive())
        .with_state(models)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn list_models(State(models): State<Models>) -> Json<serde_json::Value> {
    let list: Vec<ModelInfo> = models
        .values()
        .map(|m| ModelInfo {
            model_id: m.id.clone(),
            family: m.family().to_string(),
            vocab_size: m.bundle.vocab.len(),
            classifier: m.bundle.classifier.is_some(),
        })
        .collect();
    Json(json!({ "models": list }))
}

async fn respond(State(models): State<Models>, body: Bytes) -> Result<Json<RespondResponse>, ApiError> {
    let req: RespondRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))?;
    let y = SentimentLabel::parse(&req.sentiment).ok_or_else(|| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("sentiment must be \"positive\" or \"negative\", got {:?}", req.sentiment),
        )
    })?;
    let mode: DecodeMode = req.mode.parse().map_err(|e: String| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    let model = models
        .get(&req.model_id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown model_id {:?}", req.model_id)))?;
    let history = model
        .encode_history(&req.history)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "history is empty after tokenization"))?;
    let seed = req.seed.unwrap_or(0);
    let model_id = req.model_id;
    let reply = tokio::task::spawn_blocking(move || model.reply(&history, y, mode, seed))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}")))?;
    Ok(Json(RespondResponse {
        response: reply.response,
        tokens: reply.tokens,
        log_prob: reply.log_prob,
        classifier_sentiment: reply.verdict,
        model_id,
    }))
}
