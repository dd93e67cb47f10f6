//! Live scoring over JSON-over-HTTP: feed a growing conversation to a
//! trained model and read back the escalation score for the prefix seen so
//! far.
//!
//! Endpoints:
//!
//! - `POST /session` → `{"session_id"}` — open a session.
//! - `POST /session/{id}/utterance` — append one utterance; body fields
//!   `author` and `text` are required, `timestamp`, `kind` (`"talk"` or
//!   `"edit"`), `toxicity`, and `severe_toxicity` optional. Omitted
//!   timestamps continue 10 s after the previous utterance.
//! - `GET /session/{id}/score` → `{"session_id", "utterances", "mean",
//!   "uncertainty"}` via Monte-Carlo dropout on the current prefix.
//!
//! Unknown sessions answer 404 and malformed requests 400-class errors.
//! Scoring is read-only on the shared immutable model and deterministic:
//! the same session scores identically until another utterance arrives.
//! Session state lives in process memory only.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::corpus::{Conversation, Utterance, UtteranceKind};
use crate::models::{predict_mc, EmbeddingTable, NeuralModel};
use crate::pipeline::{self, PipelineError};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

/// A client-visible error: HTTP status plus a one-line message rendered as
/// `{"error": "..."}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn not_found(message: impl Into<String>) -> ApiError {
        ApiError { status: StatusCode::NOT_FOUND, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> ApiError {
        ApiError { status: StatusCode::BAD_REQUEST, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

/// One utterance as submitted by a client.
#[derive(Debug, Clone, Deserialize)]
pub struct UtteranceRequest {
    pub author: String,
    pub text: String,
    #[serde(default)]
    pub timestamp: Option<i64>,
    #[serde(default)]
    pub kind: Option<UtteranceKind>,
    #[serde(default)]
    pub toxicity: Option<f64>,
    #[serde(default)]
    pub severe_toxicity: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionResponse {
    pub session_id: String,
    pub utterances: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub session_id: String,
    /// Number of utterances the score covers.
    pub utterances: usize,
    /// Mean Monte-Carlo dropout escalation probability, in [0, 1].
    pub mean: f64,
    /// Sample standard deviation of the Monte-Carlo passes.
    pub uncertainty: f64,
}

/// Shared server state: the immutable model plus the in-memory sessions.
pub struct ScoreService {
    model: NeuralModel,
    table: EmbeddingTable,
    mc_samples: usize,
    seed: u64,
    sessions: Mutex<Sessions>,
}

#[derive(Default)]
struct Sessions {
    next_id: u64,
    live: HashMap<String, Vec<Utterance>>,
}

impl ScoreService {
    pub fn new(model: NeuralModel, table: EmbeddingTable, mc_samples: usize, seed: u64) -> ScoreService {
        ScoreService { model, table, mc_samples, seed, sessions: Mutex::new(Sessions::default()) }
    }

    pub fn create_session(&self) -> SessionResponse {
        let mut sessions = self.sessions.lock().expect("session lock");
        sessions.next_id += 1;
        let id = format!("session-{}", sessions.next_id);
        sessions.live.insert(id.clone(), Vec::new());
        SessionResponse { session_id: id, utterances: 0 }
    }

    pub fn append(&self, id: &str, req: UtteranceRequest) -> Result<SessionResponse, ApiError> {
        if req.text.trim().is_empty() {
            return Err(ApiError::bad_request("utterance text must not be empty"));
        }
        for (name, v) in [("toxicity", req.toxicity), ("severe_toxicity", req.severe_toxicity)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(ApiError::bad_request(format!("{name} must lie in [0, 1], got {v}")));
                }
            }
        }
        let mut sessions = self.sessions.lock().expect("session lock");
        let utterances = sessions
            .live
            .get_mut(id)
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))?;
        let timestamp = req
            .timestamp
            .unwrap_or_else(|| utterances.last().map_or(0, |u| u.timestamp + 10));
        utterances.push(Utterance {
            id: format!("{id}-u{}", utterances.len() + 1),
            author: req.author,
            timestamp,
            text: req.text,
            kind: req.kind.unwrap_or(UtteranceKind::TalkPost),
            toxicity: req.toxicity,
            severe_toxicity: req.severe_toxicity,
        });
        Ok(SessionResponse { session_id: id.to_string(), utterances: utterances.len() })
    }

    pub fn score(&self, id: &str) -> Result<ScoreResponse, ApiError> {
        let utterances = {
            let sessions = self.sessions.lock().expect("session lock");
            sessions
                .live
                .get(id)
                .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))?
                .clone()
        };
        if utterances.is_empty() {
            return Err(ApiError::bad_request("session has no utterances to score"));
        }
        let count = utterances.len();
        // Live sessions are prefixes in arrival order, not archived corpus
        // records, so the corpus-extraction invariants (edits inside the
        // talk window) deliberately do not apply here.
        let conv = Conversation::from_parts_unchecked(
            id.to_string(),
            format!("live:{id}"),
            utterances,
            None,
        );
        let (mean, uncertainty) =
            predict_mc(&self.model, &self.table, &conv, self.mc_samples, self.seed)
                .map_err(|e| ApiError::bad_request(format!("cannot score session: {e}")))?;
        Ok(ScoreResponse { session_id: id.to_string(), utterances: count, mean, uncertainty })
    }
}

async fn create_session(State(svc): State<Arc<ScoreService>>) -> Json<SessionResponse> {
    Json(svc.create_session())
}

async fn append_utterance(
    State(svc): State<Arc<ScoreService>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<UtteranceRequest>,
) -> Result<Json<SessionResponse>, ApiError> {
    svc.append(&id, req).map(Json)
}

async fn score_session(
    State(svc): State<Arc<ScoreService>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<ScoreResponse>, ApiError> {
    svc.score(&id).map(Json)
}

/// The scoring API over the given service.
pub fn router(service: Arc<ScoreService>) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}/utterance", post(append_utterance))
        .route("/session/{id}/score", get(score_session))
        .with_state(service)
}

/// Build the service from an experiment's checkpoint for the configured
/// architecture.
pub fn service_from_config(cfg: &ExperimentConfig) -> Result<ScoreService, ServeError> {
    let table = pipeline::load_embedding_table(cfg)?;
    let model = pipeline::load_checkpoint_model(cfg, cfg.model.architecture, &table)?;
    Ok(ScoreService::new(model, table, cfg.eval.mc_samples, cfg.seed))
}

/// Serve the scoring API until the process is stopped.
pub async fn run(cfg: &ExperimentConfig, addr: SocketAddr) -> Result<(), ServeError> {
    let service = Arc::new(service_from_config(cfg)?);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })?;
    log::info!("scoring endpoint listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await?;
    Ok(())
}
