//! HTTP service over the linker.
//!
//! Link requests read an immutable snapshot behind an `Arc`; a request keeps
//! the snapshot it started with even if a retrain swaps in a new one.
//! Feedback and queue updates go through one async mutex.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::corpus::ExternalMention;
use crate::error::{Error, Result};
use crate::linker::{
    mention_from_parts, retrain_from_feedback, submit_feedback, Feedback, FeedbackStore, LinkResult, Linker,
    RetrainConfig, Snapshots, Verdict,
};
use crate::pretrain::TrainConfig;

const EVIDENCE_TITLES: usize = 3;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub threshold: f64,
    pub train: TrainConfig,
    pub retrain: RetrainConfig,
    /// Where retrained models are published, if anywhere.
    pub snapshots: Option<Snapshots>,
}

#[derive(Clone, Debug)]
struct Pending {
    mention: ExternalMention,
    result: LinkResult,
}

#[derive(Debug)]
struct Writer {
    store: FeedbackStore,
    pending: BTreeMap<String, Pending>,
}

pub struct AppState {
    linker: RwLock<Arc<Linker>>,
    writer: Mutex<Writer>,
    retraining: AtomicBool,
    cfg: ServeConfig,
}

impl AppState {
    pub fn new(linker: Linker, store: FeedbackStore, cfg: ServeConfig) -> Result<Arc<Self>> {
        if !(cfg.threshold > -1.0 && cfg.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!("threshold must lie in (-1, 1), got {}", cfg.threshold)));
        }
        Ok(Arc::new(Self {
            linker: RwLock::new(Arc::new(linker)),
            writer: Mutex::new(Writer {
                store,
                pending: BTreeMap::new(),
            }),
            retraining: AtomicBool::new(false),
            cfg,
        }))
    }

    pub fn snapshot(&self) -> Arc<Linker> {
        self.linker.read().expect("snapshot lock poisoned").clone()
    }

    /// Replace the serving snapshot; returns the version it replaced.
    pub fn swap(&self, linker: Linker) -> u64 {
        let mut guard = self.linker.write().expect("snapshot lock poisoned");
        let old = guard.model.version;
        *guard = Arc::new(linker);
        old
    }

    /// Number of feedback records in the log.
    pub async fn feedback_len(&self) -> usize {
        self.writer.lock().await.store.len()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: Error,
}

impl ApiError {
    fn new(status: StatusCode, error: Error) -> Self {
        Self { status, error }
    }
}

impl From<Error> for ApiError {
    fn from(error: Error) -> Self {
        let status = match error {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::InvalidArgument(_) | Error::Parse { .. } | Error::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, error }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({"error": self.error.kind(), "message": self.error.to_string()});
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct LinkRequest {
    pub name: String,
    pub support: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct FeedbackRequest {
    pub mention_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub corrected_expert_id: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Evidence {
    pub expert_id: String,
    pub name: String,
    pub titles: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct QueueItem {
    pub mention_id: String,
    pub name: String,
    pub support: Vec<String>,
    pub result: LinkResult,
    pub evidence: Vec<Evidence>,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok", "model_version": state.snapshot().model.version}))
}

async fn link_handler(
    State(state): State<Arc<AppState>>,
    Json(req): Json<LinkRequest>,
) -> std::result::Result<Json<LinkResult>, ApiError> {
    let mention = mention_from_parts(&req.name, &req.support)?;
    let linker = state.snapshot();
    let threshold = state.cfg.threshold;
    let m = mention.clone();
    let result = tokio::task::spawn_blocking(move || linker.link(&m, threshold))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, Error::InvalidArgument(e.to_string())))??;
    let mut w = state.writer.lock().await;
    let decided = w.store.records().iter().any(|r| r.feedback.mention_id == mention.mention_id);
    if !decided {
        w.pending.insert(
            mention.mention_id.clone(),
            Pending {
                mention,
                result: result.clone(),
            },
        );
    }
    Ok(Json(result))
}

async fn feedback_handler(
    State(state): State<Arc<AppState>>,
    Json(req): Json<FeedbackRequest>,
) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    let fb = Feedback {
        mention_id: req.mention_id,
        verdict: req.verdict,
        corrected_expert_id: req.corrected_expert_id,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let linker = state.snapshot();
    let mut w = state.writer.lock().await;
    // A mention decided before may be decided again; the latest decision wins.
    let known = w.pending.get(&fb.mention_id).cloned().or_else(|| {
        w.store.records().iter().rev().find(|r| r.feedback.mention_id == fb.mention_id).map(|r| Pending {
            mention: r.mention.clone(),
            result: r.result.clone(),
        })
    });
    let Some(p) = known else {
        return Err(Error::NotFound(format!("mention `{}`", fb.mention_id)).into());
    };
    submit_feedback(&mut w.store, fb, &p.mention, &p.result, &linker.corpus)?;
    w.pending.remove(&p.mention.mention_id);
    Ok(Json(serde_json::json!({"stored": true})))
}

async fn queue(State(state): State<Arc<AppState>>) -> Json<Vec<QueueItem>> {
    let linker = state.snapshot();
    let w = state.writer.lock().await;
    let items = w
        .pending
        .values()
        .map(|p| QueueItem {
            mention_id: p.mention.mention_id.clone(),
            name: p.mention.name.clone(),
            support: p.mention.support.iter().map(|s| s.snippet()).collect(),
            evidence: p
                .result
                .ranked
                .iter()
                .filter_map(|r| linker.corpus.get(&r.expert_id))
                .map(|e| Evidence {
                    expert_id: e.id.clone(),
                    name: e.name.clone(),
                    titles: e
                        .support
                        .iter()
                        .filter_map(|s| s.field("title"))
                        .take(EVIDENCE_TITLES)
                        .map(String::from)
                        .collect(),
                })
                .collect(),
            result: p.result.clone(),
        })
        .collect();
    Json(items)
}

/// Retrain on the feedback collected so far, out of band; the new model is
/// published and swapped in when training finishes.
async fn retrain(State(state): State<Arc<AppState>>) -> std::result::Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    if state.retraining.swap(true, Ordering::SeqCst) {
        return Ok((StatusCode::CONFLICT, Json(serde_json::json!({"started": false}))));
    }
    let store = state.writer.lock().await.store.clone();
    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = (|| -> Result<u64> {
            let base = st.snapshot();
            let (model, _) = retrain_from_feedback(&base.model, &base.corpus, &store, &st.cfg.train, &st.cfg.retrain)?;
            if let Some(snaps) = &st.cfg.snapshots {
                snaps.publish(&model)?;
            }
            let version = model.version;
            st.swap(Linker::new(model, base.corpus.clone(), base.paper_cap)?);
            Ok(version)
        })();
        match outcome {
            Ok(v) => tracing::info!(version = v, "retrained snapshot published"),
            Err(e) => tracing::error!(error = %e, "retraining failed"),
        }
        st.retraining.store(false, Ordering::SeqCst);
    });
    Ok((StatusCode::ACCEPTED, Json(serde_json::json!({"started": true}))))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/link", post(link_handler))
        .route("/feedback", post(feedback_handler))
        .route("/queue", get(queue))
        .route("/retrain", post(retrain))
        .with_state(state)
}

/// Bind and serve until ctrl-c.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
