//! Review API: paged trajectory listing, detail with resolvable image URLs,
//! annotator verdicts, dataset stats, and hash-addressed image bytes.
//!
//! All store writes go through one `RwLock<Dataset>`; reads share it.

mod auth;
mod error;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock, RwLockReadGuard};
use std::time::Duration;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use forge_core::image_store::{sniff_mime, ImageStore};
use forge_core::store::{Dataset, ListFilter, RatioTarget, Taxonomy, DEFAULT_PAGE_LIMIT};
use forge_core::trajectory::{ContentHash, ImageRef};
use forge_core::{Decision, Mode, Trajectory, VerificationRecord, VerificationStatus};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;
use tower_http::trace::TraceLayer;

pub use auth::{Annotator, Tokens};
pub use error::ApiError;

pub const IMMUTABLE_CACHE: &str = "public, max-age=31536000, immutable";

pub struct AppState {
    pub store: RwLock<Dataset>,
    pub tokens: Tokens,
    pub images: Option<ImageStore>,
    pub allow_overwrite: bool,
    pub taxonomy: Taxonomy,
    pub ratio_target: RatioTarget,
    pub image_timeout: Duration,
    pub ui_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(store: Dataset, tokens: Tokens) -> Self {
        Self {
            store: RwLock::new(store),
            tokens,
            images: None,
            allow_overwrite: false,
            taxonomy: Taxonomy::default(),
            ratio_target: RatioTarget::default(),
            image_timeout: Duration::from_secs(5),
            ui_dir: None,
        }
    }

    fn read(&self) -> RwLockReadGuard<'_, Dataset> {
        self.store.read().unwrap_or_else(|e| e.into_inner())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/session", get(session))
        .route("/api/trajectories", get(list_trajectories))
        .route("/api/trajectories/{id}", get(get_trajectory))
        .route("/api/trajectories/{id}/verdict", post(post_verdict))
        .route("/api/stats", get(stats))
        .route("/images/{hash}", get(image));
    let app = match state.ui_dir.as_ref().filter(|d| d.is_dir()) {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api.fallback(|| async { ApiError::not_found("no such route") }),
    };
    app.layer(TraceLayer::new_for_http()).with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Hash-addressed URL for images the service can serve; remote and inline
/// URIs pass through unchanged.
pub fn image_url(image: &ImageRef) -> String {
    let uri = image.uri.as_str();
    if uri.starts_with("http://") || uri.starts_with("https://") || uri.starts_with("data:") {
        uri.to_string()
    } else {
        format!("/images/{}", image.content_hash)
    }
}

#[derive(Debug, Serialize)]
struct SessionInfo {
    annotator_id: String,
    allow_overwrite: bool,
    required_annotators: usize,
}

async fn session(State(state): State<Arc<AppState>>, Annotator(who): Annotator) -> Json<SessionInfo> {
    Json(SessionInfo {
        annotator_id: who,
        allow_overwrite: state.allow_overwrite,
        required_annotators: state.read().required_annotators(),
    })
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
    mode: Option<String>,
    category: Option<String>,
    /// Cursor from a previous page; `page` is accepted as an alias.
    cursor: Option<String>,
    page: Option<String>,
    limit: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct ListItem {
    pub id: String,
    pub mode: Mode,
    pub instruction: String,
    pub category: Option<String>,
    pub thumbnails: Vec<String>,
    pub status: VerificationStatus,
}

#[derive(Debug, Serialize)]
pub struct ListResponse {
    pub items: Vec<ListItem>,
    pub next_cursor: Option<String>,
}

fn non_empty(v: Option<String>) -> Option<String> {
    v.filter(|s| !s.is_empty())
}

async fn list_trajectories(
    State(state): State<Arc<AppState>>,
    _who: Annotator,
    query: Result<Query<ListQuery>, QueryRejection>,
) -> Result<Json<ListResponse>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let filter = ListFilter {
        mode: non_empty(q.mode)
            .map(|m| Mode::parse(&m).ok_or_else(|| ApiError::bad_request(format!("unknown mode {m:?}"))))
            .transpose()?,
        status: non_empty(q.status)
            .map(|s| VerificationStatus::parse(&s).ok_or_else(|| ApiError::bad_request(format!("unknown status {s:?}"))))
            .transpose()?,
        category: non_empty(q.category),
    };
    let cursor = non_empty(q.cursor).or(non_empty(q.page));
    let store = state.read();
    let page = store.list(&filter, cursor.as_deref(), q.limit.unwrap_or(DEFAULT_PAGE_LIMIT))?;
    let items = page
        .items
        .into_iter()
        .map(|(t, status)| ListItem {
            id: t.id.clone(),
            mode: t.mode,
            instruction: t.instruction.clone(),
            category: t.category.clone(),
            thumbnails: t.references.iter().chain(t.images().last()).map(image_url).collect(),
            status,
        })
        .collect();
    Ok(Json(ListResponse { items, next_cursor: page.next_cursor }))
}

#[derive(Debug, Serialize)]
pub struct DetailResponse {
    pub trajectory: Trajectory,
    pub status: VerificationStatus,
    pub verification: VerificationRecord,
    /// Content hash to servable URL for every reference and generation.
    pub image_urls: BTreeMap<String, String>,
    pub allow_overwrite: bool,
}

async fn get_trajectory(
    State(state): State<Arc<AppState>>,
    _who: Annotator,
    Path(id): Path<String>,
) -> Result<Json<DetailResponse>, ApiError> {
    let store = state.read();
    let trajectory = store.get(&id)?.clone();
    let verification = store.verification(&id)?;
    let image_urls = trajectory
        .references
        .iter()
        .chain(trajectory.images())
        .map(|i| (i.content_hash.to_string(), image_url(i)))
        .collect();
    Ok(Json(DetailResponse {
        status: verification.status,
        verification,
        trajectory,
        image_urls,
        allow_overwrite: state.allow_overwrite,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictBody {
    decision: Decision,
    #[serde(default)]
    notes: String,
}

async fn post_verdict(
    State(state): State<Arc<AppState>>,
    Annotator(who): Annotator,
    Path(id): Path<String>,
    body: Result<Json<VerdictBody>, JsonRejection>,
) -> Result<Json<VerificationRecord>, ApiError> {
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", e.body_text()))?;
    let state2 = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut store = state2.store.write().unwrap_or_else(|e| e.into_inner());
        store.get(&id)?;
        if store.status(&id) == VerificationStatus::Rejected && !state2.allow_overwrite {
            return Err(ApiError::new(StatusCode::CONFLICT, "already_rejected", format!("trajectory {id} is already rejected")));
        }
        let record = store.record_verdict(&id, &who, body.decision, &body.notes)?;
        tracing::info!(%id, annotator = %who, status = record.status.as_str(), "verdict recorded");
        Ok(Json(record))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn stats(State(state): State<Arc<AppState>>, _who: Annotator) -> Json<forge_core::store::DatasetStats> {
    Json(state.read().stats(&state.taxonomy, &state.ratio_target))
}

async fn image(State(state): State<Arc<AppState>>, _who: Annotator, Path(hash): Path<String>) -> Result<Response, ApiError> {
    let hash = ContentHash::parse(&hash).map_err(|_| ApiError::not_found("no such image"))?;
    let store = state.images.clone().ok_or_else(|| ApiError::not_found("no image store configured"))?;
    let read = tokio::task::spawn_blocking({
        let hash = hash.clone();
        move || store.get(&hash)
    });
    let bytes = match tokio::time::timeout(state.image_timeout, read).await {
        Err(_) => return Err(ApiError::new(StatusCode::GATEWAY_TIMEOUT, "image_timeout", "image read timed out")),
        Ok(Err(e)) => return Err(ApiError::internal(e.to_string())),
        Ok(Ok(Err(e))) if e.kind() == std::io::ErrorKind::NotFound => return Err(ApiError::not_found("no such image")),
        Ok(Ok(Err(e))) => return Err(ApiError::internal(e.to_string())),
        Ok(Ok(Ok(b))) => b,
    };
    let etag = HeaderValue::from_str(&format!("\"{hash}\"")).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static(sniff_mime(&bytes))),
            (header::CACHE_CONTROL, HeaderValue::from_static(IMMUTABLE_CACHE)),
            (header::ETAG, etag),
        ],
        bytes,
    )
        .into_response())
}
