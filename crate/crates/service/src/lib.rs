//! HTTP API over a registered classifier and its embedding index.
//!
//! Endpoints: `POST /classify` (raw image bytes as the body), `GET /scans/{id}`,
//! `GET /scans/{id}/image`, `GET /scans/{id}/similar?k=`, `GET /projection`,
//! `GET /health`, `POST /admin/reload`. Response bodies follow the JSON
//! schemas in `schemas/`.

pub mod registry;
pub mod state;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cxr_core::dataset::{Label, Sex, View};
use cxr_core::imaging::{decode_raw_image, load_raw_image};
use cxr_core::model::classify as classify_score;
use cxr_core::retrieval::{query_knn_excluding, DEFAULT_K};
use serde::{Deserialize, Serialize};

pub use registry::{ModelRegistryEntry, Registry};
pub use state::{AppState, Snapshot};

/// Largest accepted upload.
pub const MAX_UPLOAD_BYTES: usize = 256 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = self.code, message = %self.message, "request failed");
        }
        let body = ErrorBody {
            error: self.code.into(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub scan_id: String,
    pub score: f64,
    pub label: Label,
    pub threshold: f64,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarNeighbor {
    pub scan_id: String,
    pub label: Label,
    pub distance: f64,
    pub score: Option<f64>,
    pub image_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarResponse {
    pub query_id: String,
    pub model_id: String,
    pub k: usize,
    pub neighbors: Vec<SimilarNeighbor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanMetadata {
    pub patient_id: String,
    pub view: View,
    pub machine_id: String,
    pub age: Option<u32>,
    pub sex: Sex,
}

/// `source` is `upload`, `train`, `test` or `manifest`. `label` is the
/// recorded label and is null for uploads; `predicted_label` comes from the
/// classifier score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResponse {
    pub scan_id: String,
    pub source: String,
    pub label: Option<Label>,
    pub score: Option<f64>,
    pub predicted_label: Option<Label>,
    pub metadata: Option<ScanMetadata>,
    pub image_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_id: Option<String>,
    pub index_size: usize,
    pub projection_points: Option<usize>,
    pub uploads: usize,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/classify", post(classify))
        .route("/scans/{id}", get(scan))
        .route("/scans/{id}/image", get(scan_image))
        .route("/scans/{id}/similar", get(similar))
        .route("/projection", get(projection))
        .route("/admin/reload", post(reload))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}

fn image_url(id: &str) -> String {
    format!("/scans/{id}/image")
}

fn active(st: &AppState) -> ApiResult<Arc<Snapshot>> {
    st.snapshot()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_active_model", "no active model is loaded"))
}

fn health_of(st: &AppState) -> HealthResponse {
    let snap = st.snapshot();
    HealthResponse {
        status: "ok".into(),
        model_id: snap.as_ref().map(|s| s.entry.model_id.clone()),
        index_size: snap.as_ref().and_then(|s| s.index.as_ref()).map_or(0, |i| i.len()),
        projection_points: snap.as_ref().and_then(|s| s.projection.as_ref()).map(Vec::len),
        uploads: st.uploads.lock().unwrap().len(),
    }
}

async fn health(State(st): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(health_of(&st))
}

async fn classify(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<ClassifyResponse>> {
    let snap = active(&st)?;
    if body.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "undecodable_image", "empty request body"));
    }
    let work = snap.clone();
    let (png, inference) = tokio::task::spawn_blocking(move || -> ApiResult<_> {
        let raw = decode_raw_image(&body)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "undecodable_image", e.to_string()))?;
        let canonical = work
            .pipeline
            .canonicalize(&raw)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "unusable_image", e.to_string()))?;
        let input = work.pipeline.inference_input(&canonical).map_err(ApiError::internal)?;
        let inference = work.model.infer(&input).map_err(ApiError::internal)?;
        Ok((canonical.to_png(), inference))
    })
    .await
    .map_err(ApiError::internal)??;

    let threshold = snap.entry.threshold;
    let label = classify_score(&inference.score, threshold);
    let scan_id = st.uploads.lock().unwrap().insert(state::Upload {
        model_id: snap.entry.model_id.clone(),
        score: inference.score.score,
        label,
        embedding: inference.embedding,
        png: Arc::new(png),
    });
    tracing::info!(%scan_id, score = inference.score.score, %label, "classified upload");
    Ok(Json(ClassifyResponse {
        scan_id,
        score: inference.score.score,
        label,
        threshold,
        model_id: snap.entry.model_id.clone(),
    }))
}

fn parse_k(params: &HashMap<String, String>) -> ApiResult<usize> {
    let Some(raw) = params.get("k") else {
        return Ok(DEFAULT_K);
    };
    match raw.trim().parse::<i64>() {
        Ok(k) if k >= 1 => Ok(k as usize),
        Ok(k) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_k", format!("k must be at least 1, got {k}"))),
        Err(_) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_k", format!("k must be an integer, got `{raw}`"))),
    }
}

async fn similar(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Json<SimilarResponse>> {
    let k = parse_k(&params)?;
    let snap = active(&st)?;
    let index = snap.index.as_ref().ok_or_else(|| {
        ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_index", "no embedding index is loaded")
    })?;
    // Indexed scans are excluded from their own neighbour lists.
    let (query, exclude) = if let Some(u) = st.uploads.lock().unwrap().get(&id) {
        if u.model_id != snap.entry.model_id {
            return Err(ApiError::new(StatusCode::CONFLICT, "stale_scan", format!("{id} was embedded by model {}", u.model_id)));
        }
        (u.embedding.clone(), None)
    } else if let Some(e) = index.get(&id) {
        (e.vector.clone(), Some(id.as_str()))
    } else if let Some(e) = snap.held_out.get(&id) {
        (e.vector.clone(), None)
    } else {
        return Err(ApiError::not_found(format!("unknown scan `{id}`")));
    };
    let result = query_knn_excluding(index, &query, k, exclude).map_err(ApiError::internal)?;
    Ok(Json(SimilarResponse {
        query_id: id,
        model_id: snap.entry.model_id.clone(),
        k,
        neighbors: result
            .neighbors
            .into_iter()
            .map(|n| SimilarNeighbor {
                image_url: image_url(&n.scan_id),
                scan_id: n.scan_id,
                label: n.label,
                distance: n.distance,
                score: n.score,
            })
            .collect(),
    }))
}

async fn projection(State(st): State<Arc<AppState>>) -> ApiResult<Response> {
    let snap = active(&st)?;
    match &snap.projection {
        Some(points) => Ok(Json(points).into_response()),
        None => Err(ApiError::not_found("no projection computed")),
    }
}

async fn scan(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ScanResponse>> {
    let snap = active(&st)?;
    let threshold = snap.entry.threshold;
    let record = snap
        .manifest
        .as_ref()
        .and_then(|(m, _)| m.get(&id))
        .cloned();
    let metadata = record.as_ref().map(|r| ScanMetadata {
        patient_id: r.patient_id.clone(),
        view: r.view,
        machine_id: r.machine_id.clone(),
        age: r.age,
        sex: r.sex,
    });
    let predicted = |s: Option<f64>| s.map(|s| Label::from_bool(s >= threshold));
    if let Some(u) = st.uploads.lock().unwrap().get(&id) {
        return Ok(Json(ScanResponse {
            scan_id: id.clone(),
            source: "upload".into(),
            label: None,
            score: Some(u.score),
            predicted_label: Some(u.label),
            metadata: None,
            image_url: Some(image_url(&id)),
        }));
    }
    let embedded = snap
        .index
        .as_ref()
        .and_then(|i| i.get(&id))
        .or_else(|| snap.held_out.get(&id));
    let image = record.as_ref().map(|_| image_url(&id));
    match (embedded, &record) {
        (Some(e), _) => Ok(Json(ScanResponse {
            scan_id: id.clone(),
            source: e.split.as_str().into(),
            label: Some(e.label),
            score: e.score,
            predicted_label: predicted(e.score),
            metadata,
            image_url: image,
        })),
        (None, Some(r)) => Ok(Json(ScanResponse {
            scan_id: id.clone(),
            source: "manifest".into(),
            label: Some(r.label),
            score: None,
            predicted_label: None,
            metadata,
            image_url: image,
        })),
        (None, None) => Err(ApiError::not_found(format!("unknown scan `{id}`"))),
    }
}

/// Canonical 8-bit rendering of a scan as PNG.
async fn scan_image(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let snap = active(&st)?;
    let upload = st.uploads.lock().unwrap().get(&id).map(|u| u.png.clone());
    let png = match upload {
        Some(p) => p,
        None => {
            let Some((record, dir)) = snap
                .manifest
                .as_ref()
                .and_then(|(m, dir)| m.get(&id).map(|r| (r.clone(), dir.clone())))
            else {
                return Err(ApiError::not_found(format!("no image for scan `{id}`")));
            };
            let work = snap.clone();
            tokio::task::spawn_blocking(move || -> ApiResult<_> {
                let path = cxr_core::dataset::DatasetManifest::resolve_image_path(&record, &dir);
                let raw = load_raw_image(&path).map_err(ApiError::internal)?;
                let canonical = work.pipeline.canonicalize(&raw).map_err(ApiError::internal)?;
                Ok(Arc::new(canonical.to_png()))
            })
            .await
            .map_err(ApiError::internal)??
        }
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], png.as_ref().clone()).into_response())
}

async fn reload(State(st): State<Arc<AppState>>) -> ApiResult<Json<HealthResponse>> {
    let work = st.clone();
    tokio::task::spawn_blocking(move || work.reload())
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "reload_failed", e.to_string()))?;
    Ok(Json(health_of(&st)))
}
