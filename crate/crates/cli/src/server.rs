//! HTTP service for annotation and prediction review.
//!
//! Every error response has the shape
//! `{"error": {"code": "...", "message": "...", "field": "..."}}` where
//! `field` is present for input validation failures.

use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use anyhow::Result;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cda_core::data::{self, AnnotationRecord, Dataset, Provenance, Split};
use cda_core::fsutil::append_line;
use cda_core::model::ModelSnapshot;
use cda_core::pseudo::{mc_predict, RoundReport};
use cda_core::vhs::{calc_vhs, Keypoint, KeypointSet, OUTPUT_DIM};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const AUDIT_FILE: &str = "audit.jsonl";

pub struct AppState {
    root: PathBuf,
    /// Guards both the in-memory dataset and every write to the dataset
    /// files, so persistence has a single writer.
    dataset: Mutex<Dataset>,
    snapshot: Option<ModelSnapshot>,
    passes: usize,
    tau: f64,
    rounds_log: Option<PathBuf>,
}

impl AppState {
    pub fn new(
        root: PathBuf,
        dataset: Dataset,
        snapshot: Option<ModelSnapshot>,
        passes: usize,
        tau: f64,
        rounds_log: Option<PathBuf>,
    ) -> Self {
        AppState { root, dataset: Mutex::new(dataset), snapshot, passes, tau, rounds_log }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    field: Option<&'static str>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), field: None }
    }

    fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        ApiError { field: Some(field), ..ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_points", message) }
    }

    fn unknown(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "unknown_sample", format!("no sample with id {id}"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut err = serde_json::json!({ "code": self.code, "message": self.message });
        if let Some(f) = self.field {
            err["field"] = f.into();
        }
        (self.status, Json(serde_json::json!({ "error": err }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", r.body_text())
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointsBody {
    pub points: Vec<[f64; 2]>,
    #[serde(default)]
    pub annotator: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VhsResponse {
    pub vhs: f64,
    /// 0 small, 1 normal, 2 large.
    pub class: usize,
    pub class_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: String,
    pub split: Split,
    pub provenance: Provenance,
    pub width: usize,
    pub height: usize,
    pub labeled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vhs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub id: String,
    pub mu: Vec<[f64; 2]>,
    pub sigma: Vec<[f64; 2]>,
    pub max_sigma: f64,
    pub tau: f64,
    pub confident: bool,
}

fn parse_points(points: &[[f64; 2]]) -> ApiResult<KeypointSet> {
    let arr: &[[f64; 2]; 6] = points
        .try_into()
        .map_err(|_| ApiError::invalid("points", format!("expected 6 points, got {}", points.len())))?;
    let set = KeypointSet::from_points(arr.map(|[x, y]| Keypoint::new(x, y)));
    set.validate_normalized().map_err(|e| ApiError::invalid("points", e.to_string()))?;
    Ok(set)
}

fn score(set: &KeypointSet) -> ApiResult<VhsResponse> {
    let v = calc_vhs(set).map_err(|e| ApiError::invalid("points", e.to_string()))?;
    let class = v.class();
    let class_name = serde_json::to_value(class).ok().and_then(|c| c.as_str().map(String::from)).unwrap_or_default();
    Ok(VhsResponse { vhs: v.value(), class: class.index(), class_name })
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    split: Option<String>,
}

async fn list_samples(State(app): State<Arc<AppState>>, Query(q): Query<ListQuery>) -> ApiResult<Json<Vec<SampleSummary>>> {
    let split = match q.split.as_deref() {
        None => None,
        Some(s) => Some(
            Split::parse(s)
                .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "invalid_split", format!("unknown split {s}")))?,
        ),
    };
    let ds = app.dataset.lock().map_err(ApiError::internal)?;
    let out = ds
        .samples
        .iter()
        .filter(|s| split.is_none_or(|sp| s.split == sp))
        .map(|s| SampleSummary {
            id: s.id.clone(),
            split: s.split,
            provenance: s.provenance,
            width: s.image.width,
            height: s.image.height,
            labeled: s.label.is_some(),
            vhs: s.label.as_ref().and_then(|l| calc_vhs(l).ok()).map(|v| v.value()),
        })
        .collect();
    Ok(Json(out))
}

async fn get_image(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let path = {
        let ds = app.dataset.lock().map_err(ApiError::internal)?;
        ds.get(&id).ok_or_else(|| ApiError::unknown(&id))?.image_path(&app.root)
    };
    let bytes = fs::read(&path).map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn get_annotation(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<AnnotationRecord>> {
    let ds = app.dataset.lock().map_err(ApiError::internal)?;
    let sample = ds.get(&id).ok_or_else(|| ApiError::unknown(&id))?;
    data::record_of(sample)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_annotated", format!("sample {id} has no annotation")))
}

async fn put_annotation(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: std::result::Result<Json<PointsBody>, JsonRejection>,
) -> ApiResult<Json<VhsResponse>> {
    let Json(body) = body?;
    let label = parse_points(&body.points)?;
    let response = score(&label)?;

    let mut ds = app.dataset.lock().map_err(ApiError::internal)?;
    let sample = ds.get_mut(&id).ok_or_else(|| ApiError::unknown(&id))?;
    let previous = data::record_of(sample);
    let timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    sample.label = Some(label);
    sample.provenance = Provenance::Human;
    sample.annotator = body.annotator.clone();
    sample.annotated_at = Some(timestamp.clone());
    if sample.split == Split::Unlabeled {
        sample.split = Split::Train;
    }
    let audit = serde_json::json!({
        "id": id,
        "timestamp": timestamp,
        "annotator": body.annotator,
        "previous": previous,
        "points": body.points,
    });
    data::save_annotations(&ds, &app.root).map_err(ApiError::internal)?;
    data::save_manifest(&ds, &app.root).map_err(ApiError::internal)?;
    append_line(&app.root.join(AUDIT_FILE), &audit.to_string()).map_err(ApiError::internal)?;
    Ok(Json(response))
}

async fn post_vhs(body: std::result::Result<Json<PointsBody>, JsonRejection>) -> ApiResult<Json<VhsResponse>> {
    let Json(body) = body?;
    Ok(Json(score(&parse_points(&body.points)?)?))
}

#[derive(Debug, Deserialize)]
struct PredictionQuery {
    tau: Option<f64>,
}

async fn get_prediction(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<PredictionQuery>,
) -> ApiResult<Json<PredictionResponse>> {
    let snap = app
        .snapshot
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_model", "the server has no model snapshot"))?;
    let tau = q.tau.unwrap_or(app.tau);
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(ApiError { field: Some("tau"), ..ApiError::new(StatusCode::BAD_REQUEST, "invalid_tau", "tau must be non-negative") });
    }
    let image = {
        let ds = app.dataset.lock().map_err(ApiError::internal)?;
        ds.get(&id).ok_or_else(|| ApiError::unknown(&id))?.image.clone()
    };
    let stats = mc_predict(snap, &image, app.passes, snap.seed, &id)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "prediction_failed", e.to_string()))?;
    let pairs = |v: &[f64; OUTPUT_DIM]| v.chunks(2).map(|c| [c[0], c[1]]).collect();
    Ok(Json(PredictionResponse {
        id,
        mu: pairs(&stats.mu),
        sigma: pairs(&stats.sigma),
        max_sigma: stats.max_sigma,
        tau,
        confident: stats.is_confident(tau),
    }))
}

async fn get_rounds(State(app): State<Arc<AppState>>) -> ApiResult<Json<Vec<RoundReport>>> {
    let Some(path) = &app.rounds_log else {
        return Ok(Json(Vec::new()));
    };
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Json(Vec::new())),
        Err(e) => return Err(ApiError::internal(e)),
    };
    let rounds = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<RoundReport>, _>>()
        .map_err(ApiError::internal)?;
    Ok(Json(rounds))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/samples", get(list_samples))
        .route("/samples/{id}/image", get(get_image))
        .route("/samples/{id}/annotation", get(get_annotation).put(put_annotation))
        .route("/vhs", post(post_vhs))
        .route("/predictions/{id}", get(get_prediction))
        .route("/pseudo/rounds", get(get_rounds))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| CliError::new("bind", format!("cannot listen on {addr}: {e}")))?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
