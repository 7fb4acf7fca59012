//! JSON API backing the browser annotator:
//!
//! | method | path                          | body                               |
//! |--------|-------------------------------|------------------------------------|
//! | GET    | `/api/skeleton`               | `[{name, parent, swap}]`           |
//! | GET    | `/api/frames`                 | `[{id, width, height, source_index, annotated, outlier}]` |
//! | GET    | `/api/frames/{id}/image`      | PNG bytes                          |
//! | GET    | `/api/frames/{id}/keypoints`  | [`KeypointsPayload`]               |
//! | PUT    | `/api/frames/{id}/keypoints`  | [`KeypointsPayload`] in and out    |
//! | GET    | `/api/outliers`               | flagged frame ids, `[]` before any outlier run |
//! | POST   | `/api/predict/{id}`           | [`KeypointsPayload`] from the model |
//!
//! Failures answer with an [`ApiError`] body `{code, message}`.

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use keypose_core::analysis::OutlierQueue;
use keypose_core::network::{self, Checkpoint};
use keypose_core::pose::HUMAN_SCORE;
use keypose_core::{DatasetManifest, Keypoint, Pose};
use serde::{Deserialize, Serialize};

use crate::args::{required, ServeArgs};
use crate::commands::load_manifest;
use crate::{data_err, CliError, CliResult};

/// The closed set of machine-readable error codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    BadRequest,
    NoModel,
    DataError,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::NoModel => StatusCode::CONFLICT,
            ErrorCode::DataError => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
        }
    }

    fn unknown_frame(id: u64) -> Self {
        ApiError::new(ErrorCode::NotFound, format!("unknown frame id {id}"))
    }
}

impl From<keypose_core::Error> for ApiError {
    fn from(e: keypose_core::Error) -> Self {
        use keypose_core::Error as E;
        let code = match &e {
            E::UnknownFrame(_) => ErrorCode::NotFound,
            E::PoseRows { .. } | E::InvalidArgument(_) => ErrorCode::BadRequest,
            E::Io { .. } | E::Json(_) => ErrorCode::Internal,
            _ => ErrorCode::DataError,
        };
        ApiError::new(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonEntry {
    pub name: String,
    pub parent: Option<String>,
    pub swap: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub source_index: u64,
    pub annotated: bool,
    pub outlier: bool,
}

/// One keypoint row; all three values are `null` for a missing point.
/// `score` may be omitted on upload, meaning a human-placed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointRow {
    pub name: String,
    pub x: Option<f64>,
    pub y: Option<f64>,
    #[serde(default)]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointsPayload {
    #[serde(default)]
    pub frame_id: Option<u64>,
    #[serde(default)]
    pub annotated: bool,
    pub keypoints: Vec<KeypointRow>,
}

pub struct AppState {
    root: PathBuf,
    manifest: RwLock<DatasetManifest>,
    model: Option<Checkpoint>,
    /// Serializes mutations inside this process; `DirLock` covers others.
    writer: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn open(root: &Path, checkpoint: Option<&Path>) -> CliResult<Arc<AppState>> {
        let manifest = load_manifest(root)?;
        let model = checkpoint
            .map(|p| network::load_checkpoint(p, &manifest.skeleton.fingerprint()))
            .transpose()?;
        Ok(Arc::new(AppState {
            root: root.to_path_buf(),
            manifest: RwLock::new(manifest),
            model,
            writer: tokio::sync::Mutex::new(()),
        }))
    }

    fn manifest(&self) -> std::sync::RwLockReadGuard<'_, DatasetManifest> {
        self.manifest.read().unwrap_or_else(|p| p.into_inner())
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/skeleton", get(skeleton))
        .route("/api/frames", get(frames))
        .route("/api/frames/{id}/image", get(frame_image))
        .route("/api/frames/{id}/keypoints", get(get_keypoints).put(put_keypoints))
        .route("/api/outliers", get(outliers))
        .route("/api/predict/{id}", post(predict))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?
}

async fn skeleton(State(state): State<Arc<AppState>>) -> Json<Vec<SkeletonEntry>> {
    let m = state.manifest();
    let sk = &m.skeleton;
    let name = |i: Option<usize>| i.map(|i| sk.name(i).to_string());
    Json(
        sk.keypoints()
            .iter()
            .map(|k| SkeletonEntry {
                name: k.name.clone(),
                parent: name(k.parent),
                swap: name(k.swap),
            })
            .collect(),
    )
}

fn flagged(root: &Path) -> ApiResult<Vec<u64>> {
    Ok(OutlierQueue::load(root)?.map(|q| q.flagged).unwrap_or_default())
}

async fn frames(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<FrameEntry>>> {
    let root = state.root.clone();
    let queue = blocking(move || flagged(&root)).await?;
    let m = state.manifest();
    Ok(Json(
        m.frames
            .iter()
            .map(|f| FrameEntry {
                id: f.id,
                width: f.width,
                height: f.height,
                source_index: f.source_index,
                annotated: f.annotated,
                outlier: queue.contains(&f.id),
            })
            .collect(),
    ))
}

async fn frame_image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> ApiResult<Response> {
    let path = state.manifest().frame_path(&state.root, id)?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(ErrorCode::Internal, format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

fn payload(m: &DatasetManifest, id: u64, pose: Option<&Pose>, annotated: bool) -> KeypointsPayload {
    let rows = (0..m.skeleton.len())
        .map(|i| {
            let k = pose.and_then(|p| p.get(i));
            KeypointRow {
                name: m.skeleton.name(i).to_string(),
                x: k.map(|k| k.x),
                y: k.map(|k| k.y),
                score: k.map(|k| k.score),
            }
        })
        .collect();
    KeypointsPayload {
        frame_id: Some(id),
        annotated,
        keypoints: rows,
    }
}

async fn get_keypoints(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> ApiResult<Json<KeypointsPayload>> {
    let m = state.manifest();
    if m.frame(id).is_none() {
        return Err(ApiError::unknown_frame(id));
    }
    let pose = m.pose(id);
    Ok(Json(payload(&m, id, pose, pose.is_some())))
}

/// Validates uploaded rows against the skeleton, in skeleton order.
pub fn pose_from_rows(m: &DatasetManifest, rows: &[KeypointRow]) -> ApiResult<Pose> {
    let sk = &m.skeleton;
    if rows.len() != sk.len() {
        return Err(ApiError::new(
            ErrorCode::BadRequest,
            format!("expected {} keypoint rows, got {}", sk.len(), rows.len()),
        ));
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if r.name != sk.name(i) {
                return Err(ApiError::new(
                    ErrorCode::BadRequest,
                    format!("row {i} is `{}`, expected `{}`", r.name, sk.name(i)),
                ));
            }
            match (r.x, r.y) {
                (None, None) if r.score.is_none() => Ok(None),
                (Some(x), Some(y)) => {
                    let score = r.score.unwrap_or(HUMAN_SCORE);
                    if !x.is_finite() || !y.is_finite() || !(0.0..=1.0).contains(&score) {
                        return Err(ApiError::new(
                            ErrorCode::BadRequest,
                            format!("`{}` needs finite coordinates and a score in [0, 1]", r.name),
                        ));
                    }
                    Ok(Some(Keypoint::new(x, y, score)))
                }
                _ => Err(ApiError::new(
                    ErrorCode::BadRequest,
                    format!("`{}` must have x and y both set or all fields null", r.name),
                )),
            }
        })
        .collect::<ApiResult<Vec<_>>>()
        .map(Pose::new)
}

async fn put_keypoints(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
    Json(body): Json<KeypointsPayload>,
) -> ApiResult<Json<KeypointsPayload>> {
    let pose = {
        let m = state.manifest();
        if m.frame(id).is_none() {
            return Err(ApiError::unknown_frame(id));
        }
        pose_from_rows(&m, &body.keypoints)?
    };
    let _writer = state.writer.lock().await;
    let st = state.clone();
    blocking(move || {
        // re-read under the lock so edits made by CLI runs are kept
        let (next, ()) = DatasetManifest::update(&st.root, |m| m.set_pose(id, pose))?;
        let reply = payload(&next, id, next.pose(id), true);
        *st.manifest.write().unwrap_or_else(|p| p.into_inner()) = next;
        Ok(Json(reply))
    })
    .await
}

async fn outliers(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<u64>>> {
    let root = state.root.clone();
    Ok(Json(blocking(move || flagged(&root)).await?))
}

async fn predict(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> ApiResult<Json<KeypointsPayload>> {
    if state.model.is_none() {
        return Err(ApiError::new(ErrorCode::NoModel, "no checkpoint loaded; start serve with --checkpoint"));
    }
    let st = state.clone();
    blocking(move || {
        let model = st.model.as_ref().expect("checked above");
        let m = st.manifest().clone();
        let frame = m.load_frame(&st.root, id)?;
        let (pose, _) = network::predict_frame(&model.params, &frame, &model.map_spec)?;
        Ok(Json(payload(&m, id, Some(&pose), false)))
    })
    .await
}

/// Runs the service until interrupted; in-flight requests finish first.
pub fn serve_blocking(a: &ServeArgs) -> CliResult<()> {
    let root = required(&a.root, "root")?;
    let state = AppState::open(root, a.checkpoint.as_deref())?;
    let app = router(state, a.static_dir.as_deref());
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Data(format!("runtime: {e}")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(|e| CliError::Data(format!("cannot bind {}: {e}", a.bind)))?;
        log::info!("serving {} on http://{}", root.display(), a.bind);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
                log::info!("shutting down");
            })
            .await
            .map_err(|e| data_err(root, e))
    })
}
