//! HTTP front end for [`landtune::session::Service`].
//!
//! Control operations are JSON over HTTP under `/api`; everything else is
//! served from a static directory holding the web UI bundle.

mod error;
pub mod overlay;
pub mod wire;

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tower_http::services::{ServeDir, ServeFile};

use landtune::finetune::Method;
use landtune::harness::{write_csv, ResultRow};
use landtune::session::{Service, Session};

pub use error::ApiError;
use wire::*;

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<Service>,
}

/// Run CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> landtune::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Join(e.to_string()))?
        .map_err(ApiError::from)
}

fn session_info(s: &Session) -> SessionInfo {
    let snap = s.snapshot();
    SessionInfo {
        session: s.id().to_string(),
        scene: s.scene().id.clone(),
        method: s.method().as_str(),
        palette: palette_wire(&snap.palette),
        labelable: s.scene().grid.extent().into(),
        eval_points: s.scene().eval_points.len(),
        retrain_index: snap.retrain_index,
        checksum: snap.checksum,
    }
}

async fn health() -> &'static str {
    "ok"
}

async fn list_scenes(State(st): State<AppState>) -> Json<ScenesResponse> {
    Json(ScenesResponse {
        scenes: st.service.scenes().into_iter().map(SceneInfo::from).collect(),
    })
}

async fn scene_preview(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let scene = st.service.scene(&id)?;
    let png = blocking(move || overlay::preview_png(&scene.scene.image)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn create_session(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<SessionInfo>> {
    let req: CreateSessionRequest = decode(&body)?;
    let method = req.method.as_deref().map(Method::parse).transpose()?;
    let service = st.service.clone();
    let session = blocking(move || service.create_session(&req.scene, method)).await?;
    Ok(Json(session_info(&session)))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionInfo>> {
    let session = st.service.session(&id)?;
    Ok(Json(session_info(&session)))
}

async fn predict(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<PredictResponse>> {
    let req: PredictRequest = decode(&body)?;
    let session = st.service.session(&id)?;
    let resp = blocking(move || PredictResponse::build(session.predict_patch(req.row, req.col, req.size)?, req.format))
        .await?;
    Ok(Json(resp))
}

async fn submit_labels(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<LabelsResponse>> {
    let req: LabelsRequest = decode(&body)?;
    let session = st.service.session(&id)?;
    let out = session.submit_labels(&req.points())?;
    Ok(Json(LabelsResponse {
        accepted: out.accepted,
        updated: out.updated,
        label_count: session.metrics().label_count,
    }))
}

async fn retrain(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<RetrainResponse>> {
    let session = st.service.session(&id)?;
    let out = blocking(move || session.retrain()).await?;
    Ok(Json(RetrainResponse::from(&out)))
}

async fn add_class(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<AddClassResponse>> {
    let req: AddClassRequest = decode(&body)?;
    let session = st.service.session(&id)?;
    let index = session.add_class(&req.name, req.color()?)?;
    Ok(Json(AddClassResponse {
        index,
        palette: palette_wire(&session.palette()),
    }))
}

async fn reset(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionInfo>> {
    let session = st.service.session(&id)?;
    let s = session.clone();
    blocking(move || s.reset()).await?;
    Ok(Json(session_info(&session)))
}

async fn metrics(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<MetricsResponse>> {
    let session = st.service.session(&id)?;
    Ok(Json(MetricsResponse::from(&session.metrics())))
}

/// Metrics history as rows of the offline-grid CSV. `query` is
/// `interactive` and `seed` is the retrain index.
pub fn history_rows(session: &Session) -> Vec<ResultRow> {
    session
        .metrics()
        .history
        .iter()
        .filter_map(|e| {
            e.report.as_ref().map(|r| ResultRow {
                area: session.scene().id.clone(),
                method: session.method().as_str(),
                query: "interactive".into(),
                seed: e.retrain_index as u64,
                label_count: e.label_count,
                accuracy: r.accuracy,
                mean_iou: r.mean_iou,
            })
        })
        .collect()
}

async fn metrics_csv(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = st.service.session(&id)?;
    let mut buf = Vec::new();
    write_csv(&history_rows(&session), &mut buf)?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], buf).into_response())
}

async fn export_checkpoint(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = st.service.session(&id)?;
    let bytes = blocking(move || Ok(session.export_checkpoint())).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn manifest(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = st.service.session(&id)?;
    Ok(([(header::CONTENT_TYPE, "text/plain")], session.manifest().to_string()).into_response())
}

async fn api_not_found() -> ApiError {
    ApiError::Core(landtune::Error::NotFound {
        kind: "endpoint",
        id: "unknown API route".into(),
    })
}

/// The API under `/api` and `static_dir` everywhere else, with
/// `index.html` as the fallback for client-side routes.
pub fn router(service: Arc<Service>, static_dir: impl Into<PathBuf>) -> Router {
    let dir: PathBuf = static_dir.into();
    let api = Router::new()
        .route("/health", get(health))
        .route("/scenes", get(list_scenes))
        .route("/scenes/{id}/preview.png", get(scene_preview))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/predict", post(predict))
        .route("/sessions/{id}/labels", post(submit_labels))
        .route("/sessions/{id}/retrain", post(retrain))
        .route("/sessions/{id}/classes", post(add_class))
        .route("/sessions/{id}/reset", post(reset))
        .route("/sessions/{id}/metrics", get(metrics))
        .route("/sessions/{id}/metrics.csv", get(metrics_csv))
        .route("/sessions/{id}/checkpoint", get(export_checkpoint))
        .route("/sessions/{id}/manifest", get(manifest))
        .fallback(api_not_found);
    let files = ServeDir::new(&dir).fallback(ServeFile::new(dir.join("index.html")));
    Router::new()
        .nest("/api", api)
        .fallback_service(files)
        .with_state(AppState { service })
}

/// Bind `addr` and serve until the process is stopped.
pub async fn serve(service: Arc<Service>, static_dir: PathBuf, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(service, static_dir)).await
}
