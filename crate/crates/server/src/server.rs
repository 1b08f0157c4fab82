//! HTTP edge server hosting named pose-estimation proxies.
//!
//! Routes:
//! - `POST /proxies/{name}/frames`: PNG or JPEG body, headers `X-Frame-Id`,
//!   optional `X-Intrinsics` (JSON) and `X-Oracle` (JSON ground-truth hint).
//! - `POST /pnp`: `{correspondences, intrinsics}` to a PnP result.
//! - `GET /health`: proxy list with status and in-flight counts.
//!
//! Errors are returned as `{error, stage?, message}`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use edgepose_core::calibration::{FrameGraph, FrameId, ManualClock};
use edgepose_core::detector::{
    run_sspe_pipeline, DetectionResult, Detector, Frame, OracleHint, PipelineError, PipelineOutput,
};
use edgepose_core::geometry::{project, CameraIntrinsics, Pixel2, Pose};
use edgepose_core::pnp::{solve_pnp, Correspondence, PnpError, PnpOptions};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{oneshot, Semaphore};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use crate::proxy::{PipelineKind, ProxyConfig};
use crate::remote::detect_service;
use crate::staged::StagedPipeline;

/// Largest accepted frame body.
pub const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("address {0} is already in use")]
    PortInUse(SocketAddr),
    #[error("duplicate proxy name `{0}`")]
    DuplicateProxyName(String),
    #[error("invalid proxy `{name}`: {reason}")]
    InvalidProxy { name: String, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Directory served at `/` (the annotation UI bundle).
    pub static_dir: Option<PathBuf>,
    /// `T_Robot_Map`; when set, responses carry `T_AR_Map`.
    pub robot_map: Option<Pose>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseTimings {
    pub receive_ms: f64,
    pub decode_ms: f64,
    pub detect_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kpd_ms: Option<f64>,
    pub pnp_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseResponse {
    pub frame_id: String,
    pub proxy_name: String,
    pub pose: Pose,
    pub rms_reprojection_error: f64,
    pub candidates_considered: usize,
    pub detection: DetectionResult,
    /// Centroid followed by the 8 box corners, projected under `pose`.
    pub projected_bbox_corners: Vec<Pixel2>,
    pub timings: ResponseTimings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ar_to_map: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyHealth {
    pub name: String,
    pub pipeline: PipelineKind,
    pub status: String,
    pub in_flight: usize,
    pub max_in_flight: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub proxies: Vec<ProxyHealth>,
}

/// Body of `POST /pnp`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PnpRequest {
    pub correspondences: Vec<Correspondence>,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: code.to_string(),
                stage: None,
                message: message.into(),
            },
        }
    }

    fn staged(mut self, stage: &str) -> Self {
        self.body.stage = Some(stage.to_string());
        self
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.code(), e.to_string()).staged(e.stage())
    }
}

impl From<PnpError> for ApiError {
    fn from(e: PnpError) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

struct Proxy {
    config: ProxyConfig,
    permits: Arc<Semaphore>,
    enabled: AtomicBool,
    staged: Option<StagedPipeline>,
}

impl Proxy {
    fn in_flight(&self) -> usize {
        self.config.max_in_flight - self.permits.available_permits()
    }
}

struct AppState {
    proxies: HashMap<String, Arc<Proxy>>,
    order: Vec<String>,
    robot_map: Option<Pose>,
    frame_counter: AtomicU64,
}

fn build_state(proxies: Vec<ProxyConfig>, opts: &ServerOptions) -> Result<AppState, ServeError> {
    let mut map = HashMap::new();
    let mut order = Vec::new();
    for cfg in proxies {
        if cfg.max_in_flight == 0 {
            return Err(ServeError::InvalidProxy {
                name: cfg.name,
                reason: "max_in_flight must be >= 1".into(),
            });
        }
        if map.contains_key(&cfg.name) {
            return Err(ServeError::DuplicateProxyName(cfg.name));
        }
        let staged = (cfg.pipeline == PipelineKind::BetaposeStyle).then(|| {
            StagedPipeline::spawn(
                cfg.bbox_detector.clone(),
                cfg.kp_detector.clone(),
                cfg.model.clone(),
                cfg.options.clone(),
                cfg.max_in_flight,
            )
        });
        order.push(cfg.name.clone());
        map.insert(
            cfg.name.clone(),
            Arc::new(Proxy {
                permits: Arc::new(Semaphore::new(cfg.max_in_flight)),
                enabled: AtomicBool::new(true),
                staged,
                config: cfg,
            }),
        );
    }
    Ok(AppState {
        proxies: map,
        order,
        robot_map: opts.robot_map,
        frame_counter: AtomicU64::new(0),
    })
}

fn router(state: Arc<AppState>, opts: &ServerOptions) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/pnp", post(pnp))
        .route("/proxies/{name}/frames", post(frames))
        .with_state(state);
    let app = match &opts.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(CorsLayer::permissive())
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Health> {
    let proxies = st
        .order
        .iter()
        .map(|name| {
            let p = &st.proxies[name];
            ProxyHealth {
                name: name.clone(),
                pipeline: p.config.pipeline,
                status: if p.enabled.load(Ordering::SeqCst) { "ready" } else { "stopped" }.into(),
                in_flight: p.in_flight(),
                max_in_flight: p.config.max_in_flight,
            }
        })
        .collect();
    Json(Health {
        status: "ok".into(),
        proxies,
    })
}

async fn pnp(body: Bytes) -> Result<Response, ApiError> {
    let req: PnpRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "MalformedRequest", e.to_string()))?;
    let result = tokio::task::spawn_blocking(move || {
        solve_pnp(&req.correspondences, &req.intrinsics, &PnpOptions::default())
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    Ok(Json(result).into_response())
}

fn json_header<T: serde::de::DeserializeOwned>(headers: &HeaderMap, name: &str) -> Result<Option<T>, ApiError> {
    let Some(v) = headers.get(name) else {
        return Ok(None);
    };
    let s = v
        .to_str()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "InvalidHeader", format!("{name}: {e}")))?;
    serde_json::from_str(s)
        .map(Some)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "InvalidHeader", format!("{name}: {e}")))
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

async fn frames(
    State(st): State<Arc<AppState>>,
    Path(name): Path<String>,
    headers: HeaderMap,
    body: Body,
) -> Result<Response, ApiError> {
    let start = Instant::now();
    let proxy = st
        .proxies
        .get(&name)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UnknownProxy", format!("no proxy named `{name}`")))?;
    if !proxy.enabled.load(Ordering::SeqCst) {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "ProxyStopped",
            format!("proxy `{name}` has been stopped"),
        ));
    }
    let _permit = proxy.permits.clone().try_acquire_owned().map_err(|_| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "Busy",
            format!("proxy `{name}` is at max_in_flight = {}", proxy.config.max_in_flight),
        )
    })?;

    if let Some(ct) = headers.get("content-type").and_then(|v| v.to_str().ok()) {
        let ct = ct.to_ascii_lowercase();
        if !(ct.starts_with("image/") || ct.starts_with("application/octet-stream")) {
            return Err(ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "UnsupportedMediaType",
                format!("expected image/png or image/jpeg, got {ct}"),
            ));
        }
    }
    let frame_id = headers
        .get("x-frame-id")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .unwrap_or_else(|| format!("frame-{}", st.frame_counter.fetch_add(1, Ordering::SeqCst)));
    let intrinsics: CameraIntrinsics =
        json_header(&headers, "x-intrinsics")?.unwrap_or(proxy.config.intrinsics);
    let hint: Option<OracleHint> = json_header(&headers, "x-oracle")?;

    let bytes = to_bytes(body, MAX_BODY_BYTES)
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "ReceiveFailed", e.to_string()))?;
    let receive_ms = ms(start);

    let decode_start = Instant::now();
    let id = frame_id.clone();
    let mut frame = tokio::task::spawn_blocking(move || {
        image::load_from_memory(&bytes).map(|img| Frame::from_image(id, img))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
    .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "UndecodableImage", e.to_string()).staged("decode"))?;
    let decode_ms = ms(decode_start);
    if let Some(h) = hint {
        frame = frame.with_oracle(h);
    }

    let out: PipelineOutput = match &proxy.staged {
        Some(staged) => {
            let rx = staged.submit(frame, intrinsics).map_err(|_| {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "Busy", "pipeline queue full")
            })?;
            await_stage(rx).await??
        }
        None => {
            let p = proxy.clone();
            tokio::task::spawn_blocking(move || {
                let c = &p.config;
                run_sspe_pipeline(c.kp_detector.as_ref(), &frame, &c.model, &intrinsics, &c.options)
            })
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??
        }
    };

    let corners = proxy
        .config
        .model
        .box_points()
        .iter()
        .map(|p| project(p, &out.pnp.pose, &intrinsics))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "PointBehindCamera", e.to_string()).staged("pnp"))?;
    let ar_to_map = st.robot_map.map(|robot_map| {
        let mut g = FrameGraph::new(Arc::new(ManualClock::new(0)));
        g.update_edge(FrameId::Ar, FrameId::Robot, out.pnp.pose, 0)
            .and_then(|_| g.update_edge(FrameId::Robot, FrameId::Map, robot_map, 0))
            .and_then(|_| g.ar_to_map(0))
            .map(|s| s.pose)
            .expect("fresh edges at t=0")
    });

    let timings = ResponseTimings {
        receive_ms,
        decode_ms,
        detect_ms: out.timings.detect_ms,
        kpd_ms: out.timings.kpd_ms,
        pnp_ms: out.timings.pnp_ms,
        total_ms: ms(start),
    };
    Ok(Json(PoseResponse {
        frame_id,
        proxy_name: name,
        pose: out.pnp.pose,
        rms_reprojection_error: out.pnp.rms_reprojection_error,
        candidates_considered: out.pnp.candidates_considered,
        detection: out.detection,
        projected_bbox_corners: corners,
        timings,
        ar_to_map,
    })
    .into_response())
}

async fn await_stage(
    rx: oneshot::Receiver<Result<PipelineOutput, PipelineError>>,
) -> Result<Result<PipelineOutput, ApiError>, ApiError> {
    let r = rx
        .await
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", "pipeline stage dropped the frame"))?;
    Ok(r.map_err(ApiError::from))
}

/// A running server.
pub struct ServerHandle {
    addr: SocketAddr,
    state: Option<Arc<AppState>>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<tokio::task::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `host:port` string suitable for the client module.
    pub fn base(&self) -> String {
        self.addr.to_string()
    }

    /// Stop accepting frames on one proxy; the others keep serving.
    pub fn stop_proxy(&self, name: &str) -> bool {
        match self.state.as_ref().and_then(|s| s.proxies.get(name)) {
            Some(p) => {
                p.enabled.store(false, Ordering::SeqCst);
                true
            }
            None => false,
        }
    }

    /// Graceful shutdown: in-flight requests finish, new connections are refused.
    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.task.take() {
            Some(t) => t.await.unwrap_or_else(|e| Err(std::io::Error::other(e))),
            None => Ok(()),
        }
    }

    /// Wait until the server exits (after `shutdown` or ctrl-c handling elsewhere).
    pub async fn wait(mut self) -> std::io::Result<()> {
        match self.task.take() {
            Some(t) => t.await.unwrap_or_else(|e| Err(std::io::Error::other(e))),
            None => Ok(()),
        }
    }

    pub fn shutdown_signal(&mut self) -> Option<oneshot::Sender<()>> {
        self.shutdown.take()
    }
}

/// Bind `bind` and serve `proxies` on the current tokio runtime.
pub async fn serve(
    proxies: Vec<ProxyConfig>,
    bind: SocketAddr,
    opts: ServerOptions,
) -> Result<ServerHandle, ServeError> {
    let state = Arc::new(build_state(proxies, &opts)?);
    let app = router(state.clone(), &opts);
    serve_router(app, bind, Some(state)).await
}

/// Serve a single detector as a detector service (see [`crate::remote`]).
pub async fn serve_detector(detector: Arc<dyn Detector>, bind: SocketAddr) -> Result<ServerHandle, ServeError> {
    serve_router(detect_service(detector), bind, None).await
}

async fn serve_router(app: Router, bind: SocketAddr, state: Option<Arc<AppState>>) -> Result<ServerHandle, ServeError> {
    let listener = tokio::net::TcpListener::bind(bind).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            ServeError::PortInUse(bind)
        } else {
            ServeError::Io(e)
        }
    })?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    Ok(ServerHandle {
        addr,
        state,
        shutdown: Some(tx),
        task: Some(task),
    })
}

/// A server on its own runtime, for synchronous callers. Shuts down on drop.
pub struct BackgroundServer {
    handle: Option<ServerHandle>,
    runtime: Option<tokio::runtime::Runtime>,
}

fn background_runtime() -> Result<tokio::runtime::Runtime, ServeError> {
    Ok(tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()?)
}

impl BackgroundServer {
    pub fn start(proxies: Vec<ProxyConfig>, bind: SocketAddr, opts: ServerOptions) -> Result<Self, ServeError> {
        let runtime = background_runtime()?;
        let handle = runtime.block_on(serve(proxies, bind, opts))?;
        Ok(Self {
            handle: Some(handle),
            runtime: Some(runtime),
        })
    }

    /// Detector service on an ephemeral loopback port.
    pub fn detector(detector: Arc<dyn Detector>) -> Result<Self, ServeError> {
        let runtime = background_runtime()?;
        let handle = runtime.block_on(serve_detector(detector, SocketAddr::from(([127, 0, 0, 1], 0))))?;
        Ok(Self {
            handle: Some(handle),
            runtime: Some(runtime),
        })
    }

    /// Loopback server on an ephemeral port.
    pub fn local(proxies: Vec<ProxyConfig>) -> Result<Self, ServeError> {
        Self::start(proxies, SocketAddr::from(([127, 0, 0, 1], 0)), ServerOptions::default())
    }

    pub fn handle(&self) -> &ServerHandle {
        self.handle.as_ref().expect("server running")
    }

    pub fn base(&self) -> String {
        self.handle().base()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let (Some(h), Some(rt)) = (self.handle.take(), self.runtime.take()) {
            let _ = rt.block_on(h.shutdown());
            rt.shutdown_background();
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        self.stop();
    }
}
