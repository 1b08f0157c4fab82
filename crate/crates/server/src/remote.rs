//! Detector backends reached over HTTP.
//!
//! `POST /detect` takes a PNG body plus `X-Frame-Id`, optional `X-Crop` and
//! `X-Oracle` headers, and answers with a `DetectionResult`. With `X-Crop`
//! the keypoints are reported in crop coordinates.

use std::io::Cursor;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use edgepose_core::detector::{Crop, DetectError, DetectionResult, Detector, Frame, OracleHint};
use image::ImageFormat;

use crate::client::{self, host_port};
use crate::server::ErrorBody;

/// Detector that forwards frames to a detector service.
pub struct RemoteDetector {
    name: String,
    url: String,
    timeout: Duration,
}

impl RemoteDetector {
    pub fn new(url: impl Into<String>) -> Self {
        let url = url.into();
        Self {
            name: format!("remote({})", host_port(&url)),
            url,
            timeout: Duration::from_secs(10),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn call(&self, frame: &Frame, crop: Option<&Crop>) -> Result<DetectionResult, DetectError> {
        let image = frame
            .image
            .as_ref()
            .ok_or_else(|| DetectError::Failed("frame carries no pixels".into()))?;
        let mut png = Vec::new();
        image
            .write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
            .map_err(|e| DetectError::Failed(format!("png encode: {e}")))?;

        let crop_json = crop.map(|c| serde_json::to_string(c).expect("crop serializes"));
        let oracle_json = frame
            .oracle
            .as_ref()
            .map(|h| serde_json::to_string(h).expect("hint serializes"));
        let mut headers = vec![("Content-Type", "image/png"), ("X-Frame-Id", frame.image_id.as_str())];
        if let Some(c) = &crop_json {
            headers.push(("X-Crop", c));
        }
        if let Some(o) = &oracle_json {
            headers.push(("X-Oracle", o));
        }
        let (resp, _) = client::request(&self.url, "POST", "/detect", &headers, &png, self.timeout)
            .map_err(|e| DetectError::BackendUnavailable(e.to_string()))?;
        if resp.is_success() {
            return serde_json::from_slice(&resp.body)
                .map_err(|e| DetectError::Failed(format!("bad detector response: {e}")));
        }
        let err: Option<ErrorBody> = serde_json::from_slice(&resp.body).ok();
        Err(match err {
            Some(b) if b.error == "UnknownFrame" => DetectError::UnknownFrame(frame.image_id.clone()),
            Some(b) => DetectError::Failed(format!("{}: {}", b.error, b.message)),
            None => DetectError::BackendUnavailable(format!("HTTP {}", resp.status)),
        })
    }
}

impl Detector for RemoteDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn detect(&self, frame: &Frame) -> Result<DetectionResult, DetectError> {
        self.call(frame, None)
    }

    fn detect_in_crop(&self, frame: &Frame, crop: &Crop) -> Result<DetectionResult, DetectError> {
        self.call(frame, Some(crop))
    }
}

fn error(status: StatusCode, code: &str, message: String) -> Response {
    (
        status,
        Json(ErrorBody {
            error: code.into(),
            stage: Some("detect".into()),
            message,
        }),
    )
        .into_response()
}

/// Router exposing `detector` as a detector service.
pub fn detect_service(detector: Arc<dyn Detector>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(serde_json::json!({"status": "ok"})) }))
        .route(
            "/detect",
            post(move |headers: HeaderMap, body: Bytes| {
                let detector = detector.clone();
                async move {
                    let header = |n: &str| headers.get(n).and_then(|v| v.to_str().ok()).map(str::to_string);
                    let id = header("x-frame-id").unwrap_or_default();
                    let crop: Option<Crop> = match header("x-crop").map(|s| serde_json::from_str(&s)) {
                        Some(Err(e)) => return error(StatusCode::BAD_REQUEST, "InvalidHeader", e.to_string()),
                        Some(Ok(c)) => Some(c),
                        None => None,
                    };
                    let hint: Option<OracleHint> = match header("x-oracle").map(|s| serde_json::from_str(&s)) {
                        Some(Err(e)) => return error(StatusCode::BAD_REQUEST, "InvalidHeader", e.to_string()),
                        Some(Ok(h)) => Some(h),
                        None => None,
                    };
                    let res = tokio::task::spawn_blocking(move || {
                        let img = image::load_from_memory(&body).map_err(|e| (StatusCode::BAD_REQUEST, "UndecodableImage", e.to_string()))?;
                        let mut frame = Frame::from_image(id, img);
                        if let Some(h) = hint {
                            frame = frame.with_oracle(h);
                        }
                        let r = match &crop {
                            Some(c) => detector.detect_in_crop(&frame, c),
                            None => detector.detect(&frame),
                        };
                        r.map_err(|e| (StatusCode::UNPROCESSABLE_ENTITY, e.code(), e.to_string()))
                    })
                    .await;
                    match res {
                        Ok(Ok(det)) => Json(det).into_response(),
                        Ok(Err((status, code, msg))) => error(status, code, msg),
                        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()),
                    }
                }
            }),
        )
}
