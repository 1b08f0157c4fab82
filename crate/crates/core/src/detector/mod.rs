//! Pluggable keypoint/box detectors and the two pose pipelines built on them.
//!
//! The [`OracleDetector`] reads ground truth annotations and perturbs the
//! projected keypoints with a seeded noise model; it stands in for trained
//! networks. Remote backends implement the same [`Detector`] trait.

mod oracle;
mod pipeline;
pub mod stub;

use std::collections::BTreeMap;
use std::sync::Arc;

use image::DynamicImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AnnotationRecord, BBox2};
use crate::geometry::Pixel2;

pub use oracle::{AnnotationStore, OracleDetector, OracleNoiseModel};
pub use pipeline::{
    betapose_keypoints, betapose_locate, run_betapose_pipeline, run_sspe_pipeline, Crop,
    LocateOutput, PipelineError, PipelineOptions, PipelineOutput, StageTimings,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("no annotation available for frame `{0}`")]
    UnknownFrame(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("detector failed: {0}")]
    Failed(String),
}

impl DetectError {
    pub fn code(&self) -> &'static str {
        match self {
            DetectError::UnknownFrame(_) => "UnknownFrame",
            DetectError::BackendUnavailable(_) => "BackendUnavailable",
            DetectError::Failed(_) => "DetectorFailed",
        }
    }
}

/// Ground truth shipped alongside a frame for oracle backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OracleHint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<AnnotationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<OracleNoiseModel>,
}

/// A frame as seen by a detector.
#[derive(Debug, Clone)]
pub struct Frame {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub image: Option<Arc<DynamicImage>>,
    pub oracle: Option<OracleHint>,
}

impl Frame {
    pub fn new(image_id: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            image: None,
            oracle: None,
        }
    }

    pub fn from_image(image_id: impl Into<String>, image: DynamicImage) -> Self {
        let (width, height) = (image.width(), image.height());
        Self {
            image_id: image_id.into(),
            width,
            height,
            image: Some(Arc::new(image)),
            oracle: None,
        }
    }

    pub fn with_oracle(mut self, hint: OracleHint) -> Self {
        self.oracle = Some(hint);
        self
    }

    pub fn contains(&self, p: &Pixel2) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u < self.width as f64 && p.v < self.height as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedKeypoint {
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
}

impl DetectedKeypoint {
    pub fn pixel(&self) -> Pixel2 {
        Pixel2::new(self.u, self.v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub object_class: String,
    pub confidence: f64,
    pub bbox_2d: BBox2,
    pub keypoints_2d: BTreeMap<String, DetectedKeypoint>,
    /// Keypoints the backend could not localize (dropout, out of frame or crop).
    #[serde(default)]
    pub dropped: Vec<String>,
    pub timing_ms: f64,
}

impl DetectionResult {
    /// Result restricted to a crop window, in crop coordinates.
    pub fn into_crop(mut self, crop: &Crop) -> Self {
        let mut kept = BTreeMap::new();
        for (name, kp) in std::mem::take(&mut self.keypoints_2d) {
            if crop.contains(&kp.pixel()) {
                kept.insert(
                    name,
                    DetectedKeypoint {
                        u: kp.u - crop.u0,
                        v: kp.v - crop.v0,
                        ..kp
                    },
                );
            } else {
                self.dropped.push(name);
            }
        }
        self.dropped.sort();
        self.keypoints_2d = kept;
        self
    }
}

/// A detection backend. Implementations must tolerate concurrent calls.
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    fn detect(&self, frame: &Frame) -> Result<DetectionResult, DetectError>;

    /// Keypoints inside `crop`, reported in crop coordinates.
    fn detect_in_crop(&self, frame: &Frame, crop: &Crop) -> Result<DetectionResult, DetectError> {
        Ok(self.detect(frame)?.into_crop(crop))
    }
}

impl<D: Detector + ?Sized> Detector for Arc<D> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn detect(&self, frame: &Frame) -> Result<DetectionResult, DetectError> {
        (**self).detect(frame)
    }

    fn detect_in_crop(&self, frame: &Frame, crop: &Crop) -> Result<DetectionResult, DetectError> {
        (**self).detect_in_crop(frame, crop)
    }
}
