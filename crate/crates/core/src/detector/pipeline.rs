use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DetectError, DetectionResult, Detector, Frame};
use crate::geometry::{CameraIntrinsics, Pixel2};
use crate::metrics::ObjectModel;
use crate::pnp::{solve_pnp, Correspondence, PnpError, PnpOptions, PnpResult};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub pnp: PnpOptions,
    /// Surviving keypoints needed before PnP is attempted.
    pub min_points: usize,
    /// Box-stage confidence below which the object counts as not found.
    pub min_box_confidence: f64,
    /// Padding added around the detected box before cropping.
    pub crop_margin_px: f64,
    /// Offset applied to the crop origin (pixels).
    pub crop_shift: (f64, f64),
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            pnp: PnpOptions::default(),
            min_points: 4,
            min_box_confidence: 0.5,
            crop_margin_px: 16.0,
            crop_shift: (0.0, 0.0),
        }
    }
}

/// Integer-aligned crop window in full-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    pub u0: f64,
    pub v0: f64,
    pub width: f64,
    pub height: f64,
}

impl Crop {
    pub fn contains(&self, p: &Pixel2) -> bool {
        p.u >= self.u0 && p.v >= self.v0 && p.u < self.u0 + self.width && p.v < self.v0 + self.height
    }

    pub fn to_full(&self, p: &Pixel2) -> Pixel2 {
        Pixel2::new(p.u + self.u0, p.v + self.v0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub detect_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kpd_ms: Option<f64>,
    pub pnp_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub pnp: PnpResult,
    /// Detection in full-image coordinates.
    pub detection: DetectionResult,
    pub crop: Option<Crop>,
    pub timings: StageTimings,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("{stage} stage: {source}")]
    Detect {
        stage: &'static str,
        source: DetectError,
    },
    #[error("object not found (box confidence {confidence})")]
    ObjectNotFound { confidence: f64 },
    #[error("pnp stage: {0}")]
    Pnp(#[from] PnpError),
}

impl PipelineError {
    pub fn stage(&self) -> &'static str {
        match self {
            PipelineError::Detect { stage, .. } => stage,
            PipelineError::ObjectNotFound { .. } => "detect",
            PipelineError::Pnp(_) => "pnp",
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Detect { source, .. } => source.code(),
            PipelineError::ObjectNotFound { .. } => "ObjectNotFound",
            PipelineError::Pnp(e) => e.code(),
        }
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn correspondences(det: &DetectionResult, model: &ObjectModel) -> Vec<Correspondence> {
    det.keypoints_2d
        .iter()
        .filter_map(|(name, kp)| {
            model
                .keypoint(name)
                .map(|p| Correspondence::weighted(*p, kp.pixel(), kp.confidence.max(0.0)))
        })
        .collect()
}

fn solve_detection(
    det: &DetectionResult,
    model: &ObjectModel,
    k: &CameraIntrinsics,
    opts: &PipelineOptions,
) -> Result<(PnpResult, f64), PipelineError> {
    let corrs = correspondences(det, model);
    if corrs.len() < opts.min_points.max(3) {
        return Err(PnpError::TooFewPoints(corrs.len()).into());
    }
    let start = Instant::now();
    let result = solve_pnp(&corrs, k, &opts.pnp)?;
    Ok((result, ms_since(start)))
}

/// Single-stage pipeline: one detector emits the box keypoints, then PnP.
pub fn run_sspe_pipeline(
    backend: &dyn Detector,
    frame: &Frame,
    model: &ObjectModel,
    k: &CameraIntrinsics,
    opts: &PipelineOptions,
) -> Result<PipelineOutput, PipelineError> {
    let start = Instant::now();
    let detection = backend
        .detect(frame)
        .map_err(|source| PipelineError::Detect { stage: "detect", source })?;
    let detect_ms = ms_since(start);
    let (pnp, pnp_ms) = solve_detection(&detection, model, k, opts)?;
    Ok(PipelineOutput {
        pnp,
        detection,
        crop: None,
        timings: StageTimings {
            detect_ms,
            kpd_ms: None,
            pnp_ms,
        },
    })
}

/// Output of the box stage of the two-stage pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct LocateOutput {
    pub detection: DetectionResult,
    pub crop: Crop,
    pub detect_ms: f64,
}

/// Box stage: find the object and choose the crop handed to the keypoint stage.
pub fn betapose_locate(
    bbox_backend: &dyn Detector,
    frame: &Frame,
    opts: &PipelineOptions,
) -> Result<LocateOutput, PipelineError> {
    let start = Instant::now();
    let detection = bbox_backend
        .detect(frame)
        .map_err(|source| PipelineError::Detect { stage: "detect", source })?;
    let detect_ms = ms_since(start);
    if !(detection.confidence >= opts.min_box_confidence) {
        return Err(PipelineError::ObjectNotFound {
            confidence: detection.confidence,
        });
    }
    let b = &detection.bbox_2d;
    let (w, h) = (frame.width as f64, frame.height as f64);
    let u0 = (b.u_min - opts.crop_margin_px + opts.crop_shift.0).floor().clamp(0.0, w - 1.0);
    let v0 = (b.v_min - opts.crop_margin_px + opts.crop_shift.1).floor().clamp(0.0, h - 1.0);
    let u1 = (b.u_max + opts.crop_margin_px + opts.crop_shift.0).ceil().clamp(u0 + 1.0, w);
    let v1 = (b.v_max + opts.crop_margin_px + opts.crop_shift.1).ceil().clamp(v0 + 1.0, h);
    Ok(LocateOutput {
        detection,
        crop: Crop {
            u0,
            v0,
            width: u1 - u0,
            height: v1 - v0,
        },
        detect_ms,
    })
}

/// Keypoint stage: detect inside the crop, map back to full-image pixels, solve.
pub fn betapose_keypoints(
    kp_backend: &dyn Detector,
    frame: &Frame,
    located: LocateOutput,
    model: &ObjectModel,
    k: &CameraIntrinsics,
    opts: &PipelineOptions,
) -> Result<PipelineOutput, PipelineError> {
    let crop = located.crop;
    let start = Instant::now();
    let in_crop = kp_backend
        .detect_in_crop(frame, &crop)
        .map_err(|source| PipelineError::Detect { stage: "kpd", source })?;
    let kpd_ms = ms_since(start);

    let mut detection = located.detection;
    detection.keypoints_2d = in_crop
        .keypoints_2d
        .iter()
        .map(|(name, kp)| {
            let full = crop.to_full(&kp.pixel());
            (
                name.clone(),
                super::DetectedKeypoint {
                    u: full.u,
                    v: full.v,
                    confidence: kp.confidence,
                },
            )
        })
        .collect();
    detection.dropped = in_crop.dropped;
    detection.timing_ms = located.detect_ms + kpd_ms;

    let (pnp, pnp_ms) = solve_detection(&detection, model, k, opts)?;
    Ok(PipelineOutput {
        pnp,
        detection,
        crop: Some(crop),
        timings: StageTimings {
            detect_ms: located.detect_ms,
            kpd_ms: Some(kpd_ms),
            pnp_ms,
        },
    })
}

/// Two-stage pipeline: box detector, keypoint detector on the crop, then PnP.
pub fn run_betapose_pipeline(
    bbox_backend: &dyn Detector,
    kp_backend: &dyn Detector,
    frame: &Frame,
    model: &ObjectModel,
    k: &CameraIntrinsics,
    opts: &PipelineOptions,
) -> Result<PipelineOutput, PipelineError> {
    let located = betapose_locate(bbox_backend, frame, opts)?;
    betapose_keypoints(kp_backend, frame, located, model, k, opts)
}
