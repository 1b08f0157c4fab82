use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use edgepose_core::detector::{Detector, OracleNoiseModel, PipelineOptions};
use edgepose_core::geometry::CameraIntrinsics;
use edgepose_core::metrics::ObjectModel;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    /// One detector emits all keypoints, then PnP.
    SspeStyle,
    /// Box detector, keypoint detector on the crop, then PnP, run as stages.
    BetaposeStyle,
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PipelineKind::SspeStyle => "sspe_style",
            PipelineKind::BetaposeStyle => "betapose_style",
        })
    }
}

impl FromStr for PipelineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sspe_style" | "sspe" => Ok(PipelineKind::SspeStyle),
            "betapose_style" | "betapose" => Ok(PipelineKind::BetaposeStyle),
            other => Err(format!(
                "unknown pipeline `{other}` (expected sspe_style or betapose_style)"
            )),
        }
    }
}

/// Where a proxy's detections come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Ground-truth oracle reading the server's annotation store or the
    /// frame's `X-Oracle` hint.
    #[default]
    Oracle,
    /// A detector service answering `POST {url}/detect`.
    Remote { url: String },
}

/// A named pipeline hosted by the server.
#[derive(Clone)]
pub struct ProxyConfig {
    pub name: String,
    pub pipeline: PipelineKind,
    /// Box stage of the two-stage pipeline; unused by the single-stage one.
    pub bbox_detector: Arc<dyn Detector>,
    pub kp_detector: Arc<dyn Detector>,
    pub model: Arc<ObjectModel>,
    /// Used when a frame carries no intrinsics of its own.
    pub intrinsics: CameraIntrinsics,
    pub max_in_flight: usize,
    pub options: PipelineOptions,
}

impl fmt::Debug for ProxyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProxyConfig")
            .field("name", &self.name)
            .field("pipeline", &self.pipeline)
            .field("bbox_detector", &self.bbox_detector.name())
            .field("kp_detector", &self.kp_detector.name())
            .field("model", &self.model.name())
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

impl ProxyConfig {
    pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

    /// Proxy whose stages all use `detector`.
    pub fn new(
        name: impl Into<String>,
        pipeline: PipelineKind,
        detector: Arc<dyn Detector>,
        model: Arc<ObjectModel>,
        intrinsics: CameraIntrinsics,
    ) -> Self {
        Self {
            name: name.into(),
            pipeline,
            bbox_detector: detector.clone(),
            kp_detector: detector,
            model,
            intrinsics,
            max_in_flight: Self::DEFAULT_MAX_IN_FLIGHT,
            options: PipelineOptions::default(),
        }
    }

    pub fn with_bbox_detector(mut self, detector: Arc<dyn Detector>) -> Self {
        self.bbox_detector = detector;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n;
        self
    }

    pub fn with_options(mut self, options: PipelineOptions) -> Self {
        self.options = options;
        self
    }
}

/// Serializable proxy definition as found in config files and `--proxy` flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxySpec {
    pub name: String,
    pub pipeline: PipelineKind,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Per-proxy oracle noise; falls back to the server-wide model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<OracleNoiseModel>,
}

fn default_max_in_flight() -> usize {
    ProxyConfig::DEFAULT_MAX_IN_FLIGHT
}

impl FromStr for ProxySpec {
    type Err = String;

    /// Parses `name=pipeline`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, pipeline) = s
            .split_once('=')
            .ok_or_else(|| format!("expected name=pipeline, got `{s}`"))?;
        if name.is_empty() {
            return Err(format!("empty proxy name in `{s}`"));
        }
        Ok(Self {
            name: name.to_string(),
            pipeline: pipeline.parse()?,
            backend: BackendSpec::Oracle,
            max_in_flight: default_max_in_flight(),
            noise: None,
        })
    }
}
