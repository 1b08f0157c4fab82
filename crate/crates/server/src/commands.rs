//! Library side of the `edgepose` subcommands.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use edgepose_core::calibration::{run_calibration, CalibrationError, CalibrationReport, CalibrationRequest};
use edgepose_core::dataset::{
    augment, load_dataset, load_model, save_dataset, write_synthetic, synth_generate, AugmentError,
    AugmentOp, Dataset, DatasetError, RandomViewSampler, SynthError, SynthOptions,
};
use edgepose_core::detector::{AnnotationStore, Detector, OracleDetector};
use edgepose_core::geometry::{CameraIntrinsics, Pose};
use edgepose_core::metrics::{add_metric, is_correct, AccuracyOptions, MetricsError, ObjectModel};
use edgepose_core::pnp::{solve_pnp, Correspondence, PnpError, PnpOptions, PnpResult};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::BenchError;
use crate::config::{Config, ConfigError};
use crate::proxy::{BackendSpec, ProxyConfig};
use crate::remote::RemoteDetector;
use crate::server::{PnpRequest, ServeError, ServerOptions};

pub const DEFAULT_MODEL_NAME: &str = "cube";
pub const DEFAULT_CUBE_SIDE_M: f64 = 0.3;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}, column {column}: {message}")]
    Json {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Pnp(#[from] PnpError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error("augmentation of `{image_id}` failed: {source}")]
    Augment {
        image_id: String,
        #[source]
        source: AugmentError,
    },
    #[error("{0}")]
    Usage(String),
}

impl CommandError {
    /// Stable identifier printed in the `error` field on stderr.
    pub fn code(&self) -> &'static str {
        match self {
            CommandError::Config(_) => "ConfigError",
            CommandError::Io { .. } => "IoError",
            CommandError::Json { .. } => "MalformedJson",
            CommandError::Dataset(DatasetError::SchemaVersionMismatch { .. }) => "SchemaVersionMismatch",
            CommandError::Dataset(DatasetError::MalformedRecord { .. }) => "MalformedRecord",
            CommandError::Dataset(_) => "DatasetError",
            CommandError::Synth(_) => "SynthError",
            CommandError::Metrics(_) => "MetricsError",
            CommandError::Pnp(e) => e.code(),
            CommandError::Calibration(_) => "CalibrationError",
            CommandError::Bench(BenchError::ServerUnreachable(_)) => "ServerUnreachable",
            CommandError::Bench(BenchError::UnknownProxy(_)) => "UnknownProxy",
            CommandError::Bench(_) => "BenchError",
            CommandError::Serve(ServeError::PortInUse(_)) => "PortInUse",
            CommandError::Serve(_) => "ServeError",
            CommandError::Augment { .. } => "AugmentError",
            CommandError::Usage(_) => "UsageError",
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, CommandError> {
    std::fs::read_to_string(path).map_err(|source| CommandError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T, CommandError> {
    serde_json::from_str(text).map_err(|e| CommandError::Json {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CommandError> {
    parse_json(&read_text(path)?, path)
}

/// Writes `text` to `path`, or to stdout when `path` is `None`.
pub fn write_output(path: Option<&Path>, text: &str) -> Result<(), CommandError> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|source| CommandError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            std::fs::write(p, text).map_err(|source| CommandError::Io {
                path: p.to_path_buf(),
                source,
            })
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

pub fn default_model() -> ObjectModel {
    ObjectModel::cube(DEFAULT_MODEL_NAME, DEFAULT_CUBE_SIDE_M).expect("valid cube")
}

pub fn model_or_default(path: Option<&Path>) -> Result<ObjectModel, CommandError> {
    match path {
        Some(p) => Ok(load_model(p)?),
        None => Ok(default_model()),
    }
}

/// Everything `serve` needs, resolved from a validated [`Config`].
pub struct ServePlan {
    pub bind: std::net::SocketAddr,
    pub proxies: Vec<ProxyConfig>,
    pub options: ServerOptions,
    pub store: Arc<AnnotationStore>,
}

pub fn plan_serve(cfg: &Config) -> Result<ServePlan, CommandError> {
    let bind = cfg.bind_addr()?;
    let model = Arc::new(model_or_default(cfg.model.as_deref())?);
    let k = cfg.intrinsics_or_default();
    let store = Arc::new(AnnotationStore::new());
    for path in &cfg.datasets {
        store.insert_dataset(&load_dataset(path)?);
    }
    let robot_map = match &cfg.robot_map_pose {
        Some(p) => Some(read_json::<Pose>(p)?),
        None => None,
    };

    let mut proxies = Vec::with_capacity(cfg.proxies.len());
    for spec in &cfg.proxies {
        let detector: Arc<dyn Detector> = match &spec.backend {
            BackendSpec::Oracle => Arc::new(OracleDetector::new(
                model.clone(),
                spec.noise.unwrap_or_else(|| cfg.noise_model()),
                store.clone(),
            )),
            BackendSpec::Remote { url } => Arc::new(RemoteDetector::new(url.clone())),
        };
        proxies.push(
            ProxyConfig::new(spec.name.clone(), spec.pipeline, detector, model.clone(), k)
                .with_max_in_flight(spec.max_in_flight),
        );
    }
    Ok(ServePlan {
        bind,
        proxies,
        options: ServerOptions {
            static_dir: cfg.static_dir.clone(),
            robot_map,
        },
        store,
    })
}

/// One predicted pose, as read by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_records: usize,
    pub n_scored: usize,
    /// Records without a prediction; they count as incorrect.
    pub missing: Vec<String>,
    /// Records flagged `chirality_approximate`; not scored.
    pub excluded_chirality: usize,
    pub threshold_fraction: f64,
    pub accuracy: f64,
    pub mean_add_m: Option<f64>,
}

/// Scores predictions against a dataset with ADD at `threshold_fraction` of the diameter.
pub fn evaluate(
    ds: &Dataset,
    preds: &[Prediction],
    model: &ObjectModel,
    threshold_fraction: f64,
) -> Result<EvalReport, CommandError> {
    let opts = AccuracyOptions {
        threshold_fraction,
        symmetric: false,
    };
    if !(threshold_fraction > 0.0) {
        return Err(MetricsError::InvalidThreshold(threshold_fraction).into());
    }
    let mut seen = HashSet::new();
    for p in preds {
        if !seen.insert(p.image_id.as_str()) {
            return Err(CommandError::Usage(format!("duplicate prediction for `{}`", p.image_id)));
        }
    }

    let mut scored = 0usize;
    let mut correct = 0usize;
    let mut add_sum = 0.0;
    let mut n_add = 0usize;
    let mut missing = Vec::new();
    let mut excluded = 0usize;
    for rec in &ds.records {
        if rec.chirality_approximate {
            excluded += 1;
            continue;
        }
        scored += 1;
        match preds.iter().find(|p| p.image_id == rec.image_id) {
            Some(p) => {
                add_sum += add_metric(&p.pose, &rec.pose, model)?;
                n_add += 1;
                if is_correct(&p.pose, &rec.pose, model, &opts)? {
                    correct += 1;
                }
            }
            None => missing.push(rec.image_id.clone()),
        }
    }
    if scored == 0 {
        return Err(MetricsError::EmptyDataset.into());
    }
    Ok(EvalReport {
        n_records: ds.records.len(),
        n_scored: scored,
        missing,
        excluded_chirality: excluded,
        threshold_fraction,
        accuracy: correct as f64 / scored as f64,
        mean_add_m: (n_add > 0).then(|| add_sum / n_add as f64),
    })
}

/// `rotate:<degrees>`, `scale:<factor>`, `hflip` or `contrast:<gamma>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec(pub AugmentOp);

impl FromStr for AugmentSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = || -> Result<f64, String> {
            let a = arg.ok_or_else(|| format!("`{name}` needs a value, e.g. `{name}:1.5`"))?;
            a.parse::<f64>().map_err(|e| format!("`{a}`: {e}"))
        };
        let op = match name {
            "rotate" => AugmentOp::Rotate { radians: num()?.to_radians() },
            "scale" => AugmentOp::Scale { factor: num()? },
            "contrast" => AugmentOp::Contrast { gamma: num()? },
            "hflip" if arg.is_none() => AugmentOp::Hflip,
            "hflip" => return Err("`hflip` takes no value".into()),
            other => {
                return Err(format!(
                    "unknown augmentation `{other}` (expected rotate, scale, hflip or contrast)"
                ))
            }
        };
        Ok(AugmentSpec(op))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedAugmentation {
    pub image_id: String,
    pub op: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub originals: usize,
    pub augmented: usize,
    pub skipped: Vec<SkippedAugmentation>,
}

/// Augments every record of `ds` (images under `base_dir`) with every op and
/// writes originals plus results as a new dataset under `out_dir`.
///
/// Records whose labels leave the frame are skipped and listed in the summary.
pub fn augment_dataset(
    ds: &Dataset,
    base_dir: &Path,
    ops: &[AugmentOp],
    model: &ObjectModel,
    out_dir: &Path,
) -> Result<AugmentSummary, CommandError> {
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|source| CommandError::Io {
        path: images_dir.clone(),
        source,
    })?;
    let mut out = ds.clone();
    let mut skipped = Vec::new();
    let mut augmented = 0usize;
    for (i, rec) in ds.records.iter().enumerate() {
        let src = base_dir.join(&rec.image_path);
        let img = image::open(&src)
            .map_err(|e| CommandError::Io {
                path: src.clone(),
                source: std::io::Error::other(e),
            })?
            .to_rgb8();
        let kept_path = format!("images/{}.png", rec.image_id);
        save_png(&img, &out_dir.join(&kept_path))?;
        out.records[i].image_path = kept_path;

        for op in ops {
            match augment(rec, &img, *op, model) {
                Ok((new_rec, new_img)) => {
                    save_png(&new_img, &out_dir.join(&new_rec.image_path))?;
                    out.records.push(new_rec);
                    augmented += 1;
                }
                Err(
                    e @ (AugmentError::KeypointsOutOfFrame(_)
                    | AugmentError::PnpFailure(_)
                    | AugmentError::InconsistentLabels(_)),
                ) => skipped.push(SkippedAugmentation {
                    image_id: rec.image_id.clone(),
                    op: op.tag(),
                    reason: e.to_string(),
                }),
                Err(source) => {
                    return Err(CommandError::Augment {
                        image_id: rec.image_id.clone(),
                        source,
                    })
                }
            }
        }
    }
    out.validate()?;
    save_dataset(&out, out_dir.join("dataset.json"))?;
    Ok(AugmentSummary {
        originals: ds.records.len(),
        augmented,
        skipped,
    })
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<(), CommandError> {
    img.save(path).map_err(|e| CommandError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthRequest {
    pub n: usize,
    pub seed: u64,
    pub min_distance_m: f64,
    pub max_distance_m: f64,
}

/// Renders `req.n` labelled frames into `out_dir` (`dataset.json` + `images/`).
pub fn synthesize(
    model: &ObjectModel,
    k: &CameraIntrinsics,
    req: &SynthRequest,
    out_dir: &Path,
) -> Result<Dataset, CommandError> {
    if !(req.min_distance_m > 0.0 && req.min_distance_m <= req.max_distance_m) {
        return Err(CommandError::Usage(format!(
            "distance range must satisfy 0 < min <= max, got [{}, {}]",
            req.min_distance_m, req.max_distance_m
        )));
    }
    let mut sampler = RandomViewSampler::new(*k, req.min_distance_m, req.max_distance_m);
    let set = synth_generate(model, k, &mut sampler, req.n, &SynthOptions::with_seed(req.seed))?;
    write_synthetic(&set, out_dir)?;
    Ok(set.dataset)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PnpInput {
    Full(PnpRequest),
    Bare(Vec<Correspondence>),
}

/// Solves PnP from a JSON file holding either a `/pnp` request body or a bare
/// correspondence array; the latter needs `intrinsics`.
pub fn pnp_from_file(path: &Path, intrinsics: Option<CameraIntrinsics>) -> Result<PnpResult, CommandError> {
    let text = read_text(path)?;
    let value: serde_json::Value = parse_json(&text, path)?;
    let input = if value.is_array() {
        PnpInput::Bare(parse_json(&text, path)?)
    } else {
        PnpInput::Full(parse_json(&text, path)?)
    };
    let (corrs, k) = match input {
        PnpInput::Full(req) => (req.correspondences, intrinsics.unwrap_or(req.intrinsics)),
        PnpInput::Bare(c) => (
            c,
            intrinsics.ok_or_else(|| {
                CommandError::Usage("a bare correspondence array needs --intrinsics".into())
            })?,
        ),
    };
    Ok(solve_pnp(&corrs, &k, &PnpOptions::default())?)
}

pub fn calibrate_from_file(path: &Path) -> Result<CalibrationReport, CommandError> {
    let req: CalibrationRequest = read_json(path)?;
    Ok(run_calibration(&req)?)
}
