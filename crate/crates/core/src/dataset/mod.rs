//! Annotation schema, dataset persistence, augmentation and synthetic frames.
//!
//! On-disk format (`schema_version` "1.0"):
//!
//! ```json
//! {"schema_version": "1.0", "model": "cube", "records": [
//!   {"image_id": "...", "image_path": "images/x.png", "object_class": "cube",
//!    "pose": {"q": [w, x, y, z], "t": [x, y, z]},
//!    "intrinsics": {"fx": .., "fy": .., "cx": .., "cy": .., "width": .., "height": .., "k1": .., "k2": ..},
//!    "keypoints_2d": {"corner0": [u, v], ...},
//!    "bbox_2d": [u_min, v_min, u_max, v_max],
//!    "source": "real" | "synthetic" | "augmented",
//!    "parent_id": "...", "chirality_approximate": true}
//! ]}
//! ```
//!
//! Unknown fields at the top level and on records survive a load/save cycle.

mod augment;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::geometry::{project, CameraIntrinsics, GeometryError, Pixel2, Pose};
use crate::metrics::ObjectModel;

pub use augment::{augment, AugmentError, AugmentOp};
pub use synth::{
    render_wireframe, synth_generate, write_synthetic, Background, DistanceSampler,
    FixedPoseSampler, PoseSampler, RandomViewSampler, SynthError, SynthOptions, SyntheticSet,
};

pub const SCHEMA_VERSION: &str = "1.0";

/// Maximum keypoint/projection disagreement for a pose-consistent record.
pub const LABEL_TOLERANCE_PX: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersionMismatch { expected: String, found: String },
    #[error("malformed record {index}: field `{field}`: {message}")]
    MalformedRecord {
        index: usize,
        field: String,
        message: String,
    },
    #[error("malformed dataset: {0}")]
    MalformedDataset(String),
    #[error("duplicate image_id `{0}`")]
    DuplicateImageId(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthetic,
    Augmented,
}

/// Axis-aligned 2D box in pixels, serialized as `[u_min, v_min, u_max, v_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox2 {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl TryFrom<[f64; 4]> for BBox2 {
    type Error = String;

    fn try_from(a: [f64; 4]) -> Result<Self, Self::Error> {
        BBox2::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox2> for [f64; 4] {
    fn from(b: BBox2) -> Self {
        [b.u_min, b.v_min, b.u_max, b.v_max]
    }
}

impl BBox2 {
    pub fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Result<Self, String> {
        if !(u_min < u_max && v_min < v_max) {
            return Err(format!(
                "empty box [{u_min}, {v_min}, {u_max}, {v_max}] (need min < max)"
            ));
        }
        Ok(Self {
            u_min,
            v_min,
            u_max,
            v_max,
        })
    }

    /// Smallest box containing `points`, padded so it is never empty.
    pub fn enclosing<'a>(points: impl IntoIterator<Item = &'a Pixel2>) -> Option<Self> {
        let mut it = points.into_iter().peekable();
        it.peek()?;
        let (mut u0, mut v0, mut u1, mut v1) = (
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        );
        for p in it {
            u0 = u0.min(p.u);
            v0 = v0.min(p.v);
            u1 = u1.max(p.u);
            v1 = v1.max(p.v);
        }
        if u1 <= u0 {
            u1 = u0 + 1.0;
        }
        if v1 <= v0 {
            v1 = v0 + 1.0;
        }
        Some(Self {
            u_min: u0,
            v_min: v0,
            u_max: u1,
            v_max: v1,
        })
    }

    pub fn contains(&self, p: &Pixel2) -> bool {
        p.u >= self.u_min && p.u <= self.u_max && p.v >= self.v_min && p.v <= self.v_max
    }

    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn corners(&self) -> [Pixel2; 4] {
        [
            Pixel2::new(self.u_min, self.v_min),
            Pixel2::new(self.u_max, self.v_min),
            Pixel2::new(self.u_min, self.v_max),
            Pixel2::new(self.u_max, self.v_max),
        ]
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub image_path: String,
    pub object_class: String,
    /// Object-in-camera pose.
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    #[serde(default)]
    pub keypoints_2d: BTreeMap<String, Pixel2>,
    pub bbox_2d: BBox2,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub chirality_approximate: bool,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl AnnotationRecord {
    /// Largest distance between stored keypoints and the model keypoints
    /// projected under the stored pose. Keypoints absent from the model are ignored.
    pub fn max_label_error(&self, model: &ObjectModel) -> Result<f64, GeometryError> {
        let mut worst = 0.0f64;
        for (name, px) in &self.keypoints_2d {
            if let Some(p) = model.keypoint(name) {
                let proj = project(p, &self.pose, &self.intrinsics)?;
                worst = worst.max(proj.distance(px));
            }
        }
        Ok(worst)
    }

    pub fn is_label_consistent(&self, model: &ObjectModel) -> bool {
        self.max_label_error(model)
            .is_ok_and(|e| e < LABEL_TOLERANCE_PX)
    }

    fn check_invariants(&self) -> Result<(), (String, String)> {
        for (name, p) in &self.keypoints_2d {
            if !self.bbox_2d.contains(p) {
                return Err((
                    format!("keypoints_2d.{name}"),
                    "keypoint lies outside bbox_2d".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema_version: String,
    /// Name of the object model the records refer to.
    pub model: String,
    pub records: Vec<AnnotationRecord>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Dataset {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            model: model.into(),
            records: Vec::new(),
            extra: Map::new(),
        }
    }

    pub fn get(&self, image_id: &str) -> Option<&AnnotationRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::SchemaVersionMismatch {
                expected: SCHEMA_VERSION.into(),
                found: self.schema_version.clone(),
            });
        }
        let mut seen = HashSet::new();
        for (index, r) in self.records.iter().enumerate() {
            if !seen.insert(r.image_id.as_str()) {
                return Err(DatasetError::DuplicateImageId(r.image_id.clone()));
            }
            r.check_invariants()
                .map_err(|(field, message)| DatasetError::MalformedRecord {
                    index,
                    field,
                    message,
                })?;
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String, DatasetError> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self, DatasetError> {
        let value: Value = serde_json::from_str(s)?;
        Self::from_json_value(value)
    }

    pub fn from_json_value(value: Value) -> Result<Self, DatasetError> {
        let Value::Object(mut top) = value else {
            return Err(DatasetError::MalformedDataset(
                "top level must be an object".into(),
            ));
        };
        let version = match top.remove("schema_version") {
            Some(Value::String(v)) => v,
            Some(other) => {
                return Err(DatasetError::MalformedDataset(format!(
                    "schema_version must be a string, got {other}"
                )))
            }
            None => {
                return Err(DatasetError::MalformedDataset(
                    "missing schema_version".into(),
                ))
            }
        };
        if version != SCHEMA_VERSION {
            return Err(DatasetError::SchemaVersionMismatch {
                expected: SCHEMA_VERSION.into(),
                found: version,
            });
        }
        let model = match top.remove("model") {
            Some(Value::String(m)) => m,
            _ => {
                return Err(DatasetError::MalformedDataset(
                    "missing or non-string `model`".into(),
                ))
            }
        };
        let raw_records = match top.remove("records") {
            Some(Value::Array(a)) => a,
            _ => {
                return Err(DatasetError::MalformedDataset(
                    "missing or non-array `records`".into(),
                ))
            }
        };
        let mut records = Vec::with_capacity(raw_records.len());
        for (index, raw) in raw_records.into_iter().enumerate() {
            records.push(parse_record(index, raw)?);
        }
        let ds = Dataset {
            schema_version: version,
            model,
            records,
            extra: top,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn parse_record(index: usize, raw: Value) -> Result<AnnotationRecord, DatasetError> {
    serde_path_to_error::deserialize::<_, AnnotationRecord>(raw).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        let missing = message
            .strip_prefix("missing field `")
            .and_then(|rest| rest.split('`').next())
            .map(str::to_string);
        let field = match (missing, path.as_str()) {
            (Some(m), "." | "") => m,
            (Some(m), p) => format!("{p}.{m}"),
            (None, p) => p.to_string(),
        };
        DatasetError::MalformedRecord {
            index,
            field,
            message,
        }
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let text = ds.to_json_string()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| DatasetError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Dataset::from_json_str(&text)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ObjectModel, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}
