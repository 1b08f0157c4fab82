//! Pose quality metrics: ADD / ADD-S, accuracy at a diameter fraction,
//! keypoint reprojection error and a sampled oriented-box IoU.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraIntrinsics, GeometryError, Point3, Pose};

/// Default ADD acceptance threshold as a fraction of the model diameter.
pub const DEFAULT_ADD_THRESHOLD: f64 = 0.10;

/// Name of the centroid keypoint in the 9-point box vocabulary.
pub const CENTROID_KEYPOINT: &str = "centroid";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("object model has no vertices")]
    EmptyModel,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("threshold fraction must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("at least 10000 samples are required, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid object model: {0}")]
    InvalidModel(String),
}

/// 3D object description shared by every pipeline.
///
/// `bbox_corners` follow a bit ordering: corner `i` takes the max x when bit 0
/// is set, max y for bit 1 and max z for bit 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObjectModelRepr", into = "ObjectModelRepr")]
pub struct ObjectModel {
    name: String,
    vertices: Vec<Point3>,
    keypoints: BTreeMap<String, Point3>,
    bbox_corners: [Point3; 8],
    centroid: Point3,
    diameter: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectModelRepr {
    name: String,
    vertices: Vec<Point3>,
    keypoints: BTreeMap<String, Point3>,
    bbox_corners: [Point3; 8],
    centroid: Point3,
    diameter: f64,
}

impl TryFrom<ObjectModelRepr> for ObjectModel {
    type Error = MetricsError;

    fn try_from(r: ObjectModelRepr) -> Result<Self, Self::Error> {
        let model = ObjectModel::new(r.name, r.vertices, r.keypoints, r.bbox_corners, r.centroid)?;
        let tol = 1e-9 * model.diameter.max(1.0);
        if (model.diameter - r.diameter).abs() > tol {
            return Err(MetricsError::InvalidModel(format!(
                "stored diameter {} does not match recomputed {}",
                r.diameter, model.diameter
            )));
        }
        Ok(model)
    }
}

impl From<ObjectModel> for ObjectModelRepr {
    fn from(m: ObjectModel) -> Self {
        ObjectModelRepr {
            name: m.name,
            vertices: m.vertices,
            keypoints: m.keypoints,
            bbox_corners: m.bbox_corners,
            centroid: m.centroid,
            diameter: m.diameter,
        }
    }
}

fn max_pairwise_distance(points: &[Point3]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm());
        }
    }
    best
}

impl ObjectModel {
    pub fn new(
        name: impl Into<String>,
        vertices: Vec<Point3>,
        keypoints: BTreeMap<String, Point3>,
        bbox_corners: [Point3; 8],
        centroid: Point3,
    ) -> Result<Self, MetricsError> {
        if vertices.is_empty() {
            return Err(MetricsError::EmptyModel);
        }
        let diameter = max_pairwise_distance(&vertices);
        if !(diameter > 0.0) {
            return Err(MetricsError::InvalidModel(
                "diameter must be positive".into(),
            ));
        }
        let (lo, hi) = aabb(&bbox_corners);
        let slack = 1e-9;
        for (i, v) in vertices.iter().enumerate() {
            let inside = (0..3).all(|a| v[a] >= lo[a] - slack && v[a] <= hi[a] + slack);
            if !inside {
                return Err(MetricsError::InvalidModel(format!(
                    "vertex {i} lies outside the bounding box"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            vertices,
            keypoints,
            bbox_corners,
            centroid,
            diameter,
        })
    }

    /// Box-shaped model with the 9-point keypoint vocabulary
    /// (`corner0`..`corner7` plus `centroid`). Vertices are the corners,
    /// the centroid and the edge midpoints.
    pub fn cuboid(name: impl Into<String>, size: Vector3<f64>) -> Result<Self, MetricsError> {
        let h = size / 2.0;
        let corners: [Point3; 8] = std::array::from_fn(|i| {
            Point3::new(
                if i & 1 == 0 { -h.x } else { h.x },
                if i & 2 == 0 { -h.y } else { h.y },
                if i & 4 == 0 { -h.z } else { h.z },
            )
        });
        let mut keypoints = BTreeMap::new();
        for (i, c) in corners.iter().enumerate() {
            keypoints.insert(format!("corner{i}"), *c);
        }
        keypoints.insert(CENTROID_KEYPOINT.to_string(), Point3::origin());
        let mut vertices: Vec<Point3> = corners.to_vec();
        vertices.push(Point3::origin());
        for (a, b) in box_edges() {
            vertices.push(nalgebra::center(&corners[a], &corners[b]));
        }
        Self::new(name, vertices, keypoints, corners, Point3::origin())
    }

    pub fn cube(name: impl Into<String>, side: f64) -> Result<Self, MetricsError> {
        Self::cuboid(name, Vector3::repeat(side))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn keypoints(&self) -> &BTreeMap<String, Point3> {
        &self.keypoints
    }

    pub fn keypoint(&self, name: &str) -> Option<&Point3> {
        self.keypoints.get(name)
    }

    pub fn bbox_corners(&self) -> &[Point3; 8] {
        &self.bbox_corners
    }

    pub fn centroid(&self) -> &Point3 {
        &self.centroid
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Centroid followed by the 8 box corners.
    pub fn box_points(&self) -> [Point3; 9] {
        std::array::from_fn(|i| {
            if i == 0 {
                self.centroid
            } else {
                self.bbox_corners[i - 1]
            }
        })
    }

    /// Replaces the keypoint vocabulary.
    pub fn with_keypoints(mut self, keypoints: BTreeMap<String, Point3>) -> Self {
        self.keypoints = keypoints;
        self
    }
}

/// Index pairs of the 12 box edges under the corner bit ordering.
pub fn box_edges() -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(12);
    for i in 0..8usize {
        for bit in [1usize, 2, 4] {
            if i & bit == 0 {
                edges.push((i, i | bit));
            }
        }
    }
    edges
}

fn aabb(points: &[Point3]) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(&p.coords);
        hi = hi.sup(&p.coords);
    }
    (lo, hi)
}

/// Average distance between model vertices placed by `pred` and by `gt`.
pub fn add_metric(pred: &Pose, gt: &Pose, model: &ObjectModel) -> Result<f64, MetricsError> {
    let v = model.vertices();
    if v.is_empty() {
        return Err(MetricsError::EmptyModel);
    }
    let sum: f64 = v
        .iter()
        .map(|p| (pred.transform_point(p) - gt.transform_point(p)).norm())
        .sum();
    Ok(sum / v.len() as f64)
}

/// Symmetric variant: each ground-truth vertex matched to its closest predicted vertex.
pub fn add_s_metric(pred: &Pose, gt: &Pose, model: &ObjectModel) -> Result<f64, MetricsError> {
    let v = model.vertices();
    if v.is_empty() {
        return Err(MetricsError::EmptyModel);
    }
    let predicted: Vec<Point3> = v.iter().map(|p| pred.transform_point(p)).collect();
    let sum: f64 = v
        .iter()
        .map(|p| {
            let g = gt.transform_point(p);
            predicted
                .iter()
                .map(|q| (q - g).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(sum / v.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyOptions {
    pub threshold_fraction: f64,
    pub symmetric: bool,
}

impl Default for AccuracyOptions {
    fn default() -> Self {
        Self {
            threshold_fraction: DEFAULT_ADD_THRESHOLD,
            symmetric: false,
        }
    }
}

/// Whether `pred` counts as correct: ADD below `threshold_fraction · diameter`.
pub fn is_correct(
    pred: &Pose,
    gt: &Pose,
    model: &ObjectModel,
    opts: &AccuracyOptions,
) -> Result<bool, MetricsError> {
    let d = if opts.symmetric {
        add_s_metric(pred, gt, model)?
    } else {
        add_metric(pred, gt, model)?
    };
    Ok(d < opts.threshold_fraction * model.diameter())
}

/// Fraction of `(pred, gt)` pairs within the ADD threshold.
pub fn add_accuracy(
    records: &[(Pose, Pose)],
    model: &ObjectModel,
    threshold_fraction: f64,
) -> Result<f64, MetricsError> {
    add_accuracy_with(
        records,
        model,
        &AccuracyOptions {
            threshold_fraction,
            symmetric: false,
        },
    )
}

pub fn add_accuracy_with(
    records: &[(Pose, Pose)],
    model: &ObjectModel,
    opts: &AccuracyOptions,
) -> Result<f64, MetricsError> {
    if !(opts.threshold_fraction > 0.0) {
        return Err(MetricsError::InvalidThreshold(opts.threshold_fraction));
    }
    if records.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut correct = 0usize;
    for (pred, gt) in records {
        if is_correct(pred, gt, model, opts)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

/// RMS pixel distance between model keypoints projected under `pred` and `gt`.
pub fn reprojection_rms(
    pred: &Pose,
    gt: &Pose,
    model: &ObjectModel,
    k: &CameraIntrinsics,
) -> Result<f64, MetricsError> {
    let kps = model.keypoints();
    if kps.is_empty() {
        return Err(MetricsError::EmptyModel);
    }
    let mut sum = 0.0;
    for p in kps.values() {
        let a = project(p, pred, k)?;
        let b = project(p, gt, k)?;
        let d = a.distance(&b);
        sum += d * d;
    }
    Ok((sum / kps.len() as f64).sqrt())
}

/// Monte-Carlo IoU of the model's oriented bounding box under two poses.
///
/// Samples are drawn uniformly in the axis-aligned bound of both boxes;
/// identical seeds give bit-identical results.
pub fn obb_iou_sampled(
    pred: &Pose,
    gt: &Pose,
    model: &ObjectModel,
    n_samples: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    if n_samples < 10_000 {
        return Err(MetricsError::TooFewSamples(n_samples));
    }
    let (lo_obj, hi_obj) = aabb(model.bbox_corners());
    let world: Vec<Point3> = model
        .bbox_corners()
        .iter()
        .flat_map(|c| [pred.transform_point(c), gt.transform_point(c)])
        .collect();
    let (lo, hi) = aabb(&world);
    let pred_inv = pred.inverse();
    let gt_inv = gt.inverse();
    let inside = |inv: &Pose, p: &Point3| {
        let q = inv.transform_point(p);
        (0..3).all(|a| q[a] >= lo_obj[a] && q[a] <= hi_obj[a])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut both, mut either) = (0u64, 0u64);
    for _ in 0..n_samples {
        let p = Point3::new(
            rng.random_range(lo.x..=hi.x),
            rng.random_range(lo.y..=hi.y),
            rng.random_range(lo.z..=hi.z),
        );
        let a = inside(&pred_inv, &p);
        let b = inside(&gt_inv, &p);
        if a && b {
            both += 1;
        }
        if a || b {
            either += 1;
        }
    }
    Ok(if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    })
}
