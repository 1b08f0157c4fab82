//! Rigid SE(3) poses, the pinhole camera model and projection.
//!
//! A [`Pose`] `T_a_b` maps coordinates expressed in frame `b` into frame `a`,
//! so an object pose is "object in camera": `p_cam = R * p_obj + t`.
//! Pixels use the image convention: origin top-left, `+u` right, `+v` down.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;

/// Minimum camera-frame depth (meters) a point needs to be projectable.
pub const MIN_DEPTH: f64 = 1e-6;

const UNDISTORT_MAX_ITERATIONS: usize = 20;
const UNDISTORT_TOLERANCE_PX: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point behind camera (camera-frame z = {z})")]
    PointBehindCamera { z: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("quaternion has zero or non-finite norm")]
    InvalidQuaternion,
}

/// A pixel location (`u` right, `v` down). Serialized as `[u, v]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Pixel2 {
    pub u: f64,
    pub v: f64,
}

impl Pixel2 {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Pixel2) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

impl From<[f64; 2]> for Pixel2 {
    fn from([u, v]: [f64; 2]) -> Self {
        Self { u, v }
    }
}

impl From<Pixel2> for [f64; 2] {
    fn from(p: Pixel2) -> Self {
        [p.u, p.v]
    }
}

/// Rigid transform stored as a unit quaternion and a translation in meters.
///
/// JSON form: `{"q": [w, x, y, z], "t": [x, y, z]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    q: [f64; 4],
    t: [f64; 3],
}

impl TryFrom<PoseRepr> for Pose {
    type Error = GeometryError;

    fn try_from(r: PoseRepr) -> Result<Self, Self::Error> {
        let [w, x, y, z] = r.q;
        Pose::from_wxyz(w, x, y, z, Vector3::from(r.t))
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        PoseRepr {
            q: p.quaternion_wxyz(),
            t: p.translation.into(),
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        let mut rotation = rotation;
        if (rotation.norm() - 1.0).abs() > 1e-12 {
            rotation.renormalize();
        }
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from raw quaternion components. A quaternion already
    /// within 1e-9 of unit norm is kept bit-for-bit so serialized poses
    /// round-trip exactly; anything else is normalized.
    pub fn from_wxyz(
        w: f64,
        x: f64,
        y: f64,
        z: f64,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if !norm.is_finite() || norm < 1e-12 || !translation.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::InvalidQuaternion);
        }
        let rotation = if (norm - 1.0).abs() <= 1e-9 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized), no translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        Self::new(UnitQuaternion::from_axis_angle(&axis, angle), Vector3::zeros())
    }

    /// Rotation given as a rotation vector (axis times angle).
    pub fn from_scaled_axis(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(axis_angle), translation)
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Homogeneous 4x4 view of the pose.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        rotation.renormalize();
        Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rotation = self.rotation.inverse();
        Pose {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Angle in radians of the relative rotation between two poses.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// Pinhole intrinsics with optional two-term radial distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsRepr", into = "IntrinsicsRepr")]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub k1: f64,
    pub k2: f64,
}

#[derive(Serialize, Deserialize)]
struct IntrinsicsRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    #[serde(default)]
    k1: f64,
    #[serde(default)]
    k2: f64,
}

impl TryFrom<IntrinsicsRepr> for CameraIntrinsics {
    type Error = GeometryError;

    fn try_from(r: IntrinsicsRepr) -> Result<Self, Self::Error> {
        CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)?.with_distortion(r.k1, r.k2)
    }
}

impl From<CameraIntrinsics> for IntrinsicsRepr {
    fn from(k: CameraIntrinsics) -> Self {
        IntrinsicsRepr {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            k1: k.k1,
            k2: k.k2,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point must be finite".into(),
            ));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image size must be positive ({width}x{height})"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            k1: 0.0,
            k2: 0.0,
        })
    }

    pub fn with_distortion(mut self, k1: f64, k2: f64) -> Result<Self, GeometryError> {
        if !(k1.is_finite() && k2.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(
                "distortion coefficients must be finite".into(),
            ));
        }
        self.k1 = k1;
        self.k2 = k2;
        Ok(self)
    }

    /// 640x480 camera with a 500 px focal length and centered principal point.
    pub fn vga() -> Self {
        Self::new(500.0, 500.0, 320.0, 240.0, 640, 480).expect("valid constants")
    }

    pub fn has_distortion(&self) -> bool {
        self.k1 != 0.0 || self.k2 != 0.0
    }

    fn radial_factor(&self, x: f64, y: f64) -> f64 {
        let r2 = x * x + y * y;
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }

    /// Normalized image coordinates to pixels, applying distortion.
    pub fn normalized_to_pixel(&self, x: f64, y: f64) -> Pixel2 {
        let f = self.radial_factor(x, y);
        Pixel2::new(self.cx + self.fx * x * f, self.cy + self.fy * y * f)
    }

    /// Pixels to undistorted normalized coordinates by fixed-point iteration.
    pub fn pixel_to_normalized(&self, px: &Pixel2) -> (f64, f64) {
        let xd = (px.u - self.cx) / self.fx;
        let yd = (px.v - self.cy) / self.fy;
        if !self.has_distortion() {
            return (xd, yd);
        }
        let (mut x, mut y) = (xd, yd);
        for _ in 0..UNDISTORT_MAX_ITERATIONS {
            let f = self.radial_factor(x, y);
            x = xd / f;
            y = yd / f;
            let back = self.normalized_to_pixel(x, y);
            if back.distance(px) < UNDISTORT_TOLERANCE_PX {
                break;
            }
        }
        (x, y)
    }

    /// Pixel location an ideal (distortion-free) camera would observe.
    pub fn undistort_pixel(&self, px: &Pixel2) -> Pixel2 {
        let (x, y) = self.pixel_to_normalized(px);
        Pixel2::new(self.cx + self.fx * x, self.cy + self.fy * y)
    }

    pub fn project_camera_point(&self, p: &Point3) -> Result<Pixel2, GeometryError> {
        if !(p.z > MIN_DEPTH) {
            return Err(GeometryError::PointBehindCamera { z: p.z });
        }
        Ok(self.normalized_to_pixel(p.x / p.z, p.y / p.z))
    }

    /// Camera-frame point at depth `z` seen at pixel `px`.
    pub fn unproject(&self, px: &Pixel2, z: f64) -> Point3 {
        let (x, y) = self.pixel_to_normalized(px);
        Point3::new(x * z, y * z, z)
    }

    pub fn contains(&self, px: &Pixel2) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u < self.width as f64 && px.v < self.height as f64
    }

    /// Intrinsics of the same camera after resizing its images by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: ((self.width as f64) * s).round().max(1.0) as u32,
            height: ((self.height as f64) * s).round().max(1.0) as u32,
            ..*self
        }
    }
}

/// Projects an object-frame point through `object_pose` into pixels.
pub fn project(
    pt: &Point3,
    object_pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<Pixel2, GeometryError> {
    k.project_camera_point(&object_pose.transform_point(pt))
}
