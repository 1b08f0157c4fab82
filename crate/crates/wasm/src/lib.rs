//! Browser demo over the pose core.
//!
//! Each export takes plain numbers and returns a JSON string so the page
//! needs no bindings beyond the generated glue.

use edgepose_core::geometry::{project, CameraIntrinsics, GeometryError, Pixel2, Pose};
use edgepose_core::metrics::{add_metric, box_edges, MetricsError, ObjectModel};
use edgepose_core::pnp::{solve_pnp, Correspondence, PnpError, PnpOptions};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const CUBE_SIDE_M: f64 = 0.3;
const THRESHOLD_FRACTION: f64 = 0.1;
pub const SWEEP_SIGMAS_PX: [f64; 5] = [0.0, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Pnp(#[from] PnpError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Serialize)]
pub struct Wireframe {
    pub width: u32,
    pub height: u32,
    /// Box corners in pixels; `None` for corners behind the camera.
    pub corners: Vec<Option<[f64; 2]>>,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Serialize)]
pub struct NoisySolve {
    pub observed: Vec<[f64; 2]>,
    pub estimate: Pose,
    pub estimate_wireframe: Wireframe,
    pub add_m: f64,
    pub add_fraction: f64,
    pub correct: bool,
    pub rms_px: f64,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct SweepLevel {
    pub sigma_px: f64,
    pub median_add_m: f64,
    pub accuracy: f64,
    pub failures: usize,
}

fn cube() -> ObjectModel {
    ObjectModel::cube("cube", CUBE_SIDE_M).expect("positive side")
}

/// Pose from an axis-angle rotation in degrees and a translation in metres.
pub fn pose_from_params(rx: f64, ry: f64, rz: f64, tx: f64, ty: f64, tz: f64) -> Result<Pose, DemoError> {
    let all = [rx, ry, rz, tx, ty, tz];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(DemoError::InvalidParameter("pose parameters must be finite".into()));
    }
    Ok(Pose::from_scaled_axis(
        Vector3::new(rx, ry, rz).map(f64::to_radians),
        Vector3::new(tx, ty, tz),
    ))
}

pub fn wireframe(pose: &Pose, k: &CameraIntrinsics) -> Wireframe {
    let model = cube();
    Wireframe {
        width: k.width,
        height: k.height,
        corners: model
            .bbox_corners()
            .iter()
            .map(|c| project(c, pose, k).ok().map(|p| [p.u, p.v]))
            .collect(),
        edges: box_edges(),
    }
}

fn noisy_correspondences(
    model: &ObjectModel,
    pose: &Pose,
    k: &CameraIntrinsics,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Correspondence>, DemoError> {
    model
        .keypoints()
        .values()
        .map(|p| {
            let px = project(p, pose, k)?;
            let du: f64 = rng.sample(StandardNormal);
            let dv: f64 = rng.sample(StandardNormal);
            Ok(Correspondence::new(*p, Pixel2::new(px.u + sigma * du, px.v + sigma * dv)))
        })
        .collect()
}

pub fn noisy_solve(pose: &Pose, sigma: f64, seed: u64) -> Result<NoisySolve, DemoError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(DemoError::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
    }
    let model = cube();
    let k = CameraIntrinsics::vga();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corrs = noisy_correspondences(&model, pose, &k, sigma, &mut rng)?;
    let res = solve_pnp(&corrs, &k, &PnpOptions::default())?;
    let add = add_metric(&res.pose, pose, &model)?;
    Ok(NoisySolve {
        observed: corrs.iter().map(|c| [c.image_point.u, c.image_point.v]).collect(),
        estimate_wireframe: wireframe(&res.pose, &k),
        estimate: res.pose,
        add_m: add,
        add_fraction: add / model.diameter(),
        correct: add < THRESHOLD_FRACTION * model.diameter(),
        rms_px: res.rms_reprojection_error,
    })
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let mut n = || rng.sample::<f64, _>(StandardNormal);
    UnitQuaternion::from_quaternion(Quaternion::new(n(), n(), n(), n()))
}

/// Median ADD and accuracy per noise level at a fixed distance.
///
/// Poses and unit noise draws are shared across levels.
pub fn noise_sweep(distance: f64, trials: usize, seed: u64) -> Result<Vec<SweepLevel>, DemoError> {
    if !(distance > 0.0) || !distance.is_finite() {
        return Err(DemoError::InvalidParameter(format!("distance must be > 0, got {distance}")));
    }
    if trials == 0 {
        return Err(DemoError::InvalidParameter("trials must be >= 1".into()));
    }
    let model = cube();
    let k = CameraIntrinsics::vga();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses: Vec<(Pose, u64)> = (0..trials)
        .map(|_| (Pose::new(random_rotation(&mut rng), Vector3::new(0.0, 0.0, distance)), rng.random()))
        .collect();
    SWEEP_SIGMAS_PX
        .iter()
        .map(|&sigma| {
            let mut adds = Vec::with_capacity(trials);
            let mut failures = 0;
            for (pose, noise_seed) in &poses {
                let mut noise = ChaCha8Rng::seed_from_u64(*noise_seed);
                let corrs = noisy_correspondences(&model, pose, &k, sigma, &mut noise)?;
                match solve_pnp(&corrs, &k, &PnpOptions::default()) {
                    Ok(r) => adds.push(add_metric(&r.pose, pose, &model)?),
                    Err(_) => {
                        failures += 1;
                        adds.push(f64::INFINITY);
                    }
                }
            }
            let correct = adds.iter().filter(|a| **a < THRESHOLD_FRACTION * model.diameter()).count();
            adds.sort_by(f64::total_cmp);
            let n = adds.len();
            let median = if n % 2 == 1 { adds[n / 2] } else { 0.5 * (adds[n / 2 - 1] + adds[n / 2]) };
            Ok(SweepLevel {
                sigma_px: sigma,
                median_add_m: median,
                accuracy: correct as f64 / n as f64,
                failures,
            })
        })
        .collect()
}

fn to_js<T: Serialize>(r: Result<T, DemoError>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// Box wireframe of the cube at the given pose, projected into a VGA camera.
#[wasm_bindgen(js_name = projectWireframe)]
pub fn project_wireframe_js(rx: f64, ry: f64, rz: f64, tx: f64, ty: f64, tz: f64) -> Result<String, JsError> {
    to_js(pose_from_params(rx, ry, rz, tx, ty, tz).map(|p| wireframe(&p, &CameraIntrinsics::vga())))
}

/// Perturbs the projected keypoints with Gaussian noise and solves PnP.
#[wasm_bindgen(js_name = noisySolve)]
#[allow(clippy::too_many_arguments)]
pub fn noisy_solve_js(
    rx: f64,
    ry: f64,
    rz: f64,
    tx: f64,
    ty: f64,
    tz: f64,
    sigma: f64,
    seed: u32,
) -> Result<String, JsError> {
    to_js(pose_from_params(rx, ry, rz, tx, ty, tz).and_then(|p| noisy_solve(&p, sigma, seed.into())))
}

#[wasm_bindgen(js_name = noiseSweep)]
pub fn noise_sweep_js(distance: f64, trials: u32, seed: u32) -> Result<String, JsError> {
    to_js(noise_sweep(distance, trials as usize, seed.into()))
}
