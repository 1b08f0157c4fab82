//! Perspective-n-Point: recover an object pose from 2D-3D correspondences.
//!
//! * exactly 3 points: a minimal P3P solve (Grunert's quartic, polished by
//!   Gauss-Newton on the depth equations), then the lowest-error candidate;
//! * 4 or more points: P3P hypotheses from several well-spread triples plus a
//!   normalized DLT (non-coplanar, n >= 6), scored on all points, with the best
//!   few refined by Levenberg-Marquardt.
//!
//! Distorted image points are undistorted first; every error reported here is
//! measured in ideal pinhole pixels.

use nalgebra::{DMatrix, Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pixel2, Point3, Pose, MIN_DEPTH};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("at least 3 weighted correspondences are required, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no candidate pose places every point in front of the camera")]
    NoValidCandidate,
    #[error("refinement pushed a point behind the camera")]
    DivergedBehindCamera,
    #[error("invalid correspondence: {0}")]
    InvalidInput(String),
}

impl PnpError {
    /// Stable machine-readable code used in wire-level error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            PnpError::TooFewPoints(_) => "TooFewPoints",
            PnpError::DegenerateConfiguration(_) => "DegenerateConfiguration",
            PnpError::NoValidCandidate => "NoValidCandidate",
            PnpError::DivergedBehindCamera => "DivergedBehindCamera",
            PnpError::InvalidInput(_) => "InvalidInput",
        }
    }
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub model_point: Point3,
    pub image_point: Pixel2,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

impl Correspondence {
    pub fn new(model_point: Point3, image_point: Pixel2) -> Self {
        Self {
            model_point,
            image_point,
            weight: 1.0,
        }
    }

    pub fn weighted(model_point: Point3, image_point: Pixel2, weight: f64) -> Self {
        Self {
            model_point,
            image_point,
            weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpOptions {
    pub max_iterations: usize,
    pub cost_tolerance: f64,
    pub step_tolerance: f64,
    pub initial_damping: f64,
    /// How many of the best-scoring initial hypotheses get refined.
    pub refine_candidates: usize,
}

impl Default for PnpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            cost_tolerance: 1e-12,
            step_tolerance: 1e-12,
            initial_damping: 1e-3,
            refine_candidates: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnpResult {
    pub pose: Pose,
    pub rms_reprojection_error: f64,
    pub per_point_errors: Vec<f64>,
    pub candidates_considered: usize,
}

/// Why refinement stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    CostChange,
    StepNorm,
    MaxIterations,
}

/// Diagnostics from a refinement run.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineTrace {
    /// Cost (sum of squared weighted pixel residuals) after each accepted
    /// step, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

/// Correspondence in ideal normalized camera coordinates.
#[derive(Debug, Clone, Copy)]
struct Ray {
    model: Vector3<f64>,
    x: f64,
    y: f64,
    sqrt_weight: f64,
}

impl Ray {
    fn bearing(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, 1.0).normalize()
    }
}

fn to_rays(corrs: &[Correspondence], k: &CameraIntrinsics) -> Vec<Ray> {
    corrs
        .iter()
        .map(|c| {
            let (x, y) = k.pixel_to_normalized(&c.image_point);
            Ray {
                model: c.model_point.coords,
                x,
                y,
                sqrt_weight: c.weight.sqrt(),
            }
        })
        .collect()
}

fn validate(corrs: &[Correspondence]) -> Result<(), PnpError> {
    for (i, c) in corrs.iter().enumerate() {
        let finite = c.model_point.iter().all(|v| v.is_finite())
            && c.image_point.u.is_finite()
            && c.image_point.v.is_finite();
        if !finite {
            return Err(PnpError::InvalidInput(format!(
                "correspondence {i} has non-finite coordinates"
            )));
        }
        if !(c.weight >= 0.0) || !c.weight.is_finite() {
            return Err(PnpError::InvalidInput(format!(
                "correspondence {i} has invalid weight {}",
                c.weight
            )));
        }
    }
    Ok(())
}

/// Singular values (descending) of the centered model point cloud.
fn spread(points: &[Vector3<f64>]) -> Vector3<f64> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|e| e.max(0.0).sqrt())
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    Vector3::new(ev[0], ev[1], ev[2])
}

fn check_not_collinear(points: &[Vector3<f64>]) -> Result<(), PnpError> {
    let s = spread(points);
    if s[0] <= 1e-12 || s[1] <= 1e-9 * s[0] {
        return Err(PnpError::DegenerateConfiguration(
            "model points are collinear".into(),
        ));
    }
    Ok(())
}

fn is_coplanar(points: &[Vector3<f64>]) -> bool {
    let s = spread(points);
    s[2] <= 1e-6 * s[0]
}

fn in_front(pose: &Pose, rays: &[Ray]) -> bool {
    rays.iter()
        .all(|r| pose.transform_point(&Point3::from(r.model)).z > MIN_DEPTH)
}

/// Per-point ideal pixel errors and the weighted cost.
fn evaluate(pose: &Pose, rays: &[Ray], k: &CameraIntrinsics) -> Option<(Vec<f64>, f64)> {
    let mut errors = Vec::with_capacity(rays.len());
    let mut cost = 0.0;
    for r in rays {
        let p = pose.transform_point(&Point3::from(r.model));
        if !(p.z > MIN_DEPTH) {
            return None;
        }
        let du = k.fx * (p.x / p.z - r.x);
        let dv = k.fy * (p.y / p.z - r.y);
        let e2 = du * du + dv * dv;
        errors.push(e2.sqrt());
        cost += r.sqrt_weight * r.sqrt_weight * e2;
    }
    Some((errors, cost))
}

fn rms(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

fn result_for(pose: Pose, corrs: &[Correspondence], k: &CameraIntrinsics, candidates: usize) -> Result<PnpResult, PnpError> {
    let rays = to_rays(corrs, k);
    let (errors, _) = evaluate(&pose, &rays, k).ok_or(PnpError::NoValidCandidate)?;
    Ok(PnpResult {
        pose,
        rms_reprojection_error: rms(&errors),
        per_point_errors: errors,
        candidates_considered: candidates,
    })
}

/// Solves for the object-in-camera pose.
///
/// Correspondences with weight 0 are ignored by the solve but still get a
/// reprojection error in the result.
pub fn solve_pnp(
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    opts: &PnpOptions,
) -> Result<PnpResult, PnpError> {
    validate(corrs)?;
    let active: Vec<Correspondence> = corrs.iter().copied().filter(|c| c.weight > 0.0).collect();
    if active.len() < 3 {
        return Err(PnpError::TooFewPoints(active.len()));
    }
    let rays = to_rays(&active, k);
    let models: Vec<Vector3<f64>> = rays.iter().map(|r| r.model).collect();
    check_not_collinear(&models)?;

    let hypotheses = if rays.len() == 3 {
        p3p_rays([rays[0], rays[1], rays[2]])?
    } else {
        initial_hypotheses(&rays)
    };
    let considered = hypotheses.len();
    if considered == 0 {
        return Err(PnpError::NoValidCandidate);
    }

    let mut scored: Vec<(f64, Pose)> = hypotheses
        .into_iter()
        .filter_map(|p| evaluate(&p, &rays, k).map(|(_, c)| (c, p)))
        .collect();
    if scored.is_empty() {
        return Err(PnpError::NoValidCandidate);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut best: Option<(f64, Pose)> = None;
    for (_, initial) in scored.iter().take(opts.refine_candidates.max(1)) {
        let Ok((pose, trace)) = refine_rays(initial, &rays, k, opts) else {
            continue;
        };
        let cost = *trace.accepted_costs.last().expect("initial cost recorded");
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, pose));
        }
    }
    let (_, pose) = best.ok_or(PnpError::NoValidCandidate)?;
    result_for(pose, corrs, k, considered)
}

/// Levenberg-Marquardt refinement of `initial` over the weighted reprojection error.
pub fn refine_pose(
    initial: &Pose,
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    opts: &PnpOptions,
) -> Result<PnpResult, PnpError> {
    refine_pose_traced(initial, corrs, k, opts).map(|(r, _)| r)
}

pub fn refine_pose_traced(
    initial: &Pose,
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    opts: &PnpOptions,
) -> Result<(PnpResult, RefineTrace), PnpError> {
    validate(corrs)?;
    let active: Vec<Correspondence> = corrs.iter().copied().filter(|c| c.weight > 0.0).collect();
    let rays = to_rays(&active, k);
    let (pose, trace) = refine_rays(initial, &rays, k, opts)?;
    Ok((result_for(pose, corrs, k, 1)?, trace))
}

const MAX_CONSECUTIVE_BEHIND: usize = 10;

fn refine_rays(
    initial: &Pose,
    rays: &[Ray],
    k: &CameraIntrinsics,
    opts: &PnpOptions,
) -> Result<(Pose, RefineTrace), PnpError> {
    let (_, mut cost) = evaluate(initial, rays, k).ok_or(PnpError::DivergedBehindCamera)?;
    let mut pose = *initial;
    let mut damping = opts.initial_damping;
    let mut accepted_costs = vec![cost];
    let mut behind_streak = 0;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let (jtj, jtr) = normal_equations(&pose, rays, k);
        let mut lhs = jtj;
        for i in 0..6 {
            lhs[(i, i)] += damping * jtj[(i, i)].max(1e-9);
        }
        let Some(step) = lhs.cholesky().map(|c| -c.solve(&jtr)) else {
            damping *= 10.0;
            continue;
        };
        if step.norm() < opts.step_tolerance {
            termination = Termination::StepNorm;
            break;
        }
        let candidate = apply_step(&pose, &step);
        match evaluate(&candidate, rays, k) {
            None => {
                behind_streak += 1;
                if behind_streak >= MAX_CONSECUTIVE_BEHIND {
                    return Err(PnpError::DivergedBehindCamera);
                }
                damping *= 10.0;
            }
            Some((_, new_cost)) if new_cost <= cost => {
                behind_streak = 0;
                let change = cost - new_cost;
                pose = candidate;
                cost = new_cost;
                accepted_costs.push(cost);
                damping = (damping / 10.0).max(1e-12);
                if change < opts.cost_tolerance {
                    termination = Termination::CostChange;
                    break;
                }
            }
            Some(_) => {
                behind_streak = 0;
                damping *= 10.0;
            }
        }
    }
    Ok((
        pose,
        RefineTrace {
            accepted_costs,
            iterations,
            termination,
        },
    ))
}

/// Left-multiplicative update: rotation vector in the first three entries.
fn apply_step(pose: &Pose, step: &Vector6<f64>) -> Pose {
    let omega = Vector3::new(step[0], step[1], step[2]);
    let dt = Vector3::new(step[3], step[4], step[5]);
    let delta = Pose::from_scaled_axis(omega, Vector3::zeros());
    let rotation = *delta.rotation() * pose.rotation();
    Pose::new(rotation, delta.rotation() * pose.translation() + dt)
}

fn normal_equations(pose: &Pose, rays: &[Ray], k: &CameraIntrinsics) -> (Matrix6<f64>, Vector6<f64>) {
    let mut jtj = Matrix6::zeros();
    let mut jtr = Vector6::zeros();
    for r in rays {
        let p = pose.rotation() * r.model + pose.translation();
        let iz = 1.0 / p.z;
        let res_u = r.sqrt_weight * k.fx * (p.x * iz - r.x);
        let res_v = r.sqrt_weight * k.fy * (p.y * iz - r.y);
        // d(pixel)/dP
        let du = Vector3::new(k.fx * iz, 0.0, -k.fx * p.x * iz * iz) * r.sqrt_weight;
        let dv = Vector3::new(0.0, k.fy * iz, -k.fy * p.y * iz * iz) * r.sqrt_weight;
        // left update moves P itself: dP/domega = -[P]x, dP/dt = I; d·(-[a]x) = (a × d)ᵀ
        let ju_rot = p.cross(&du);
        let jv_rot = p.cross(&dv);
        let ju = Vector6::new(ju_rot.x, ju_rot.y, ju_rot.z, du.x, du.y, du.z);
        let jv = Vector6::new(jv_rot.x, jv_rot.y, jv_rot.z, dv.x, dv.y, dv.z);
        jtj += ju * ju.transpose() + jv * jv.transpose();
        jtr += ju * res_u + jv * res_v;
    }
    (jtj, jtr)
}

/// Up to four candidate poses from exactly three correspondences.
///
/// Every returned candidate keeps all three points in front of the camera;
/// ambiguity is left to the caller.
pub fn solve_p3p_minimal(
    corrs: &[Correspondence; 3],
    k: &CameraIntrinsics,
) -> Result<Vec<Pose>, PnpError> {
    validate(corrs)?;
    let rays = to_rays(corrs, k);
    let models: Vec<Vector3<f64>> = rays.iter().map(|r| r.model).collect();
    check_not_collinear(&models)?;
    p3p_rays([rays[0], rays[1], rays[2]])
}

fn p3p_rays(rays: [Ray; 3]) -> Result<Vec<Pose>, PnpError> {
    let models = [rays[0].model, rays[1].model, rays[2].model];
    if (models[1] - models[0]).cross(&(models[2] - models[0])).norm()
        <= 1e-12 * (models[1] - models[0]).norm_squared().max(1e-300)
    {
        return Err(PnpError::DegenerateConfiguration(
            "model points are collinear".into(),
        ));
    }
    let bearings = [rays[0].bearing(), rays[1].bearing(), rays[2].bearing()];
    let depths = p3p_depths(&models, &bearings);
    let mut poses: Vec<Pose> = Vec::new();
    for d in depths {
        let cam = [bearings[0] * d[0], bearings[1] * d[1], bearings[2] * d[2]];
        let Some(pose) = absolute_orientation(&models, &cam) else {
            continue;
        };
        if !in_front(&pose, &rays) {
            continue;
        }
        let duplicate = poses.iter().any(|p| {
            p.rotation_angle_to(&pose) < 1e-9 && p.translation_distance_to(&pose) < 1e-9
        });
        if !duplicate {
            poses.push(pose);
        }
    }
    Ok(poses)
}

/// Depth triples `(s1, s2, s3)` with `|s_i b_i - s_j b_j| = |X_i - X_j|`.
fn p3p_depths(models: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<[f64; 3]> {
    // side lengths opposite each vertex
    let a = (models[1] - models[2]).norm();
    let b = (models[0] - models[2]).norm();
    let c = (models[0] - models[1]).norm();
    let cos_alpha = bearings[1].dot(&bearings[2]);
    let cos_beta = bearings[0].dot(&bearings[2]);
    let cos_gamma = bearings[0].dot(&bearings[1]);

    let (a2, b2, c2) = (a * a, b * b, c * c);
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let (ca, cb, cg) = (cos_alpha, cos_beta, cos_gamma);

    let a4 = (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca;
    let a3 = 4.0
        * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb);
    let a2c = 2.0
        * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * (b2 - c2) / b2 * ca * ca
            - 4.0 * apc * ca * cb * cg
            + 2.0 * (b2 - a2) / b2 * cg * cg);
    let a1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg);
    let a0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg;

    let mut out = Vec::new();
    for v in quartic_real_roots([a4, a3, a2c, a1, a0]) {
        if v <= 0.0 {
            continue;
        }
        let s1_sq = b2 / (1.0 + v * v - 2.0 * v * cb);
        if !(s1_sq > 0.0) {
            continue;
        }
        let s1 = s1_sq.sqrt();
        // u from the c-side equation; pick the root consistent with the a-side one.
        let Some(u) = solve_u(s1, v, a2, c2, ca, cg) else {
            continue;
        };
        let depths = polish_depths([s1, u * s1, v * s1], a2, b2, c2, ca, cb, cg);
        if depths.iter().all(|d| *d > 0.0 && d.is_finite()) {
            out.push(depths);
        }
    }
    out
}

fn solve_u(s1: f64, v: f64, a2: f64, c2: f64, ca: f64, cg: f64) -> Option<f64> {
    // s1²(1 + u² − 2u cosγ) = c²  →  u² − 2u cosγ + 1 − c²/s1² = 0
    let q = 1.0 - c2 / (s1 * s1);
    let disc = cg * cg - q;
    if disc < -1e-9 {
        return None;
    }
    let root = disc.max(0.0).sqrt();
    let s3 = v * s1;
    [cg + root, cg - root]
        .into_iter()
        .filter(|u| *u > 0.0)
        .map(|u| {
            let s2 = u * s1;
            let resid = s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * ca - a2;
            (u, resid.abs())
        })
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(u, _)| u)
}

#[allow(clippy::too_many_arguments)]
fn polish_depths(s: [f64; 3], a2: f64, b2: f64, c2: f64, ca: f64, cb: f64, cg: f64) -> [f64; 3] {
    let residual = |s: &Vector3<f64>| {
        Vector3::new(
            s[1] * s[1] + s[2] * s[2] - 2.0 * s[1] * s[2] * ca - a2,
            s[0] * s[0] + s[2] * s[2] - 2.0 * s[0] * s[2] * cb - b2,
            s[0] * s[0] + s[1] * s[1] - 2.0 * s[0] * s[1] * cg - c2,
        )
    };
    let mut x = Vector3::from(s);
    let mut r = residual(&x);
    for _ in 0..10 {
        if r.norm() < 1e-15 * (a2 + b2 + c2) {
            break;
        }
        let j = Matrix3::new(
            0.0,
            2.0 * x[1] - 2.0 * x[2] * ca,
            2.0 * x[2] - 2.0 * x[1] * ca,
            2.0 * x[0] - 2.0 * x[2] * cb,
            0.0,
            2.0 * x[2] - 2.0 * x[0] * cb,
            2.0 * x[0] - 2.0 * x[1] * cg,
            2.0 * x[1] - 2.0 * x[0] * cg,
            0.0,
        );
        let Some(inv) = j.try_inverse() else { break };
        let next = x - inv * r;
        let next_r = residual(&next);
        if next_r.norm() >= r.norm() {
            break;
        }
        x = next;
        r = next_r;
    }
    [x[0], x[1], x[2]]
}

/// Real roots of `c[0] x⁴ + c[1] x³ + c[2] x² + c[3] x + c[4]`.
fn quartic_real_roots(c: [f64; 5]) -> Vec<f64> {
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || c[0].abs() < 1e-14 * scale {
        return cubic_fallback(&c[1..]);
    }
    let mut companion = nalgebra::Matrix4::zeros();
    for i in 0..4 {
        companion[(0, i)] = -c[i + 1] / c[0];
    }
    for i in 1..4 {
        companion[(i, i - 1)] = 1.0;
    }
    let eigen = companion.complex_eigenvalues();
    let mut roots = Vec::new();
    for z in eigen.iter() {
        if z.im.abs() > 1e-4 * (1.0 + z.re.abs()) {
            continue;
        }
        let x = newton_polish(&c, z.re);
        if !roots.iter().any(|r: &f64| (r - x).abs() < 1e-12 * (1.0 + x.abs())) {
            roots.push(x);
        }
    }
    roots
}

fn cubic_fallback(c: &[f64]) -> Vec<f64> {
    // degenerate leading coefficient: treat as a cubic via its companion matrix
    if c[0].abs() < 1e-300 {
        return Vec::new();
    }
    let m = Matrix3::new(-c[1] / c[0], -c[2] / c[0], -c[3] / c[0], 1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    m.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-4 * (1.0 + z.re.abs()))
        .map(|z| newton_polish(c, z.re))
        .collect()
}

fn newton_polish(c: &[f64], mut x: f64) -> f64 {
    for _ in 0..8 {
        let (mut f, mut df) = (0.0, 0.0);
        for &ci in c {
            df = df * x + f;
            f = f * x + ci;
        }
        if df == 0.0 {
            break;
        }
        let next = x - f / df;
        if !next.is_finite() {
            break;
        }
        if (next - x).abs() <= 1e-15 * (1.0 + x.abs()) {
            x = next;
            break;
        }
        x = next;
    }
    x
}

/// Rigid transform mapping `model[i]` onto `camera[i]` (least squares, SVD).
fn absolute_orientation(model: &[Vector3<f64>], camera: &[Vector3<f64>]) -> Option<Pose> {
    let n = model.len() as f64;
    let mc = model.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cc = camera.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::zeros();
    for (m, c) in model.iter().zip(camera) {
        h += (m - mc) * (c - cc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * d * u.transpose();
    let t = cc - r * mc;
    Some(Pose::from_rotation_matrix(&r, t))
}

/// Initial pose hypotheses for n >= 4 points.
fn initial_hypotheses(rays: &[Ray]) -> Vec<Pose> {
    let mut out = Vec::new();
    for triple in spread_triples(rays, 8) {
        if let Ok(poses) = p3p_rays([rays[triple[0]], rays[triple[1]], rays[triple[2]]]) {
            out.extend(poses);
        }
    }
    let models: Vec<Vector3<f64>> = rays.iter().map(|r| r.model).collect();
    if rays.len() >= 6 && !is_coplanar(&models) {
        if let Some(p) = dlt(rays) {
            out.push(p);
        }
    }
    out.retain(|p| in_front(p, rays));
    out
}

/// Deterministic set of non-collinear triples, largest triangle area first.
fn spread_triples(rays: &[Ray], max: usize) -> Vec<[usize; 3]> {
    let n = rays.len();
    let mut all = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for l in j + 1..n {
                let area = (rays[j].model - rays[i].model)
                    .cross(&(rays[l].model - rays[i].model))
                    .norm();
                if area > 1e-12 {
                    all.push((area, [i, j, l]));
                }
            }
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    // prefer triples that do not all reuse the same points
    let mut picked: Vec<[usize; 3]> = Vec::new();
    let mut usage = vec![0usize; n];
    while picked.len() < max && !all.is_empty() {
        let (idx, _) = all
            .iter()
            .enumerate()
            .map(|(idx, (area, t))| {
                let reuse = t.iter().map(|&i| usage[i]).sum::<usize>() as f64;
                (idx, area / (1.0 + reuse))
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty");
        let (_, t) = all.swap_remove(idx);
        for &i in &t {
            usage[i] += 1;
        }
        picked.push(t);
    }
    picked
}

/// Linear pose from a normalized direct linear transform (n >= 6, non-coplanar).
fn dlt(rays: &[Ray]) -> Option<Pose> {
    let n = rays.len();
    let centroid = rays.iter().fold(Vector3::zeros(), |a, r| a + r.model) / n as f64;
    let scale = (rays
        .iter()
        .map(|r| (r.model - centroid).norm_squared())
        .sum::<f64>()
        / n as f64)
        .sqrt();
    if scale <= 0.0 {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, r) in rays.iter().enumerate() {
        let x = (r.model - centroid) / scale;
        let xh = [x.x, x.y, x.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -r.x * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -r.y * xh[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let p = v_t.row(min_idx);
    let mut m = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
    let mut col = Vector3::new(p[3], p[7], p[11]);
    if m.determinant() < 0.0 {
        m = -m;
        col = -col;
    }
    let svd_m = m.svd(true, true);
    let lambda_scale = svd_m.singular_values.mean();
    if lambda_scale <= 0.0 {
        return None;
    }
    let r = svd_m.u? * svd_m.v_t?;
    // P' = λ [σR | Rc + t]
    let lambda = lambda_scale / scale;
    let t = col / lambda - r * centroid;
    Some(Pose::from_rotation_matrix(&r, t))
}
