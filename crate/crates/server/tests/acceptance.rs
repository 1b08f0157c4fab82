//! Acceptance suite. One PASS/FAIL line per criterion; exits non-zero on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use common::*;
use edgepose_core::calibration::{FrameGraph, FrameId, ManualClock};
use edgepose_core::dataset::{
    augment, synth_generate, AugmentError, AugmentOp, Dataset, RandomViewSampler, SynthOptions,
};
use edgepose_core::detector::stub::LatencyStub;
use edgepose_core::detector::{run_betapose_pipeline, Frame, OracleDetector, OracleNoiseModel, PipelineOptions};
use edgepose_core::geometry::{project, CameraIntrinsics, Pixel2, Pose};
use edgepose_core::metrics::{add_metric, obb_iou_sampled, ObjectModel};
use edgepose_core::pnp::{solve_pnp, Correspondence, PnpOptions};
use edgepose_server::bench::{distance_sweep, run_benchmark, BenchConfig, FrameSource, SweepConfig};
use edgepose_server::commands::{evaluate, Prediction};
use edgepose_server::proxy::PipelineKind;
use edgepose_server::server::BackgroundServer;
use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: [(&str, Check); 10] = [
        ("pnp round trip", pnp_round_trip),
        ("pnp noise sweep", pnp_noise_sweep),
        ("ADD oracle equivalence", add_equivalence),
        ("OBB IoU calibration", iou_calibration),
        ("AR-Robot-Map chain", frame_chain),
        ("end-to-end integration", end_to_end),
        ("pipelining", pipelining),
        ("distance sweep", distance_knee),
        ("dataset round trip and augmentation", dataset_augmentation),
        ("crop invariance", crop_invariance),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let mut n = || rng.sample::<f64, _>(StandardNormal);
    UnitQuaternion::from_quaternion(Quaternion::new(n(), n(), n(), n()))
}

fn random_pose(rng: &mut ChaCha8Rng, z_min: f64, z_max: f64) -> Pose {
    let z = rng.random_range(z_min..=z_max);
    let x = rng.random_range(-0.25..=0.25) * z;
    let y = rng.random_range(-0.2..=0.2) * z;
    Pose::new(random_rotation(rng), Vector3::new(x, y, z))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Rotation matrix from a unit quaternion, written out term by term.
fn rot_from_wxyz(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn homogeneous(p: &Pose) -> Matrix4<f64> {
    let r = rot_from_wxyz(p.quaternion_wxyz());
    let t = *p.translation();
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

fn brute_force_add(pred: &Pose, gt: &Pose, model: &ObjectModel) -> f64 {
    let (rp, rg) = (rot_from_wxyz(pred.quaternion_wxyz()), rot_from_wxyz(gt.quaternion_wxyz()));
    let (tp, tg) = (*pred.translation(), *gt.translation());
    let mut sum = 0.0;
    for v in model.vertices() {
        let a = rp * v.coords + tp;
        let b = rg * v.coords + tg;
        sum += (a - b).norm();
    }
    sum / model.vertices().len() as f64
}

fn pinhole(k: &CameraIntrinsics, r: &Matrix3<f64>, t: &Vector3<f64>, p: &Vector3<f64>) -> (f64, f64) {
    let c = r * p + t;
    (k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy)
}

/// Gauss-Newton on the reprojection error, started at `init`, with a
/// finite-difference Jacobian and a left rotation-vector update.
fn brute_force_solve(
    model_pts: &[Vector3<f64>],
    pixels: &[(f64, f64)],
    k: &CameraIntrinsics,
    init: &Pose,
) -> (Matrix3<f64>, Vector3<f64>) {
    let mut r = rot_from_wxyz(init.quaternion_wxyz());
    let mut t = *init.translation();
    let residual = |r: &Matrix3<f64>, t: &Vector3<f64>| -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * model_pts.len());
        for (p, px) in model_pts.iter().zip(pixels) {
            let (u, v) = pinhole(k, r, t, p);
            out.push(u - px.0);
            out.push(v - px.1);
        }
        out
    };
    let apply = |r: &Matrix3<f64>, t: &Vector3<f64>, d: &Vector6<f64>| {
        let w = Vector3::new(d[0], d[1], d[2]);
        let dr = *nalgebra::Rotation3::from_scaled_axis(w).matrix();
        (dr * r, t + Vector3::new(d[3], d[4], d[5]))
    };
    for _ in 0..50 {
        let r0 = residual(&r, &t);
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        let h = 1e-7;
        let mut cols = Vec::with_capacity(6);
        for j in 0..6 {
            let mut d = Vector6::zeros();
            d[j] = h;
            let (rp, tp) = apply(&r, &t, &d);
            d[j] = -h;
            let (rm, tm) = apply(&r, &t, &d);
            let (fp, fm) = (residual(&rp, &tp), residual(&rm, &tm));
            cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>());
        }
        for a in 0..6 {
            for b in 0..6 {
                jtj[(a, b)] = cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum();
            }
            jtr[a] = cols[a].iter().zip(&r0).map(|(x, y)| x * y).sum();
        }
        let Some(step) = jtj.lu().solve(&(-jtr)) else { break };
        let (nr, nt) = apply(&r, &t, &step);
        r = nr;
        t = nt;
        if step.norm() < 1e-13 {
            break;
        }
    }
    (r, t)
}

fn pnp_round_trip() -> Result<String, String> {
    let model = cube();
    let k = CameraIntrinsics::vga();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let (mut worst_r, mut worst_t) = (0.0f64, 0.0f64);
    let n = 100;
    for i in 0..n {
        let pose = random_pose(&mut rng, 0.5, 10.0);
        let corrs: Vec<Correspondence> = model
            .keypoints()
            .values()
            .map(|p| Correspondence::new(*p, project(p, &pose, &k).unwrap()))
            .collect();
        let r = solve_pnp(&corrs, &k, &PnpOptions::default()).map_err(|e| format!("pose {i}: {e}"))?;
        worst_r = worst_r.max(r.pose.rotation_angle_to(&pose));
        worst_t = worst_t.max(r.pose.translation_distance_to(&pose));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{n} poses, z in [0.5, 10] m, worst {worst_r:.2e} rad / {worst_t:.2e} m, {secs:.2}s");
    ensure(worst_r <= 1e-6 && worst_t <= 1e-6 && secs < 5.0, || detail.clone())?;
    Ok(detail)
}

fn pnp_noise_sweep() -> Result<String, String> {
    let model = cube();
    let k = CameraIntrinsics::vga();
    let diameter = model.diameter();
    let sigmas = [0.0, 1.0, 2.0, 4.0, 8.0];
    let trials = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let names: Vec<_> = model.keypoints().keys().cloned().collect();
    let pts: Vec<Vector3<f64>> = names.iter().map(|n| model.keypoint(n).unwrap().coords).collect();

    // shared poses and unit noise across sigma levels
    let cases: Vec<(Pose, Vec<(f64, f64)>)> = (0..trials)
        .map(|_| {
            let pose = Pose::new(random_rotation(&mut rng), Vector3::new(0.0, 0.0, 1.0));
            let noise = (0..pts.len())
                .map(|_| (rng.sample(StandardNormal), rng.sample(StandardNormal)))
                .collect();
            (pose, noise)
        })
        .collect();

    let mut medians = Vec::new();
    let mut oracle_at_2 = f64::NAN;
    for &sigma in &sigmas {
        let mut adds = Vec::with_capacity(trials);
        let mut oracle_adds = Vec::new();
        for (pose, noise) in &cases {
            let r = rot_from_wxyz(pose.quaternion_wxyz());
            let t = *pose.translation();
            let pixels: Vec<(f64, f64)> = pts
                .iter()
                .zip(noise)
                .map(|(p, n)| {
                    let (u, v) = pinhole(&k, &r, &t, p);
                    (u + sigma * n.0, v + sigma * n.1)
                })
                .collect();
            let corrs: Vec<Correspondence> = model
                .keypoints()
                .values()
                .zip(&pixels)
                .map(|(p, px)| Correspondence::new(*p, Pixel2::new(px.0, px.1)))
                .collect();
            let add = match solve_pnp(&corrs, &k, &PnpOptions::default()) {
                Ok(res) => add_metric(&res.pose, pose, &model).map_err(|e| e.to_string())?,
                Err(_) => f64::INFINITY,
            };
            adds.push(add);
            if sigma == 2.0 {
                let (ro, to) = brute_force_solve(&pts, &pixels, &k, pose);
                let est = Pose::from_rotation_matrix(&ro, to);
                oracle_adds.push(brute_force_add(&est, pose, &model));
            }
        }
        if sigma == 2.0 {
            oracle_at_2 = median(&mut oracle_adds);
        }
        medians.push(median(&mut adds));
    }
    let at_2 = medians[2];
    let monotone = medians.windows(2).all(|w| w[1] >= w[0]);
    let detail = format!(
        "median ADD (mm) {:?}; sigma=2 px at 1 m: {:.2}% of diameter (independent solve: {:.2}%)",
        medians.iter().map(|m| (m * 1e4).round() / 10.0).collect::<Vec<_>>(),
        100.0 * at_2 / diameter,
        100.0 * oracle_at_2 / diameter
    );
    ensure(monotone, || format!("not monotone: {detail}"))?;
    ensure(oracle_at_2 < 0.05 * diameter, || format!("independent solve misses 5%: {detail}"))?;
    ensure((at_2 - oracle_at_2).abs() < 1e-3 * diameter, || format!("library and independent solve disagree: {detail}"))?;
    ensure(at_2 < 0.05 * diameter, || detail.clone())?;
    Ok(detail)
}

fn add_equivalence() -> Result<String, String> {
    let model = cube();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a = random_pose(&mut rng, 0.5, 10.0);
        let b = random_pose(&mut rng, 0.5, 10.0);
        let lib = add_metric(&a, &b, &model).map_err(|e| e.to_string())?;
        worst = worst.max((lib - brute_force_add(&a, &b, &model)).abs());
    }
    let mut worst_translation = 0.0f64;
    for _ in 0..1000 {
        let d = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let gt = Pose::new(random_rotation(&mut rng), Vector3::new(0.0, 0.0, 2.0));
        let pred = Pose::new(*gt.rotation(), gt.translation() + d);
        let expected = (pred.translation() - gt.translation()).norm();
        let lib = add_metric(&pred, &gt, &model).map_err(|e| e.to_string())?;
        worst_translation = worst_translation.max((lib - expected).abs());
    }
    let detail = format!(
        "1000 pairs, worst |lib - brute force| {worst:.1e}; pure translation worst |ADD - |t|| {worst_translation:.1e}"
    );
    ensure(worst <= 1e-12 && worst_translation <= 1e-15, || detail.clone())?;
    Ok(detail)
}

fn iou_calibration() -> Result<String, String> {
    let model = cube();
    let a = Pose::from_translation(0.0, 0.0, 2.0);
    let b = Pose::from_translation(0.15, 0.0, 2.0);
    let iou = obb_iou_sampled(&a, &b, &model, 100_000, 5).map_err(|e| e.to_string())?;
    let detail = format!("half-side offset cubes, 100k samples: {iou:.4} vs 1/3 (|err| {:.4})", (iou - 1.0 / 3.0).abs());
    ensure((iou - 1.0 / 3.0).abs() <= 0.02, || detail.clone())?;
    Ok(detail)
}

fn frame_chain() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for i in 0..1000u64 {
        let ar_robot = random_pose(&mut rng, 0.5, 10.0);
        let robot_map = Pose::new(
            random_rotation(&mut rng),
            Vector3::new(
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(-2.0..2.0),
            ),
        );
        let mut g = FrameGraph::new(Arc::new(ManualClock::new(i)));
        g.update_edge(FrameId::Ar, FrameId::Robot, ar_robot, i).map_err(|e| e.to_string())?;
        if i % 2 == 0 {
            g.update_edge(FrameId::Robot, FrameId::Map, robot_map, i)
        } else {
            g.update_edge(FrameId::Map, FrameId::Robot, robot_map.inverse(), i)
        }
        .map_err(|e| e.to_string())?;
        let got = homogeneous(&g.ar_to_map(0).map_err(|e| e.to_string())?.pose);
        let expected = homogeneous(&ar_robot) * homogeneous(&robot_map);
        worst = worst.max((got - expected).amax());
    }

    let ar_robot = Pose::from_scaled_axis(Vector3::new(0.1, 0.2, 0.3), Vector3::new(0.5, 0.1, 3.0));
    let robot_map = Pose::from_scaled_axis(Vector3::new(0.0, 0.0, 1.2), Vector3::new(4.0, -2.0, 0.0));
    let injected = Pose::from_translation(0.01, 0.0, 0.0);
    let mut g = FrameGraph::new(Arc::new(ManualClock::new(0)));
    g.update_edge(FrameId::Ar, FrameId::Robot, ar_robot, 0).map_err(|e| e.to_string())?;
    g.update_edge(FrameId::Robot, FrameId::Map, robot_map, 0).map_err(|e| e.to_string())?;
    g.update_edge(FrameId::Ar, FrameId::Map, ar_robot.compose(&robot_map).compose(&injected), 0)
        .map_err(|e| e.to_string())?;
    let res = g.consistency_check().map_err(|e| e.to_string())?;
    let detail = format!(
        "1000 edge pairs, worst matrix entry error {worst:.1e}; injected 1 cm -> residual {:.12} m, {:.1e} rad",
        res.translation_m, res.rotation_rad
    );
    ensure(
        worst <= 1e-12 && (res.translation_m - 0.01).abs() <= 1e-12 && res.rotation_rad <= 1e-12,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn end_to_end() -> Result<String, String> {
    let model = cube();
    let set = synth(&model, 100, 2025);
    let det = oracle(&model, &set);
    let server = BackgroundServer::local(vec![
        proxy("sspe", PipelineKind::SspeStyle, det.clone(), &model),
        proxy("betapose", PipelineKind::BetaposeStyle, det, &model),
    ])
    .map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for name in ["sspe", "betapose"] {
        let mut cfg = BenchConfig::new(server.base(), name);
        cfg.send_oracle_hint = false;
        let report = run_benchmark(&cfg, &set.dataset, FrameSource::Memory(&set.images), &model)
            .map_err(|e| e.to_string())?;
        let violations: Vec<_> = report
            .samples
            .iter()
            .filter(|s| s.end_to_end_ms < s.transmit_ms + s.server_total_ms - 1.0)
            .collect();
        let p95 = report.latency.server_total.p95_ms;
        let summary = format!(
            "{name}: accuracy {:?} over {} frames x {} repeats, server_total p95 {p95:.2} ms, {} decomposition violations, {} errors",
            report.accuracy,
            report.accuracy_frames,
            report.repeats,
            violations.len(),
            report.n_errors
        );
        ensure(
            report.accuracy == Some(1.0) && report.accuracy_frames == 100 && report.n_errors == 0,
            || summary.clone(),
        )?;
        ensure(p95 < 50.0, || summary.clone())?;
        if let Some(v) = violations.first() {
            return Err(format!("{summary}; first: {v:?}"));
        }
        parts.push(summary);
    }
    Ok(parts.join("; "))
}

fn burst(base: &str, set: &edgepose_core::dataset::SyntheticSet, concurrent: bool) -> (Duration, Vec<(String, u16, String)>) {
    let bodies: Vec<_> = set.images.iter().map(png).collect();
    let ids: Vec<_> = set.dataset.records.iter().map(|r| r.image_id.clone()).collect();
    let start = Instant::now();
    let results = if concurrent {
        let barrier = Arc::new(Barrier::new(ids.len()));
        let handles: Vec<_> = ids
            .iter()
            .zip(bodies)
            .map(|(id, body)| {
                let (base, id, barrier) = (base.to_string(), id.clone(), barrier.clone());
                thread::spawn(move || {
                    barrier.wait();
                    let r = post_png(&base, "b", &id, &body);
                    (id, r.status, String::from_utf8_lossy(&r.body).into_owned())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    } else {
        ids.iter()
            .zip(&bodies)
            .map(|(id, body)| {
                let r = post_png(base, "b", id, body);
                (id.clone(), r.status, String::from_utf8_lossy(&r.body).into_owned())
            })
            .collect()
    };
    (start.elapsed(), results)
}

fn pipelining() -> Result<String, String> {
    let model = cube();
    let set = synth(&model, 10, 77);
    let stage = Duration::from_millis(50);
    let slow = |fail: Option<String>| {
        let s = LatencyStub::new(oracle(&model, &set)).with_delay(stage);
        Arc::new(match fail {
            Some(id) => s.failing_on([id]),
            None => s,
        })
    };
    let server = BackgroundServer::local(vec![proxy("b", PipelineKind::BetaposeStyle, slow(None), &model)
        .with_bbox_detector(slow(None))
        .with_max_in_flight(10)])
    .map_err(|e| e.to_string())?;
    let (seq, seq_results) = burst(&server.base(), &set, false);
    let (par, par_results) = burst(&server.base(), &set, true);
    drop(server);
    for (id, status, body) in seq_results.iter().chain(&par_results) {
        ensure(*status == 200, || format!("{id}: {status} {body}"))?;
    }
    let nominal = 10.0 * 2.0 * stage.as_secs_f64();
    let ratio = par.as_secs_f64() / seq.as_secs_f64();
    let detail = format!(
        "10-frame burst {:.0} ms vs sequential {:.0} ms (ratio {ratio:.2}, nominal stage sum {:.0} ms)",
        par.as_secs_f64() * 1e3,
        seq.as_secs_f64() * 1e3,
        nominal * 1e3
    );
    ensure(ratio < 0.9 && par.as_secs_f64() < 0.9 * nominal, || detail.clone())?;

    let bad = set.dataset.records[3].image_id.clone();
    let server = BackgroundServer::local(vec![proxy("b", PipelineKind::BetaposeStyle, slow(Some(bad.clone())), &model)
        .with_bbox_detector(slow(None))
        .with_max_in_flight(10)])
    .map_err(|e| e.to_string())?;
    let (_, results) = burst(&server.base(), &set, true);
    let failed: Vec<_> = results.iter().filter(|r| r.1 != 200).map(|r| r.0.clone()).collect();
    ensure(failed == vec![bad.clone()], || format!("injected failure on {bad}, failed frames {failed:?}"))?;
    Ok(format!("{detail}; injected kpd failure hit only {bad}"))
}

pub const SWEEP_SIGMA_PX: f64 = 0.1;
pub const SWEEP_GAIN_PX_PER_M: f64 = 0.04;

fn distance_knee() -> Result<String, String> {
    let model = cube();
    let set = synth(&model, 1, 1);
    let server = BackgroundServer::local(vec![proxy("p", PipelineKind::SspeStyle, oracle(&model, &set), &model)])
        .map_err(|e| e.to_string())?;
    let mut cfg = BenchConfig::new(server.base(), "p");
    cfg.concurrency = 4;
    let distances: Vec<f64> = (1..=10).map(f64::from).collect();
    let mut knees = Vec::new();
    let mut curves = Vec::new();
    for seed in [11u64, 12] {
        let sweep = SweepConfig {
            distances: distances.clone(),
            per_distance_n: 200,
            noise: OracleNoiseModel {
                sigma_px: SWEEP_SIGMA_PX,
                dropout_p: 0.0,
                distance_noise_gain: SWEEP_GAIN_PX_PER_M,
                seed,
            },
            seed,
        };
        let r = distance_sweep(&cfg, &model, &CameraIntrinsics::vga(), &sweep).map_err(|e| e.to_string())?;
        let acc: Vec<f64> = r.points.iter().map(|p| p.accuracy).collect();
        let curve = format!("seed {seed}: {acc:?} knee {:?}", r.max_distance_at_50);
        ensure(acc.windows(2).all(|w| w[1] <= w[0]), || format!("not monotone: {curve}"))?;
        // well-defined: a contiguous >= 0.5 prefix followed by < 0.5
        let knee = r.max_distance_at_50.ok_or_else(|| format!("no level reaches 0.5: {curve}"))?;
        ensure(acc[0] >= 0.5, || format!("first level below 0.5: {curve}"))?;
        knees.push(knee);
        curves.push(curve);
    }
    let detail = format!(
        "sigma {SWEEP_SIGMA_PX} px + {SWEEP_GAIN_PX_PER_M} px/m, 200 frames/level; {}",
        curves.join("; ")
    );
    ensure((knees[0] - knees[1]).abs() <= 1.0 + 1e-9, || format!("knees differ: {detail}"))?;
    Ok(detail)
}

fn dataset_augmentation() -> Result<String, String> {
    let model = cube();
    let k = CameraIntrinsics::vga();
    let mut set = synth_generate(
        &model,
        &k,
        &mut RandomViewSampler::new(k, 1.2, 3.0),
        250,
        &SynthOptions::with_seed(555),
    )
    .map_err(|e| e.to_string())?;
    set.dataset.extra.insert("collected_by".into(), serde_json::json!("acceptance"));
    set.dataset.records[0].extra.insert("lighting".into(), serde_json::json!({"lux": 300}));
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("dataset.json");
    edgepose_core::dataset::save_dataset(&set.dataset, &path).map_err(|e| e.to_string())?;
    let back = edgepose_core::dataset::load_dataset(&path).map_err(|e| e.to_string())?;
    ensure(back == set.dataset, || "load(save(ds)) differs".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(556);
    let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
    let mut i = 0usize;
    while checked < 500 {
        let idx = i % set.dataset.records.len();
        i += 1;
        ensure(i < 5000, || format!("only {checked} augmentations succeeded"))?;
        let op = if rng.random_bool(0.5) {
            AugmentOp::Scale { factor: rng.random_range(0.5..1.5) }
        } else {
            AugmentOp::Rotate { radians: rng.random_range(-0.6..0.6) }
        };
        match augment(&set.dataset.records[idx], &set.images[idx], op, &model) {
            Ok((rec, img)) => {
                ensure(img.width() == rec.intrinsics.width && img.height() == rec.intrinsics.height, || {
                    format!("{}: image size does not match intrinsics", rec.image_id)
                })?;
                let err = rec.max_label_error(&model).map_err(|e| e.to_string())?;
                worst = worst.max(err);
                ensure(err < 0.5, || format!("{} ({op:?}): label error {err:.3} px", rec.image_id))?;
                checked += 1;
            }
            Err(AugmentError::KeypointsOutOfFrame(_)) => skipped += 1,
            Err(e) => return Err(format!("{op:?}: {e}")),
        }
    }

    let mut flipped = Dataset::new(model.name());
    for (rec, img) in set.dataset.records.iter().zip(&set.images).take(20) {
        flipped.records.push(rec.clone());
        let (f, _) = augment(rec, img, AugmentOp::Hflip, &model).map_err(|e| e.to_string())?;
        ensure(f.chirality_approximate, || format!("{} not flagged", f.image_id))?;
        flipped.records.push(f);
    }
    let preds: Vec<Prediction> = flipped
        .records
        .iter()
        .filter(|r| !r.chirality_approximate)
        .map(|r| Prediction { image_id: r.image_id.clone(), pose: r.pose })
        .collect();
    let eval = evaluate(&flipped, &preds, &model, 0.1).map_err(|e| e.to_string())?;
    ensure(eval.excluded_chirality == 20 && eval.n_scored == 20 && eval.accuracy == 1.0, || {
        format!("flipped records not excluded: {eval:?}")
    })?;
    Ok(format!(
        "round trip exact with extra fields; {checked} scale/rotate records within 0.5 px (worst {worst:.3} px, {skipped} skipped off-frame); 20 hflip records flagged and excluded"
    ))
}

fn crop_invariance() -> Result<String, String> {
    let model = cube();
    let k = CameraIntrinsics::vga();
    let set = synth(&model, 10, 88);
    let det = OracleDetector::new(
        model.clone(),
        OracleNoiseModel::gaussian(1.0, 4),
        Arc::new(edgepose_core::detector::AnnotationStore::from_dataset(&set.dataset)),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(89);
    let (mut worst_r, mut worst_t, mut trials, mut attempts) = (0.0f64, 0.0f64, 0usize, 0usize);
    while trials < 100 {
        attempts += 1;
        ensure(attempts < 10_000, || "could not place 100 crops".into())?;
        let idx = trials % set.images.len();
        let rec = &set.dataset.records[idx];
        let frame = Frame::new(rec.image_id.clone(), k.width, k.height);
        let base = run_betapose_pipeline(&det, &det, &frame, &model, &k, &PipelineOptions::default())
            .map_err(|e| e.to_string())?;
        let margin = rng.random_range(8.0..60.0);
        let opts = PipelineOptions {
            crop_margin_px: margin,
            crop_shift: (rng.random_range(-margin..margin), rng.random_range(-margin..margin)),
            ..PipelineOptions::default()
        };
        let out = run_betapose_pipeline(&det, &det, &frame, &model, &k, &opts).map_err(|e| e.to_string())?;
        let crop = out.crop.ok_or("no crop reported")?;
        if out.detection.keypoints_2d.len() != base.detection.keypoints_2d.len()
            || !rec.keypoints_2d.values().all(|p| crop.contains(p))
        {
            continue;
        }
        worst_r = worst_r.max(out.pnp.pose.rotation_angle_to(&base.pnp.pose));
        worst_t = worst_t.max(out.pnp.pose.translation_distance_to(&base.pnp.pose));
        trials += 1;
    }
    let detail = format!(
        "{trials} random crops ({} rejected for clipping keypoints), worst {worst_r:.1e} rad / {worst_t:.1e} m",
        attempts - trials
    );
    ensure(worst_r <= 1e-9 && worst_t <= 1e-9, || detail.clone())?;
    Ok(detail)
}
