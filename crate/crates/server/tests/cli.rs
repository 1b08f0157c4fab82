use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use edgepose_core::dataset::load_dataset;
use edgepose_core::geometry::{project, CameraIntrinsics, Pose};
use edgepose_core::metrics::ObjectModel;
use edgepose_core::pnp::Correspondence;
use edgepose_server::client;
use nalgebra::Vector3;

fn edgepose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgepose"))
        .args(args)
        .env_remove("EDGEPOSE_CONFIG")
        .output()
        .unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {text}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_lists_subcommands() {
    let out = edgepose(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["serve", "bench", "eval", "augment", "synth", "pnp", "calibrate"] {
        assert!(text.contains(cmd), "missing {cmd} in {text}");
    }
}

#[test]
fn synth_is_deterministic_and_eval_scores_ground_truth() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = edgepose(&["synth", "--n", "5", "--seed", "42", "--out", p(dir.path())]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let ja = std::fs::read(a.path().join("dataset.json")).unwrap();
    let jb = std::fs::read(b.path().join("dataset.json")).unwrap();
    assert_eq!(ja, jb);

    let ds = load_dataset(a.path().join("dataset.json")).unwrap();
    assert_eq!(ds.records.len(), 5);
    let preds: Vec<_> = ds
        .records
        .iter()
        .map(|r| serde_json::json!({ "image_id": r.image_id, "pose": r.pose }))
        .collect();
    let preds_path = a.path().join("preds.json");
    std::fs::write(&preds_path, serde_json::to_string(&preds).unwrap()).unwrap();
    let out = edgepose(&[
        "eval",
        "--dataset",
        p(&a.path().join("dataset.json")),
        "--preds",
        p(&preds_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["accuracy"], 1.0);

    let aug = tempfile::tempdir().unwrap();
    let out = edgepose(&[
        "augment",
        "--dataset",
        p(&a.path().join("dataset.json")),
        "--op",
        "scale:0.5",
        "--op",
        "contrast:1.4",
        "--out",
        p(aug.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ds = load_dataset(aug.path().join("dataset.json")).unwrap();
    assert!(ds.records.len() > 5);
}

#[test]
fn pnp_command_solves_file() {
    let dir = tempfile::tempdir().unwrap();
    let model = ObjectModel::cube("cube", 0.3).unwrap();
    let k = CameraIntrinsics::vga();
    let pose = Pose::from_scaled_axis(Vector3::new(-0.2, 0.4, 0.1), Vector3::new(0.0, 0.1, 2.0));
    let corrs: Vec<Correspondence> = model
        .keypoints()
        .values()
        .map(|q| Correspondence::new(*q, project(q, &pose, &k).unwrap()))
        .collect();
    let file = dir.path().join("corrs.json");
    std::fs::write(
        &file,
        serde_json::to_string(&serde_json::json!({ "correspondences": corrs, "intrinsics": k })).unwrap(),
    )
    .unwrap();
    let out = edgepose(&["pnp", "--corrs", p(&file)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let got: Pose = serde_json::from_value(v["pose"].clone()).unwrap();
    assert!(got.translation_distance_to(&pose) < 1e-6);

    std::fs::write(&file, "[").unwrap();
    let out = edgepose(&["pnp", "--corrs", p(&file)]);
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["error"], "MalformedJson");
}

#[test]
fn calibrate_command() {
    let dir = tempfile::tempdir().unwrap();
    let ar_robot = Pose::from_translation(0.0, 0.0, 2.0);
    let robot_map = Pose::from_translation(1.0, 0.0, 0.0);
    let req = serde_json::json!({
        "edges": [
            { "from": "AR", "to": "Robot", "pose": ar_robot, "t_ms": 100 },
            { "from": "Map", "to": "Robot", "pose": robot_map.inverse(), "t_ms": 120 },
        ],
        "max_staleness_ms": 1000,
    });
    let file = dir.path().join("edges.json");
    std::fs::write(&file, req.to_string()).unwrap();
    let out = edgepose(&["calibrate", "--edges", p(&file)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let got: Pose = serde_json::from_value(v["ar_to_map"]["pose"].clone()).unwrap();
    assert!(got.translation_distance_to(&ar_robot.compose(&robot_map)) < 1e-12);
    assert_eq!(v["ar_to_map"]["t_ms"], 100);
}

#[test]
fn bench_against_missing_server_fails_fast() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let start = Instant::now();
    let out = edgepose(&["bench", "--server", &format!("127.0.0.1:{port}"), "--proxy-name", "p"]);
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["error"], "ServerUnreachable");
    assert!(start.elapsed() < Duration::from_secs(10));
}

#[test]
fn config_errors_carry_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("edgepose.toml");
    std::fs::write(&cfg, "bind = \"127.0.0.1:0\"\n[noise]\nsigma = 2\n").unwrap();
    let out = edgepose(&["--config", p(&cfg), "synth", "--out", p(dir.path())]);
    assert!(!out.status.success());
    let e = stderr_json(&out);
    assert_eq!(e["error"], "ConfigError");
    let msg = e["message"].as_str().unwrap();
    assert!(msg.contains("edgepose.toml") && msg.contains("line 3"), "{msg}");
}

#[test]
fn serve_and_bench_end_to_end() {
    let data = tempfile::tempdir().unwrap();
    let out = edgepose(&["synth", "--n", "3", "--seed", "7", "--out", p(data.path())]);
    assert!(out.status.success());
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = Command::new(env!("CARGO_BIN_EXE_edgepose"))
        .args([
            "serve",
            "--bind",
            &addr,
            "--proxy",
            "sspe=sspe_style",
            "--proxy",
            "beta=betapose_style",
            "--dataset",
            p(&data.path().join("dataset.json")),
        ])
        .env_remove("EDGEPOSE_CONFIG")
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    while client::get(&addr, "/health", Duration::from_secs(1)).is_err() {
        assert!(Instant::now() < deadline, "server did not come up");
        std::thread::sleep(Duration::from_millis(50));
    }

    let report_path = data.path().join("report.md");
    let out = edgepose(&[
        "bench",
        "--server",
        &addr,
        "--proxy-name",
        "beta",
        "--dataset",
        p(&data.path().join("dataset.json")),
        "--repeats",
        "2",
        "--no-oracle-hint",
        "--format",
        "md",
        "--out",
        p(&report_path),
    ]);
    let _ = child.kill();
    let _ = child.wait();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let md = std::fs::read_to_string(&report_path).unwrap();
    assert!(md.contains("beta"));
    assert!(md.contains("| Accuracy | 100.00 |"), "{md}");
}
