mod common;

use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Duration;

use common::*;
use edgepose_core::detector::stub::LatencyStub;
use edgepose_core::geometry::{project, CameraIntrinsics, Pose};
use edgepose_core::pnp::Correspondence;
use edgepose_server::client;
use edgepose_server::proxy::PipelineKind;
use edgepose_server::remote::RemoteDetector;
use edgepose_server::server::{BackgroundServer, PnpRequest, PoseResponse, ServeError, ServerOptions};
use nalgebra::Vector3;

fn pose_of(resp: &client::HttpResponse) -> PoseResponse {
    assert_eq!(resp.status, 200, "{}", String::from_utf8_lossy(&resp.body));
    serde_json::from_slice(&resp.body).unwrap()
}

#[test]
fn two_proxies_answer_independently() {
    let model = cube();
    let set = synth(&model, 3, 1);
    let det = oracle(&model, &set);
    let server = BackgroundServer::local(vec![
        proxy("single", PipelineKind::SspeStyle, det.clone(), &model),
        proxy("two-stage", PipelineKind::BetaposeStyle, det, &model),
    ])
    .unwrap();
    for (rec, img) in set.dataset.records.iter().zip(&set.images) {
        let body = png(img);
        for name in ["single", "two-stage"] {
            let r = pose_of(&post_png(&server.base(), name, &rec.image_id, &body));
            assert_eq!(r.proxy_name, name);
            assert_eq!(r.frame_id, rec.image_id);
            assert!(r.pose.translation_distance_to(&rec.pose) < 1e-6);
            assert!(r.pose.rotation_angle_to(&rec.pose) < 1e-6);
            assert_eq!(r.projected_bbox_corners.len(), 9);
            assert_eq!(r.timings.kpd_ms.is_some(), name == "two-stage");
        }
    }
    let health = json(&client::get(&server.base(), "/health", TIMEOUT).unwrap());
    assert_eq!(health["status"], "ok");
    assert_eq!(health["proxies"].as_array().unwrap().len(), 2);
}

#[test]
fn server_without_proxies_reports_unknown_proxy() {
    let server = BackgroundServer::local(vec![]).unwrap();
    let health = json(&client::get(&server.base(), "/health", TIMEOUT).unwrap());
    assert_eq!(health["proxies"].as_array().unwrap().len(), 0);
    let r = post_png(&server.base(), "anything", "f", b"\x89PNG");
    assert_eq!(r.status, 404);
    assert_eq!(json(&r)["error"], "UnknownProxy");
}

#[test]
fn bad_payloads_are_rejected() {
    let model = cube();
    let set = synth(&model, 1, 2);
    let server = BackgroundServer::local(vec![proxy("p", PipelineKind::SspeStyle, oracle(&model, &set), &model)]).unwrap();
    let body = png(&set.images[0]);

    let r = post_png(&server.base(), "p", &set.dataset.records[0].image_id, &body[..body.len() / 2]);
    assert_eq!(r.status, 400);
    let e = json(&r);
    assert_eq!(e["error"], "UndecodableImage");
    assert_eq!(e["stage"], "decode");

    let (r, _) = client::request(
        &server.base(),
        "POST",
        "/proxies/p/frames",
        &[("Content-Type", "text/plain")],
        b"hello",
        TIMEOUT,
    )
    .unwrap();
    assert_eq!(r.status, 415);

    let (r, _) = client::request(
        &server.base(),
        "POST",
        "/proxies/p/frames",
        &[("Content-Type", "image/png"), ("X-Intrinsics", "{not json")],
        &body,
        TIMEOUT,
    )
    .unwrap();
    assert_eq!(r.status, 400);
    assert_eq!(json(&r)["error"], "InvalidHeader");
}

#[test]
fn max_in_flight_one_yields_exactly_one_busy() {
    let model = cube();
    let set = synth(&model, 2, 3);
    let slow = Arc::new(LatencyStub::new(oracle(&model, &set)).with_delay(Duration::from_millis(400)));
    let server = BackgroundServer::local(vec![
        proxy("p", PipelineKind::SspeStyle, slow, &model).with_max_in_flight(1),
    ])
    .unwrap();
    let base = server.base();
    let bodies: Vec<_> = set.images.iter().map(png).collect();
    let ids: Vec<_> = set.dataset.records.iter().map(|r| r.image_id.clone()).collect();

    let first = {
        let (base, body, id) = (base.clone(), bodies[0].clone(), ids[0].clone());
        thread::spawn(move || post_png(&base, "p", &id, &body))
    };
    thread::sleep(Duration::from_millis(100));
    let second = post_png(&base, "p", &ids[1], &bodies[1]);
    let first = first.join().unwrap();

    let statuses = [first.status, second.status];
    assert_eq!(statuses.iter().filter(|s| **s == 503).count(), 1, "{statuses:?}");
    assert_eq!(statuses.iter().filter(|s| **s == 200).count(), 1, "{statuses:?}");
    assert_eq!(json(&second)["error"], "Busy");
}

fn cube_correspondences(pose: &Pose, k: &CameraIntrinsics, n: usize) -> Vec<Correspondence> {
    let model = cube();
    model
        .keypoints()
        .values()
        .take(n)
        .map(|p| Correspondence::new(*p, project(p, pose, k).unwrap()))
        .collect()
}

#[test]
fn pnp_endpoint() {
    let server = BackgroundServer::local(vec![]).unwrap();
    let k = CameraIntrinsics::vga();
    let pose = Pose::from_scaled_axis(Vector3::new(0.3, -0.2, 0.1), Vector3::new(0.05, 0.02, 1.4));
    let send = |n: usize| {
        let body = serde_json::to_vec(&PnpRequest {
            correspondences: cube_correspondences(&pose, &k, n),
            intrinsics: k,
        })
        .unwrap();
        client::request(&server.base(), "POST", "/pnp", &[("Content-Type", "application/json")], &body, TIMEOUT)
            .unwrap()
            .0
    };

    let r = send(9);
    assert_eq!(r.status, 200);
    let v = json(&r);
    let got: Pose = serde_json::from_value(v["pose"].clone()).unwrap();
    assert!(got.translation_distance_to(&pose) < 1e-6);
    assert!(v["rms_reprojection_error"].as_f64().unwrap() < 1e-6);

    let r = send(2);
    assert_eq!(r.status, 422);
    assert_eq!(json(&r)["error"], "TooFewPoints");

    let r = send(3);
    assert_eq!(r.status, 200, "{}", String::from_utf8_lossy(&r.body));
    assert!(json(&r)["candidates_considered"].as_u64().unwrap() >= 1);

    let (r, _) = client::request(&server.base(), "POST", "/pnp", &[], b"{\"bogus\": 1}", TIMEOUT).unwrap();
    assert_eq!(r.status, 400);
    assert_eq!(json(&r)["error"], "MalformedRequest");
}

#[test]
fn staged_failure_only_affects_its_frame() {
    let model = cube();
    let set = synth(&model, 5, 4);
    let bad = set.dataset.records[2].image_id.clone();
    let kp = Arc::new(LatencyStub::new(oracle(&model, &set)).failing_on([bad.clone()]));
    let server = BackgroundServer::local(vec![
        proxy("b", PipelineKind::BetaposeStyle, kp, &model)
            .with_bbox_detector(oracle(&model, &set))
            .with_max_in_flight(5),
    ])
    .unwrap();

    let base = server.base();
    let barrier = Arc::new(Barrier::new(5));
    let handles: Vec<_> = set
        .dataset
        .records
        .iter()
        .zip(&set.images)
        .map(|(rec, img)| {
            let (base, body, id, barrier) = (base.clone(), png(img), rec.image_id.clone(), barrier.clone());
            thread::spawn(move || {
                barrier.wait();
                (id.clone(), post_png(&base, "b", &id, &body))
            })
        })
        .collect();
    for h in handles {
        let (id, r) = h.join().unwrap();
        if id == bad {
            assert_eq!(r.status, 422);
            let e = json(&r);
            assert_eq!(e["error"], "DetectorFailed");
            assert!(e["stage"].is_string());
        } else {
            let p = pose_of(&r);
            let rec = set.dataset.get(&id).unwrap();
            assert!(p.pose.translation_distance_to(&rec.pose) < 1e-6);
        }
    }
}

#[test]
fn stopping_one_proxy_leaves_the_other_serving() {
    let model = cube();
    let set = synth(&model, 1, 5);
    let det = oracle(&model, &set);
    let server = BackgroundServer::local(vec![
        proxy("a", PipelineKind::SspeStyle, det.clone(), &model),
        proxy("b", PipelineKind::BetaposeStyle, det, &model),
    ])
    .unwrap();
    let body = png(&set.images[0]);
    let id = &set.dataset.records[0].image_id;
    assert!(server.handle().stop_proxy("a"));
    assert!(!server.handle().stop_proxy("missing"));

    let r = post_png(&server.base(), "a", id, &body);
    assert_eq!(r.status, 503);
    assert_eq!(json(&r)["error"], "ProxyStopped");
    pose_of(&post_png(&server.base(), "b", id, &body));

    let health = json(&client::get(&server.base(), "/health", TIMEOUT).unwrap());
    assert_eq!(health["proxies"][0]["status"], "stopped");
    assert_eq!(health["proxies"][1]["status"], "ready");
}

#[test]
fn responses_are_stateless() {
    let model = cube();
    let set = synth(&model, 2, 6);
    let server = BackgroundServer::local(vec![proxy("p", PipelineKind::SspeStyle, oracle(&model, &set), &model)]).unwrap();
    let a = png(&set.images[0]);
    let b = png(&set.images[1]);
    let ida = &set.dataset.records[0].image_id;
    let idb = &set.dataset.records[1].image_id;
    let first = pose_of(&post_png(&server.base(), "p", ida, &a));
    pose_of(&post_png(&server.base(), "p", idb, &b));
    let again = pose_of(&post_png(&server.base(), "p", ida, &a));
    assert_eq!(first.pose, again.pose);
    assert_eq!(first.projected_bbox_corners, again.projected_bbox_corners);
}

#[test]
fn remote_detector_backend() {
    let model = cube();
    let set = synth(&model, 2, 7);
    let det_server = BackgroundServer::detector(oracle(&model, &set)).unwrap();
    let remote = Arc::new(RemoteDetector::new(det_server.base()));
    let server = BackgroundServer::local(vec![
        proxy("r1", PipelineKind::SspeStyle, remote.clone(), &model),
        proxy("r2", PipelineKind::BetaposeStyle, remote, &model),
    ])
    .unwrap();
    for (rec, img) in set.dataset.records.iter().zip(&set.images) {
        for name in ["r1", "r2"] {
            let r = pose_of(&post_png(&server.base(), name, &rec.image_id, &png(img)));
            assert!(r.pose.translation_distance_to(&rec.pose) < 1e-6);
        }
    }
    drop(det_server);
    let r = post_png(&server.base(), "r1", &set.dataset.records[0].image_id, &png(&set.images[0]));
    assert_eq!(r.status, 422);
    assert_eq!(json(&r)["error"], "BackendUnavailable");
}

#[test]
fn cors_static_files_and_map_frame() {
    let model = cube();
    let set = synth(&model, 1, 8);
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<!doctype html><title>ui</title>").unwrap();
    let robot_map = Pose::from_scaled_axis(Vector3::new(0.0, 0.0, 0.4), Vector3::new(2.0, -1.0, 0.0));
    let server = BackgroundServer::start(
        vec![proxy("p", PipelineKind::SspeStyle, oracle(&model, &set), &model)],
        "127.0.0.1:0".parse().unwrap(),
        ServerOptions {
            static_dir: Some(dir.path().to_path_buf()),
            robot_map: Some(robot_map),
        },
    )
    .unwrap();

    let (r, _) = client::request(
        &server.base(),
        "OPTIONS",
        "/pnp",
        &[
            ("Origin", "http://example.test"),
            ("Access-Control-Request-Method", "POST"),
            ("Access-Control-Request-Headers", "content-type"),
        ],
        b"",
        TIMEOUT,
    )
    .unwrap();
    assert!(r.is_success(), "{}", r.status);
    assert!(r.header("access-control-allow-origin").is_some());

    let r = client::get(&server.base(), "/index.html", TIMEOUT).unwrap();
    assert_eq!(r.status, 200);
    assert!(String::from_utf8_lossy(&r.body).contains("<title>ui</title>"));

    let rec = &set.dataset.records[0];
    let p = pose_of(&post_png(&server.base(), "p", &rec.image_id, &png(&set.images[0])));
    let expected = p.pose.compose(&robot_map);
    let got = p.ar_to_map.expect("ar_to_map present");
    assert!(got.translation_distance_to(&expected) < 1e-12);
    assert!(got.rotation_angle_to(&expected) < 1e-12);
}

#[test]
fn port_in_use_is_reported() {
    let first = BackgroundServer::local(vec![]).unwrap();
    let addr = first.handle().addr();
    match BackgroundServer::start(vec![], addr, ServerOptions::default()) {
        Err(ServeError::PortInUse(a)) => assert_eq!(a, addr),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("second bind succeeded"),
    }
}
