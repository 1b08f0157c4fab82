#![allow(dead_code)]

use std::io::Cursor;
use std::sync::Arc;
use std::time::Duration;

use edgepose_core::dataset::{synth_generate, RandomViewSampler, SynthOptions, SyntheticSet};
use edgepose_core::detector::{AnnotationStore, Detector, OracleDetector, OracleNoiseModel};
use edgepose_core::geometry::CameraIntrinsics;
use edgepose_core::metrics::ObjectModel;
use edgepose_server::client::{self, HttpResponse};
use edgepose_server::proxy::{PipelineKind, ProxyConfig};
use image::{ImageFormat, RgbImage};

pub const TIMEOUT: Duration = Duration::from_secs(30);

pub fn cube() -> Arc<ObjectModel> {
    Arc::new(ObjectModel::cube("cube", 0.3).unwrap())
}

pub fn synth(model: &ObjectModel, n: usize, seed: u64) -> SyntheticSet {
    let k = CameraIntrinsics::vga();
    let mut s = RandomViewSampler::new(k, 1.0, 3.0);
    synth_generate(model, &k, &mut s, n, &SynthOptions::with_seed(seed)).unwrap()
}

pub fn oracle(model: &Arc<ObjectModel>, set: &SyntheticSet) -> Arc<dyn Detector> {
    Arc::new(OracleDetector::new(
        model.clone(),
        OracleNoiseModel::exact(),
        Arc::new(AnnotationStore::from_dataset(&set.dataset)),
    ))
}

pub fn proxy(name: &str, kind: PipelineKind, det: Arc<dyn Detector>, model: &Arc<ObjectModel>) -> ProxyConfig {
    ProxyConfig::new(name, kind, det, model.clone(), CameraIntrinsics::vga())
}

pub fn png(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png).unwrap();
    out
}

pub fn post_png(base: &str, proxy: &str, frame_id: &str, body: &[u8]) -> HttpResponse {
    client::request(
        base,
        "POST",
        &format!("/proxies/{proxy}/frames"),
        &[("Content-Type", "image/png"), ("X-Frame-Id", frame_id)],
        body,
        TIMEOUT,
    )
    .unwrap()
    .0
}

pub fn json(resp: &HttpResponse) -> serde_json::Value {
    serde_json::from_slice(&resp.body).unwrap_or_else(|e| {
        panic!("status {}: {e}: {}", resp.status, String::from_utf8_lossy(&resp.body))
    })
}
