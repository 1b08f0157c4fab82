//! Simulated AR client: streams frames to a proxy and records latency and accuracy.
//!
//! Per frame the client measures
//! - `acquire`: loading the frame (disk read and decode, or an in-memory copy),
//! - `encode`: PNG encoding,
//! - `transmit`: request start until the body is fully written,
//! - `server_total`: the server's own `total_ms`,
//! - `client_decode`: parsing the JSON response,
//! - `end_to_end`: request start until the response is parsed.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use edgepose_core::dataset::{
    synth_generate, AnnotationRecord, Background, Dataset, DistanceSampler, SynthError, SynthOptions,
};
use edgepose_core::detector::{OracleHint, OracleNoiseModel};
use edgepose_core::geometry::{CameraIntrinsics, Pose};
use edgepose_core::metrics::{add_accuracy, is_correct, AccuracyOptions, MetricsError, ObjectModel, DEFAULT_ADD_THRESHOLD};
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{self, ClientError};
use crate::report::{Baseline, BASELINES};
use crate::server::{ErrorBody, Health, PoseResponse};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("server unreachable: {0}")]
    ServerUnreachable(String),
    #[error("server has no proxy named `{0}`")]
    UnknownProxy(String),
    #[error("invalid benchmark configuration: {0}")]
    InvalidConfig(String),
    #[error("frame source: {0}")]
    FrameSource(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Client(ClientError),
}

impl From<ClientError> for BenchError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Unreachable { addr, source } => BenchError::ServerUnreachable(format!("{addr}: {source}")),
            other => BenchError::Client(other),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// `host:port`, optionally with an `http://` prefix.
    pub server: String,
    pub proxy: String,
    /// Posts per frame.
    pub repeats: usize,
    /// Worker threads for the separate throughput pass and for sweeps; 1 disables the pass.
    pub concurrency: usize,
    /// Attach the ground-truth record as an `X-Oracle` header.
    pub send_oracle_hint: bool,
    /// Noise model sent with the hint; `None` keeps the server's.
    pub noise: Option<OracleNoiseModel>,
    pub threshold_fraction: f64,
    pub timeout: Duration,
}

impl BenchConfig {
    pub const DEFAULT_REPEATS: usize = 20;

    pub fn new(server: impl Into<String>, proxy: impl Into<String>) -> Self {
        Self {
            server: server.into(),
            proxy: proxy.into(),
            repeats: Self::DEFAULT_REPEATS,
            concurrency: 1,
            send_oracle_hint: true,
            noise: None,
            threshold_fraction: DEFAULT_ADD_THRESHOLD,
            timeout: Duration::from_secs(30),
        }
    }
}

/// Where frame pixels come from.
pub enum FrameSource<'a> {
    /// Images parallel to the dataset records.
    Memory(&'a [RgbImage]),
    /// `image_path` of each record is resolved against this directory.
    Disk(PathBuf),
}

impl FrameSource<'_> {
    fn acquire(&self, index: usize, rec: &AnnotationRecord) -> Result<RgbImage, String> {
        match self {
            FrameSource::Memory(images) => images
                .get(index)
                .cloned()
                .ok_or_else(|| format!("no image for record {index}")),
            FrameSource::Disk(dir) => {
                let path = dir.join(&rec.image_path);
                let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                image::load_from_memory(&bytes)
                    .map(|i| i.to_rgb8())
                    .map_err(|e| format!("{}: {e}", path.display()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct StageStats {
    pub n: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Half-width of the normal-approximation 95% confidence interval of the mean.
    pub ci95_ms: f64,
}

impl StageStats {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self::default();
        }
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        let mean = s.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        let sd = if n > 1 {
            (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            n,
            mean_ms: mean,
            median_ms: median,
            p95_ms: s[rank - 1],
            ci95_ms: 1.96 * sd / (n as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameSample {
    pub frame_index: usize,
    pub repeat: usize,
    pub acquire_ms: f64,
    pub encode_ms: f64,
    pub transmit_ms: f64,
    pub server_total_ms: f64,
    pub client_decode_ms: f64,
    pub end_to_end_ms: f64,
    pub server_receive_ms: f64,
    pub server_decode_ms: f64,
    pub server_detect_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_kpd_ms: Option<f64>,
    pub server_pnp_ms: f64,
}

impl FrameSample {
    /// Acquisition through parsed result, the client's view of computing time.
    pub fn computing_ms(&self) -> f64 {
        self.acquire_ms + self.encode_ms + self.end_to_end_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub frame_id: String,
    pub repeat: usize,
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub distance_m: f64,
    pub accuracy: f64,
    pub n: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Largest swept distance whose accuracy is at least 0.5.
    pub max_distance_at_50: Option<f64>,
}

impl SweepResult {
    pub fn from_points(points: Vec<SweepPoint>) -> Self {
        let max_distance_at_50 = points
            .iter()
            .filter(|p| p.accuracy >= 0.5)
            .map(|p| p.distance_m)
            .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.max(d))));
        Self {
            points,
            max_distance_at_50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputStats {
    pub concurrency: usize,
    pub frames_ok: usize,
    pub errors: usize,
    pub wall_ms: f64,
    pub frames_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LatencyBreakdown {
    pub acquire: StageStats,
    pub encode: StageStats,
    pub transmit: StageStats,
    pub server_total: StageStats,
    pub client_decode: StageStats,
    pub end_to_end: StageStats,
    /// acquire + encode + end_to_end per sample.
    pub computing: StageStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub proxy_name: String,
    pub n_frames: usize,
    pub repeats: usize,
    pub n_samples: usize,
    pub n_errors: usize,
    pub latency: LatencyBreakdown,
    /// Server-side stage stats keyed by stage name.
    pub server_stages: BTreeMap<String, StageStats>,
    /// ADD accuracy over the first successful response of each scored frame.
    pub accuracy: Option<f64>,
    pub accuracy_frames: usize,
    /// Records flagged `chirality_approximate`, left out of the accuracy.
    pub excluded_chirality: usize,
    pub threshold_fraction: f64,
    pub distance_sweep: Vec<SweepPoint>,
    pub max_distance_at_50: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub throughput: Option<ThroughputStats>,
    pub reference_baselines: Vec<Baseline>,
    pub samples: Vec<FrameSample>,
    pub errors: Vec<FrameError>,
}

impl BenchReport {
    pub fn empty(proxy_name: impl Into<String>) -> Self {
        Self {
            proxy_name: proxy_name.into(),
            n_frames: 0,
            repeats: 0,
            n_samples: 0,
            n_errors: 0,
            latency: LatencyBreakdown::default(),
            server_stages: BTreeMap::new(),
            accuracy: None,
            accuracy_frames: 0,
            excluded_chirality: 0,
            threshold_fraction: DEFAULT_ADD_THRESHOLD,
            distance_sweep: Vec::new(),
            max_distance_at_50: None,
            throughput: None,
            reference_baselines: BASELINES.to_vec(),
            samples: Vec::new(),
            errors: Vec::new(),
        }
    }

    pub fn with_sweep(mut self, sweep: SweepResult) -> Self {
        self.distance_sweep = sweep.points;
        self.max_distance_at_50 = sweep.max_distance_at_50;
        self
    }

    /// Recompute the summary statistics from `samples`.
    pub fn summarize(&mut self) {
        let col = |f: &dyn Fn(&FrameSample) -> f64| -> StageStats {
            StageStats::from_samples(&self.samples.iter().map(f).collect::<Vec<_>>())
        };
        self.latency = LatencyBreakdown {
            acquire: col(&|s| s.acquire_ms),
            encode: col(&|s| s.encode_ms),
            transmit: col(&|s| s.transmit_ms),
            server_total: col(&|s| s.server_total_ms),
            client_decode: col(&|s| s.client_decode_ms),
            end_to_end: col(&|s| s.end_to_end_ms),
            computing: col(&|s| s.computing_ms()),
        };
        let mut stages = BTreeMap::new();
        stages.insert("receive".to_string(), col(&|s| s.server_receive_ms));
        stages.insert("decode".to_string(), col(&|s| s.server_decode_ms));
        stages.insert("detect".to_string(), col(&|s| s.server_detect_ms));
        stages.insert("pnp".to_string(), col(&|s| s.server_pnp_ms));
        let kpd: Vec<f64> = self.samples.iter().filter_map(|s| s.server_kpd_ms).collect();
        if !kpd.is_empty() {
            stages.insert("kpd".to_string(), StageStats::from_samples(&kpd));
        }
        self.server_stages = stages;
        self.n_samples = self.samples.len();
        self.n_errors = self.errors.len();
    }
}

/// Result of posting one frame.
pub struct Posted {
    pub sample: FrameSample,
    pub response: PoseResponse,
}

/// The failure of one post, as reported by the server or the transport.
#[derive(Debug, Clone)]
pub struct PostFailure {
    pub error: String,
    pub message: String,
}

fn hint_header(cfg: &BenchConfig, rec: &AnnotationRecord) -> Option<String> {
    cfg.send_oracle_hint.then(|| {
        serde_json::to_string(&OracleHint {
            record: Some(rec.clone()),
            noise: cfg.noise,
        })
        .expect("hint serializes")
    })
}

/// Encode and post one acquired frame.
pub fn post_frame(
    cfg: &BenchConfig,
    rec: &AnnotationRecord,
    image: &RgbImage,
    acquire_ms: f64,
) -> Result<Posted, PostFailure> {
    let t = Instant::now();
    let mut png = Vec::new();
    image
        .write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
        .map_err(|e| PostFailure {
            error: "EncodeFailed".into(),
            message: e.to_string(),
        })?;
    let encode_ms = t.elapsed().as_secs_f64() * 1e3;

    let intrinsics = serde_json::to_string(&rec.intrinsics).expect("intrinsics serialize");
    let hint = hint_header(cfg, rec);
    let mut headers = vec![
        ("Content-Type", "image/png"),
        ("X-Frame-Id", rec.image_id.as_str()),
        ("X-Intrinsics", intrinsics.as_str()),
    ];
    if let Some(h) = &hint {
        headers.push(("X-Oracle", h.as_str()));
    }
    let path = format!("/proxies/{}/frames", cfg.proxy);
    let (resp, ex) = client::request(&cfg.server, "POST", &path, &headers, &png, cfg.timeout).map_err(|e| {
        PostFailure {
            error: match e {
                ClientError::Unreachable { .. } => "ServerUnreachable".into(),
                _ => "TransportError".into(),
            },
            message: e.to_string(),
        }
    })?;
    if !resp.is_success() {
        let body: Option<ErrorBody> = serde_json::from_slice(&resp.body).ok();
        return Err(match body {
            Some(b) => PostFailure {
                error: b.error,
                message: b.message,
            },
            None => PostFailure {
                error: format!("Http{}", resp.status),
                message: String::from_utf8_lossy(&resp.body).into_owned(),
            },
        });
    }
    let parsed: PoseResponse = serde_json::from_slice(&resp.body).map_err(|e| PostFailure {
        error: "MalformedResponse".into(),
        message: e.to_string(),
    })?;
    let done = Instant::now();
    let ms = |a: Instant, b: Instant| b.duration_since(a).as_secs_f64() * 1e3;
    let tm = parsed.timings;
    Ok(Posted {
        sample: FrameSample {
            frame_index: 0,
            repeat: 0,
            acquire_ms,
            encode_ms,
            transmit_ms: ms(ex.send_start, ex.send_done),
            server_total_ms: tm.total_ms,
            client_decode_ms: ms(ex.received, done),
            end_to_end_ms: ms(ex.send_start, done),
            server_receive_ms: tm.receive_ms,
            server_decode_ms: tm.decode_ms,
            server_detect_ms: tm.detect_ms,
            server_kpd_ms: tm.kpd_ms,
            server_pnp_ms: tm.pnp_ms,
        },
        response: parsed,
    })
}

/// Fails with `ServerUnreachable` or `UnknownProxy` before any frame is sent.
pub fn check_server(cfg: &BenchConfig) -> Result<Health, BenchError> {
    let resp = client::get(&cfg.server, "/health", cfg.timeout)?;
    if !resp.is_success() {
        return Err(BenchError::ServerUnreachable(format!("health check returned HTTP {}", resp.status)));
    }
    let health: Health = serde_json::from_slice(&resp.body)
        .map_err(|e| BenchError::ServerUnreachable(format!("unexpected health response: {e}")))?;
    if !health.proxies.iter().any(|p| p.name == cfg.proxy) {
        return Err(BenchError::UnknownProxy(cfg.proxy.clone()));
    }
    Ok(health)
}

/// Post every record `cfg.repeats` times, sequentially, and score the poses.
pub fn run_benchmark(
    cfg: &BenchConfig,
    ds: &Dataset,
    frames: FrameSource<'_>,
    model: &ObjectModel,
) -> Result<BenchReport, BenchError> {
    if cfg.repeats == 0 {
        return Err(BenchError::InvalidConfig("repeats must be >= 1".into()));
    }
    if !(cfg.threshold_fraction > 0.0) {
        return Err(BenchError::InvalidConfig("threshold_fraction must be > 0".into()));
    }
    check_server(cfg)?;

    let mut report = BenchReport::empty(&cfg.proxy);
    report.n_frames = ds.records.len();
    report.repeats = cfg.repeats;
    report.threshold_fraction = cfg.threshold_fraction;

    let mut first_pose: Vec<Option<Pose>> = vec![None; ds.records.len()];
    for (i, rec) in ds.records.iter().enumerate() {
        for r in 0..cfg.repeats {
            let t = Instant::now();
            let image = match frames.acquire(i, rec) {
                Ok(img) => img,
                Err(message) => {
                    report.errors.push(FrameError {
                        frame_id: rec.image_id.clone(),
                        repeat: r,
                        error: "AcquireFailed".into(),
                        message,
                    });
                    continue;
                }
            };
            let acquire_ms = t.elapsed().as_secs_f64() * 1e3;
            match post_frame(cfg, rec, &image, acquire_ms) {
                Ok(p) => {
                    first_pose[i].get_or_insert(p.response.pose);
                    report.samples.push(FrameSample {
                        frame_index: i,
                        repeat: r,
                        ..p.sample
                    });
                }
                Err(f) => report.errors.push(FrameError {
                    frame_id: rec.image_id.clone(),
                    repeat: r,
                    error: f.error,
                    message: f.message,
                }),
            }
        }
    }

    let mut pairs = Vec::new();
    for (rec, pred) in ds.records.iter().zip(&first_pose) {
        if rec.chirality_approximate {
            report.excluded_chirality += 1;
        } else if let Some(p) = pred {
            pairs.push((*p, rec.pose));
        }
    }
    report.accuracy_frames = pairs.len();
    report.accuracy = if pairs.is_empty() {
        None
    } else {
        Some(add_accuracy(&pairs, model, cfg.threshold_fraction)?)
    };
    if cfg.concurrency > 1 {
        report.throughput = Some(throughput_pass(cfg, ds, &frames)?);
    }
    report.summarize();
    Ok(report)
}

fn throughput_pass(cfg: &BenchConfig, ds: &Dataset, frames: &FrameSource<'_>) -> Result<ThroughputStats, BenchError> {
    let images: Vec<RgbImage> = ds
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| frames.acquire(i, r))
        .collect::<Result<_, _>>()
        .map_err(BenchError::FrameSource)?;
    let next = AtomicUsize::new(0);
    let ok = AtomicUsize::new(0);
    let start = Instant::now();
    std::thread::scope(|s| {
        for _ in 0..cfg.concurrency {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= images.len() {
                    break;
                }
                if post_frame(cfg, &ds.records[i], &images[i], 0.0).is_ok() {
                    ok.fetch_add(1, Ordering::SeqCst);
                }
            });
        }
    });
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let frames_ok = ok.load(Ordering::SeqCst);
    Ok(ThroughputStats {
        concurrency: cfg.concurrency,
        frames_ok,
        errors: images.len() - frames_ok,
        wall_ms,
        frames_per_s: if wall_ms > 0.0 { frames_ok as f64 / (wall_ms / 1e3) } else { 0.0 },
    })
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    /// Ascending distances in meters.
    pub distances: Vec<f64>,
    pub per_distance_n: usize,
    /// Noise sent with every frame; should have `distance_noise_gain > 0`.
    pub noise: OracleNoiseModel,
    /// Seeds pose sampling; the noise seed is taken from `noise`.
    pub seed: u64,
}

/// Accuracy as a function of object distance.
///
/// Frames are synthesized at each distance and posted once each with an
/// oracle hint carrying `sweep.noise`. Every level reuses the same
/// orientations and frame ids, hence the same normalized noise draws, so
/// differences between levels come from distance alone. Failed frames count
/// as incorrect.
pub fn distance_sweep(
    cfg: &BenchConfig,
    model: &ObjectModel,
    k: &CameraIntrinsics,
    sweep: &SweepConfig,
) -> Result<SweepResult, BenchError> {
    if sweep.distances.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(BenchError::InvalidConfig("distances must be strictly ascending".into()));
    }
    if sweep.per_distance_n == 0 {
        return Err(BenchError::InvalidConfig("per_distance_n must be >= 1".into()));
    }
    check_server(cfg)?;
    let cfg = BenchConfig {
        send_oracle_hint: true,
        noise: Some(sweep.noise),
        ..cfg.clone()
    };
    let opts = AccuracyOptions {
        threshold_fraction: cfg.threshold_fraction,
        symmetric: false,
    };

    let mut points = Vec::with_capacity(sweep.distances.len());
    for &d in &sweep.distances {
        // same seed and ids at every level: orientations and normalized noise
        // draws repeat, only the distance changes
        let synth_opts = SynthOptions {
            seed: sweep.seed,
            background: Background::Flat(image::Rgb([24, 24, 32])),
            id_prefix: format!("sweep-{}-", sweep.seed),
        };
        let set = synth_generate(model, k, &mut DistanceSampler::new(*k, d), sweep.per_distance_n, &synth_opts)?;
        let correct = AtomicUsize::new(0);
        let errors = AtomicUsize::new(0);
        let first_metric_error: Mutex<Option<MetricsError>> = Mutex::new(None);
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..cfg.concurrency.max(1) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= set.images.len() {
                        break;
                    }
                    let rec = &set.dataset.records[i];
                    match post_frame(&cfg, rec, &set.images[i], 0.0) {
                        Ok(p) => match is_correct(&p.response.pose, &rec.pose, model, &opts) {
                            Ok(true) => {
                                correct.fetch_add(1, Ordering::SeqCst);
                            }
                            Ok(false) => {}
                            Err(e) => {
                                first_metric_error.lock().expect("lock").get_or_insert(e);
                            }
                        },
                        Err(_) => {
                            errors.fetch_add(1, Ordering::SeqCst);
                        }
                    }
                });
            }
        });
        if let Some(e) = first_metric_error.into_inner().expect("lock") {
            return Err(e.into());
        }
        let n = sweep.per_distance_n;
        points.push(SweepPoint {
            distance_m: d,
            accuracy: correct.into_inner() as f64 / n as f64,
            n,
            errors: errors.into_inner(),
        });
    }
    Ok(SweepResult::from_points(points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_stats_known_values() {
        let s = StageStats::from_samples(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(s.n, 4);
        assert_eq!(s.mean_ms, 2.5);
        assert_eq!(s.median_ms, 2.5);
        assert_eq!(s.p95_ms, 4.0);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((s.ci95_ms - 1.96 * sd / 2.0).abs() < 1e-12);
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(StageStats::from_samples(&v).p95_ms, 95.0);
        assert_eq!(StageStats::from_samples(&[]), StageStats::default());
    }

    #[test]
    fn max_distance_at_50() {
        let p = |d, a| SweepPoint { distance_m: d, accuracy: a, n: 10, errors: 0 };
        let r = SweepResult::from_points(vec![p(1.0, 1.0), p(2.0, 0.5), p(3.0, 0.2)]);
        assert_eq!(r.max_distance_at_50, Some(2.0));
        let none = SweepResult::from_points(vec![p(5.0, 0.4), p(6.0, 0.1)]);
        assert_eq!(none.max_distance_at_50, None);
    }
}
