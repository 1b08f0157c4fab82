use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DetectError, DetectedKeypoint, DetectionResult, Detector, Frame};
use crate::dataset::{AnnotationRecord, Dataset};
use crate::geometry::{project, Pixel2};
use crate::metrics::ObjectModel;

/// Keypoint noise applied by the oracle.
///
/// Effective per-axis standard deviation is
/// `sigma_px + distance_noise_gain * |t|` where `|t|` is the object distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleNoiseModel {
    pub sigma_px: f64,
    pub dropout_p: f64,
    /// Extra pixels of standard deviation per meter of distance.
    pub distance_noise_gain: f64,
    pub seed: u64,
}

impl Default for OracleNoiseModel {
    fn default() -> Self {
        Self::exact()
    }
}

impl OracleNoiseModel {
    pub fn exact() -> Self {
        Self {
            sigma_px: 0.0,
            dropout_p: 0.0,
            distance_noise_gain: 0.0,
            seed: 0,
        }
    }

    pub fn gaussian(sigma_px: f64, seed: u64) -> Self {
        Self {
            sigma_px,
            seed,
            ..Self::exact()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.sigma_px >= 0.0 && self.sigma_px.is_finite()) {
            return Err(format!("sigma_px must be >= 0, got {}", self.sigma_px));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(format!("dropout_p must lie in [0, 1], got {}", self.dropout_p));
        }
        if !(self.distance_noise_gain >= 0.0 && self.distance_noise_gain.is_finite()) {
            return Err(format!(
                "distance_noise_gain must be >= 0, got {}",
                self.distance_noise_gain
            ));
        }
        Ok(())
    }

    fn rng_for(&self, image_id: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(image_id.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }
}

/// Thread-safe image_id -> annotation lookup.
#[derive(Debug, Default)]
pub struct AnnotationStore {
    records: RwLock<HashMap<String, AnnotationRecord>>,
}

impl AnnotationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_dataset(ds: &Dataset) -> Self {
        let store = Self::new();
        store.insert_dataset(ds);
        store
    }

    pub fn insert(&self, rec: AnnotationRecord) {
        self.records
            .write()
            .expect("annotation store poisoned")
            .insert(rec.image_id.clone(), rec);
    }

    pub fn insert_dataset(&self, ds: &Dataset) {
        let mut map = self.records.write().expect("annotation store poisoned");
        for r in &ds.records {
            map.insert(r.image_id.clone(), r.clone());
        }
    }

    pub fn get(&self, image_id: &str) -> Option<AnnotationRecord> {
        self.records
            .read()
            .expect("annotation store poisoned")
            .get(image_id)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.records.read().expect("annotation store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ground-truth detector: projects the model keypoints under the annotated
/// pose and perturbs them. Deterministic per `(seed, image_id)`.
pub struct OracleDetector {
    name: String,
    model: Arc<ObjectModel>,
    noise: OracleNoiseModel,
    store: Arc<AnnotationStore>,
}

impl OracleDetector {
    pub fn new(model: Arc<ObjectModel>, noise: OracleNoiseModel, store: Arc<AnnotationStore>) -> Self {
        Self {
            name: "oracle".into(),
            model,
            noise,
            store,
        }
    }

    pub fn noise(&self) -> &OracleNoiseModel {
        &self.noise
    }

    fn lookup(&self, frame: &Frame) -> Result<AnnotationRecord, DetectError> {
        self.store
            .get(&frame.image_id)
            .or_else(|| frame.oracle.as_ref().and_then(|h| h.record.clone()))
            .ok_or_else(|| DetectError::UnknownFrame(frame.image_id.clone()))
    }
}

impl Detector for OracleDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn detect(&self, frame: &Frame) -> Result<DetectionResult, DetectError> {
        let start = Instant::now();
        let rec = self.lookup(frame)?;
        let noise = frame
            .oracle
            .as_ref()
            .and_then(|h| h.noise)
            .unwrap_or(self.noise);
        noise.validate().map_err(DetectError::Failed)?;
        let sigma = noise.sigma_px + noise.distance_noise_gain * rec.pose.translation().norm();
        let mut rng = noise.rng_for(&frame.image_id);

        let mut keypoints = BTreeMap::new();
        let mut dropped = Vec::new();
        for (name, p) in self.model.keypoints() {
            // draw every variate so one keypoint's fate never shifts another's noise
            let drop_draw: f64 = rng.random();
            let nu: f64 = rng.sample(StandardNormal);
            let nv: f64 = rng.sample(StandardNormal);
            let Ok(px) = project(p, &rec.pose, &rec.intrinsics) else {
                dropped.push(name.clone());
                continue;
            };
            let noisy = if sigma > 0.0 {
                Pixel2::new(px.u + sigma * nu, px.v + sigma * nv)
            } else {
                px
            };
            if drop_draw < noise.dropout_p || !frame.contains(&noisy) {
                dropped.push(name.clone());
                continue;
            }
            keypoints.insert(
                name.clone(),
                DetectedKeypoint {
                    u: noisy.u,
                    v: noisy.v,
                    confidence: 1.0,
                },
            );
        }
        Ok(DetectionResult {
            object_class: rec.object_class.clone(),
            confidence: 1.0,
            bbox_2d: rec.bbox_2d,
            keypoints_2d: keypoints,
            dropped,
            timing_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}
