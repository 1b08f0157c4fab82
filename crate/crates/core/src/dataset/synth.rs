use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_line_segment_mut};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Map;
use thiserror::Error;

use super::{save_dataset, AnnotationRecord, BBox2, Dataset, DatasetError, Source};
use crate::geometry::{project, CameraIntrinsics, Pixel2, Pose};
use crate::metrics::{box_edges, ObjectModel};

const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("pose sampler produced no in-frame pose after {0} attempts")]
    UnsatisfiablePose(usize),
    #[error("n must be at least 1")]
    EmptyRequest,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("image write failed: {0}")]
    Image(#[from] image::ImageError),
}

/// Source of candidate object-in-camera poses. Candidates that leave any
/// keypoint out of frame are rejected by the generator.
pub trait PoseSampler {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> Pose;
}

pub struct FixedPoseSampler(pub Pose);

impl PoseSampler for FixedPoseSampler {
    fn sample(&mut self, _rng: &mut ChaCha8Rng) -> Pose {
        self.0
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let q = Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    UnitQuaternion::from_quaternion(q)
}

/// Uniform random orientation at a uniform distance, centered on a random
/// pixel inside the central `spread` fraction of the image.
pub struct RandomViewSampler {
    pub camera: CameraIntrinsics,
    pub min_distance: f64,
    pub max_distance: f64,
    pub spread: f64,
}

impl RandomViewSampler {
    pub fn new(camera: CameraIntrinsics, min_distance: f64, max_distance: f64) -> Self {
        Self {
            camera,
            min_distance,
            max_distance,
            spread: 0.6,
        }
    }
}

fn place_at(camera: &CameraIntrinsics, rng: &mut ChaCha8Rng, spread: f64, distance: f64) -> Vector3<f64> {
    let half_w = camera.width as f64 * spread / 2.0;
    let half_h = camera.height as f64 * spread / 2.0;
    let u = camera.cx + rng.random_range(-half_w..=half_w);
    let v = camera.cy + rng.random_range(-half_h..=half_h);
    let dir = Vector3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
    dir.normalize() * distance
}

impl PoseSampler for RandomViewSampler {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> Pose {
        let distance = if self.max_distance > self.min_distance {
            rng.random_range(self.min_distance..=self.max_distance)
        } else {
            self.min_distance
        };
        let rotation = random_rotation(rng);
        let t = place_at(&self.camera, rng, self.spread, distance);
        Pose::new(rotation, t)
    }
}

/// Random orientation at a fixed distance (meters, from the camera center),
/// with a small lateral jitter.
pub struct DistanceSampler {
    pub camera: CameraIntrinsics,
    pub distance: f64,
    pub spread: f64,
}

impl DistanceSampler {
    pub fn new(camera: CameraIntrinsics, distance: f64) -> Self {
        Self {
            camera,
            distance,
            spread: 0.2,
        }
    }
}

impl PoseSampler for DistanceSampler {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> Pose {
        let rotation = random_rotation(rng);
        let t = place_at(&self.camera, rng, self.spread, self.distance);
        Pose::new(rotation, t)
    }
}

impl<F: FnMut(&mut ChaCha8Rng) -> Pose> PoseSampler for F {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> Pose {
        self(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Background {
    Flat(Rgb<u8>),
    /// Uniform per-pixel noise in `[0, amplitude]`.
    Noise { amplitude: u8 },
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub seed: u64,
    pub background: Background,
    pub id_prefix: String,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            background: Background::Flat(Rgb([24, 24, 32])),
            id_prefix: "synth-".into(),
        }
    }
}

impl SynthOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

pub struct SyntheticSet {
    pub dataset: Dataset,
    /// Rendered frames, parallel to `dataset.records`.
    pub images: Vec<RgbImage>,
}

fn project_keypoints(
    model: &ObjectModel,
    pose: &Pose,
    camera: &CameraIntrinsics,
) -> Option<BTreeMap<String, Pixel2>> {
    let mut out = BTreeMap::new();
    for (name, p) in model.keypoints() {
        let px = project(p, pose, camera).ok()?;
        if !camera.contains(&px) {
            return None;
        }
        out.insert(name.clone(), px);
    }
    Some(out)
}

/// Generates `n` annotated wireframe frames. Labels are projections of the
/// model keypoints, so every record is exactly pose-consistent.
pub fn synth_generate(
    model: &ObjectModel,
    camera: &CameraIntrinsics,
    sampler: &mut dyn PoseSampler,
    n: usize,
    opts: &SynthOptions,
) -> Result<SyntheticSet, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyRequest);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut dataset = Dataset::new(model.name());
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let (pose, keypoints_2d) = (0..MAX_ATTEMPTS)
            .find_map(|_| {
                let pose = sampler.sample(&mut rng);
                project_keypoints(model, &pose, camera).map(|kps| (pose, kps))
            })
            .ok_or(SynthError::UnsatisfiablePose(MAX_ATTEMPTS))?;
        let mut extent: Vec<Pixel2> = keypoints_2d.values().copied().collect();
        for c in model.bbox_corners() {
            if let Ok(px) = project(c, &pose, camera) {
                extent.push(Pixel2::new(
                    px.u.clamp(0.0, camera.width as f64 - 1.0),
                    px.v.clamp(0.0, camera.height as f64 - 1.0),
                ));
            }
        }
        let bbox_2d = BBox2::enclosing(extent.iter()).expect("keypoints present");
        let image_id = format!("{}{i:05}", opts.id_prefix);
        let image = render_wireframe(model, &pose, camera, opts.background, &mut rng);
        dataset.records.push(AnnotationRecord {
            image_path: format!("images/{image_id}.png"),
            image_id,
            object_class: model.name().to_string(),
            pose,
            intrinsics: *camera,
            keypoints_2d,
            bbox_2d,
            source: Source::Synthetic,
            parent_id: None,
            chirality_approximate: false,
            extra: Map::new(),
        });
        images.push(image);
    }
    Ok(SyntheticSet { dataset, images })
}

/// Draws box edges and keypoint sprites of `model` seen under `pose`.
pub fn render_wireframe(
    model: &ObjectModel,
    pose: &Pose,
    camera: &CameraIntrinsics,
    background: Background,
    rng: &mut ChaCha8Rng,
) -> RgbImage {
    let mut img = match background {
        Background::Flat(c) => RgbImage::from_pixel(camera.width, camera.height, c),
        Background::Noise { amplitude } => {
            let mut img = RgbImage::new(camera.width, camera.height);
            for px in img.pixels_mut() {
                let g: u8 = rng.random_range(0..=amplitude);
                *px = Rgb([g, g, g]);
            }
            img
        }
    };
    let corners: Vec<Option<Pixel2>> = model
        .bbox_corners()
        .iter()
        .map(|c| project(c, pose, camera).ok())
        .collect();
    for (a, b) in box_edges() {
        if let (Some(pa), Some(pb)) = (corners[a], corners[b]) {
            draw_line_segment_mut(
                &mut img,
                (pa.u as f32, pa.v as f32),
                (pb.u as f32, pb.v as f32),
                Rgb([40, 200, 90]),
            );
        }
    }
    for (name, p) in model.keypoints() {
        if let Ok(px) = project(p, pose, camera) {
            let color = if name == crate::metrics::CENTROID_KEYPOINT {
                Rgb([230, 60, 60])
            } else {
                Rgb([240, 220, 80])
            };
            draw_filled_circle_mut(&mut img, (px.u.round() as i32, px.v.round() as i32), 3, color);
        }
    }
    img
}

/// Writes `dataset.json` and `images/*.png` under `dir`.
pub fn write_synthetic(set: &SyntheticSet, dir: impl AsRef<Path>) -> Result<(), SynthError> {
    let dir = dir.as_ref();
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|source| DatasetError::Io {
        path: images_dir.clone(),
        source,
    })?;
    for (rec, img) in set.dataset.records.iter().zip(&set.images) {
        img.save(dir.join(&rec.image_path))?;
    }
    save_dataset(&set.dataset, dir.join("dataset.json"))?;
    Ok(())
}
