use std::collections::BTreeMap;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use imageproc::geometric_transformations::{rotate, Interpolation};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AnnotationRecord, BBox2, Source, LABEL_TOLERANCE_PX};
use crate::geometry::{CameraIntrinsics, GeometryError, Pixel2, Pose};
use crate::metrics::ObjectModel;
use crate::pnp::{solve_pnp, Correspondence, PnpError, PnpOptions};

/// Label-preserving image augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum AugmentOp {
    /// In-plane rotation about the principal point; positive angles turn the
    /// image content counterclockwise on screen.
    Rotate { radians: f64 },
    Scale { factor: f64 },
    Hflip,
    /// Gamma curve `out = 255 (in / 255)^gamma`.
    Contrast { gamma: f64 },
}

impl AugmentOp {
    pub fn tag(&self) -> String {
        match self {
            AugmentOp::Rotate { radians } => format!("rot{:+.1}", radians.to_degrees()),
            AugmentOp::Scale { factor } => format!("scale{factor:.3}"),
            AugmentOp::Hflip => "hflip".into(),
            AugmentOp::Contrast { gamma } => format!("gamma{gamma:.2}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("keypoint `{0}` leaves the frame")]
    KeypointsOutOfFrame(String),
    #[error("pose re-solve failed after flip: {0}")]
    PnpFailure(#[from] PnpError),
    #[error("invalid augmentation parameter: {0}")]
    InvalidParameter(String),
    #[error("rotation needs square pixels (fx = {fx}, fy = {fy})")]
    AnisotropicPixels { fx: f64, fy: f64 },
    #[error("labels disagree with the pose by {0:.3} px after augmentation")]
    InconsistentLabels(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Applies `op` to an image and its annotation.
///
/// Rotate and scale keep the record pose-consistent; hflip re-solves the pose
/// from the mirrored keypoints and marks the record `chirality_approximate`.
pub fn augment(
    rec: &AnnotationRecord,
    image: &RgbImage,
    op: AugmentOp,
    model: &ObjectModel,
) -> Result<(AnnotationRecord, RgbImage), AugmentError> {
    let mut out = rec.clone();
    out.image_id = format!("{}_{}", rec.image_id, op.tag());
    out.image_path = format!("images/{}.png", out.image_id);
    out.source = Source::Augmented;
    out.parent_id = Some(rec.image_id.clone());

    let image = match op {
        AugmentOp::Rotate { radians } => {
            let k = &rec.intrinsics;
            if (k.fx - k.fy).abs() > 1e-9 * k.fx {
                return Err(AugmentError::AnisotropicPixels { fx: k.fx, fy: k.fy });
            }
            let (s, c) = radians.sin_cos();
            let map = |p: &Pixel2| {
                let (du, dv) = (p.u - k.cx, p.v - k.cy);
                Pixel2::new(k.cx + c * du + s * dv, k.cy - s * du + c * dv)
            };
            out.keypoints_2d = map_keypoints(&rec.keypoints_2d, k, map)?;
            out.bbox_2d = BBox2::enclosing(rec.bbox_2d.corners().iter().map(map).collect::<Vec<_>>().iter())
                .expect("four corners");
            let spin = Pose::from_axis_angle(Vector3::z(), -radians);
            out.pose = spin.compose(&rec.pose);
            verify(&out, model)?;
            rotate(
                image,
                (k.cx as f32, k.cy as f32),
                -radians as f32,
                Interpolation::Bilinear,
                Rgb([0, 0, 0]),
            )
        }
        AugmentOp::Scale { factor } => {
            if !(factor > 0.0 && factor.is_finite()) {
                return Err(AugmentError::InvalidParameter(format!(
                    "scale factor {factor}"
                )));
            }
            let k = rec.intrinsics.scaled(factor);
            out.intrinsics = k;
            out.keypoints_2d = map_keypoints(&rec.keypoints_2d, &k, |p| {
                Pixel2::new(p.u * factor, p.v * factor)
            })?;
            out.bbox_2d = BBox2 {
                u_min: rec.bbox_2d.u_min * factor,
                v_min: rec.bbox_2d.v_min * factor,
                u_max: rec.bbox_2d.u_max * factor,
                v_max: rec.bbox_2d.v_max * factor,
            };
            verify(&out, model)?;
            imageops::resize(image, k.width, k.height, FilterType::Triangle)
        }
        AugmentOp::Hflip => {
            let k = rec.intrinsics;
            let last = k.width as f64 - 1.0;
            let mut flipped_k = k;
            flipped_k.cx = last - k.cx;
            out.intrinsics = flipped_k;
            out.keypoints_2d = map_keypoints(&rec.keypoints_2d, &flipped_k, |p| {
                Pixel2::new(last - p.u, p.v)
            })?;
            out.bbox_2d = BBox2 {
                u_min: last - rec.bbox_2d.u_max,
                v_min: rec.bbox_2d.v_min,
                u_max: last - rec.bbox_2d.u_min,
                v_max: rec.bbox_2d.v_max,
            };
            let corrs: Vec<Correspondence> = out
                .keypoints_2d
                .iter()
                .filter_map(|(name, px)| model.keypoint(name).map(|p| Correspondence::new(*p, *px)))
                .collect();
            out.pose = solve_pnp(&corrs, &flipped_k, &PnpOptions::default())?.pose;
            out.chirality_approximate = true;
            imageops::flip_horizontal(image)
        }
        AugmentOp::Contrast { gamma } => {
            if !(gamma > 0.0 && gamma.is_finite()) {
                return Err(AugmentError::InvalidParameter(format!("gamma {gamma}")));
            }
            let lut: Vec<u8> = (0..=255u16)
                .map(|i| (255.0 * (i as f64 / 255.0).powf(gamma)).round() as u8)
                .collect();
            let mut img = image.clone();
            for px in img.pixels_mut() {
                for ch in px.0.iter_mut() {
                    *ch = lut[*ch as usize];
                }
            }
            img
        }
    };
    Ok((out, image))
}

fn map_keypoints(
    kps: &BTreeMap<String, Pixel2>,
    k: &CameraIntrinsics,
    f: impl Fn(&Pixel2) -> Pixel2,
) -> Result<BTreeMap<String, Pixel2>, AugmentError> {
    kps.iter()
        .map(|(name, p)| {
            let q = f(p);
            if k.contains(&q) {
                Ok((name.clone(), q))
            } else {
                Err(AugmentError::KeypointsOutOfFrame(name.clone()))
            }
        })
        .collect()
}

fn verify(rec: &AnnotationRecord, model: &ObjectModel) -> Result<(), AugmentError> {
    let err = rec.max_label_error(model)?;
    if err >= LABEL_TOLERANCE_PX {
        return Err(AugmentError::InconsistentLabels(err));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::sample_record;
    use crate::geometry::project;

    fn model() -> ObjectModel {
        ObjectModel::cube("cube", 0.3).unwrap()
    }

    fn blank() -> RgbImage {
        RgbImage::from_pixel(640, 480, Rgb([100, 150, 200]))
    }

    #[test]
    fn contrast_keeps_labels() {
        let rec = sample_record();
        let (out, img) = augment(&rec, &blank(), AugmentOp::Contrast { gamma: 1.5 }, &model()).unwrap();
        assert_eq!(out.pose, rec.pose);
        assert_eq!(out.intrinsics, rec.intrinsics);
        assert_eq!(out.keypoints_2d, rec.keypoints_2d);
        assert_eq!(out.bbox_2d, rec.bbox_2d);
        assert_eq!(out.source, Source::Augmented);
        assert_eq!(out.parent_id.as_deref(), Some("img-0"));
        let expected = (255.0 * (100.0f64 / 255.0).powf(1.5)).round() as u8;
        assert_eq!(img.get_pixel(0, 0)[0], expected);
    }

    #[test]
    fn half_scale_halves_focal_and_stays_consistent() {
        let rec = sample_record();
        let (out, img) = augment(&rec, &blank(), AugmentOp::Scale { factor: 0.5 }, &model()).unwrap();
        assert_eq!(out.intrinsics.fx, 250.0);
        assert_eq!(img.dimensions(), (320, 240));
        assert_eq!(out.pose, rec.pose);
        for (name, px) in &out.keypoints_2d {
            let p = project(model().keypoint(name).unwrap(), &out.pose, &out.intrinsics).unwrap();
            assert!(p.distance(px) < 0.5);
        }
    }

    #[test]
    fn quarter_turn_matches_2d_rotation() {
        // keep keypoints in frame: object near the principal point
        let mut rec = sample_record();
        rec.pose = Pose::from_scaled_axis(Vector3::new(0.3, 0.2, 0.1), Vector3::new(0.0, 0.0, 1.5));
        rec.keypoints_2d = model()
            .keypoints()
            .iter()
            .map(|(n, p)| (n.clone(), project(p, &rec.pose, &rec.intrinsics).unwrap()))
            .collect();
        rec.bbox_2d = BBox2::enclosing(rec.keypoints_2d.values()).unwrap();
        let (out, _) = augment(
            &rec,
            &blank(),
            AugmentOp::Rotate { radians: std::f64::consts::FRAC_PI_2 },
            &model(),
        )
        .unwrap();
        let k = rec.intrinsics;
        for (name, px) in &rec.keypoints_2d {
            // counterclockwise quarter turn on screen: (du, dv) -> (dv, -du)
            let expected = Pixel2::new(k.cx + (px.v - k.cy), k.cy - (px.u - k.cx));
            let reproj = project(model().keypoint(name).unwrap(), &out.pose, &k).unwrap();
            assert!(reproj.distance(&expected) < 0.5, "{name}");
            assert!(out.keypoints_2d[name].distance(&expected) < 1e-9);
        }
    }

    #[test]
    fn rotated_image_content_follows_keypoints() {
        let rec = sample_record();
        let mut img = RgbImage::new(640, 480);
        // bright dot 40 px right of the principal point
        for du in -1..=1i32 {
            for dv in -1..=1i32 {
                img.put_pixel((360 + du) as u32, (240 + dv) as u32, Rgb([255, 255, 255]));
            }
        }
        let (_, out) = augment(&rec, &img, AugmentOp::Rotate { radians: std::f64::consts::FRAC_PI_2 }, &model()).unwrap();
        // counterclockwise quarter turn moves it 40 px above the principal point
        assert!(out.get_pixel(320, 200)[0] > 200);
    }

    #[test]
    fn keypoints_leaving_frame_rejected() {
        let rec = sample_record();
        let err = augment(&rec, &blank(), AugmentOp::Rotate { radians: 0.0 }, &model());
        assert!(err.is_ok());
        let mut far = rec.clone();
        far.keypoints_2d.insert("corner0".into(), Pixel2::new(630.0, 10.0));
        let r = augment(&far, &blank(), AugmentOp::Rotate { radians: 1.0 }, &model());
        assert!(matches!(r, Err(AugmentError::KeypointsOutOfFrame(_))));
    }

    #[test]
    fn hflip_flags_record() {
        let rec = sample_record();
        let (out, img) = augment(&rec, &blank(), AugmentOp::Hflip, &model()).unwrap();
        assert!(out.chirality_approximate);
        assert_eq!(img.dimensions(), (640, 480));
        let orig = rec.keypoints_2d["centroid"];
        assert_eq!(out.keypoints_2d["centroid"].u, 639.0 - orig.u);
    }

    #[test]
    fn invalid_parameters() {
        let rec = sample_record();
        assert!(matches!(
            augment(&rec, &blank(), AugmentOp::Scale { factor: 0.0 }, &model()),
            Err(AugmentError::InvalidParameter(_))
        ));
        assert!(matches!(
            augment(&rec, &blank(), AugmentOp::Contrast { gamma: -1.0 }, &model()),
            Err(AugmentError::InvalidParameter(_))
        ));
    }
}
