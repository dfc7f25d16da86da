use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LabeledImageSet;
use crate::error::{Error, Result};

/// Bilinear read at fractional `(x, y)`; taps outside the image contribute zero.
pub fn bilinear_sample(img: &[f32], side: usize, x: f64, y: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= side as i64 || yi >= side as i64 {
            0.0
        } else {
            f64::from(img[yi as usize * side + xi as usize])
        }
    };
    let v = (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0))
        + fy * ((1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
    v as f32
}

/// Resamples one square image to `target` pixels per side (half-pixel centers, edge clamped).
pub fn resize_image(img: &[f32], side: usize, target: usize) -> Vec<f32> {
    if target == side {
        return img.to_vec();
    }
    let scale = side as f64 / target as f64;
    let max = (side - 1) as f64;
    let mut out = Vec::with_capacity(target * target);
    for oy in 0..target {
        let sy = ((oy as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
        for ox in 0..target {
            let sx = ((ox as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            out.push(bilinear_sample(img, side, sx, sy).clamp(0.0, 1.0));
        }
    }
    out
}

pub fn resize_images(set: &LabeledImageSet, target_side: usize) -> Result<LabeledImageSet> {
    if target_side == 0 {
        return Err(Error::InvalidArgument("target side must be at least 1".into()));
    }
    if set.is_empty() {
        return Ok(LabeledImageSet::empty(set.class_count(), target_side));
    }
    let mut pixels = Vec::with_capacity(set.len() * target_side * target_side);
    for (img, _) in set.iter() {
        pixels.extend(resize_image(img, set.side(), target_side));
    }
    LabeledImageSet::new(pixels, set.labels().to_vec(), set.class_count(), target_side)
}

/// Rotates counter-clockwise by `degrees` about the image center; uncovered pixels are zero.
pub fn rotate_image(img: &[f32], side: usize, degrees: f64) -> Vec<f32> {
    let (s, c) = degrees.to_radians().sin_cos();
    let center = (side as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(side * side);
    for oy in 0..side {
        let dy = oy as f64 - center;
        for ox in 0..side {
            let dx = ox as f64 - center;
            // Inverse map: rotate the output coordinate back by -degrees.
            let sx = c * dx - s * dy + center;
            let sy = s * dx + c * dy + center;
            out.push(bilinear_sample(img, side, sx, sy).clamp(0.0, 1.0));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseExpansion {
    /// Every base image appears once per angle.
    AllAngles,
    /// Every base image appears once, at an angle drawn from the seeded generator.
    RandomAngle,
}

/// Synthetic viewpoint dataset: base images rotated by each pose angle, labeled by angle index.
pub fn generate_rotated_digit_poses(
    base: &LabeledImageSet,
    angles: &[f64],
    expansion: PoseExpansion,
    seed: u64,
) -> Result<LabeledImageSet> {
    if base.is_empty() || angles.is_empty() {
        return Err(Error::InvalidArgument("pose generation needs base images and angles".into()));
    }
    let side = base.side();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    match expansion {
        PoseExpansion::AllAngles => {
            for (img, _) in base.iter() {
                for (k, &a) in angles.iter().enumerate() {
                    pixels.extend(rotate_image(img, side, a));
                    labels.push(k);
                }
            }
        }
        PoseExpansion::RandomAngle => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx: Vec<usize> = (0..angles.len()).collect();
            for (img, _) in base.iter() {
                let k = *idx.choose(&mut rng).expect("angles is nonempty");
                pixels.extend(rotate_image(img, side, angles[k]));
                labels.push(k);
            }
        }
    }
    LabeledImageSet::new(pixels, labels, angles.len(), side)
}
