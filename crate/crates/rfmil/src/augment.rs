//! Stochastic ROI augmentations for self-supervised pretraining: random
//! resized crops (scale = area fraction) plus horizontal/vertical flips.

use crate::error::{Error, Result};
use crate::preprocess::resize_roi;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AugmentationPolicy {
    /// Area fraction range of the random crop.
    pub crop_scale_range: (f64, f64),
    pub horizontal_flip_prob: f64,
    pub vertical_flip_prob: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            crop_scale_range: (0.5, 1.0),
            horizontal_flip_prob: 0.5,
            vertical_flip_prob: 0.5,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        for p in [self.horizontal_flip_prob, self.vertical_flip_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput("flip probability outside [0,1]".into()));
            }
        }
        Ok(())
    }
}

/// Crop geometry draw, exposed so tests can check the area rule.
pub fn sample_crop(
    h: usize,
    w: usize,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> (usize, usize, usize, usize) {
    let (lo, hi) = policy.crop_scale_range;
    let scale = if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let side = scale.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let top = if ch < h { rng.gen_range(0..=h - ch) } else { 0 };
    let left = if cw < w { rng.gen_range(0..=w - cw) } else { 0 };
    (top, left, ch, cw)
}

fn flip_horizontal(x: &mut Array2<f32>) {
    let (h, w) = x.dim();
    for i in 0..h {
        for j in 0..w / 2 {
            x.swap([i, j], [i, w - 1 - j]);
        }
    }
}

fn flip_vertical(x: &mut Array2<f32>) {
    let (h, w) = x.dim();
    for i in 0..h / 2 {
        for j in 0..w {
            x.swap([i, j], [h - 1 - i, j]);
        }
    }
}

/// One augmented view, resized back to the input dimensions.
pub fn augment_view(
    roi: &Array2<f32>,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> Array2<f32> {
    let (h, w) = roi.dim();
    let (top, left, ch, cw) = sample_crop(h, w, policy, rng);
    let crop = roi.slice(ndarray::s![top..top + ch, left..left + cw]).to_owned();
    let mut view = resize_roi(&crop, h, w).expect("crop is nonempty");
    if rng.gen_bool(policy.horizontal_flip_prob) {
        flip_horizontal(&mut view);
    }
    if rng.gen_bool(policy.vertical_flip_prob) {
        flip_vertical(&mut view);
    }
    view
}

/// The two independently augmented views fed to the paired-batch loss.
pub fn augment(
    roi: &Array2<f32>,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> (Array2<f32>, Array2<f32>) {
    (augment_view(roi, policy, rng), augment_view(roi, policy, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rfmil_nn::rng::{stream, tag};

    fn sample_roi() -> Array2<f32> {
        Array2::from_shape_fn((32, 32), |(i, j)| ((i * 7 + j * 3) % 17) as f32 / 16.0)
    }

    #[test]
    fn identity_policy_returns_the_input() {
        let policy = AugmentationPolicy {
            crop_scale_range: (1.0, 1.0),
            horizontal_flip_prob: 0.0,
            vertical_flip_prob: 0.0,
        };
        let roi = sample_roi();
        let mut rng = stream(1, &[tag("aug")]);
        let (a, b) = augment(&roi, &policy, &mut rng);
        assert_eq!(a, roi);
        assert_eq!(b, roi);
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let roi = sample_roi();
        let mut once = roi.clone();
        flip_horizontal(&mut once);
        assert_ne!(once, roi);
        flip_horizontal(&mut once);
        assert_eq!(once, roi);
    }

    #[test]
    fn half_scale_crop_covers_half_the_area() {
        let policy = AugmentationPolicy {
            crop_scale_range: (0.5, 0.5),
            horizontal_flip_prob: 0.0,
            vertical_flip_prob: 0.0,
        };
        let mut rng = stream(2, &[tag("aug")]);
        let (_, _, ch, cw) = sample_crop(32, 32, &policy, &mut rng);
        let area = (ch * cw) as f64 / (32.0 * 32.0);
        // rounding the side length to whole pixels bounds the area error
        assert!((area - 0.5).abs() < 0.05, "crop area fraction {area}");
        // and the view keeps the source resolution
        let roi = sample_roi();
        let view = augment_view(&roi, &policy, &mut rng);
        assert_eq!(view.dim(), (32, 32));
    }

    #[test]
    fn views_are_reproducible_per_stream() {
        let roi = sample_roi();
        let policy = AugmentationPolicy::default();
        let mut r1 = stream(3, &[tag("aug"), 7]);
        let mut r2 = stream(3, &[tag("aug"), 7]);
        let (a1, b1) = augment(&roi, &policy, &mut r1);
        let (a2, b2) = augment(&roi, &policy, &mut r2);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }
}
