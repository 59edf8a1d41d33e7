//! Training-time augmentation: shared random crop, stereo-aware horizontal
//! flip and photometric jitter.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::data::StereoSample;

pub const FLIP_PROBABILITY: f64 = 0.5;
pub const JITTER_PROBABILITY: f64 = 0.5;
pub const GAMMA_RANGE: (f64, f64) = (0.8, 1.2);
pub const BRIGHTNESS_RANGE: (f64, f64) = (0.5, 2.0);
pub const COLOR_RANGE: (f64, f64) = (0.8, 1.2);

/// The exact transform applied to a sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentRecord {
    /// Top-left corner `(row, col)` of the crop.
    pub crop_origin: (usize, usize),
    pub crop_size: (usize, usize),
    pub flip: bool,
    pub gamma: f64,
    pub brightness: f64,
    pub color: [f64; 3],
}

impl AugmentRecord {
    /// A pure crop with no flip and neutral photometry.
    pub fn crop_only(crop_origin: (usize, usize), crop_size: (usize, usize)) -> Self {
        AugmentRecord { crop_origin, crop_size, flip: false, gamma: 1.0, brightness: 1.0, color: [1.0; 3] }
    }

    pub fn is_photometric_identity(&self) -> bool {
        self.gamma == 1.0 && self.brightness == 1.0 && self.color == [1.0; 3]
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

/// Draws a transform for an image of `size` cropped to `crop`.
pub fn sample_augment(rng: &mut impl Rng, size: (usize, usize), crop: (usize, usize)) -> Result<AugmentRecord> {
    let (h, w) = size;
    let (ch, cw) = crop;
    if ch > h || cw > w || ch == 0 || cw == 0 {
        return Err(Error::invalid("augment", format!("image {h}x{w} is smaller than crop {ch}x{cw}")));
    }
    let origin = (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw));
    let mut rec = AugmentRecord::crop_only(origin, crop);
    rec.flip = rng.random_bool(FLIP_PROBABILITY);
    if rng.random_bool(JITTER_PROBABILITY) {
        rec.gamma = uniform(rng, GAMMA_RANGE);
        rec.brightness = uniform(rng, BRIGHTNESS_RANGE);
        rec.color = std::array::from_fn(|_| uniform(rng, COLOR_RANGE));
    }
    Ok(rec)
}

fn crop(t: &Tensor<f32>, (r0, c0): (usize, usize), (ch, cw): (usize, usize)) -> Tensor<f32> {
    let s = t.shape();
    Tensor::from_fn(Shape::new(s.n(), s.c(), ch, cw), |[b, c, i, j]| t.at([b, c, r0 + i, c0 + j]))
}

fn jitter(t: &Tensor<f32>, rec: &AugmentRecord) -> Tensor<f32> {
    let s = t.shape();
    Tensor::from_fn(s, |idx| {
        let v = t.at(idx) as f64;
        let v = v.powf(rec.gamma) * rec.brightness * rec.color[idx[1] % 3];
        v.clamp(0.0, 1.0) as f32
    })
}

/// Applies `rec` to both views. A flip swaps the views and mirrors each,
/// which keeps the pair a valid left/right stereo pair.
pub fn augment_with(sample: &StereoSample, rec: &AugmentRecord) -> Result<StereoSample> {
    let (h, w) = (sample.height(), sample.width());
    let (ch, cw) = rec.crop_size;
    let (r0, c0) = rec.crop_origin;
    if r0 + ch > h || c0 + cw > w || ch == 0 || cw == 0 {
        return Err(Error::invalid(
            "augment",
            format!("crop {ch}x{cw} at ({r0}, {c0}) does not fit image {h}x{w}"),
        ));
    }
    let mut left = crop(&sample.left, rec.crop_origin, rec.crop_size);
    let mut right = crop(&sample.right, rec.crop_origin, rec.crop_size);
    if rec.flip {
        (left, right) = (right.flip_w(), left.flip_w());
    }
    if !rec.is_photometric_identity() {
        left = jitter(&left, rec);
        right = jitter(&right, rec);
    }
    let (left_path, right_path) = if rec.flip {
        (sample.right_path.clone(), sample.left_path.clone())
    } else {
        (sample.left_path.clone(), sample.right_path.clone())
    };
    Ok(StereoSample { left, right, left_path, right_path, augment: Some(*rec) })
}

pub fn augment(sample: &StereoSample, crop: (usize, usize), rng: &mut impl Rng) -> Result<StereoSample> {
    let rec = sample_augment(rng, (sample.height(), sample.width()), crop)?;
    augment_with(sample, &rec)
}
