#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrdn::network::{NetworkConfig, Variant};
use rrdn::pipeline::{StereoSample, TrainConfig};
use rrdn::{Shape, Tensor};

const OCTAVES: [f32; 4] = [4.0, 8.0, 16.0, 32.0];
const OCTAVE_AMPLITUDE: f32 = 0.12;

/// Smooth multi-octave value noise, evaluated at real-valued columns so a
/// sub-pixel shift is exact.
pub struct ValueNoise {
    grid: usize,
    lattices: Vec<Vec<f32>>,
}

impl ValueNoise {
    pub fn new(seed: u64, h: usize, w: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = (h.max(w) + 64) / 4 + 4;
        let lattices = OCTAVES.iter().map(|_| (0..3 * grid * grid).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        ValueNoise { grid, lattices }
    }

    pub fn at(&self, c: usize, i: f32, x: f32) -> f32 {
        let mut v = 0.5;
        for (spacing, g) in OCTAVES.iter().zip(&self.lattices) {
            let (u, t) = ((x + 64.0) / spacing, i / spacing);
            let (u0, t0) = (u.floor(), t.floor());
            let (fu, ft) = (u - u0, t - t0);
            let at = |a: f32, b: f32| g[c * self.grid * self.grid + b as usize * self.grid + a as usize];
            v += OCTAVE_AMPLITUDE
                * ((1.0 - fu) * (1.0 - ft) * at(u0, t0)
                    + fu * (1.0 - ft) * at(u0 + 1.0, t0)
                    + (1.0 - fu) * ft * at(u0, t0 + 1.0)
                    + fu * ft * at(u0 + 1.0, t0 + 1.0));
        }
        v.clamp(0.0, 1.0)
    }
}

/// A rectified pair with constant disparity `d`: `left(j) = right(j - d)`.
pub fn shifted_pair(seed: u64, h: usize, w: usize, d: f32) -> StereoSample {
    let tex = ValueNoise::new(seed, h, w);
    let right = Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, i, j]| tex.at(c, i as f32, j as f32));
    let left = Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, i, j]| tex.at(c, i as f32, j as f32 - d));
    StereoSample::new(left, right).unwrap()
}

/// Makes the columns `cols` of the right view unmatchable by painting them
/// white, and paints their left-view counterparts (shifted by `d`) black so
/// the region is visible to a network that only sees the left image.
pub fn paint_band(sample: &mut StereoSample, cols: std::ops::Range<usize>, d: usize) {
    let [_, c, h, w] = sample.right.shape().0;
    for ch in 0..c {
        for i in 0..h {
            for j in cols.clone() {
                sample.right.set([0, ch, i, j], 1.0);
                if j + d < w {
                    sample.left.set([0, ch, i, j + d], 0.0);
                }
            }
        }
    }
}

pub fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut rng)
}

/// Three-stage network small enough for multi-epoch runs inside a test.
pub fn tiny_network(variant: Variant) -> NetworkConfig {
    let mut cfg = NetworkConfig::with_channels(variant, &[4, 6, 8], &[4, 6, 8]);
    cfg.num_output_scales = 2;
    cfg
}

pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        lr: 1e-3,
        lr_halve_epochs: vec![1],
        batch_size: 2,
        crop: (16, 32),
        network: tiny_network(Variant::RRDispNetDtm),
        loss_scales: 2,
        perceptual_channels: [2, 3, 4],
        ..TrainConfig::default()
    }
}

pub fn random_samples(seed: u64, n: usize, h: usize, w: usize) -> Vec<StereoSample> {
    (0..n as u64)
        .map(|k| StereoSample::new(random_image(seed + 2 * k, h, w), random_image(seed + 2 * k + 1, h, w)).unwrap())
        .collect()
}
