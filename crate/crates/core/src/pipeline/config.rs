//! Training configuration read from `key = value` files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv::{join_list, KeyValues};
use crate::losses::{LossWeights, DEFAULT_PERCEPTUAL_CHANNELS, DEFAULT_PERCEPTUAL_SEED};
use crate::network::NetworkConfig;

use super::adam::AdamConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// 0-based epochs at which the learning rate is halved.
    pub lr_halve_epochs: Vec<usize>,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// `(height, width)`.
    pub crop: (usize, usize),
    pub seed: u64,
    pub weights: LossWeights,
    pub network: NetworkConfig,
    pub augment: bool,
    /// Number of scales entering the loss; at most `network.num_output_scales`.
    pub loss_scales: usize,
    pub perceptual_channels: [usize; 3],
    pub perceptual_seed: u64,
    /// Optional container with pretrained extractor weights.
    pub perceptual_weights: Option<PathBuf>,
    /// Stops after this many optimiser steps in total, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let network = NetworkConfig::new(crate::network::Variant::RRDispNetDtm);
        TrainConfig {
            epochs: 50,
            lr: 1e-4,
            lr_halve_epochs: vec![30, 40],
            adam: AdamConfig::default(),
            batch_size: 2,
            crop: (256, 512),
            seed: 0,
            weights: LossWeights::default(),
            loss_scales: network.num_output_scales,
            network,
            augment: true,
            perceptual_channels: DEFAULT_PERCEPTUAL_CHANNELS,
            perceptual_seed: DEFAULT_PERCEPTUAL_SEED,
            perceptual_weights: None,
            max_steps: None,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "lr",
    "lr_halve_epochs",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "crop_height",
    "crop_width",
    "seed",
    "a_rec",
    "a_ds",
    "a_p",
    "a_a",
    "a_lr",
    "alpha",
    "augment",
    "loss_scales",
    "perceptual_channels",
    "perceptual_seed",
    "perceptual_weights",
    "max_steps",
];

impl TrainConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let known: Vec<&str> = TRAIN_KEYS.iter().copied().chain(NetworkConfig::KEYS).collect();
        kv.ensure_known(&known)?;
        let mut c = TrainConfig { network: NetworkConfig::from_kv(kv)?, ..Default::default() };
        c.loss_scales = c.network.num_output_scales;
        macro_rules! read {
            ($key:literal => $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        read!("epochs" => c.epochs);
        read!("lr" => c.lr);
        read!("beta1" => c.adam.beta1);
        read!("beta2" => c.adam.beta2);
        read!("eps" => c.adam.eps);
        read!("batch_size" => c.batch_size);
        read!("crop_height" => c.crop.0);
        read!("crop_width" => c.crop.1);
        read!("seed" => c.seed);
        read!("a_rec" => c.weights.a_rec);
        read!("a_ds" => c.weights.a_ds);
        read!("a_p" => c.weights.a_p);
        read!("a_a" => c.weights.a_a);
        read!("a_lr" => c.weights.a_lr);
        read!("alpha" => c.weights.alpha);
        read!("augment" => c.augment);
        read!("loss_scales" => c.loss_scales);
        read!("perceptual_seed" => c.perceptual_seed);
        if let Some(v) = kv.get_list("lr_halve_epochs")? {
            c.lr_halve_epochs = v;
        }
        if let Some(v) = kv.get_list::<usize>("perceptual_channels")? {
            c.perceptual_channels = v
                .try_into()
                .map_err(|_| Error::Config("`perceptual_channels` needs exactly three widths".into()))?;
        }
        c.perceptual_weights = kv.get_str("perceptual_weights").map(PathBuf::from);
        c.max_steps = kv.get("max_steps")?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&KeyValues::parse(&text)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.network.to_kv();
        kv.set("epochs", self.epochs);
        kv.set("lr", self.lr);
        kv.set("lr_halve_epochs", join_list(&self.lr_halve_epochs));
        kv.set("beta1", self.adam.beta1);
        kv.set("beta2", self.adam.beta2);
        kv.set("eps", self.adam.eps);
        kv.set("batch_size", self.batch_size);
        kv.set("crop_height", self.crop.0);
        kv.set("crop_width", self.crop.1);
        kv.set("seed", self.seed);
        let w = &self.weights;
        kv.set("a_rec", w.a_rec);
        kv.set("a_ds", w.a_ds);
        kv.set("a_p", w.a_p);
        kv.set("a_a", w.a_a);
        kv.set("a_lr", w.a_lr);
        kv.set("alpha", w.alpha);
        kv.set("augment", self.augment);
        kv.set("loss_scales", self.loss_scales);
        kv.set("perceptual_channels", join_list(&self.perceptual_channels));
        kv.set("perceptual_seed", self.perceptual_seed);
        if let Some(p) = &self.perceptual_weights {
            kv.set("perceptual_weights", p.display());
        }
        if let Some(m) = self.max_steps {
            kv.set("max_steps", m);
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        let div = self.network.divisor();
        let (h, w) = self.crop;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!("crop {h}x{w} must be divisible by {div}")));
        }
        if self.loss_scales == 0 || self.loss_scales > self.network.num_output_scales {
            return Err(Error::Config(format!(
                "loss_scales {} must lie in 1..={}",
                self.loss_scales, self.network.num_output_scales
            )));
        }
        if self.weights.a_p > 0.0 {
            let coarsest = (h >> (self.loss_scales - 1), w >> (self.loss_scales - 1));
            if coarsest.0 % 4 != 0 || coarsest.1 % 4 != 0 {
                return Err(Error::Config(format!(
                    "coarsest loss scale {}x{} is too small for the perceptual extractor",
                    coarsest.0, coarsest.1
                )));
            }
        }
        Ok(())
    }

    /// Learning rate during 0-based epoch `e`.
    pub fn lr_at_epoch(&self, e: usize) -> f64 {
        let halvings = self.lr_halve_epochs.iter().filter(|&&k| e >= k).count();
        self.lr * 0.5f64.powi(halvings as i32)
    }
}
