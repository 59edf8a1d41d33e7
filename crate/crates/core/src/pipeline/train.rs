//! The training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::losses::{self, FeatureExtractor, LossComponents};
use crate::network::{self, Network, ParamStore};
use crate::tensor::Tensor;

use super::adam::{adam_step, AdamState};
use super::augment::augment;
use super::config::TrainConfig;
use super::data::StereoSample;

pub const LOG_HEADER: &str = "step,epoch,lr,total,l_rec,l_ds,l_p,l_a,l_lr";
pub const LOG_FILE: &str = "loss_log.csv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossComponents,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let c = &self.loss;
        format!(
            "{},{},{:e},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
            self.step, self.epoch, self.lr, c.total, c.rec, c.ds, c.p, c.a, c.lr
        )
    }
}

/// Seed for epoch-level randomness, so every epoch draws a distinct but
/// reproducible stream.
fn epoch_seed(seed: u64, epoch: usize, stream: u64) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Owns the network, optimiser state and frozen perceptual extractor.
pub struct Trainer {
    config: TrainConfig,
    net: Network<f32>,
    adam: AdamState<f32>,
    extractor: FeatureExtractor<f32>,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::build(config.network.clone(), config.seed)?;
        let extractor = match &config.perceptual_weights {
            Some(p) => {
                let mut f = File::open(p).map_err(|e| Error::io(p, e))?;
                FeatureExtractor::from_container(&network::read_container(&mut f)?)?
            }
            None => FeatureExtractor::seeded(config.perceptual_channels, config.perceptual_seed)?,
        };
        Ok(Trainer { adam: AdamState::new(config.adam), config, net, extractor, step: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn into_network(self) -> Network<f32> {
        self.net
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn budget_exhausted(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Forward, loss, backward and one Adam update on a batch of equally
    /// sized pairs. Returns the loss before the update.
    pub fn train_step(&mut self, batch: &[StereoSample], lr: f64) -> Result<LossComponents> {
        let lefts: Vec<Tensor<f32>> = batch.iter().map(|s| s.left.clone()).collect();
        let rights: Vec<Tensor<f32>> = batch.iter().map(|s| s.right.clone()).collect();
        let left = Tensor::stack_batch(&lefts)?;
        let right = Tensor::stack_batch(&rights)?;

        let mut tape = Tape::new();
        let params = self.net.params().bind(&mut tape, true);
        let fx = self.extractor.bind(&mut tape);
        let l = tape.constant(left);
        let r = tape.constant(right);
        let outputs = self.net.forward(&mut tape, &params, l)?;
        let pyramid = losses::image_pyramid(&mut tape, l, r, self.config.loss_scales)?;
        let total = losses::total_loss(&mut tape, &outputs, &pyramid, &self.config.weights, &fx, self.config.loss_scales)?;
        let components = total.components(&tape);
        if !components.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {} is {}", self.step, components.total)));
        }

        let mut grads = tape.backward(total.total)?;
        let mut named = ParamStore::new();
        for (name, var) in params.iter() {
            if let Some(g) = grads.take(var) {
                named.insert(name, g)?;
            }
        }
        adam_step(self.net.params_mut(), &named, &mut self.adam, lr)?;
        self.step += 1;
        Ok(components)
    }

    /// Deterministic batches for `epoch`: a seeded shuffle followed by
    /// per-sample seeded augmentation (computed in parallel, order kept).
    pub fn epoch_batches(&self, data: &[StereoSample], epoch: usize) -> Result<Vec<Vec<StereoSample>>> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(self.config.seed, epoch, 0)));
        let prepared: Vec<StereoSample> = order
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                if self.config.augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(self.config.seed, epoch, 1 + k as u64));
                    augment(&data[i], self.config.crop, &mut rng)
                } else {
                    Ok(data[i].clone())
                }
            })
            .collect::<Result<_>>()?;
        Ok(prepared.chunks(self.config.batch_size).map(<[_]>::to_vec).collect())
    }

    /// Runs one epoch, calling `on_step` after every update.
    pub fn train_epoch(&mut self, data: &[StereoSample], epoch: usize, mut on_step: impl FnMut(&StepLog) -> Result<()>) -> Result<()> {
        let lr = self.config.lr_at_epoch(epoch);
        for batch in self.epoch_batches(data, epoch)? {
            if self.budget_exhausted() {
                break;
            }
            let loss = self.train_step(&batch, lr)?;
            on_step(&StepLog { step: self.step, epoch, lr, loss })?;
        }
        Ok(())
    }
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:03}.rrdn"))
}

pub struct TrainOutcome {
    pub steps: usize,
    pub logs: Vec<StepLog>,
    pub last_checkpoint: Option<PathBuf>,
    pub network: Network<f32>,
}

/// Full training run writing `loss_log.csv`, `config.txt` and one checkpoint
/// per epoch (plus `latest.rrdn`) into `out_dir`. A non-finite loss aborts
/// the run; checkpoints from completed epochs are left intact.
pub fn train(config: TrainConfig, data: &[StereoSample], out_dir: &Path) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::invalid("train", "no training pairs"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join("config.txt");
    fs::write(&cfg_path, config.to_kv().to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;

    let mut trainer = Trainer::new(config)?;
    let mut logs = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;
    for epoch in 0..trainer.config.epochs {
        if trainer.budget_exhausted() {
            break;
        }
        let result = trainer.train_epoch(data, epoch, |s| {
            logs.push(*s);
            writeln!(log, "{}", s.csv_row()).and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))
        });
        if let Err(e) = result {
            let _ = log.flush();
            return Err(match (e, &last_checkpoint) {
                (Error::NonFinite(m), Some(p)) => Error::NonFinite(format!("{m}; last good checkpoint {}", p.display())),
                (e, _) => e,
            });
        }
        let path = checkpoint_path(out_dir, epoch);
        network::save_checkpoint(&path, trainer.network())?;
        network::save_checkpoint(&out_dir.join("latest.rrdn"), trainer.network())?;
        last_checkpoint = Some(path);
    }
    Ok(TrainOutcome { steps: trainer.steps_taken(), logs, last_checkpoint, network: trainer.into_network() })
}
