//! Residual encoder-decoder producing bidirectional disparities and
//! ambiguity masks at four scales from a single left image.
//!
//! Layout, for `E` encoder widths `e[0..E]` and matching decoder widths:
//!
//! * `enc0`: 3x3 conv at full resolution (stride 1), the finest skip.
//! * `enc1..enc{E-1}`: stride-2 3x3 conv followed by a residual block.
//! * `bottleneck`: one more residual block at the coarsest scale.
//! * `dec{s}` for `s = E-2 ..= 0`: nearest upsample of the coarser decoder
//!   features, concatenated with the encoder skip (optionally passed through a
//!   domain-transform block) and with the upsampled outputs of scale `s+1`;
//!   a fusion conv (3x5 or 3x3) reduces channels, a residual block refines,
//!   and scales `s < num_output_scales` emit a 1x1 sigmoid head with channels
//!   `[D_L, D_R, a_mask_L, a_mask_R]`.

mod checkpoint;
mod params;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_container, save_checkpoint, write_container, Container};
pub use params::{conv_layer, BoundParams, ParamStore};

use crate::autograd::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::kv::{join_list, KeyValues};
use crate::tensor::{Element, Tensor};

/// Output head channel order.
pub const HEAD_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Residual blocks, 3x3 fusion, no domain transform.
    RDispNetM,
    /// Adds rectangular 3x5 fusion convolutions.
    RRDispNetM,
    /// Adds domain-transform blocks on the skip connections.
    RRDispNetDtm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::RDispNetM, Variant::RRDispNetM, Variant::RRDispNetDtm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::RDispNetM => "rdispnet_m",
            Variant::RRDispNetM => "rrdispnet_m",
            Variant::RRDispNetDtm => "rrdispnet_dtm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected rdispnet_m, rrdispnet_m or rrdispnet_dtm)")))
    }

    pub fn use_rect_fusion(self) -> bool {
        !matches!(self, Variant::RDispNetM)
    }

    pub fn use_domain_transform(self) -> bool {
        matches!(self, Variant::RRDispNetDtm)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Default full-size widths: stride-1 stage plus five stride-2 stages.
pub const DEFAULT_ENCODER_CHANNELS: [usize; 6] = [48, 64, 96, 128, 160, 448];
pub const DEFAULT_DECODER_CHANNELS: [usize; 6] = [48, 96, 128, 160, 192, 448];

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub encoder_channels: Vec<usize>,
    /// Width of decoder stage `s`; the last entry is the bottleneck and must
    /// equal the last encoder width.
    pub decoder_channels: Vec<usize>,
    pub num_output_scales: usize,
    pub disparity_fraction: f64,
}

impl NetworkConfig {
    pub fn new(variant: Variant) -> Self {
        NetworkConfig {
            variant,
            encoder_channels: DEFAULT_ENCODER_CHANNELS.to_vec(),
            decoder_channels: DEFAULT_DECODER_CHANNELS.to_vec(),
            num_output_scales: 4,
            disparity_fraction: 0.3,
        }
    }

    /// Same variant with custom widths, for desk-scale experiments.
    pub fn with_channels(variant: Variant, encoder: &[usize], decoder: &[usize]) -> Self {
        NetworkConfig { encoder_channels: encoder.to_vec(), decoder_channels: decoder.to_vec(), ..Self::new(variant) }
    }

    pub fn use_rect_fusion(&self) -> bool {
        self.variant.use_rect_fusion()
    }

    pub fn use_domain_transform(&self) -> bool {
        self.variant.use_domain_transform()
    }

    /// Number of stride-2 stages.
    pub fn depth(&self) -> usize {
        self.encoder_channels.len() - 1
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.depth()
    }

    pub fn validate(&self) -> Result<()> {
        let (e, d) = (&self.encoder_channels, &self.decoder_channels);
        if e.len() < 2 {
            return Err(Error::Config("encoder_channels needs at least two stages".into()));
        }
        if e.len() != d.len() {
            return Err(Error::Config(format!(
                "encoder has {} stages but decoder has {}; they must be equal",
                e.len(),
                d.len()
            )));
        }
        if e.iter().chain(d).any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if d[d.len() - 1] != e[e.len() - 1] {
            return Err(Error::Config(format!(
                "bottleneck width (last decoder entry {}) must equal the last encoder width {}",
                d[d.len() - 1],
                e[e.len() - 1]
            )));
        }
        if self.num_output_scales == 0 || self.num_output_scales > self.depth() {
            return Err(Error::Config(format!(
                "num_output_scales {} must lie in 1..={}",
                self.num_output_scales,
                self.depth()
            )));
        }
        if !(self.disparity_fraction > 0.0 && self.disparity_fraction <= 1.0) {
            return Err(Error::Config(format!("disparity_fraction {} must lie in (0, 1]", self.disparity_fraction)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("variant", self.variant);
        kv.set("encoder_channels", join_list(&self.encoder_channels));
        kv.set("decoder_channels", join_list(&self.decoder_channels));
        kv.set("num_output_scales", self.num_output_scales);
        kv.set("disparity_fraction", self.disparity_fraction);
        kv
    }

    /// Reads network keys from `kv`, falling back to the variant defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let variant = Variant::parse(kv.get_str("variant").unwrap_or("rrdispnet_dtm"))?;
        let mut cfg = NetworkConfig::new(variant);
        if let Some(e) = kv.get_list("encoder_channels")? {
            cfg.encoder_channels = e;
        }
        if let Some(d) = kv.get_list("decoder_channels")? {
            cfg.decoder_channels = d;
        }
        if let Some(n) = kv.get("num_output_scales")? {
            cfg.num_output_scales = n;
        }
        if let Some(f) = kv.get("disparity_fraction")? {
            cfg.disparity_fraction = f;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub const KEYS: [&'static str; 5] =
        ["variant", "encoder_channels", "decoder_channels", "num_output_scales", "disparity_fraction"];
}

/// Tape handles for one output scale.
#[derive(Clone, Copy, Debug)]
pub struct ScaleOutput {
    pub disp_left: Var,
    pub disp_right: Var,
    pub mask_left: Var,
    pub mask_right: Var,
    /// The raw sigmoid head, `n x 4 x h_s x w_s`.
    pub head: Var,
}

/// Outputs at scales `0..num_output_scales`, finest first.
#[derive(Clone, Debug)]
pub struct ScaleOutputs {
    pub scales: Vec<ScaleOutput>,
}

/// Concrete output maps at one scale.
#[derive(Clone, Debug)]
pub struct ScaleMaps<T> {
    pub disp_left: Tensor<T>,
    pub disp_right: Tensor<T>,
    pub mask_left: Tensor<T>,
    pub mask_right: Tensor<T>,
}

/// `x + F(x)` with `F = conv3x3 -> ELU -> conv3x3`, then ELU.
pub fn residual_block<T: Element>(tape: &mut Tape<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let h = conv_layer(tape, p, &format!("{prefix}.conv1"), x, 1)?;
    let h = tape.elu(h);
    let h = conv_layer(tape, p, &format!("{prefix}.conv2"), h, 1)?;
    let sum = tape.add(x, h)?;
    Ok(tape.elu(sum))
}

/// Channel-preserving residual block with 3x5 kernels applied to encoder
/// skip features: `ELU(skip + conv3x5(ELU(conv3x5(skip))))`.
pub fn domain_transform_block<T: Element>(tape: &mut Tape<T>, p: &BoundParams, prefix: &str, skip: Var) -> Result<Var> {
    residual_block(tape, p, prefix, skip)
}

/// Init gain of the last conv in a residual branch; keeps activations from
/// growing with the number of stacked blocks.
const RESIDUAL_BRANCH_GAIN: f64 = 0.1;
/// Heads start near sigmoid(0) so no output begins saturated.
const HEAD_GAIN: f64 = 0.1;

fn add_residual_params<T: Element>(store: &mut ParamStore<T>, prefix: &str, c: usize, k: (usize, usize), rng: &mut ChaCha8Rng) -> Result<()> {
    store.add_conv(&format!("{prefix}.conv1"), c, c, k, rng)?;
    store.add_conv_scaled(&format!("{prefix}.conv2"), c, c, k, RESIDUAL_BRANCH_GAIN, rng)
}

pub struct Network<T> {
    config: NetworkConfig,
    params: ParamStore<T>,
    forward_calls: AtomicUsize,
}

impl<T: Element> Network<T> {
    /// Builds the parameter set for `config` with a seeded initialisation.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = &config.encoder_channels;
        let d = &config.decoder_channels;
        let depth = config.depth();

        store.add_conv("enc0", 3, e[0], (3, 3), &mut rng)?;
        for s in 1..=depth {
            store.add_conv(&format!("enc{s}.down"), e[s - 1], e[s], (3, 3), &mut rng)?;
            add_residual_params(&mut store, &format!("enc{s}.res"), e[s], (3, 3), &mut rng)?;
        }
        add_residual_params(&mut store, "bottleneck", e[depth], (3, 3), &mut rng)?;

        let fuse_k = if config.use_rect_fusion() { (3, 5) } else { (3, 3) };
        for s in (0..depth).rev() {
            if config.use_domain_transform() {
                add_residual_params(&mut store, &format!("dec{s}.dt"), e[s], (3, 5), &mut rng)?;
            }
            let prev_out = if s + 1 < config.num_output_scales { HEAD_CHANNELS } else { 0 };
            let c_in = e[s] + d[s + 1] + prev_out;
            store.add_conv(&format!("dec{s}.fuse"), c_in, d[s], fuse_k, &mut rng)?;
            add_residual_params(&mut store, &format!("dec{s}.res"), d[s], (3, 3), &mut rng)?;
            if s < config.num_output_scales {
                store.add_conv_scaled(&format!("dec{s}.head"), d[s], HEAD_CHANNELS, (1, 1), HEAD_GAIN, &mut rng)?;
            }
        }
        Ok(Network { config, params: store, forward_calls: AtomicUsize::new(0) })
    }

    /// Wraps an existing parameter set, checking names and shapes against a
    /// freshly built network of the same config.
    pub fn from_params(config: NetworkConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Network::<T>::build(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` missing for config {}", config.variant)))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {} but config expects {}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Network { config, params, forward_calls: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Number of forward passes run so far.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn check_input(&self, n: usize, c: usize, h: usize, w: usize) -> Result<()> {
        let div = self.config.divisor();
        if c != 3 {
            return Err(Error::shape("network", format!("expected 3 input channels, got {c}")));
        }
        if n == 0 || h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::shape(
                "network",
                format!("input {h}x{w} must have height and width divisible by {div}"),
            ));
        }
        Ok(())
    }

    /// Forward pass from a left image `n x 3 x h x w` in `[0, 1]`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &BoundParams, input: Var) -> Result<ScaleOutputs> {
        let [n, c, h, w] = tape.shape(input).0;
        self.check_input(n, c, h, w)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let cfg = &self.config;
        let depth = cfg.depth();

        let mut skips = Vec::with_capacity(depth + 1);
        let x = conv_layer(tape, p, "enc0", input, 1)?;
        let mut x = tape.elu(x);
        skips.push(x);
        for s in 1..=depth {
            let down = conv_layer(tape, p, &format!("enc{s}.down"), x, 2)?;
            let down = tape.elu(down);
            x = residual_block(tape, p, &format!("enc{s}.res"), down)?;
            skips.push(x);
        }
        let mut feat = residual_block(tape, p, "bottleneck", x)?;

        let mut heads: Vec<Option<Var>> = vec![None; depth];
        for s in (0..depth).rev() {
            let up = tape.nearest_upsample2x(feat);
            let skip = if cfg.use_domain_transform() {
                domain_transform_block(tape, p, &format!("dec{s}.dt"), skips[s])?
            } else {
                skips[s]
            };
            let mut parts = vec![skip, up];
            if s + 1 < cfg.num_output_scales {
                let prev = heads[s + 1].expect("coarser head computed first");
                parts.push(tape.nearest_upsample2x(prev));
            }
            let cat = tape.concat_channels(&parts)?;
            let fused = conv_layer(tape, p, &format!("dec{s}.fuse"), cat, 1)?;
            let fused = tape.elu(fused);
            feat = residual_block(tape, p, &format!("dec{s}.res"), fused)?;
            if s < cfg.num_output_scales {
                let logits = conv_layer(tape, p, &format!("dec{s}.head"), feat, 1)?;
                heads[s] = Some(tape.sigmoid(logits));
            }
        }

        let mut scales = Vec::with_capacity(cfg.num_output_scales);
        for (s, head) in heads.iter().take(cfg.num_output_scales).enumerate() {
            let head = head.expect("head present");
            let ws = tape.shape(head).w() as f64;
            let bound = cfg.disparity_fraction * ws;
            let dl = tape.narrow(head, Axis::Channel, 0, 1)?;
            let dr = tape.narrow(head, Axis::Channel, 1, 1)?;
            let disp_left = tape.scale(dl, bound);
            let disp_right = tape.scale(dr, bound);
            let mask_left = tape.narrow(head, Axis::Channel, 2, 1)?;
            let mask_right = tape.narrow(head, Axis::Channel, 3, 1)?;
            debug_assert_eq!(tape.shape(head).h(), h >> s);
            scales.push(ScaleOutput { disp_left, disp_right, mask_left, mask_right, head });
        }
        Ok(ScaleOutputs { scales })
    }

    /// Gradient-free forward returning the maps at every output scale.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Vec<ScaleMaps<T>>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(out
            .scales
            .iter()
            .map(|s| ScaleMaps {
                disp_left: tape.value(s.disp_left).clone(),
                disp_right: tape.value(s.disp_right).clone(),
                mask_left: tape.value(s.mask_left).clone(),
                mask_right: tape.value(s.mask_right).clone(),
            })
            .collect())
    }
}

/// Parameter count of `config` without keeping the network around.
pub fn param_count_for(config: &NetworkConfig) -> Result<usize> {
    Ok(Network::<f32>::build(config.clone(), 0)?.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn tiny(variant: Variant) -> NetworkConfig {
        NetworkConfig::with_channels(variant, &[4, 6, 8, 8, 10, 12], &[4, 6, 8, 8, 10, 12])
    }

    #[test]
    fn variant_toggles() {
        assert_eq!(
            Variant::ALL.map(|v| (v.use_rect_fusion(), v.use_domain_transform())),
            [(false, false), (true, false), (true, true)]
        );
        assert_eq!(Variant::parse("rrdispnet_dtm").unwrap(), Variant::RRDispNetDtm);
        assert!(Variant::parse("monodepth").is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Variant::RDispNetM);
        c.decoder_channels.pop();
        assert!(c.validate().is_err());
        let mut c = tiny(Variant::RDispNetM);
        *c.decoder_channels.last_mut().unwrap() = 3;
        assert!(c.validate().is_err());
        let c = tiny(Variant::RRDispNetDtm);
        assert_eq!(NetworkConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn residual_block_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        add_residual_params(&mut s, "r", 7, (3, 3), &mut rng).unwrap();
        assert_eq!(s.param_count(), 2 * (3 * 3 * 7 * 7 + 7));
    }

    #[test]
    fn zero_residual_branch_is_elu_of_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        add_residual_params(&mut store, "r", 3, (3, 3), &mut rng).unwrap();
        add_residual_params(&mut store, "dt", 3, (3, 5), &mut rng).unwrap();
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 5, 7), 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let r = residual_block(&mut tape, &p, "r", xv).unwrap();
        let d = domain_transform_block(&mut tape, &p, "dt", xv).unwrap();
        let elu = x.map(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
        assert_eq!(tape.value(r), &elu);
        assert_eq!(tape.value(d), &elu);
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let net = Network::<f32>::build(tiny(Variant::RRDispNetDtm), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::uniform(Shape::new(1, 3, 64, 128), 0.0, 1.0, &mut rng);
        let maps = net.predict(&x).unwrap();
        assert_eq!(maps.len(), 4);
        assert_eq!(maps[0].disp_left.shape(), Shape::new(1, 1, 64, 128));
        assert_eq!(maps[3].mask_right.shape(), Shape::new(1, 1, 8, 16));
        for (s, m) in maps.iter().enumerate() {
            let bound = 0.3 * (128 >> s) as f32;
            for d in m.disp_left.data().iter().chain(m.disp_right.data()) {
                assert!(*d >= 0.0 && *d <= bound);
            }
            for a in m.mask_left.data().iter().chain(m.mask_right.data()) {
                assert!(*a > 0.0 && *a < 1.0);
            }
        }
        assert_eq!(net.forward_calls(), 1);
    }

    #[test]
    fn rejects_indivisible_input() {
        let net = Network::<f32>::build(tiny(Variant::RDispNetM), 7).unwrap();
        let err = net.predict(&Tensor::zeros(Shape::new(1, 3, 48, 64))).unwrap_err();
        assert!(err.to_string().contains("divisible by 32"), "{err}");
    }

    #[test]
    fn variants_increase_param_count() {
        let counts: Vec<usize> = Variant::ALL.iter().map(|&v| param_count_for(&tiny(v)).unwrap()).collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }
}
