//! The multiscale training objective.
//!
//! Per scale `s` and per view:
//!
//! ```text
//! l_s = a_rec l_rec + a_ds (0.1 / 2^(s-1)) l_ds + a_p l_p + a_a l_a + a_lr l_lr
//! ```
//!
//! where every L1 norm is taken as a mean. `l_rec`, `l_ds`, `l_p` and `l_lr`
//! each sum a left and a right component; `l_a` covers both masks directly.
//! Inside the objective, `l_ds` and `l_lr` see disparity divided by the
//! scale width, so their weights do not depend on resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::kv::{join_list, KeyValues};
use crate::network::{BoundParams, Container, ParamStore, ScaleOutput, ScaleOutputs};
use crate::tensor::Element;
use crate::warp::{self, View};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub a_rec: f64,
    pub a_ds: f64,
    pub a_p: f64,
    pub a_a: f64,
    pub a_lr: f64,
    /// L1 share of the reconstruction term; SSIM gets `1 - alpha`.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { a_rec: 1.0, a_ds: 0.1, a_p: 0.1, a_a: 0.2, a_lr: 1.0, alpha: 0.85 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { a_rec: 0.0, a_ds: 0.0, a_p: 0.0, a_a: 0.0, a_lr: 0.0, alpha: 0.85 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.a_rec, self.a_ds, self.a_p, self.a_a, self.a_lr, self.alpha];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if self.alpha > 1.0 {
            return Err(Error::Config(format!("alpha {} must lie in [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Multiplier of the smoothness term at scale `s`: `a_ds * 0.1 / 2^(s-1)`.
pub fn smoothness_factor(s: usize, a_ds: f64) -> f64 {
    a_ds * 0.1 / 2f64.powi(s as i32 - 1)
}

// ---------------------------------------------------------------------------
// Individual terms

/// Per-pixel SSIM dissimilarity `clamp((1 - SSIM) / 2, 0, 1)` using 3x3 mean
/// windows (clipped at the image border). Same shape as the inputs.
pub fn ssim<T: Element>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    let (sx, sy) = (tape.shape(x), tape.shape(y));
    if sx != sy {
        return Err(Error::shape("ssim", format!("{sx} vs {sy}")));
    }
    let mu_x = tape.box_mean(x, 1);
    let mu_y = tape.box_mean(y, 1);
    let xx = tape.square(x);
    let yy = tape.square(y);
    let xy = tape.mul(x, y)?;
    let ex2 = tape.box_mean(xx, 1);
    let ey2 = tape.box_mean(yy, 1);
    let exy = tape.box_mean(xy, 1);
    let mu_x2 = tape.square(mu_x);
    let mu_y2 = tape.square(mu_y);
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let sigma_x = tape.sub(ex2, mu_x2)?;
    let sigma_y = tape.sub(ey2, mu_y2)?;
    let sigma_xy = tape.sub(exy, mu_xy)?;

    let n1 = tape.scale(mu_xy, 2.0);
    let n1 = tape.add_scalar(n1, SSIM_C1);
    let n2 = tape.scale(sigma_xy, 2.0);
    let n2 = tape.add_scalar(n2, SSIM_C2);
    let num = tape.mul(n1, n2)?;
    let d1 = tape.add(mu_x2, mu_y2)?;
    let d1 = tape.add_scalar(d1, SSIM_C1);
    let d2 = tape.add(sigma_x, sigma_y)?;
    let d2 = tape.add_scalar(d2, SSIM_C2);
    let den = tape.mul(d1, d2)?;
    let map = tape.div(num, den)?;
    let dis = tape.rsub_scalar(1.0, map);
    let dis = tape.scale(dis, 0.5);
    Ok(tape.clamp(dis, 0.0, 1.0))
}

/// `alpha * mean|I - Ĩ| + (1 - alpha) * mean(ssim(I, Ĩ))`.
pub fn reconstruction_loss<T: Element>(tape: &mut Tape<T>, image: Var, recon: Var, alpha: f64) -> Result<Var> {
    let diff = tape.sub(image, recon)?;
    let l1 = tape.abs(diff);
    let l1 = tape.mean(l1);
    let s = ssim(tape, image, recon)?;
    let s = tape.mean(s);
    let a = tape.scale(l1, alpha);
    let b = tape.scale(s, 1.0 - alpha);
    tape.add(a, b)
}

fn forward_diff<T: Element>(tape: &mut Tape<T>, x: Var, axis: Axis) -> Result<Var> {
    let len = tape.shape(x).0[axis as usize];
    let hi = tape.narrow(x, axis, 1, len - 1)?;
    let lo = tape.narrow(x, axis, 0, len - 1)?;
    tape.sub(hi, lo)
}

/// Edge-aware smoothness of width-normalised disparity:
/// `mean|∂x d| e^{-|∂x I|} + mean|∂y d| e^{-|∂y I|}` with `d = D / w` and the
/// image gradient magnitude averaged over colour channels.
pub fn smoothness_loss<T: Element>(tape: &mut Tape<T>, disp: Var, image: Var) -> Result<Var> {
    let (sd, si) = (tape.shape(disp), tape.shape(image));
    if (sd.n(), sd.h(), sd.w()) != (si.n(), si.h(), si.w()) || sd.c() != 1 {
        return Err(Error::shape("smoothness_loss", format!("disparity {sd} vs image {si}")));
    }
    let d = tape.scale(disp, 1.0 / sd.w() as f64);
    let mut terms = Vec::with_capacity(2);
    for (axis, len) in [(Axis::Width, sd.w()), (Axis::Height, sd.h())] {
        if len < 2 {
            continue;
        }
        let dd = forward_diff(tape, d, axis)?;
        let dd = tape.abs(dd);
        let di = forward_diff(tape, image, axis)?;
        let di = tape.abs(di);
        let di = tape.mean_channels(di);
        let di = tape.neg(di);
        let weight = tape.exp(di);
        let t = tape.mul(dd, weight)?;
        terms.push(tape.mean(t));
    }
    sum_vars(tape, &terms)
}

/// `mean(-log a_L) + mean(-log a_R)` on the raw (not dis-occlusion combined) masks.
pub fn ambiguity_loss<T: Element>(tape: &mut Tape<T>, mask_left: Var, mask_right: Var) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    for m in [mask_left, mask_right] {
        let l = tape.log(m)?;
        let l = tape.mean(l);
        terms.push(tape.neg(l));
    }
    sum_vars(tape, &terms)
}

/// One view's consistency term `mean(ã ⊙ |D - g(D_other, D)|)`.
pub fn lr_consistency_term<T: Element>(tape: &mut Tape<T>, view: View, disp: Var, disp_other: Var, combined_mask: Var) -> Result<Var> {
    let projected = warp::warp_into(tape, view, disp_other, disp)?;
    let diff = tape.sub(disp, projected)?;
    let diff = tape.abs(diff);
    let weighted = tape.mul(combined_mask, diff)?;
    Ok(tape.mean(weighted))
}

/// Left plus right consistency, each weighted by its combined mask.
pub fn lr_consistency_loss<T: Element>(
    tape: &mut Tape<T>,
    disp_left: Var,
    disp_right: Var,
    combined_left: Var,
    combined_right: Var,
) -> Result<Var> {
    let l = lr_consistency_term(tape, View::Left, disp_left, disp_right, combined_left)?;
    let r = lr_consistency_term(tape, View::Right, disp_right, disp_left, combined_right)?;
    tape.add(l, r)
}

fn sum_vars<T: Element>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = vars.split_first() else {
        return Ok(tape.constant(crate::tensor::Tensor::scalar(T::ZERO)));
    };
    rest.iter().try_fold(first, |acc, &v| tape.add(acc, v))
}

// ---------------------------------------------------------------------------
// Perceptual features

pub const DEFAULT_PERCEPTUAL_CHANNELS: [usize; 3] = [64, 128, 256];
pub const DEFAULT_PERCEPTUAL_SEED: u64 = 0x5eed_f00d;

/// Layer layout: two convs, pool, two convs, pool, four convs; features are
/// taken after the last ReLU of each group.
const STAGE_LAYERS: [usize; 3] = [2, 2, 4];

/// Frozen three-stage convolutional feature extractor.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    channels: [usize; 3],
    params: ParamStore<T>,
}

fn layer_name(stage: usize, layer: usize) -> String {
    format!("conv{}_{}", stage + 1, layer + 1)
}

impl<T: Element> FeatureExtractor<T> {
    /// Fixed-seed weights with the given stage widths.
    pub fn seeded(channels: [usize; 3], seed: u64) -> Result<Self> {
        if channels.contains(&0) {
            return Err(Error::Config("perceptual channels must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut c_in = 3;
        for (stage, &c) in channels.iter().enumerate() {
            for layer in 0..STAGE_LAYERS[stage] {
                params.add_conv(&layer_name(stage, layer), c_in, c, (3, 3), &mut rng)?;
                c_in = c;
            }
        }
        Ok(FeatureExtractor { channels, params })
    }

    pub fn default_weights() -> Result<Self> {
        Self::seeded(DEFAULT_PERCEPTUAL_CHANNELS, DEFAULT_PERCEPTUAL_SEED)
    }

    /// Loads weights from a parameter container whose config block carries
    /// `perceptual_channels = a,b,c`.
    pub fn from_container(c: &Container) -> Result<Self> {
        let kv = KeyValues::parse(&c.config)?;
        let ch: Vec<usize> = kv
            .get_list("perceptual_channels")?
            .ok_or_else(|| Error::Checkpoint("perceptual weight file lacks `perceptual_channels`".into()))?;
        let channels: [usize; 3] = ch
            .try_into()
            .map_err(|_| Error::Checkpoint("`perceptual_channels` needs exactly three widths".into()))?;
        let reference = Self::seeded(channels, 0)?;
        for (name, t) in reference.params.iter() {
            let got = c.params.get(name).ok_or_else(|| Error::Checkpoint(format!("perceptual weight `{name}` missing")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("perceptual weight `{name}` has shape {}, expected {}", got.shape(), t.shape())));
            }
        }
        if c.params.len() != reference.params.len() {
            return Err(Error::Checkpoint("perceptual weight file has unexpected extra tensors".into()));
        }
        Ok(FeatureExtractor { channels, params: c.params.cast() })
    }

    pub fn to_container(&self) -> Container {
        let mut kv = KeyValues::new();
        kv.set("perceptual_channels", join_list(&self.channels));
        Container { config: kv.to_text(), params: self.params.cast() }
    }

    pub fn channels(&self) -> [usize; 3] {
        self.channels
    }

    /// Height and width must be multiples of this (two 2x pools).
    pub const MIN_SIZE: usize = 4;

    /// Records the frozen weights on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundExtractor {
        BoundExtractor { params: self.params.bind(tape, false) }
    }
}

/// A [`FeatureExtractor`] whose weights are recorded on a tape.
pub struct BoundExtractor {
    params: BoundParams,
}

impl BoundExtractor {
    /// The three feature maps of `x`.
    pub fn features<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<[Var; 3]> {
        let [_, _, h, w] = tape.shape(x).0;
        let m = FeatureExtractor::<T>::MIN_SIZE;
        if h < m || w < m || h % m != 0 || w % m != 0 {
            return Err(Error::shape(
                "perceptual_loss",
                format!("resolution {h}x{w} is below the extractor minimum (multiples of {m})"),
            ));
        }
        let mut out = [x; 3];
        let mut h = x;
        for (stage, &layers) in STAGE_LAYERS.iter().enumerate() {
            if stage > 0 {
                h = tape.avg_pool2x(h)?;
            }
            for layer in 0..layers {
                let c = crate::network::conv_layer(tape, &self.params, &layer_name(stage, layer), h, 1)?;
                h = tape.relu(c);
            }
            out[stage] = h;
        }
        Ok(out)
    }
}

/// `sum_l mean|φ_l(I) - φ_l(Ĩ)|`; the features of `image` are treated as data.
pub fn perceptual_loss<T: Element>(tape: &mut Tape<T>, image: Var, recon: Var, fx: &BoundExtractor) -> Result<Var> {
    let target = tape.value(image).clone();
    let target = tape.constant(target);
    let ft = fx.features(tape, target)?;
    let fr = fx.features(tape, recon)?;
    let mut terms = Vec::with_capacity(3);
    for (a, b) in ft.into_iter().zip(fr) {
        let d = tape.sub(a, b)?;
        let d = tape.abs(d);
        terms.push(tape.mean(d));
    }
    sum_vars(tape, &terms)
}

// ---------------------------------------------------------------------------
// Assembly

/// Left/right images at one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct StereoLevel {
    pub left: Var,
    pub right: Var,
}

/// Area-downsampled image pairs for scales `0..levels`.
pub fn image_pyramid<T: Element>(tape: &mut Tape<T>, left: Var, right: Var, levels: usize) -> Result<Vec<StereoLevel>> {
    (0..levels)
        .map(|s| {
            Ok(StereoLevel {
                left: tape.downsample_area(left, 1 << s)?,
                right: tape.downsample_area(right, 1 << s)?,
            })
        })
        .collect()
}

/// The five unweighted terms at one scale (each already summed over views).
#[derive(Clone, Copy, Debug)]
pub struct ScaleLoss {
    pub total: Var,
    pub rec: Var,
    pub ds: Var,
    pub p: Var,
    pub a: Var,
    pub lr: Var,
    pub recon_left: Var,
    pub recon_right: Var,
    pub combined_left: Var,
    pub combined_right: Var,
}

pub fn scale_loss<T: Element>(
    tape: &mut Tape<T>,
    s: usize,
    out: &ScaleOutput,
    level: &StereoLevel,
    weights: &LossWeights,
    fx: &BoundExtractor,
) -> Result<ScaleLoss> {
    let rl = warp::reconstruct_left(tape, level.left, level.right, out.disp_left, out.mask_left)?;
    let rr = warp::reconstruct_right(tape, level.left, level.right, out.disp_right, out.mask_right)?;

    let rec_l = reconstruction_loss(tape, level.left, rl.image, weights.alpha)?;
    let rec_r = reconstruction_loss(tape, level.right, rr.image, weights.alpha)?;
    let rec = tape.add(rec_l, rec_r)?;

    let ds_l = smoothness_loss(tape, out.disp_left, level.left)?;
    let ds_r = smoothness_loss(tape, out.disp_right, level.right)?;
    let ds = tape.add(ds_l, ds_r)?;

    let p = if weights.a_p > 0.0 {
        let p_l = perceptual_loss(tape, level.left, rl.image, fx)?;
        let p_r = perceptual_loss(tape, level.right, rr.image, fx)?;
        tape.add(p_l, p_r)?
    } else {
        tape.constant(crate::tensor::Tensor::scalar(T::ZERO))
    };

    let a = ambiguity_loss(tape, out.mask_left, out.mask_right)?;
    // like smoothness, consistency is measured on width-normalised disparity
    let lr_px = lr_consistency_loss(tape, out.disp_left, out.disp_right, rl.combined_mask, rr.combined_mask)?;
    let lr = tape.scale(lr_px, 1.0 / tape.shape(out.disp_left).w() as f64);

    let parts = [
        tape.scale(rec, weights.a_rec),
        tape.scale(ds, smoothness_factor(s, weights.a_ds)),
        tape.scale(p, weights.a_p),
        tape.scale(a, weights.a_a),
        tape.scale(lr, weights.a_lr),
    ];
    let total = sum_vars(tape, &parts)?;
    Ok(ScaleLoss {
        total,
        rec,
        ds,
        p,
        a,
        lr,
        recon_left: rl.image,
        recon_right: rr.image,
        combined_left: rl.combined_mask,
        combined_right: rr.combined_mask,
    })
}

/// Scalar values of the unweighted terms summed over scales, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub rec: f64,
    pub ds: f64,
    pub p: f64,
    pub a: f64,
    pub lr: f64,
}

pub struct TotalLoss {
    pub total: Var,
    pub scales: Vec<ScaleLoss>,
}

impl TotalLoss {
    pub fn components<T: Element>(&self, tape: &Tape<T>) -> LossComponents {
        let v = |x: Var| tape.value(x).item().as_f64();
        let mut c = LossComponents { total: v(self.total), ..Default::default() };
        for s in &self.scales {
            c.rec += v(s.rec);
            c.ds += v(s.ds);
            c.p += v(s.p);
            c.a += v(s.a);
            c.lr += v(s.lr);
        }
        c
    }
}

/// Sum of [`scale_loss`] over the first `num_scales` output scales.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    outputs: &ScaleOutputs,
    pyramid: &[StereoLevel],
    weights: &LossWeights,
    fx: &BoundExtractor,
    num_scales: usize,
) -> Result<TotalLoss> {
    if outputs.scales.len() < num_scales || pyramid.len() < num_scales {
        return Err(Error::invalid(
            "total_loss",
            format!(
                "need {num_scales} scales, have {} outputs and {} pyramid levels",
                outputs.scales.len(),
                pyramid.len()
            ),
        ));
    }
    let mut scales = Vec::with_capacity(num_scales);
    for s in 0..num_scales {
        scales.push(scale_loss(tape, s, &outputs.scales[s], &pyramid[s], weights, fx)?);
    }
    let totals: Vec<Var> = scales.iter().map(|s| s.total).collect();
    let total = sum_vars(tape, &totals)?;
    Ok(TotalLoss { total, scales })
}
