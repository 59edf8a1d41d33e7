//! Finite-difference gradient checks over every differentiable building
//! block, from single ops up to the full objective through a tiny network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Axis, Tape, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::losses::{self, FeatureExtractor, LossWeights};
use crate::network::{Network, NetworkConfig, Variant};
use crate::tensor::{Shape, Tensor};
use crate::warp;

pub const SUITE_EPS: f64 = 1e-6;
pub const SUITE_TOL: f64 = 1e-4;

type CheckFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: CheckFn,
}

impl GradCase {
    pub fn run(&self) -> Result<GradCheckReport> {
        grad_check(&self.f, &self.inputs, SUITE_EPS, SUITE_TOL)
    }
}

/// Reduces any tensor to a scalar with a fixed random projection, so every
/// output element contributes a distinct weight to the checked gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::uniform(tape.shape(y), -1.0, 1.0, &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.mean(p))
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase { name, inputs, f: Box::new(f) }
}

/// Offsets kept away from integers so the bilinear kinks are not straddled.
fn fractional(shape: Shape, lo: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::<f64>::uniform(shape, 0.0, 1.0, rng).map(|u: f64| lo + (u * 3.0).floor() + 0.2 + 0.6 * u.fract())
}

pub fn gradient_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Shape::new(2, 3, 6, 8);
    let map = Shape::new(2, 1, 6, 8);
    let mut u = |s: Shape, lo: f64, hi: f64| Tensor::<f64>::uniform(s, lo, hi, &mut rng);
    let x = u(img, -1.0, 1.0);
    let pos = u(img, 0.2, 1.0);
    let unit = u(img, 0.05, 0.95);
    let unit2 = u(img, 0.05, 0.95);
    let mask = u(map, 0.1, 0.9);
    let mask2 = u(map, 0.1, 0.9);
    let w35 = u(Shape::new(4, 3, 3, 5), -0.5, 0.5);
    let w33 = u(Shape::new(2, 3, 3, 3), -0.5, 0.5);
    let bias4 = u(Shape::new(4, 1, 1, 1), -0.5, 0.5);
    let small = u(Shape::new(2, 3, 3, 4), -1.0, 1.0);
    let mut frng = ChaCha8Rng::seed_from_u64(seed ^ 0xf);
    let disp = fractional(map, 0.0, &mut frng);
    let disp2 = fractional(map, 0.0, &mut frng);
    let offsets = fractional(map, -1.5, &mut frng);

    let mut cases = vec![
        case("conv2d 3x5 same", vec![x.clone(), w35, bias4], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), (1, 1), (1, 2))?;
            project(t, y, 1)
        }),
        case("conv2d 3x3 stride 2", vec![x.clone(), w33], |t, v| {
            let y = t.conv2d(v[0], v[1], None, (2, 2), (1, 1))?;
            project(t, y, 2)
        }),
        case("bilinear_hsample", vec![unit.clone(), offsets], |t, v| {
            let y = t.bilinear_hsample(v[0], v[1])?;
            project(t, y, 3)
        }),
        case("add sub mul div (broadcast)", vec![x.clone(), pos.clone(), mask.clone()], |t, v| {
            let a = t.add(v[0], v[2])?;
            let b = t.mul(a, v[1])?;
            let c = t.sub(b, v[2])?;
            let d = t.div(c, v[1])?;
            let e = t.div(v[0], v[2])?;
            let y = t.add(d, e)?;
            project(t, y, 4)
        }),
        case("scale add_scalar rsub neg", vec![x.clone()], |t, v| {
            let a = t.scale(v[0], 1.7);
            let b = t.add_scalar(a, 0.3);
            let c = t.rsub_scalar(2.0, b);
            let y = t.neg(c);
            project(t, y, 5)
        }),
        case("abs square exp log", vec![x.clone(), pos.clone()], |t, v| {
            let a = t.abs(v[0]);
            let b = t.square(v[0]);
            let c = t.exp(v[0]);
            let d = t.log(v[1])?;
            let ab = t.add(a, b)?;
            let cd = t.add(c, d)?;
            let y = t.add(ab, cd)?;
            project(t, y, 6)
        }),
        case("sigmoid elu relu clamp", vec![x.clone()], |t, v| {
            let a = t.sigmoid(v[0]);
            let b = t.elu(v[0]);
            let c = t.relu(v[0]);
            let d = t.clamp(v[0], -0.5, 0.5);
            let ab = t.add(a, b)?;
            let cd = t.add(c, d)?;
            let y = t.add(ab, cd)?;
            project(t, y, 7)
        }),
        case("upsample pool box_mean", vec![small, x.clone()], |t, v| {
            let up = t.nearest_upsample2x(v[0]);
            let pooled = t.avg_pool2x(v[1])?;
            let boxed = t.box_mean(v[1], 1);
            let area = t.downsample_area(v[1], 2)?;
            let a = project(t, up, 8)?;
            let b = project(t, pooled, 9)?;
            let c = project(t, boxed, 10)?;
            let d = project(t, area, 11)?;
            let ab = t.add(a, b)?;
            let cd = t.add(c, d)?;
            t.add(ab, cd)
        }),
        case("concat narrow mean_channels", vec![x.clone(), mask.clone()], |t, v| {
            let cat = t.concat_channels(&[v[0], v[1]])?;
            let n = t.narrow(cat, Axis::Channel, 1, 3)?;
            let n = t.narrow(n, Axis::Width, 2, 5)?;
            let m = t.mean_channels(cat);
            let a = project(t, n, 12)?;
            let b = project(t, m, 13)?;
            t.add(a, b)
        }),
        case("ssim", vec![unit.clone(), unit2.clone()], |t, v| {
            let y = losses::ssim(t, v[0], v[1])?;
            project(t, y, 14)
        }),
        case("reconstruct (masked warp)", vec![unit.clone(), unit2.clone(), disp.clone(), mask.clone()], |t, v| {
            let r = warp::reconstruct_left(t, v[0], v[1], v[2], v[3])?;
            project(t, r.image, 15)
        }),
        case("reconstruction loss", vec![unit.clone(), unit2.clone()], |t, v| losses::reconstruction_loss(t, v[0], v[1], 0.85)),
        case("smoothness loss", vec![disp.clone(), unit.clone()], |t, v| losses::smoothness_loss(t, v[0], v[1])),
        case("ambiguity loss", vec![mask.clone(), mask2.clone()], |t, v| losses::ambiguity_loss(t, v[0], v[1])),
        case("lr consistency loss", vec![disp.clone(), disp2.clone(), mask.clone(), mask2.clone()], |t, v| {
            losses::lr_consistency_loss(t, v[0], v[1], v[2], v[3])
        }),
    ];

    let fx = FeatureExtractor::<f64>::seeded([3, 4, 5], seed ^ 0xfe)?;
    let p_img = u(Shape::new(1, 3, 8, 8), 0.05, 0.95);
    let p_rec = u(Shape::new(1, 3, 8, 8), 0.05, 0.95);
    // features of the target are data, so only the reconstruction is checked
    cases.push(case("perceptual loss", vec![p_rec], move |t, v| {
        let b = fx.bind(t);
        let target = t.constant(p_img.clone());
        losses::perceptual_loss(t, target, v[0], &b)
    }));

    // the full objective through a tiny network, w.r.t. two of its kernels; the
    // images double as perceptual targets and are therefore not checked
    let mut cfg = NetworkConfig::with_channels(Variant::RRDispNetDtm, &[3, 4, 5], &[3, 4, 5]);
    cfg.num_output_scales = 2;
    let net = Network::<f64>::build(cfg, seed)?;
    let fuse = net.params().get("dec0.fuse.weight").expect("fusion kernel").clone();
    let head = net.params().get("dec1.head.weight").expect("head kernel").clone();
    let left = u(Shape::new(1, 3, 8, 8), 0.05, 0.95);
    let right = u(Shape::new(1, 3, 8, 8), 0.05, 0.95);
    let fx = FeatureExtractor::<f64>::seeded([2, 3, 3], seed ^ 0xff)?;
    cases.push(case("total loss through network", vec![fuse, head], move |t, v| {
        let mut p = net.params().bind(t, false);
        p.replace("dec0.fuse.weight", v[0])?;
        p.replace("dec1.head.weight", v[1])?;
        let b = fx.bind(t);
        let l = t.constant(left.clone());
        let r = t.constant(right.clone());
        let out = net.forward(t, &p, l)?;
        let pyr = losses::image_pyramid(t, l, r, 2)?;
        Ok(losses::total_loss(t, &out, &pyr, &LossWeights::default(), &b, 2)?.total)
    }));
    Ok(cases)
}

/// Runs every case, returning `(name, report)` in order.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    gradient_cases(seed)?.into_iter().map(|c| Ok((c.name, c.run()?))).collect()
}
