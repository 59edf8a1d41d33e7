//! Inference and dataset evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, KittiMetrics, SparseGroundTruth};
use crate::kv::KeyValues;
use crate::network::Network;
use crate::tensor::{Element, Shape, Tensor};

use super::data::{self, StereoSample};

/// Full-resolution scale-0 outputs for one image.
#[derive(Clone, Debug)]
pub struct Inference {
    pub disp_left: Tensor<f32>,
    pub disp_right: Tensor<f32>,
    pub mask_left: Tensor<f32>,
    pub mask_right: Tensor<f32>,
    /// Size the network actually saw after edge padding.
    pub padded_size: (usize, usize),
    pub original_size: (usize, usize),
    pub post_processed: bool,
    pub forward_calls: usize,
}

/// Replicates the last row/column until both dims are multiples of `div`.
pub fn pad_to_multiple<T: Element>(x: &Tensor<T>, div: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let (ph, pw) = (h.div_ceil(div) * div, w.div_ceil(div) * div);
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    Tensor::from_fn(Shape::new(n, c, ph, pw), |[b, ch, i, j]| x.at([b, ch, i.min(h - 1), j.min(w - 1)]))
}

fn crop_top_left<T: Element>(x: &Tensor<T>, (h, w): (usize, usize)) -> Tensor<T> {
    let s = x.shape();
    if (s.h(), s.w()) == (h, w) {
        return x.clone();
    }
    Tensor::from_fn(Shape::new(s.n(), s.c(), h, w), |idx| x.at(idx))
}

/// Runs the network on a `1 x 3 x h x w` image. One forward pass without
/// post-processing, two with it (the second on the mirrored input, used for
/// the left disparity only).
pub fn infer_image(net: &Network<f32>, image: &Tensor<f32>, pp: bool) -> Result<Inference> {
    let s = image.shape();
    if s.n() != 1 || s.c() != 3 {
        return Err(Error::shape("infer", format!("expected a single 3-channel image, got {s}")));
    }
    let original = (s.h(), s.w());
    let padded = pad_to_multiple(image, net.config().divisor());
    let padded_size = (padded.shape().h(), padded.shape().w());
    let before = net.forward_calls();
    let first = net.predict(&padded)?.swap_remove(0);
    let mut disp_left = first.disp_left;
    if pp {
        let second = net.predict(&padded.flip_w())?.swap_remove(0);
        disp_left = eval::pp_blend(&disp_left, &second.disp_left.flip_w())?;
    }
    Ok(Inference {
        disp_left: crop_top_left(&disp_left, original),
        disp_right: crop_top_left(&first.disp_right, original),
        mask_left: crop_top_left(&first.mask_left, original),
        mask_right: crop_top_left(&first.mask_right, original),
        padded_size,
        original_size: original,
        post_processed: pp,
        forward_calls: net.forward_calls() - before,
    })
}

/// Writes `disp_left.pgm`, `disp_right.pgm` (16-bit, x256), `mask_left.pgm`,
/// `mask_right.pgm` (8-bit, x255) and `meta.txt` into `dir`.
pub fn write_inference(dir: &Path, inf: &Inference) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("disp_left.pgm", &inf.disp_left, true),
        ("disp_right.pgm", &inf.disp_right, true),
        ("mask_left.pgm", &inf.mask_left, false),
        ("mask_right.pgm", &inf.mask_right, false),
    ];
    let mut written = Vec::new();
    for (name, t, is_disp) in files {
        let p = dir.join(name);
        if is_disp {
            data::write_pgm16(&p, t, 256.0)?;
        } else {
            data::write_pgm8(&p, t)?;
        }
        written.push(p);
    }
    let mut meta = KeyValues::new();
    meta.set("original_height", inf.original_size.0);
    meta.set("original_width", inf.original_size.1);
    meta.set("padded_height", inf.padded_size.0);
    meta.set("padded_width", inf.padded_size.1);
    meta.set("post_processed", inf.post_processed);
    meta.set("forward_calls", inf.forward_calls);
    let p = dir.join("meta.txt");
    fs::write(&p, meta.to_text()).map_err(|e| Error::io(&p, e))?;
    written.push(p);
    Ok(written)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub pp: bool,
    /// Compare depths rather than disparities.
    pub depth_space: bool,
    /// Focal length in pixels; defaults to the KITTI focal scaled to the GT width.
    pub focal: Option<f64>,
    pub baseline: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { pp: false, depth_space: false, focal: None, baseline: eval::KITTI_BASELINE }
    }
}

/// Ground truth for `left` lives at `<gt_dir>/<left file stem>.png`.
pub fn gt_path_for(gt_dir: &Path, left: &Path) -> PathBuf {
    let stem = left.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    gt_dir.join(format!("{stem}.png"))
}

/// Metrics of one prediction against sparse ground truth.
pub fn image_metrics(disp: &Tensor<f32>, gt: &SparseGroundTruth, opts: &EvalOptions) -> Result<KittiMetrics> {
    let s = disp.shape();
    let d: Vec<f64> = disp.data().iter().map(|&v| v as f64).collect();
    let pred = eval::resize_disparity(&d, (s.h(), s.w()), (gt.height, gt.width))?;
    if !opts.depth_space {
        return eval::kitti_metrics(&pred, &gt.values, &gt.valid);
    }
    let focal = opts.focal.unwrap_or_else(|| eval::kitti_focal_for_width(gt.width));
    let to_depth = |v: &[f64]| v.iter().map(|&x| eval::disparity_to_depth(x, focal, opts.baseline)).collect::<Result<Vec<_>>>();
    eval::kitti_metrics(&to_depth(&pred)?, &to_depth(&gt.values)?, &gt.valid)
}

/// Averages per-image metrics, warp rmse and inference time over a dataset.
pub fn evaluate(
    net: &Network<f32>,
    model: &str,
    samples: &[StereoSample],
    gts: &[SparseGroundTruth],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if samples.is_empty() || samples.len() != gts.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} samples but {} ground-truth maps", samples.len(), gts.len()),
        ));
    }
    let mut metrics = Vec::with_capacity(samples.len());
    let (mut warp, mut time) = (0.0, 0.0);
    for (s, gt) in samples.iter().zip(gts) {
        let t0 = Instant::now();
        let inf = infer_image(net, &s.left, opts.pp)?;
        time += t0.elapsed().as_secs_f64();
        metrics.push(image_metrics(&inf.disp_left, gt, opts)?);
        warp += eval::warp_rmse(&s.left, &s.right, &inf.disp_right)?;
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        model: model.to_string(),
        metrics: KittiMetrics::mean(&metrics).expect("non-empty"),
        warp_rmse: warp / n,
        param_count: net.param_count(),
        inference_time: time / n,
    })
}
