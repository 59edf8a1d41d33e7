//! Disparity evaluation: Eigen-style KITTI metrics, warp rmse, flip
//! post-processing and disparity/depth conversion.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Element, Shape, Tensor};

/// Predictions are floored here before any ratio or logarithm.
pub const PRED_FLOOR: f64 = 1e-3;
pub const MIN_DEPTH: f64 = 1e-3;
pub const MAX_DEPTH: f64 = 80.0;
/// Width of each post-processing blend band as a fraction of image width.
pub const PP_BAND: f64 = 0.05;

/// KITTI camera defaults used for depth-space evaluation.
pub const KITTI_FOCAL_AT_1242: f64 = 721.5377;
pub const KITTI_BASELINE: f64 = 0.54;

pub const CSV_HEADER: &str = "model,abs_rel,sq_rel,rmse,log_rmse,a1,a2,a3,warp_rmse,params,time_s";

/// Sparse ground truth at full resolution; `valid[k]` marks pixels with a measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGroundTruth {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl SparseGroundTruth {
    pub fn new(height: usize, width: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if values.len() != n || valid.len() != n {
            return Err(Error::shape(
                "ground truth",
                format!("{height}x{width} needs {n} values, got {} values and {} flags", values.len(), valid.len()),
            ));
        }
        Ok(SparseGroundTruth { height, width, values, valid })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KittiMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub log_rmse: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl KittiMetrics {
    /// Per-image average, as is conventional for the KITTI split.
    pub fn mean(items: &[KittiMetrics]) -> Option<KittiMetrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let mut m = KittiMetrics::default();
        for it in items {
            m.abs_rel += it.abs_rel / n;
            m.sq_rel += it.sq_rel / n;
            m.rmse += it.rmse / n;
            m.log_rmse += it.log_rmse / n;
            m.a1 += it.a1 / n;
            m.a2 += it.a2 / n;
            m.a3 += it.a3 / n;
        }
        Some(m)
    }
}

/// The seven Eigen metrics over pixels where `valid` is set.
pub fn kitti_metrics(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<KittiMetrics> {
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(Error::shape(
            "kitti_metrics",
            format!("pred {}, gt {}, mask {} elements", pred.len(), gt.len(), valid.len()),
        ));
    }
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut sq, mut log_sq) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for ((&p, &g), _) in pred.iter().zip(gt).zip(valid).filter(|(_, &v)| v) {
        if !(g > 0.0) || !g.is_finite() {
            return Err(Error::invalid("kitti_metrics", format!("valid ground truth must be positive, got {g}")));
        }
        if p.is_nan() {
            return Err(Error::NonFinite("prediction contains NaN".into()));
        }
        let p = p.max(PRED_FLOOR);
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        sq += d * d;
        let dl = p.ln() - g.ln();
        log_sq += dl * dl;
        let ratio = (p / g).max(g / p);
        for (k, h) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *h += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("kitti_metrics", "no valid ground-truth pixels"));
    }
    let nf = n as f64;
    Ok(KittiMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        log_rmse: (log_sq / nf).sqrt(),
        a1: hits[0] as f64 / nf,
        a2: hits[1] as f64 / nf,
        a3: hits[2] as f64 / nf,
    })
}

/// RMSE between the left image warped into the right view and the right
/// image, on the 0-255 intensity scale. Images are `(n,c,h,w)` in [0,1],
/// `disp_right` is `(n,1,h,w)` in pixels.
pub fn warp_rmse<T: Element>(left: &Tensor<T>, right: &Tensor<T>, disp_right: &Tensor<T>) -> Result<f64> {
    let (sl, sr, sd) = (left.shape(), right.shape(), disp_right.shape());
    if sl != sr || sd != Shape::new(sl.n(), 1, sl.h(), sl.w()) {
        return Err(Error::shape("warp_rmse", format!("left {sl}, right {sr}, disparity {sd}")));
    }
    let offsets = disp_right.map(|d| -d);
    let warped = kernels::hsample_forward(left, &offsets);
    let sq: f64 = warped
        .data()
        .iter()
        .zip(right.data())
        .map(|(&a, &b)| {
            let d = 255.0 * (a.as_f64() - b.as_f64());
            d * d
        })
        .sum();
    Ok((sq / sl.numel() as f64).sqrt())
}

/// Left-band weight at column `j`: 1 at the left edge, ramping to 0 across
/// the first [`PP_BAND`] of the width.
fn left_band_weight(j: usize, w: usize) -> f64 {
    let x = j as f64 / (w - 1) as f64;
    (1.0 - x / PP_BAND).clamp(0.0, 1.0)
}

/// Blends a first-pass disparity with the un-flipped second pass: the second
/// pass owns the left band, the first pass the right band, and the interior
/// is their average.
pub fn pp_blend<T: Element>(first: &Tensor<T>, second_unflipped: &Tensor<T>) -> Result<Tensor<T>> {
    let s = first.shape();
    if second_unflipped.shape() != s {
        return Err(Error::shape("pp_blend", format!("{s} vs {}", second_unflipped.shape())));
    }
    let w = s.w();
    Ok(Tensor::from_fn(s, |idx| {
        let (d1, d2) = (first.at(idx), second_unflipped.at(idx));
        let mean = (d1 + d2) * T::from_f64(0.5);
        if w == 1 {
            return mean;
        }
        let l = left_band_weight(idx[3], w);
        let r = left_band_weight(w - 1 - idx[3], w);
        T::from_f64(r) * d1 + T::from_f64(l) * d2 + T::from_f64(1.0 - l - r) * mean
    }))
}

/// Two-pass flip post-processing around an arbitrary disparity predictor.
pub fn postprocess_flip<T: Element>(
    mut forward: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d1 = forward(image)?;
    let d2 = forward(&image.flip_w())?.flip_w();
    pp_blend(&d1, &d2)
}

/// `focal * baseline / max(d, floor)`, clamped to [`MIN_DEPTH`, `MAX_DEPTH`].
pub fn disparity_to_depth(d: f64, focal: f64, baseline: f64) -> Result<f64> {
    if !(focal > 0.0) || !(baseline > 0.0) {
        return Err(Error::invalid(
            "disparity_to_depth",
            format!("focal ({focal}) and baseline ({baseline}) must be positive"),
        ));
    }
    Ok((focal * baseline / d.max(PRED_FLOOR)).clamp(MIN_DEPTH, MAX_DEPTH))
}

/// Focal length in pixels for a KITTI-like camera at the given image width.
pub fn kitti_focal_for_width(width: usize) -> f64 {
    KITTI_FOCAL_AT_1242 * width as f64 / 1242.0
}

/// Nearest-neighbour resize of a single-channel disparity map, with values
/// scaled by the width ratio so they stay in target pixels.
pub fn resize_disparity(d: &[f64], (h, w): (usize, usize), (th, tw): (usize, usize)) -> Result<Vec<f64>> {
    if d.len() != h * w || h == 0 || w == 0 {
        return Err(Error::shape("resize_disparity", format!("{} values for {h}x{w}", d.len())));
    }
    let scale = tw as f64 / w as f64;
    let mut out = Vec::with_capacity(th * tw);
    for i in 0..th {
        let si = ((i as f64 + 0.5) * h as f64 / th as f64) as usize;
        for j in 0..tw {
            let sj = ((j as f64 + 0.5) * w as f64 / tw as f64) as usize;
            out.push(d[si.min(h - 1) * w + sj.min(w - 1)] * scale);
        }
    }
    Ok(out)
}

/// One row of the metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub metrics: KittiMetrics,
    pub warp_rmse: f64,
    pub param_count: usize,
    /// Mean inference time per image in seconds.
    pub inference_time: f64,
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
            self.model, m.abs_rel, m.sq_rel, m.rmse, m.log_rmse, m.a1, m.a2, m.a3, self.warp_rmse, self.param_count, self.inference_time
        );
        s
    }

    pub fn to_csv(reports: &[EvalReport]) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}
