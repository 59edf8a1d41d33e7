//! Forward and backward kernels on plain tensors.
//!
//! The tape in [`crate::autograd`] records which of these to call; nothing in
//! here knows about gradients flowing through a graph.

use rayon::prelude::*;

use crate::tensor::{Element, Shape, Tensor};

/// Column block used when splitting a GEMM across threads. Fixed so the
/// partition (and therefore the floating point result) does not depend on the
/// size of the thread pool.
const GEMM_COL_BLOCK: usize = 512;
const GEMM_ROW_BLOCK: usize = 16;

/// Row-major matrix view: pointer-free description of a strided operand.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> Mat<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        Mat { data, rs: cols, cs: 1 }
    }

    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Mat { data, rs: 1, cs: cols }
    }
}

/// `c[m x n] (+)= a[m x k] * b[k x n]`, `c` row-major and contiguous.
pub(crate) fn matmul<T: Element>(m: usize, k: usize, n: usize, a: Mat<'_, T>, b: Mat<'_, T>, c: &mut [T], accumulate: bool) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::ONE } else { T::ZERO };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = T::ZERO);
        }
        return;
    }
    let work = m * n * k;
    if work < 1 << 16 {
        // SAFETY: slices cover the full strided extents checked by callers.
        unsafe {
            T::gemm(
                m, k, n, T::ONE,
                a.data.as_ptr(), a.rs as isize, a.cs as isize,
                b.data.as_ptr(), b.rs as isize, b.cs as isize,
                beta, c.as_mut_ptr(), n as isize, 1,
            );
        }
        return;
    }
    if n >= 2 * GEMM_COL_BLOCK || m < 2 * GEMM_ROW_BLOCK {
        // Split output columns. Each block writes a disjoint set of columns;
        // rows of `c` are strided by n so we hand out raw pointers.
        let blocks = n.div_ceil(GEMM_COL_BLOCK);
        let c_ptr = SendPtr(c.as_mut_ptr());
        (0..blocks).into_par_iter().for_each(|blk| {
            let j0 = blk * GEMM_COL_BLOCK;
            let nb = GEMM_COL_BLOCK.min(n - j0);
            let c_ptr = c_ptr;
            // SAFETY: blocks touch disjoint columns of `c`; `b` offset stays in bounds.
            unsafe {
                T::gemm(
                    m, k, nb, T::ONE,
                    a.data.as_ptr(), a.rs as isize, a.cs as isize,
                    b.data.as_ptr().add(j0 * b.cs), b.rs as isize, b.cs as isize,
                    beta, c_ptr.0.add(j0), n as isize, 1,
                );
            }
        });
    } else {
        c.par_chunks_mut(GEMM_ROW_BLOCK * n).enumerate().for_each(|(blk, c_rows)| {
            let i0 = blk * GEMM_ROW_BLOCK;
            let mb = c_rows.len() / n;
            // SAFETY: row block of `a` starting at i0 is in bounds.
            unsafe {
                T::gemm(
                    mb, k, n, T::ONE,
                    a.data.as_ptr().add(i0 * a.rs), a.rs as isize, a.cs as isize,
                    b.data.as_ptr(), b.rs as isize, b.cs as isize,
                    beta, c_rows.as_mut_ptr(), n as isize, 1,
                );
            }
        });
    }
}

#[derive(Clone, Copy)]
struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.h + 2 * self.pad.0 - self.kh) / self.stride.0 + 1;
        let ow = (self.w + 2 * self.pad.1 - self.kw) / self.stride.1 + 1;
        (oh, ow)
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == (1, 1) && self.pad == (0, 0)
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.pad.0 as isize, g.pad.1 as isize);
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..oh {
                    let ii = (oi * sh) as isize + ki as isize - ph;
                    let drow = &mut dst[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let srow = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * sw) as isize + kj as isize - pw;
                        *d = if jj < 0 || jj >= g.w as isize { T::ZERO } else { srow[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.pad.0 as isize, g.pad.1 as isize);
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..oh {
                    let ii = (oi * sh) as isize + ki as isize - ph;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..ow {
                        let jj = (oj * sw) as isize + kj as isize - pw;
                        if jj >= 0 && jj < g.w as isize {
                            drow[jj as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Batched 2-D cross-correlation with zero padding.
pub fn conv2d_forward<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, g: &ConvGeometry) -> Tensor<T> {
    let n = x.shape().n();
    let c_out = weight.shape().n();
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let k = g.k();
    let mut out = Tensor::zeros(Shape::new(n, c_out, oh, ow));
    let in_per = x.shape().numel() / n.max(1);
    out.data_mut().par_chunks_mut(c_out * p).enumerate().for_each(|(b, ob)| {
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        let wmat = Mat::row_major(weight.data(), k);
        if g.is_pointwise() {
            matmul(c_out, k, p, wmat, Mat::row_major(xb, p), ob, false);
        } else {
            let mut cols = vec![T::ZERO; k * p];
            im2col(xb, g, &mut cols);
            matmul(c_out, k, p, wmat, Mat::row_major(&cols, p), ob, false);
        }
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(p).enumerate() {
                let bv = bias.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
    g: &ConvGeometry,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let n = x.shape().n();
    let c_out = weight.shape().n();
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let k = g.k();
    let in_per = x.shape().numel() / n.max(1);
    let (need_dx, need_dw, need_db) = need;

    // Per-item partial results, reduced in batch order for determinism.
    let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let xb = &x.data()[b * in_per..(b + 1) * in_per];
            let gb = &gout.data()[b * c_out * p..(b + 1) * c_out * p];
            let cols_owned;
            let cols: &[T] = if g.is_pointwise() {
                xb
            } else if need_dw {
                let mut c = vec![T::ZERO; k * p];
                im2col(xb, g, &mut c);
                cols_owned = c;
                &cols_owned
            } else {
                &[]
            };
            let dw = need_dw.then(|| {
                let mut dw = vec![T::ZERO; c_out * k];
                // dW[c_out x K] = G[c_out x P] * cols^T[P x K]
                matmul(c_out, p, k, Mat::row_major(gb, p), Mat::transposed(cols, p), &mut dw, false);
                dw
            });
            let dx = need_dx.then(|| {
                // dcols[K x P] = W^T[K x c_out] * G[c_out x P]
                if g.is_pointwise() {
                    let mut dxb = vec![T::ZERO; in_per];
                    matmul(k, c_out, p, Mat::transposed(weight.data(), k), Mat::row_major(gb, p), &mut dxb, false);
                    dxb
                } else {
                    let mut dcols = vec![T::ZERO; k * p];
                    matmul(k, c_out, p, Mat::transposed(weight.data(), k), Mat::row_major(gb, p), &mut dcols, false);
                    let mut dxb = vec![T::ZERO; in_per];
                    col2im(&dcols, g, &mut dxb);
                    dxb
                }
            });
            (dx, dw)
        })
        .collect();

    let dx = need_dx.then(|| {
        let mut data = Vec::with_capacity(x.numel());
        for (dx, _) in &parts {
            data.extend_from_slice(dx.as_ref().expect("dx computed"));
        }
        Tensor::from_vec(x.shape(), data).expect("dx shape")
    });
    let dw = need_dw.then(|| {
        let mut acc = Tensor::zeros(weight.shape());
        for (_, dw) in &parts {
            for (a, &v) in acc.data_mut().iter_mut().zip(dw.as_ref().expect("dw computed")) {
                *a += v;
            }
        }
        acc
    });
    let db = need_db.then(|| {
        let mut acc = vec![T::ZERO; c_out];
        for b in 0..n {
            for (co, a) in acc.iter_mut().enumerate() {
                let row = &gout.data()[(b * c_out + co) * p..(b * c_out + co + 1) * p];
                *a += row.iter().fold(T::ZERO, |s, &v| s + v);
            }
        }
        Tensor::from_vec(Shape::new(c_out, 1, 1, 1), acc).expect("db shape")
    });
    ConvGrads { dx, dw, db }
}

// ---------------------------------------------------------------------------
// Horizontal bilinear sampling

/// Sample coordinate and its interpolation support for output column `j`.
#[inline]
fn hsample_coord<T: Element>(j: usize, offset: T, w: usize) -> (usize, usize, T, bool) {
    let x = T::from_f64(j as f64) - offset;
    let hi = T::from_f64((w - 1) as f64);
    let inside = x >= T::ZERO && x <= hi;
    let xc = x.max(T::ZERO).min(hi);
    let x0f = xc.floor();
    let x0 = x0f.as_f64() as usize;
    let x1 = (x0 + 1).min(w - 1);
    (x0, x1, xc - x0f, inside)
}

/// `out(n,c,i,j) = lerp(image(n,c,i,·), j - offsets(n,0,i,j))`, clamped to the border.
pub fn hsample_forward<T: Element>(image: &Tensor<T>, offsets: &Tensor<T>) -> Tensor<T> {
    let [_, c, h, w] = image.shape().0;
    let mut out = Tensor::zeros(image.shape());
    let off = offsets.data();
    let img = image.data();
    out.data_mut().par_chunks_mut(c * h * w).enumerate().for_each(|(b, ob)| {
        for i in 0..h {
            for j in 0..w {
                let (x0, x1, t, _) = hsample_coord(j, off[(b * h + i) * w + j], w);
                for ch in 0..c {
                    let row = ((b * c + ch) * h + i) * w;
                    ob[(ch * h + i) * w + j] = (T::ONE - t) * img[row + x0] + t * img[row + x1];
                }
            }
        }
    });
    out
}

/// Returns `(d_image, d_offsets)`.
pub fn hsample_backward<T: Element>(image: &Tensor<T>, offsets: &Tensor<T>, gout: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [_, c, h, w] = image.shape().0;
    let mut dimg = Tensor::zeros(image.shape());
    let mut doff = Tensor::zeros(offsets.shape());
    let off = offsets.data();
    let img = image.data();
    let go = gout.data();
    dimg.data_mut()
        .par_chunks_mut(c * h * w)
        .zip(doff.data_mut().par_chunks_mut(h * w))
        .enumerate()
        .for_each(|(b, (dib, dob))| {
            for i in 0..h {
                for j in 0..w {
                    let (x0, x1, t, inside) = hsample_coord(j, off[(b * h + i) * w + j], w);
                    let mut acc = T::ZERO;
                    for ch in 0..c {
                        let row = ((b * c + ch) * h + i) * w;
                        let g = go[row + j];
                        dib[(ch * h + i) * w + x0] += (T::ONE - t) * g;
                        dib[(ch * h + i) * w + x1] += t * g;
                        if inside {
                            acc += g * (img[row + x1] - img[row + x0]);
                        }
                    }
                    // d x / d offset = -1
                    dob[i * w + j] = -acc;
                }
            }
        });
    (dimg, doff)
}

// ---------------------------------------------------------------------------
// Pooling and resampling

/// Mean over `kh x kw` windows with the given stride, no padding.
pub fn avg_pool_forward<T: Element>(x: &Tensor<T>, k: (usize, usize), s: (usize, usize)) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let oh = (h - k.0) / s.0 + 1;
    let ow = (w - k.1) / s.1 + 1;
    let norm = T::from_f64(1.0 / (k.0 * k.1) as f64);
    Tensor::from_fn(Shape::new(n, c, oh, ow), |[b, ch, oi, oj]| {
        let mut acc = T::ZERO;
        for ki in 0..k.0 {
            for kj in 0..k.1 {
                acc += x.at([b, ch, oi * s.0 + ki, oj * s.1 + kj]);
            }
        }
        acc * norm
    })
}

pub fn avg_pool_backward<T: Element>(in_shape: Shape, gout: &Tensor<T>, k: (usize, usize), s: (usize, usize)) -> Tensor<T> {
    let [n, c, oh, ow] = gout.shape().0;
    let norm = T::from_f64(1.0 / (k.0 * k.1) as f64);
    let mut dx = Tensor::zeros(in_shape);
    for b in 0..n {
        for ch in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let g = gout.at([b, ch, oi, oj]) * norm;
                    for ki in 0..k.0 {
                        for kj in 0..k.1 {
                            let idx = dx.index([b, ch, oi * s.0 + ki, oj * s.1 + kj]);
                            dx.data_mut()[idx] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[inline]
fn window(i: usize, r: usize, len: usize) -> (usize, usize) {
    (i.saturating_sub(r), (i + r + 1).min(len))
}

/// Same-size mean over a `(2r+1)^2` neighbourhood, averaging only in-bounds pixels.
pub fn box_mean_forward<T: Element>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let [_, _, h, w] = x.shape().0;
    Tensor::from_fn(x.shape(), |[b, ch, i, j]| {
        let (i0, i1) = window(i, r, h);
        let (j0, j1) = window(j, r, w);
        let mut acc = T::ZERO;
        for ii in i0..i1 {
            for jj in j0..j1 {
                acc += x.at([b, ch, ii, jj]);
            }
        }
        acc / T::from_f64(((i1 - i0) * (j1 - j0)) as f64)
    })
}

pub fn box_mean_backward<T: Element>(gout: &Tensor<T>, r: usize) -> Tensor<T> {
    let [n, c, h, w] = gout.shape().0;
    let mut dx = Tensor::zeros(gout.shape());
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let (i0, i1) = window(i, r, h);
                    let (j0, j1) = window(j, r, w);
                    let g = gout.at([b, ch, i, j]) / T::from_f64(((i1 - i0) * (j1 - j0)) as f64);
                    for ii in i0..i1 {
                        for jj in j0..j1 {
                            let idx = dx.index([b, ch, ii, jj]);
                            dx.data_mut()[idx] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn upsample2x_forward<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    Tensor::from_fn(Shape::new(n, c, 2 * h, 2 * w), |[b, ch, i, j]| x.at([b, ch, i / 2, j / 2]))
}

pub fn upsample2x_backward<T: Element>(in_shape: Shape, gout: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(in_shape, |[b, ch, i, j]| {
        gout.at([b, ch, 2 * i, 2 * j])
            + gout.at([b, ch, 2 * i, 2 * j + 1])
            + gout.at([b, ch, 2 * i + 1, 2 * j])
            + gout.at([b, ch, 2 * i + 1, 2 * j + 1])
    })
}

// ---------------------------------------------------------------------------
// Broadcasting

/// Element strides of `from` when read with indices of the broadcast shape.
fn broadcast_strides(from: Shape) -> [usize; 4] {
    let s = from.strides();
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = if from.0[d] == 1 { 0 } else { s[d] };
    }
    out
}

pub fn broadcast_binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, out: Shape, f: impl Fn(T, T) -> T + Sync) -> Tensor<T> {
    if a.shape() == out && b.shape() == out {
        return a.zip_map(b, f);
    }
    let sa = broadcast_strides(a.shape());
    let sb = broadcast_strides(b.shape());
    let [n, c, h, w] = out.0;
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(out.numel());
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..w {
                    data.push(f(ad[ba + i3 * sa[3]], bd[bb + i3 * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(out, data).expect("broadcast shape")
}

/// Sum `g` over the axes along which `target` was broadcast.
pub fn reduce_to<T: Element>(g: Tensor<T>, target: Shape) -> Tensor<T> {
    if g.shape() == target {
        return g;
    }
    let st = broadcast_strides(target);
    let [n, c, h, w] = g.shape().0;
    let mut out = Tensor::zeros(target);
    let od = out.data_mut();
    let gd = g.data();
    let mut k = 0;
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..w {
                    od[base + i3 * st[3]] += gd[k];
                    k += 1;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, g: &ConvGeometry) -> Tensor<f64> {
        let (oh, ow) = g.out_hw();
        let n = x.shape().n();
        let co = wt.shape().n();
        Tensor::from_fn(Shape::new(n, co, oh, ow), |[b, o, oi, oj]| {
            let mut acc = 0.0;
            for ci in 0..g.c_in {
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let ii = (oi * g.stride.0 + ki) as isize - g.pad.0 as isize;
                        let jj = (oj * g.stride.1 + kj) as isize - g.pad.1 as isize;
                        if ii >= 0 && jj >= 0 && (ii as usize) < g.h && (jj as usize) < g.w {
                            acc += x.at([b, ci, ii as usize, jj as usize]) * wt.at([o, ci, ki, kj]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive_loops() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(kh, kw, s, p) in &[(3, 5, (1, 1), (1, 2)), (3, 3, (2, 2), (1, 1)), (1, 1, (1, 1), (0, 0)), (2, 3, (2, 1), (0, 1))] {
            let x = Tensor::<f64>::randn(Shape::new(2, 3, 7, 9), 1.0, &mut rng);
            let wt = Tensor::<f64>::randn(Shape::new(4, 3, kh, kw), 1.0, &mut rng);
            let g = ConvGeometry { c_in: 3, h: 7, w: 9, kh, kw, stride: s, pad: p };
            let fast = conv2d_forward(&x, &wt, None, &g);
            let slow = naive_conv(&x, &wt, &g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_matmul_split_matches_single_call() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (m, k, n) = (40, 30, 1500);
        let a = Tensor::<f64>::randn(Shape::new(1, 1, m, k), 1.0, &mut rng);
        let b = Tensor::<f64>::randn(Shape::new(1, 1, k, n), 1.0, &mut rng);
        let mut c = vec![0.0; m * n];
        matmul(m, k, n, Mat::row_major(a.data(), k), Mat::row_major(b.data(), n), &mut c, false);
        for i in [0, 17, 39] {
            for j in [0, 511, 512, 1499] {
                let expect: f64 = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * n + j]).sum();
                assert!((c[i * n + j] - expect).abs() < 1e-10);
            }
        }
    }
}
