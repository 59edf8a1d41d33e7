//! Backward warping, dis-occlusion masks and the ambiguity-masked view
//! reconstruction.
//!
//! Sign convention: a scene point at left-image column `j` appears at
//! right-image column `j - d`. The left view is reconstructed by sampling the
//! right image at `j - D_L`; the right view by sampling the left image at
//! `j + D_R`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Fraction of the width treated as dis-occluded at each side.
pub const DISOCCLUSION_FRACTION: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Left,
    Right,
}

impl View {
    pub fn other(self) -> View {
        match self {
            View::Left => View::Right,
            View::Right => View::Left,
        }
    }
}

fn check_disparity<T: Element>(tape: &Tape<T>, d: Var, op: &'static str) -> Result<()> {
    if let Some(bad) = tape.value(d).data().iter().find(|v| !(**v >= T::ZERO)) {
        return Err(Error::invalid(op, format!("disparity {bad} is negative or NaN")));
    }
    Ok(())
}

/// `g(I_R, D_L)`: sample the right image at column `j - D_L(i, j)`.
pub fn warp_right_to_left<T: Element>(tape: &mut Tape<T>, right: Var, disp_left: Var) -> Result<Var> {
    check_disparity(tape, disp_left, "warp_right_to_left")?;
    tape.bilinear_hsample(right, disp_left)
}

/// `g(I_L, D_R)`: sample the left image at column `j + D_R(i, j)`.
pub fn warp_left_to_right<T: Element>(tape: &mut Tape<T>, left: Var, disp_right: Var) -> Result<Var> {
    check_disparity(tape, disp_right, "warp_left_to_right")?;
    let neg = tape.neg(disp_right);
    tape.bilinear_hsample(left, neg)
}

/// Warp `source` (the other view) into `view` using `view`'s disparity.
pub fn warp_into<T: Element>(tape: &mut Tape<T>, view: View, source: Var, disp: Var) -> Result<Var> {
    match view {
        View::Left => warp_right_to_left(tape, source, disp),
        View::Right => warp_left_to_right(tape, source, disp),
    }
}

/// Left mask: 0 where `j < 0.15 W`; right mask: 0 where `j > 0.85 W`.
///
/// Columns are 0-based and thresholds are compared unrounded. Both masks are
/// `1x1x1xW` and broadcast over batch and rows.
pub fn disocclusion_masks<T: Element>(w: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if w == 0 {
        return Err(Error::invalid("disocclusion_masks", "width must be >= 1"));
    }
    let wf = w as f64;
    let left = Tensor::from_fn(Shape::new(1, 1, 1, w), |[_, _, _, j]| {
        if (j as f64) < DISOCCLUSION_FRACTION * wf { T::ZERO } else { T::ONE }
    });
    let right = Tensor::from_fn(Shape::new(1, 1, 1, w), |[_, _, _, j]| {
        if (j as f64) > (1.0 - DISOCCLUSION_FRACTION) * wf { T::ZERO } else { T::ONE }
    });
    Ok((left, right))
}

pub fn disocclusion_mask<T: Element>(view: View, w: usize) -> Result<Tensor<T>> {
    let (l, r) = disocclusion_masks(w)?;
    Ok(match view {
        View::Left => l,
        View::Right => r,
    })
}

/// `ã = a ⊙ dis_occ` for the given view.
pub fn combined_mask<T: Element>(tape: &mut Tape<T>, view: View, mask: Var) -> Result<Var> {
    let w = tape.shape(mask).w();
    let occ = tape.constant(disocclusion_mask(view, w)?);
    tape.mul(mask, occ)
}

#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    /// `ã ⊙ g(other, D) + (1 - ã) ⊙ I`.
    pub image: Var,
    /// `g(other, D)` on its own.
    pub warped: Var,
    /// The dis-occlusion-combined mask `ã`.
    pub combined_mask: Var,
}

/// Ambiguity-masked reconstruction of `view`:
/// `Ĩ = ã ⊙ g(I_other, D) + (1 - ã) ⊙ I`, with `ã = a ⊙ dis_occ`.
///
/// `image` and `other` are data; gradients flow to `disp` and `mask`.
pub fn reconstruct<T: Element>(
    tape: &mut Tape<T>,
    view: View,
    image: Var,
    other: Var,
    disp: Var,
    mask: Var,
) -> Result<Reconstruction> {
    let (si, so) = (tape.shape(image), tape.shape(other));
    let [n, _, h, w] = si.0;
    if si != so {
        return Err(Error::shape("reconstruct", format!("view images {si} and {so} differ")));
    }
    for (name, v) in [("disparity", disp), ("mask", mask)] {
        let s = tape.shape(v);
        if s != Shape::new(n, 1, h, w) {
            return Err(Error::shape("reconstruct", format!("{name} {s} must be {}", Shape::new(n, 1, h, w))));
        }
    }
    let warped = warp_into(tape, view, other, disp)?;
    let combined = combined_mask(tape, view, mask)?;
    let a_warp = tape.mul(combined, warped)?;
    let keep = tape.rsub_scalar(1.0, combined);
    let a_keep = tape.mul(keep, image)?;
    let image = tape.add(a_warp, a_keep)?;
    Ok(Reconstruction { image, warped, combined_mask: combined })
}

pub fn reconstruct_left<T: Element>(tape: &mut Tape<T>, left: Var, right: Var, disp_left: Var, mask_left: Var) -> Result<Reconstruction> {
    reconstruct(tape, View::Left, left, right, disp_left, mask_left)
}

pub fn reconstruct_right<T: Element>(tape: &mut Tape<T>, left: Var, right: Var, disp_right: Var, mask_right: Var) -> Result<Reconstruction> {
    reconstruct(tape, View::Right, right, left, disp_right, mask_right)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |[_, c, i, j]| j as f64 + 0.1 * i as f64 + 0.01 * c as f64)
    }

    #[test]
    fn masks_at_width_20() {
        let (l, r) = disocclusion_masks::<f64>(20).unwrap();
        let zl: Vec<usize> = (0..20).filter(|&j| l.data()[j] == 0.0).collect();
        let zr: Vec<usize> = (0..20).filter(|&j| r.data()[j] == 0.0).collect();
        assert_eq!(zl, vec![0, 1, 2]);
        assert_eq!(zr, vec![18, 19]);
    }

    #[test]
    fn masks_at_width_1() {
        let (l, r) = disocclusion_masks::<f64>(1).unwrap();
        assert_eq!(l.data(), &[0.0]);
        assert_eq!(r.data(), &[1.0]);
        assert!(disocclusion_masks::<f64>(0).is_err());
    }

    #[test]
    fn zero_disparity_is_identity() {
        let shape = Shape::new(1, 3, 4, 9);
        let mut tape = Tape::new();
        let right = tape.constant(ramp(shape));
        let d = tape.constant(Tensor::zeros(Shape::new(1, 1, 4, 9)));
        let g = warp_right_to_left(&mut tape, right, d).unwrap();
        assert_eq!(tape.value(g), tape.value(right));
    }

    #[test]
    fn constant_disparity_shifts_ramp() {
        let shape = Shape::new(1, 1, 3, 10);
        let mut tape = Tape::new();
        let right = tape.constant(Tensor::from_fn(shape, |[_, _, _, j]| j as f64));
        let d = tape.constant(Tensor::full(shape, 2.0));
        let g = warp_right_to_left(&mut tape, right, d).unwrap();
        for j in 2..10 {
            assert_eq!(tape.value(g).at([0, 0, 1, j]), j as f64 - 2.0);
        }
        // j - 2 < 0 clamps to column 0
        assert_eq!(tape.value(g).at([0, 0, 1, 0]), 0.0);
        assert_eq!(tape.value(g).at([0, 0, 1, 1]), 0.0);

        let l2r = warp_left_to_right(&mut tape, right, d).unwrap();
        for j in 0..8 {
            assert_eq!(tape.value(l2r).at([0, 0, 0, j]), j as f64 + 2.0);
        }
    }

    #[test]
    fn negative_disparity_rejected() {
        let shape = Shape::new(1, 1, 2, 4);
        let mut tape = Tape::<f64>::new();
        let img = tape.constant(Tensor::zeros(shape));
        let d = tape.constant(Tensor::full(shape, -0.5));
        assert!(warp_right_to_left(&mut tape, img, d).is_err());
        assert!(warp_left_to_right(&mut tape, img, d).is_err());
    }

    #[test]
    fn reconstruction_limits() {
        let shape = Shape::new(2, 3, 4, 20);
        let mshape = Shape::new(2, 1, 4, 20);
        let left_t = Tensor::from_fn(shape, |[b, c, i, j]| ((b + c + i * j) % 7) as f64 / 7.0);
        let right_t = ramp(shape);
        let mut tape = Tape::new();
        let left = tape.constant(left_t.clone());
        let right = tape.constant(right_t.clone());
        let d = tape.constant(Tensor::full(mshape, 1.5));

        let zero = tape.constant(Tensor::zeros(mshape));
        let r0 = reconstruct_left(&mut tape, left, right, d, zero).unwrap();
        assert_eq!(tape.value(r0.image), &left_t);

        let one = tape.constant(Tensor::full(mshape, 1.0));
        let r1 = reconstruct_left(&mut tape, left, right, d, one).unwrap();
        let warped = tape.value(r1.warped).clone();
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    for j in 0..20 {
                        let got = tape.value(r1.image).at([b, c, i, j]);
                        if j < 3 {
                            assert_eq!(got, left_t.at([b, c, i, j]));
                        } else {
                            assert_eq!(got, warped.at([b, c, i, j]));
                        }
                    }
                }
            }
        }

        let zd = tape.constant(Tensor::zeros(mshape));
        let r = reconstruct_right(&mut tape, left, right, zd, one).unwrap();
        for j in 0..18 {
            assert_eq!(tape.value(r.image).at([1, 2, 3, j]), left_t.at([1, 2, 3, j]));
        }
    }
}
