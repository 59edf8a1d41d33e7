mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rrdn::eval::{kitti_metrics, pp_blend, warp_rmse};
use rrdn::losses::{perceptual_loss, FeatureExtractor};
use rrdn::{Shape, Tape, Tensor};

fn tensor(seed: u64, shape: Shape) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn sparse_map() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (1usize..64).prop_flat_map(|n| {
        (
            prop::collection::vec(1e-2f64..100.0, n),
            prop::collection::vec(0.5f64..80.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(p, g, mut v)| {
                v[0] = true;
                (p, g, v)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_its_input(seed in any::<u64>(), a in -3.0f64..3.0, stride in 1usize..3) {
        let xs = Shape::new(2, 3, 6, 8);
        let (x, y, w) = (tensor(seed, xs), tensor(seed ^ 1, xs), tensor(seed ^ 2, Shape::new(4, 3, 3, 5)));
        let mut t = Tape::<f64>::new();
        let (xv, yv, wv) = (t.constant(x), t.constant(y), t.constant(w));
        let ax = t.scale(xv, a);
        let mix = t.add(ax, yv).unwrap();
        let lhs = t.conv2d(mix, wv, None, (stride, stride), (1, 2)).unwrap();
        let cx = t.conv2d(xv, wv, None, (stride, stride), (1, 2)).unwrap();
        let cy = t.conv2d(yv, wv, None, (stride, stride), (1, 2)).unwrap();
        let acx = t.scale(cx, a);
        let rhs = t.add(acx, cy).unwrap();
        for (l, r) in t.value(lhs).data().iter().zip(t.value(rhs).data()) {
            prop_assert!((l - r).abs() < 1e-10, "{l} vs {r}");
        }
    }

    #[test]
    fn threshold_accuracies_are_nested((p, g, v) in sparse_map()) {
        let m = kitti_metrics(&p, &g, &v).unwrap();
        prop_assert!(m.a1 <= m.a2 && m.a2 <= m.a3);
        for a in [m.a1, m.a2, m.a3] {
            prop_assert!((0.0..=1.0).contains(&a));
        }
        prop_assert!(m.rmse >= 0.0 && m.log_rmse >= 0.0);
    }

    #[test]
    fn metrics_ignore_pixel_order((p, g, v) in sparse_map(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pick = |xs: &[f64]| idx.iter().map(|&i| xs[i]).collect::<Vec<_>>();
        let vs: Vec<bool> = idx.iter().map(|&i| v[i]).collect();
        let (a, b) = (kitti_metrics(&p, &g, &v).unwrap(), kitti_metrics(&pick(&p), &pick(&g), &vs).unwrap());
        for (x, y) in [(a.abs_rel, b.abs_rel), (a.sq_rel, b.sq_rel), (a.rmse, b.rmse), (a.log_rmse, b.log_rmse), (a.a1, b.a1), (a.a2, b.a2), (a.a3, b.a3)] {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn exact_prediction_has_zero_error((_, g, v) in sparse_map()) {
        let m = kitti_metrics(&g, &g, &v).unwrap();
        prop_assert_eq!((m.rmse, m.log_rmse, m.abs_rel), (0.0, 0.0, 0.0));
        prop_assert_eq!((m.a1, m.a2, m.a3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn pp_blend_commutes_with_mirroring(seed in any::<u64>(), w in 1usize..70) {
        let s = Shape::new(1, 1, 3, w);
        let (a, b) = (tensor(seed, s), tensor(seed ^ 7, s));
        let lhs = pp_blend(&a, &b).unwrap().flip_w();
        let rhs = pp_blend(&b.flip_w(), &a.flip_w()).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() < 1e-12);
        }
        // identical passes blend to themselves
        let same = pp_blend(&a, &a).unwrap();
        for (l, r) in same.data().iter().zip(a.data()) {
            prop_assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_rmse_of_an_image_with_itself_is_zero(seed in any::<u64>(), h in 1usize..6, w in 1usize..12) {
        let img = Tensor::<f64>::uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(warp_rmse(&img, &img, &Tensor::zeros(Shape::new(1, 1, h, w))).unwrap(), 0.0);
    }

    #[test]
    fn perceptual_loss_is_non_negative(seed in any::<u64>()) {
        let fx = FeatureExtractor::<f64>::seeded([3, 4, 5], seed).unwrap();
        let mut t = Tape::new();
        let b = fx.bind(&mut t);
        let s = Shape::new(1, 3, 8, 12);
        let x = t.constant(tensor(seed ^ 3, s).map(|v: f64| v.abs()));
        let y = t.constant(tensor(seed ^ 4, s).map(|v: f64| v.abs()));
        let l = perceptual_loss(&mut t, x, y, &b).unwrap();
        prop_assert!(t.value(l).item() >= 0.0);
    }
}

#[test]
fn scrambling_the_reconstruction_raises_perceptual_loss() {
    let fx = FeatureExtractor::<f32>::default_weights().unwrap();
    let (h, w) = (32, 48);
    let image = common::shifted_pair(3, h, w, 0.0).left;
    // a slightly shifted copy stands in for a good reconstruction
    let close = common::shifted_pair(3, h, w, 0.5).left;
    let mut order: Vec<usize> = (0..h * w).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let scrambled = Tensor::from_fn(close.shape(), |[n, c, i, j]| {
        let k = order[i * w + j];
        close.at([n, c, k / w, k % w])
    });
    let loss = |recon: &Tensor<f32>| {
        let mut t = Tape::new();
        let b = fx.bind(&mut t);
        let (x, y) = (t.constant(image.clone()), t.constant(recon.clone()));
        let l = perceptual_loss(&mut t, x, y, &b).unwrap();
        t.value(l).item()
    };
    let (good, bad) = (loss(&close), loss(&scrambled));
    assert!(bad > good, "scrambled {bad} <= intact {good}");
}
