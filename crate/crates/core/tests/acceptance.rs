//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Built with `harness = false`.

mod common;

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrdn::eval::kitti_metrics;
use rrdn::losses::{ambiguity_loss, lr_consistency_term, smoothness_factor};
use rrdn::network::{load_checkpoint, param_count_for, save_checkpoint, Network, NetworkConfig, Variant};
use rrdn::pipeline::{infer_image, run_gradient_suite, train, Trainer, TrainConfig, LOG_FILE};
use rrdn::warp::{disocclusion_masks, reconstruct_left, reconstruct_right, warp_left_to_right, warp_right_to_left, View};
use rrdn::{Shape, Tape, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok { Ok(detail) } else { Err(detail) }
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let reports = run_gradient_suite(7).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let failed: Vec<_> = reports.iter().filter(|(_, r)| !r.passed()).map(|(n, r)| format!("{n} ({:.2e})", r.max_rel_error)).collect();
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    check(
        failed.is_empty() && elapsed < Duration::from_secs(60),
        format!("{} cases, worst rel err {worst:.2e}, {:.1}s, failed {failed:?}", reports.len(), elapsed.as_secs_f64()),
    )
}

fn warp_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = Shape::new(2, 3, 6, 8);
    let img = Tensor::<f64>::uniform(s, 0.0, 1.0, &mut rng);
    let other = Tensor::<f64>::uniform(s, 0.0, 1.0, &mut rng);
    let dshape = Shape::new(2, 1, 6, 8);
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(img.clone()), tape.constant(other.clone()));
    let zero = tape.constant(Tensor::zeros(dshape));

    let a = warp_right_to_left(&mut tape, x, zero).map_err(|e| e.to_string())?;
    let b = warp_left_to_right(&mut tape, x, zero).map_err(|e| e.to_string())?;
    let identity = tape.value(a) == &img && tape.value(b) == &img;

    let k = 2usize;
    let two = tape.constant(Tensor::full(dshape, k as f64));
    let rl = warp_right_to_left(&mut tape, x, two).map_err(|e| e.to_string())?;
    let lr = warp_left_to_right(&mut tape, x, two).map_err(|e| e.to_string())?;
    let mut shift = true;
    for n in 0..2 {
        for c in 0..3 {
            for i in 0..6 {
                for j in k..8 - k {
                    shift &= tape.value(rl).at([n, c, i, j]) == img.at([n, c, i, j - k]);
                    shift &= tape.value(lr).at([n, c, i, j]) == img.at([n, c, i, j + k]);
                }
            }
        }
    }

    let d = tape.constant(Tensor::<f64>::uniform(dshape, 0.0, 3.0, &mut rng));
    let mzero = tape.constant(Tensor::zeros(dshape));
    let left = reconstruct_left(&mut tape, x, y, d, mzero).map_err(|e| e.to_string())?;
    let right = reconstruct_right(&mut tape, x, y, d, mzero).map_err(|e| e.to_string())?;
    let passthrough = tape.value(left.image) == &img && tape.value(right.image) == &other;
    check(identity && shift && passthrough, format!("identity {identity}, integer shift {shift}, zero-mask passthrough {passthrough}"))
}

fn disocclusion_geometry() -> Outcome {
    let mut mismatches = Vec::new();
    for w in [1usize, 7, 20, 512] {
        let (l, r) = disocclusion_masks::<f64>(w).map_err(|e| e.to_string())?;
        for j in 0..w {
            // j < 0.15 W and j > 0.85 W, compared in integers
            let left_expect = if 100 * j < 15 * w { 0.0 } else { 1.0 };
            let right_expect = if 100 * j > 85 * w { 0.0 } else { 1.0 };
            if l.at([0, 0, 0, j]) != left_expect || r.at([0, 0, 0, j]) != right_expect {
                mismatches.push((w, j));
            }
        }
    }
    check(mismatches.is_empty(), format!("W in {{1, 7, 20, 512}}, mismatched columns {mismatches:?}"))
}

fn loss_oracles() -> Outcome {
    let s = Shape::new(1, 1, 5, 9);
    let mut tape = Tape::<f64>::new();
    let half = tape.constant(Tensor::full(s, 0.5));
    let amb = ambiguity_loss(&mut tape, half, half).map_err(|e| e.to_string())?;
    let amb = tape.value(amb).item();

    let two = tape.constant(Tensor::full(s, 2.0));
    let zero = tape.constant(Tensor::zeros(s));
    let one = tape.constant(Tensor::full(s, 1.0));
    let lr = lr_consistency_term(&mut tape, View::Left, two, zero, one).map_err(|e| e.to_string())?;
    let lr = tape.value(lr).item();

    let factor = smoothness_factor(0, 0.1);
    let ok = (amb - 2.0 * 2f64.ln()).abs() < 1e-9 && (lr - 2.0).abs() < 1e-9 && (factor - 0.02).abs() < 1e-12;
    check(ok, format!("ambiguity {amb:.12}, lr consistency {lr:.12}, smoothness factor {factor:.15}"))
}

fn metric_oracles() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let g = [1.0, 2.0, 4.0];
    let p: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
    let doubled = kitti_metrics(&p, &g, &[true; 3]).map_err(|e| e.to_string())?;
    let two = kitti_metrics(&[1.0, 1.0], &[1.0, 2.0], &[true, true]).map_err(|e| e.to_string())?;
    let hand = close(doubled.abs_rel, 1.0)
        && (doubled.a1, doubled.a2, doubled.a3) == (0.0, 0.0, 0.0)
        && close(two.abs_rel, 0.25)
        && close(two.rmse, 0.5f64.sqrt())
        && close(two.sq_rel, 0.25)
        && close(two.log_rmse, (2f64.ln().powi(2) / 2.0).sqrt());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ordered = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..80.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g * rng.random_range(0.3..3.0)).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        valid[0] = true;
        let m = kitti_metrics(&pred, &gt, &valid).map_err(|e| e.to_string())?;
        if m.a1 <= m.a2 && m.a2 <= m.a3 {
            ordered += 1;
        }
    }
    check(hand && ordered == 1000, format!("hand cases {hand}, ordering held on {ordered}/1000 maps"))
}

const OVERFIT_SIZE: (usize, usize) = (64, 128);
const OVERFIT_DISPARITY: f32 = 6.0;
const OVERFIT_STEPS: usize = 300;
const BAND: std::ops::Range<usize> = 70..86;

struct OverfitRun {
    losses: Vec<f64>,
    net: Network<f32>,
    samples: Vec<rrdn::pipeline::StereoSample>,
    elapsed: Duration,
}

fn overfit_run() -> rrdn::Result<OverfitRun> {
    let (h, w) = OVERFIT_SIZE;
    let samples: Vec<_> = (0..5)
        .map(|k| {
            let mut s = common::shifted_pair(k, h, w, OVERFIT_DISPARITY);
            common::paint_band(&mut s, BAND, OVERFIT_DISPARITY as usize);
            s
        })
        .collect();
    let widths = [8, 12, 16, 24, 32, 48];
    let config = TrainConfig {
        epochs: OVERFIT_STEPS,
        lr: 5e-4,
        lr_halve_epochs: vec![30, 40],
        batch_size: 1,
        crop: OVERFIT_SIZE,
        augment: false,
        network: NetworkConfig::with_channels(Variant::RRDispNetDtm, &widths, &widths),
        perceptual_channels: [8, 16, 32],
        max_steps: Some(OVERFIT_STEPS),
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let mut trainer = Trainer::new(config)?;
    let mut losses = Vec::new();
    let mut epoch = 0;
    while trainer.steps_taken() < OVERFIT_STEPS {
        trainer.train_epoch(&samples, epoch, |s| {
            losses.push(s.loss.total);
            Ok(())
        })?;
        epoch += 1;
    }
    Ok(OverfitRun { losses, net: trainer.into_network(), samples, elapsed: t0.elapsed() })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn overfit_dynamics(run: &OverfitRun) -> Outcome {
    let (_, w) = OVERFIT_SIZE;
    let start = mean(&run.losses[..10]);
    let end = mean(&run.losses[run.losses.len() - 10..]);
    let reduction = 1.0 - end / start;
    let first_valid = (w as f64 * 0.15).ceil() as usize;
    let mut disp = Vec::new();
    for s in &run.samples {
        let maps = run.net.predict(&s.left).map_err(|e| e.to_string())?.swap_remove(0);
        let [_, _, h, w] = maps.disp_left.shape().0;
        for i in 0..h {
            for j in first_valid..w {
                disp.push(maps.disp_left.at([0, 0, i, j]) as f64);
            }
        }
    }
    disp.sort_by(f64::total_cmp);
    let median = disp[disp.len() / 2];
    let d = OVERFIT_DISPARITY as f64;
    check(
        run.losses.len() == OVERFIT_STEPS && reduction > 0.5 && (median - d).abs() <= 0.3 * d && run.elapsed < Duration::from_secs(900),
        format!(
            "{} steps, loss {start:.4} -> {end:.4} ({:.1}% reduction), median D_L {median:.3} vs d* {d}, {:.0}s",
            run.losses.len(),
            100.0 * reduction,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn mask_behaviour(run: &OverfitRun) -> Outcome {
    let (_, w) = OVERFIT_SIZE;
    let (occ_l, occ_r) = disocclusion_masks::<f32>(w).map_err(|e| e.to_string())?;
    let shift = OVERFIT_DISPARITY as usize;
    let left_band = BAND.start + shift..BAND.end + shift;
    let (mut band_r, mut rest_r, mut band_l, mut rest_l) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in &run.samples {
        let maps = run.net.predict(&s.left).map_err(|e| e.to_string())?.swap_remove(0);
        let [_, _, h, _] = maps.mask_right.shape().0;
        for i in 0..h {
            for j in 0..w {
                let in_band = BAND.contains(&j) || left_band.contains(&j);
                if occ_r.at([0, 0, 0, j]) == 1.0 {
                    let a = (maps.mask_right.at([0, 0, i, j]) * occ_r.at([0, 0, 0, j])) as f64;
                    if BAND.contains(&j) {
                        band_r.push(a);
                    } else if !in_band {
                        rest_r.push(a);
                    }
                }
                if occ_l.at([0, 0, 0, j]) == 1.0 {
                    let a = (maps.mask_left.at([0, 0, i, j]) * occ_l.at([0, 0, 0, j])) as f64;
                    if left_band.contains(&j) {
                        band_l.push(a);
                    } else if !in_band {
                        rest_l.push(a);
                    }
                }
            }
        }
    }
    let (br, rr, bl, rl) = (mean(&band_r), mean(&rest_r), mean(&band_l), mean(&rest_l));
    check(
        br < rr && bl < rl && rr > 0.8 && rl > 0.8,
        format!("right band {br:.3} vs rest {rr:.3}, left band {bl:.3} vs rest {rl:.3}"),
    )
}

fn parameter_calibration() -> Outcome {
    let targets = [(Variant::RDispNetM, 12.8e6), (Variant::RRDispNetM, 14.2e6), (Variant::RRDispNetDtm, 16.0e6)];
    let mut counts = Vec::new();
    let mut within = true;
    for (v, target) in targets {
        let n = param_count_for(&NetworkConfig::new(v)).map_err(|e| e.to_string())?;
        within &= (n as f64 - target).abs() <= 0.2 * target;
        counts.push(n);
    }
    let ordered = counts[0] < counts[1] && counts[1] < counts[2];
    check(within && ordered, format!("rdispnet_m {}, rrdispnet_m {}, rrdispnet_dtm {}", counts[0], counts[1], counts[2]))
}

fn single_pass() -> Outcome {
    let net = Network::<f32>::build(NetworkConfig::new(Variant::RRDispNetDtm), 3).map_err(|e| e.to_string())?;
    let (h, w) = (50, 100);
    let img = common::random_image(1, h, w);
    let one = infer_image(&net, &img, false).map_err(|e| e.to_string())?;
    let two = infer_image(&net, &img, true).map_err(|e| e.to_string())?;
    let full = Shape::new(1, 1, h, w);
    let shapes = [&one.disp_left, &one.disp_right, &one.mask_left, &one.mask_right].iter().all(|t| t.shape() == full);
    check(
        one.forward_calls == 1 && two.forward_calls == 2 && shapes,
        format!("forward passes {} without pp and {} with, four {h}x{w} maps {shapes}", one.forward_calls, two.forward_calls),
    )
}

fn determinism() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().map_err(|e| e.to_string())?;
    let data = common::random_samples(40, 3, 24, 40);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let out = dir.path().join(name);
        pool.install(|| train(common::tiny_train_config(), &data, &out)).map_err(|e| e.to_string())?;
        let log = fs::read(out.join(LOG_FILE)).map_err(|e| e.to_string())?;
        let ckpt = fs::read(out.join("latest.rrdn")).map_err(|e| e.to_string())?;
        Ok((log, ckpt))
    };
    let (log_a, ckpt_a) = run("a")?;
    let (log_b, ckpt_b) = run("b")?;

    let net: Network<f32> = load_checkpoint(&dir.path().join("a/latest.rrdn")).map_err(|e| e.to_string())?;
    let again = dir.path().join("again.rrdn");
    save_checkpoint(&again, &net).map_err(|e| e.to_string())?;
    let reloaded: Network<f32> = load_checkpoint(&again).map_err(|e| e.to_string())?;
    let bits = |n: &Network<f32>| n.params().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    let round_trip = fs::read(&again).map_err(|e| e.to_string())? == ckpt_a && bits(&net) == bits(&reloaded);
    let lines = log_a.iter().filter(|&&b| b == b'\n').count();
    check(
        log_a == log_b && ckpt_a == ckpt_b && round_trip && lines > 1,
        format!("{} logged steps identical {}, checkpoints identical {}, round trip bitwise {round_trip}", lines - 1, log_a == log_b, ckpt_a == ckpt_b),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{n:>2}] {name}: {detail}");
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "warp identities", warp_identities());
    report(3, "dis-occlusion geometry", disocclusion_geometry());
    report(4, "loss oracles", loss_oracles());
    report(5, "metric oracles", metric_oracles());
    match overfit_run() {
        Ok(run) => {
            report(6, "overfit dynamics", overfit_dynamics(&run));
            report(7, "mask behaviour", mask_behaviour(&run));
        }
        Err(e) => {
            report(6, "overfit dynamics", Err(e.to_string()));
            report(7, "mask behaviour", Err("overfit run failed".into()));
        }
    }
    report(8, "parameter calibration", parameter_calibration());
    report(9, "single-pass inference", single_pass());
    report(10, "determinism", determinism());
    if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
