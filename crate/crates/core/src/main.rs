use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};

use rrdn::eval::EvalReport;
use rrdn::network::{self, param_count_for, Network};
use rrdn::pipeline::{self, EvalOptions, TrainConfig};
use rrdn::Error;

#[derive(Parser)]
#[command(name = "rrdn", version, about = "Unsupervised monocular disparity with ambiguity masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on a manifest of stereo pairs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict disparity and ambiguity masks for one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Blend in a second pass on the mirrored image.
        #[arg(long)]
        pp: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against sparse ground-truth disparity.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of 16-bit PNGs named after each left image.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pp: bool,
        /// Compare depths instead of disparities.
        #[arg(long)]
        depth_space: bool,
        /// Focal length in pixels (defaults to KITTI's, scaled to the GT width).
        #[arg(long)]
        focal: Option<f64>,
        #[arg(long, default_value_t = rrdn::eval::KITTI_BASELINE)]
        baseline: f64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Print the parameter count of a network configuration.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("RRDN_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::Config(format!("RRDN_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(Error::Config("RRDN_THREADS must be a positive integer, got `0`".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train { config, manifest, out } => {
            let cfg = TrainConfig::load(&config)?;
            let data = pipeline::load_pairs(&manifest)?;
            eprintln!("training {} on {} pairs ({} parameters)", cfg.network.variant, data.len(), param_count_for(&cfg.network)?);
            let outcome = pipeline::train(cfg, &data, &out)?;
            let last = outcome.logs.last().map(|l| l.loss.total).unwrap_or(f64::NAN);
            println!("steps={} final_loss={last:.6} checkpoint={}", outcome.steps, out.join("latest.rrdn").display());
        }
        Command::Infer { checkpoint, image, pp, out } => {
            let net: Network<f32> = network::load_checkpoint(&checkpoint)?;
            let img = pipeline::load_image(&image)?;
            let inf = pipeline::infer_image(&net, &img, pp)?;
            for p in pipeline::write_inference(&out, &inf)? {
                println!("{}", p.display());
            }
        }
        Command::Eval { checkpoint, manifest, gt, pp, depth_space, focal, baseline, report } => {
            let net: Network<f32> = network::load_checkpoint(&checkpoint)?;
            let samples = pipeline::load_pairs(&manifest)?;
            let gts = samples
                .iter()
                .map(|s| pipeline::load_sparse_disparity(&pipeline::gt_path_for(&gt, &s.left_path)))
                .collect::<rrdn::Result<Vec<_>>>()?;
            let opts = EvalOptions { pp, depth_space, focal, baseline };
            let model = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let r = pipeline::evaluate(&net, &model, &samples, &gts, &opts)?;
            let text = EvalReport::to_csv(std::slice::from_ref(&r));
            std::fs::write(&report, &text).map_err(|e| Error::io(&report, e))?;
            print!("{text}");
        }
        Command::Gradcheck { seed } => {
            let t0 = Instant::now();
            let mut failed = 0;
            for (name, r) in pipeline::run_gradient_suite(seed)? {
                let status = if r.passed() { "ok" } else { "FAIL" };
                failed += usize::from(!r.passed());
                println!("{status:4} {name:32} checked={:5} max_rel={:.2e} max_abs={:.2e}", r.checked, r.max_rel_error, r.max_abs_error);
            }
            println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
            if failed > 0 {
                return Err(Error::invalid("gradcheck", format!("{failed} gradient checks failed")).into());
            }
        }
        Command::Params { config } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let cfg = network::NetworkConfig::from_kv(&rrdn::kv::KeyValues::parse(&text)?)?;
            println!("{}", param_count_for(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<Error>().map(Error::kind).unwrap_or("internal");
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {kind}: {msg}");
            ExitCode::FAILURE
        }
    }
}
