//! Command-line front end: patch extraction, training, inpainting, evaluation and the
//! observer-study service.

pub mod commands;
pub mod config;
pub mod error;
#[allow(clippy::result_large_err)]
pub mod study;

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use cxinpaint_core::metrics::MetricRegion;

use crate::commands::{eval, extract, inpaint, train};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "cxinpaint", version, about = "Context-encoder inpainting of chest X-ray patches")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RegionArg {
    Central,
    Full,
}

impl From<RegionArg> for MetricRegion {
    fn from(r: RegionArg) -> Self {
        match r {
            RegionArg::Central => MetricRegion::Central,
            RegionArg::Full => MetricRegion::Full,
        }
    }
}

fn parse_crop(s: &str) -> Result<(usize, usize), String> {
    let (x, y) = s.split_once(',').ok_or("expected X,Y")?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(x)?, num(y)?))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop random lung-field patches from every image in a manifest.
    ExtractPatches {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        images_dir: PathBuf,
        /// Output directory for patches.csv and patches.cxpd.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        patches_per_image: usize,
        #[arg(long, default_value_t = 128)]
        patch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON file overriding the lung bounding boxes.
        #[arg(long)]
        lung_boxes: Option<PathBuf>,
    },
    /// Train the generator and discriminator on a patch set.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Patch directory (or .cxpd store) written by extract-patches.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct the central region of an image.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the diff map to this path.
        #[arg(long)]
        emit_diff: Option<PathBuf>,
        /// Top-left corner X,Y of the model-sized window inside a larger image.
        #[arg(long, value_parser = parse_crop)]
        crop: Option<(usize, usize)>,
    },
    /// Score reconstructions of indexed patches (MSE, PSNR, SSIM).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        patch_index: PathBuf,
        /// Patch store; defaults to the index path with a .cxpd extension.
        #[arg(long)]
        patches: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "central")]
        region: RegionArg,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Serve the two-alternative forced-choice observer study.
    ServeStudy {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// CSV with original,reconstructed image paths.
        #[arg(long)]
        pairs_manifest: PathBuf,
        /// Append-only JSON-lines response log.
        #[arg(long)]
        results_path: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trials per session (default: every pair).
        #[arg(long)]
        trials: Option<usize>,
    },
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::ExtractPatches { manifest, images_dir, out, patches_per_image, patch_size, seed, lung_boxes } => {
            let args =
                extract::ExtractArgs { manifest, images_dir, out, patches_per_image, patch_size, seed, lung_boxes };
            println!("{}", extract::run(&args)?);
        }
        Command::Train { config, data, out_dir, resume } => {
            let outcome = train::run(&train::TrainArgs { config, data, out_dir, resume }, |line| eprintln!("{line}"))?;
            println!(
                "trained {} epochs ({} iterations); best validation L2 {}",
                outcome.epochs,
                outcome.iterations,
                outcome.best_validation.map_or("n/a".into(), |v| format!("{v:.6}"))
            );
        }
        Command::Inpaint { checkpoint, image, out, emit_diff, crop } => {
            inpaint::run(&inpaint::InpaintArgs { checkpoint, image, out, emit_diff, crop })?;
        }
        Command::Eval { checkpoint, patch_index, patches, report, region, batch_size } => {
            let args = eval::EvalArgs { checkpoint, patch_index, patches, report, region: region.into(), batch_size };
            let r = eval::run(&args)?;
            let (m, p, s) = (r.mse(), r.psnr(), r.ssim());
            println!(
                "{} pairs: MSE {:.2} ± {:.2}, PSNR {:.2} ± {:.2} dB, SSIM {:.3} ± {:.3}",
                r.records.len(),
                m.mean,
                m.std,
                p.mean,
                p.std,
                s.mean,
                s.std
            );
        }
        Command::ServeStudy { port, host, pairs_manifest, results_path, seed, trials } => {
            let pairs = study::read_pairs(&pairs_manifest)?;
            let cfg = study::StudyConfig { pairs, results_path, seed, trials_per_session: trials };
            let study = Arc::new(study::Study::new(cfg)?);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                eprintln!("serving study on http://{}", listener.local_addr()?);
                study::serve(listener, study).await
            })?;
        }
    }
    Ok(())
}

pub fn exit_code(result: &CliResult<()>) -> u8 {
    result.as_ref().err().map_or(0, CliError::exit_code)
}
