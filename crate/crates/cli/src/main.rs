//! `bilagrid` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use bilagrid::GridDims;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "bilagrid", version, about = "Multi-view photometric harmonization with bilateral grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    /// 64×64 input, 16×16 patches, C = 64, 3 + 3 blocks, D = 8.
    Desk,
    /// 16×16 input, 8×8 patches, C = 16, 1 + 1 blocks, D = 4.
    Tiny,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene, corrupt it with per-frame ISP variation
    /// and write frames, ground truth, parameters and a manifest.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value_t = 0.7)]
        severity: f64,
        /// Frame size as HxW.
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
    },
    /// Fit one bilateral grid mapping a source image onto a target.
    FitGrid {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long = "lambda-tv", default_value_t = 1e-3)]
        lambda_tv: f64,
        /// Grid size as ROWSxCOLSxBINS.
        #[arg(long, default_value = "8x8x8", value_parser = parse_dims)]
        dims: GridDims,
        /// Also write the corrected source image.
        #[arg(long)]
        corrected: Option<PathBuf>,
    },
    /// Train the grid transformer and write a checkpoint plus a CSV log.
    Train {
        /// Directory of sequence manifests, or `synthetic`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long = "lambda-tv", default_value_t = 1e-3)]
        lambda_tv: f64,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long = "weight-decay", default_value_t = 1e-4)]
        weight_decay: f64,
        /// Frames sampled per training step.
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value_t = 0.7)]
        severity: f64,
        /// Number of synthetic scenes.
        #[arg(long, default_value_t = 32)]
        scenes: usize,
        #[arg(long, value_enum, default_value_t = ModelSize::Desk)]
        model: ModelSize,
        /// CSV log path (defaults to the checkpoint path with a .csv extension).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long = "no-augment")]
        no_augment: bool,
        /// Progress report interval on stderr; 0 disables it.
        #[arg(long = "log-every", default_value_t = 100)]
        log_every: usize,
    },
    /// Harmonize every source frame of a sequence toward its reference.
    Harmonize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Confidence-weighted toy reconstruction from harmonized frames.
    ReconDemo {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Share of iterations that use the confidence weights.
        #[arg(long, default_value_t = 0.25)]
        fraction: f64,
    },
    /// PSNR / SSIM (raw and colour-corrected) of renders against ground truth.
    Eval {
        #[arg(long)]
        renders: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Slicing oracle, gradient checks and soft-threshold cases.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split('x').collect();
    match parts.as_slice() {
        [h, w] => {
            let h: usize = h.parse().map_err(|e| format!("bad height in {s:?}: {e}"))?;
            let w: usize = w.parse().map_err(|e| format!("bad width in {s:?}: {e}"))?;
            if h == 0 || w == 0 {
                return Err(format!("size {s:?} must be positive"));
            }
            Ok((h, w))
        }
        _ => Err(format!("expected HxW, got {s:?}")),
    }
}

fn parse_dims(s: &str) -> Result<GridDims, String> {
    let parts: Result<Vec<usize>, _> = s.split('x').map(str::parse).collect();
    match parts.map_err(|e| format!("bad grid size {s:?}: {e}"))?.as_slice() {
        &[r, c, d] => GridDims::new(r, c, d).map_err(|e| e.to_string()),
        _ => Err(format!("expected ROWSxCOLSxBINS, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
