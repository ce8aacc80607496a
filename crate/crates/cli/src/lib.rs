//! Command-line driver: argument parsing, the shared run config and the
//! subcommands. `main` only forwards to [`run`].

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use lataug::data::MotionKind;

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "lataug", version, about = "Learned latent-space augmentation for video frames")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic video as PNG frames plus its ground-truth motion.
    SynthData {
        #[arg(long)]
        kind: MotionKind,
        #[arg(long, default_value_t = 64)]
        length: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        /// Per-frame motion; defaults depend on the kind.
        #[arg(long)]
        amplitude: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the adversarial autoencoder.
    TrainStage1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the latent dynamics matrix on encoded frame pairs.
    FitStage2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        aae: PathBuf,
        #[arg(long)]
        videos: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional GAN decoder.
    TrainStage3 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        aae: PathBuf,
        #[arg(long = "dyn")]
        dynamics: PathBuf,
        #[arg(long)]
        videos: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly fine-tune encoder, dynamics and generator.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        aae: PathBuf,
        #[arg(long = "dyn")]
        dynamics: PathBuf,
        #[arg(long)]
        cgan: PathBuf,
        #[arg(long)]
        videos: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterate the unified model over a directory of images.
    Augment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 5)]
        iterations: usize,
        #[arg(long, default_value_t = 0.4)]
        ssim_lo: f64,
        #[arg(long, default_value_t = 0.98)]
        ssim_hi: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-video PCA spectra of the latent codes.
    AnalyzeVariance {
        #[arg(long)]
        aae: PathBuf,
        #[arg(long)]
        videos: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        target: f64,
        /// Also score how well this video's codes separate from the rest.
        #[arg(long)]
        probe_video: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn execute(cmd: Command) -> lataug::Result<()> {
    use commands::*;
    match cmd {
        Command::SynthData {
            kind,
            length,
            resolution,
            amplitude,
            seed,
            out,
        } => synth_data(kind, length, resolution, amplitude.unwrap_or(default_amplitude(kind)), seed, &out),
        Command::TrainStage1 { config, data, out } => train_stage1_cmd(&RunConfig::load(&config)?, &data, &out),
        Command::FitStage2 { config, aae, videos, out } => fit_stage2_cmd(&RunConfig::load(&config)?, &aae, &videos, &out),
        Command::TrainStage3 {
            config,
            aae,
            dynamics,
            videos,
            out,
        } => train_stage3_cmd(&RunConfig::load(&config)?, &aae, &dynamics, &videos, &out),
        Command::Finetune {
            config,
            aae,
            dynamics,
            cgan,
            videos,
            out,
        } => finetune_cmd(&RunConfig::load(&config)?, &aae, &dynamics, &cgan, &videos, &out),
        Command::Augment {
            model,
            images,
            iterations,
            ssim_lo,
            ssim_hi,
            out,
        } => augment_cmd(&model, &images, iterations, ssim_lo, ssim_hi, &out),
        Command::AnalyzeVariance {
            aae,
            videos,
            target,
            probe_video,
            out,
        } => analyze_variance_cmd(&aae, &videos, target, probe_video.as_deref(), &out),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            }
        }
    }
}
