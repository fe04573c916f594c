//! `gsplat`: render scenes, fit frames, run the online stream, generate
//! synthetic sequences and score renders.
//!
//! Exit codes: 0 success, 2 input or config error, 3 render error,
//! 4 optimization divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::Failure;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "gsplat", version, about = "Streaming dynamic Gaussian splatting")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 = one per core. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PredictorKind {
    Fixture,
    Fit,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Render a scene JSON at one time into rgb.ppm, depth.gsdp and alpha.gsdp.
    Render {
        scene: PathBuf,
        /// Defaults to the scene's frame time.
        #[arg(long)]
        time: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit Gaussians to every frame of a directory and deformations between neighbors.
    Fit {
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Place every Gaussian at its mean offset instead of sampling candidates.
        #[arg(long)]
        deterministic_init: bool,
    },
    /// Run the online reconstruction loop over a frame directory.
    Stream {
        frames: PathBuf,
        #[arg(long, value_enum, default_value_t = PredictorKind::Fit)]
        predictor: PredictorKind,
        /// Fixture file for the fixture predictor.
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// Resume from a checkpoint; frames up to its index are skipped.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many frames of the directory.
        #[arg(long)]
        max_frames: Option<usize>,
        /// Also write a checkpoint every N frames.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Abort on the first failing step.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        deterministic_init: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic RGB-D sequence with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        blobs: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        depth_noise: Option<f64>,
        /// JSON scene spec; overrides the random layout.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Compare two frame directories: per-frame and mean PSNR, SSIM and depth loss.
    Metrics {
        rendered: PathBuf,
        reference: PathBuf,
        /// Writes metrics.jsonl and summary.json here; otherwise prints the summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::input)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::input(format!("thread pool: {e}")))?;

    match cli.cmd {
        Cmd::Render { scene, time, out } => commands::render(&cfg, &scene, time, &out),
        Cmd::Fit {
            frames,
            out,
            deterministic_init,
        } => {
            cfg.fit.deterministic_init |= deterministic_init;
            commands::fit(&cfg, &frames, &out)
        }
        Cmd::Stream {
            frames,
            predictor,
            fixture,
            resume,
            max_frames,
            checkpoint_every,
            strict,
            deterministic_init,
            out,
        } => {
            cfg.stream.strict |= strict;
            cfg.fit.deterministic_init |= deterministic_init;
            if fixture.is_some() {
                cfg.paths.fixture = fixture;
            }
            if resume.is_some() {
                cfg.paths.resume = resume;
            }
            let opts = commands::StreamOpts {
                predictor,
                max_frames,
                checkpoint_every,
            };
            commands::stream(&cfg, &frames, &opts, &out)
        }
        Cmd::Synth {
            out,
            frames,
            blobs,
            width,
            height,
            depth_noise,
            spec,
        } => {
            let s = &mut cfg.synth;
            s.frames = frames.unwrap_or(s.frames);
            s.blobs = blobs.unwrap_or(s.blobs);
            s.width = width.unwrap_or(s.width);
            s.height = height.unwrap_or(s.height);
            s.depth_noise = depth_noise.unwrap_or(s.depth_noise);
            if spec.is_some() {
                s.spec = spec;
            }
            commands::synth(&cfg, &out)
        }
        Cmd::Metrics { rendered, reference, out } => commands::metrics(&rendered, &reference, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GSPLAT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
