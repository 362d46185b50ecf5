mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Self-calibrated low-light enhancement: training, inference and tools.
#[derive(Debug, Parser)]
#[command(name = "sdace", version)]
pub struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Only print errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the Luminance-Net (stage 1) or the Denoising-Net (stage 2).
    Train(TrainArgs),
    /// Enhance one image or every image in a directory.
    Enhance(EnhanceArgs),
    /// Write reflectance and illumination estimates.
    Decompose(DecomposeArgs),
    /// Add dark-region noise to images.
    AddNoise(AddNoiseArgs),
    /// Print the curve for constant parameters as CSV.
    Curve(CurveArgs),
    /// Print parameter and MAC counts of a network.
    Inspect(InspectArgs),
    /// Score enhanced images against references.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Directory of training images.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write; the log and optimizer state go next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with training settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trained Luminance-Net, required for stage 2.
    #[arg(long)]
    pub stage1_ckpt: Option<PathBuf>,
    /// Continue from the checkpoint and optimizer state at --out.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training images are resized to SIZE x SIZE.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    #[arg(long)]
    pub denoise_depth: Option<usize>,
    #[arg(long)]
    pub denoise_width: Option<usize>,
    /// Filter used to resize training images (bilinear, nearest).
    #[arg(long)]
    pub resize_filter: Option<sdace::imaging::ResizeFilter>,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub stage1: PathBuf,
    /// Also remove noise with this Denoising-Net.
    #[arg(long)]
    pub stage2: Option<PathBuf>,
    /// Image file or directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AddNoiseArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to the directory of each input.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: f64,
    #[arg(long)]
    pub beta: f64,
    #[arg(long, default_value_t = 1)]
    pub iters: usize,
    #[arg(long, default_value_t = 11)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, default_value = "luminance")]
    pub net: sdace::nets::NetKind,
    /// Input size as HEIGHTxWIDTH.
    #[arg(long, default_value = "900x1200", value_parser = parse_hw)]
    pub hw: (usize, usize),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Comma-separated subset of psnr, ssim, ciede2000.
    #[arg(long, value_delimiter = ',', default_value = "psnr,ssim,ciede2000")]
    pub metrics: Vec<sdace::metrics::Metric>,
    /// Resize both images to N x N before scoring.
    #[arg(long)]
    pub resize: Option<usize>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
    match (parse(h), parse(w)) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(format!("expected two positive integers in {s:?}")),
    }
}

/// How a command failed, which decides the exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<sdace::Error> for Failure {
    fn from(e: sdace::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .parse_default_env()
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(&cli);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
