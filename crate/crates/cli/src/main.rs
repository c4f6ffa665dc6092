//! `cwm`: data generation, training, evaluation and profiling of
//! channel-wise masked streaming networks.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime failures. `CWM_THREADS` caps compute threads (default 1).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cwm",
    version,
    about = "Channel-wise masked streaming convolution toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shapes dataset.
    GenData(GenDataArgs),
    /// Train one network.
    Train(TrainArgs),
    /// Steady-state evaluation of trained weights.
    Eval(EvalArgs),
    /// Latency microbenchmarks.
    Bench(BenchArgs),
    /// Exact FLOP counts, stateless and per masked step.
    Flops(FlopsArgs),
    /// Print a bi-step mask schedule.
    Masks(MasksArgs),
    /// Train, evaluate and profile the full model grid.
    Reproduce(ReproduceArgs),
}

/// Overrides of the `data` section.
#[derive(Args, Clone, Debug, Default)]
pub struct DataFlags {
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub val_count: Option<usize>,
    /// Dataset seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub noise: Option<f32>,
    #[arg(long)]
    pub max_speed: Option<i64>,
}

/// Overrides of the `network` section.
#[derive(Args, Clone, Debug, Default)]
pub struct NetFlags {
    #[arg(long)]
    pub base_width: Option<usize>,
    /// Width multiplier in (0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Bi-step ρ in [0, 1], or `none` for the stateless network.
    #[arg(long, value_parser = parse_rho)]
    pub rho: Option<RhoArg>,
    #[arg(long)]
    pub init_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug)]
pub struct RhoArg(pub Option<f64>);

fn parse_rho(s: &str) -> Result<RhoArg, String> {
    match s {
        "none" | "stateless" => Ok(RhoArg(None)),
        _ => s
            .parse::<f64>()
            .map(|r| RhoArg(Some(r)))
            .map_err(|e| format!("{e}")),
    }
}

/// Overrides of the `train` section.
#[derive(Args, Clone, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Frames streamed before the predicted frame.
    #[arg(long)]
    pub j: Option<usize>,
    #[arg(long)]
    pub sequences_per_sample: Option<usize>,
    /// Shuffle seed.
    #[arg(long)]
    pub train_seed: Option<u64>,
    /// Backpropagate through cached channels (`true`/`false`).
    #[arg(long)]
    pub bptt: Option<bool>,
}

/// Overrides of the `timing` section.
#[derive(Args, Clone, Debug, Default)]
pub struct TimingFlags {
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON run config overlaid on the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataFlags,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory from `gen-data`; generated in memory when absent.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Skip the per-epoch validation pass.
    #[arg(long)]
    pub no_eval: bool,
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub net: NetFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Weights directory written by `train`.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Frames streamed before the prediction.
    #[arg(long)]
    pub k: Option<usize>,
    /// Average the scores at k and k−1.
    #[arg(long)]
    pub average_pair: bool,
    /// Unpaired sweep over `kmin:kmax` (inclusive).
    #[arg(long, value_parser = parse_range)]
    pub sweep: Option<(usize, usize)>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataFlags,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected kmin:kmax")?;
    let a: usize = a.parse().map_err(|e| format!("kmin: {e}"))?;
    let b: usize = b.parse().map_err(|e| format!("kmax: {e}"))?;
    if a == 0 || a > b {
        return Err("need 1 ≤ kmin ≤ kmax".into());
    }
    Ok((a, b))
}

#[derive(Args)]
pub struct BenchArgs {
    /// Time full, contiguous-masked and scattered-masked variants of one layer.
    #[arg(long)]
    pub contiguity: bool,
    /// Output channels of the benchmarked layer.
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    #[arg(long)]
    pub in_channels: Option<usize>,
    /// Active output channels; half of `--channels` by default.
    #[arg(long)]
    pub active: Option<usize>,
    /// Spatial size of the benchmarked layer.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    /// Trained weights for the network benchmark; fresh weights otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub net: NetFlags,
    #[command(flatten)]
    pub timing: TimingFlags,
}

#[derive(Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print JSON instead of CSV.
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub net: NetFlags,
}

#[derive(Args)]
pub struct MasksArgs {
    #[arg(long)]
    pub channels: usize,
    #[arg(long)]
    pub rho: f64,
    /// Time-steps drawn in the diagram.
    #[arg(long, default_value_t = 4)]
    pub steps: usize,
}

#[derive(Args)]
pub struct ReproduceArgs {
    /// Laptop-scale preset.
    #[arg(long)]
    pub quick: bool,
    #[arg(long, default_value = "reproduce-out")]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub timing: TimingFlags,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub init_seed: Option<u64>,
}

/// Failure classes mapped to exit codes.
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn config(e: impl Into<anyhow::Error>) -> Self {
        Failure::Config(e.into())
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Flops(a) => commands::flops(a),
        Command::Masks(a) => commands::masks(a),
        Command::Reproduce(a) => commands::reproduce(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
