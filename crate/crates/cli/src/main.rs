//! `sformer` command-line driver.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Root for run directories when `--out` is not given.
pub const RUN_ROOT_ENV: &str = "SFORMER_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "sformer", version, about = "Selective transformer for hyperspectral image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic labeled scene.
    Synth(SynthArgs),
    /// Fit min-max scaling and PCA on a scene and write the reduced scene.
    Pca(PcaArgs),
    /// Train a model on a scene.
    Train(TrainArgs),
    /// Score a checkpoint on a scene and write an evaluation report.
    Eval(EvalArgs),
    /// Render a classification map as a P6 pixmap.
    Map(MapArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Train over a grid of selection rates and group counts.
    Sweep(SweepArgs),
    /// Time token selective attention at several selection rates.
    Bench(BenchArgs),
    /// Mean and standard deviation of OA, AA and kappa over evaluation reports.
    Aggregate(AggregateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output scene directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub bands: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Side of the square class tiles.
    #[arg(long, default_value_t = 8)]
    pub tile: usize,
}

#[derive(Args, Debug)]
pub struct PcaArgs {
    /// Input scene directory or `scene.json`.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub components: usize,
    /// Output directory for the reduced scene and `pca.json`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings shared by every command that trains.
#[derive(Args, Debug, Clone, Default)]
pub struct SettingArgs {
    /// Flat `key = value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = settings::parse_pair)]
    pub set: Vec<(String, String)>,
    /// Model preset: tiny, full, pavia, houston, indian_pines, honghu.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// PCA components, or `none`.
    #[arg(long)]
    pub pca: Option<String>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Run directory; defaults to `$SFORMER_RUN_ROOT/<name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run name under the run root.
    #[arg(long)]
    pub name: Option<String>,
    /// Replace an existing run directory's artifacts.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub settings: SettingArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    /// Labeled pixels not used for training.
    Test,
    /// Every labeled pixel.
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
    pub split: EvalSplit,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write attention traces of the first evaluated patches here.
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub trace_samples: usize,
    /// Keep only the first attention head in TSA traces.
    #[arg(long)]
    pub first_head_only: bool,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args, Debug)]
pub struct MapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Paint unlabeled pixels black instead of classifying them.
    #[arg(long)]
    pub labeled_only: bool,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates probed per tensor.
    #[arg(long, default_value_t = 6)]
    pub per_tensor: usize,
    /// Write the reports as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    K,
    G,
    Both,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, value_enum, default_value_t = SweepAxis::Both)]
    pub axis: SweepAxis,
    /// CSV path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub settings: SettingArgs,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    #[arg(long, default_value_t = 5)]
    pub height: usize,
    #[arg(long, default_value_t = 5)]
    pub width: usize,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AggregateArgs {
    /// Evaluation report files.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Pca(a) => commands::pca(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Map(a) => commands::map(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Bench(a) => commands::bench(a),
        Command::Aggregate(a) => commands::aggregate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let line = serde_json::json!({"error": kind.as_str(), "message": e.to_string()});
            eprintln!("{line}");
            ExitCode::from(exit_code(kind))
        }
    }
}

fn exit_code(kind: sformer::ErrorKind) -> u8 {
    match kind {
        sformer::ErrorKind::Validation => 1,
        sformer::ErrorKind::Numerical => 2,
        sformer::ErrorKind::Io => 3,
    }
}
