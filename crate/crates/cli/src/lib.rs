//! The `prefnet` command: featurization, synthetic data, training,
//! cross-validation, evaluation, weight analysis, the collection service
//! and corpus export.

mod commands;
pub mod config;
mod error;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "prefnet", version, about = "Personalized audio preference prediction")]
pub struct Cli {
    /// TOML file with defaults for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute log-mel features for every WAV in a directory.
    Featurize(FeaturizeArgs),
    /// Generate a synthetic corpus with audio, features and ground truth.
    Synth(SynthArgs),
    /// Train one model on one cross-validation rotation.
    Train(TrainArgs),
    /// Subject-wise cross-validation over folds and repeated runs.
    Cv(CvArgs),
    /// Accuracy of a checkpoint on a corpus or one test fold.
    Evaluate(EvaluateArgs),
    /// Mean absolute weight of the head's linear layers per input.
    AnalyzeWeights(AnalyzeArgs),
    /// Run the listening-test collection service.
    Serve(ServeArgs),
    /// Export the corpus stored in a service event log.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    /// Directory of WAV files.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Directory for `.lmel` files.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub songs: Option<usize>,
    #[arg(long)]
    pub devices: Option<usize>,
    /// `personal` or `agnostic`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated: `normal`, `max`.
    #[arg(long)]
    pub volumes: Option<String>,
    #[arg(long)]
    pub flip_prob: Option<f64>,
    #[arg(long)]
    pub clip_secs: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Directory of `.lmel` feature files.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// `ao`, `asl`, `ase` or `asp`.
    #[arg(long)]
    pub model: Option<String>,
    /// `full`, `desk` or four comma-separated conv widths.
    #[arg(long)]
    pub encoder: Option<String>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// Subject features kept: `all`, `age_gender`, `all_specs`,
    /// `impd_sensit` or `freq_responses`.
    #[arg(long)]
    pub mask: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainingArgs {
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub crop_frames: Option<usize>,
    /// Disable SpecAugment masking.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// 1-based test fold; the next fold validates.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub base_seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Comma-separated 1-based test folds.
    #[arg(long)]
    pub folds: Option<String>,
    /// Report JSON path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// 1-based fold whose test subjects are scored; all subjects otherwise.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub crop_frames: Option<usize>,
    /// Result JSON path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Checkpoint to analyze; repeat to average several.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Fold the batch-norm scale into the product.
    #[arg(long)]
    pub fold_bn: bool,
    /// CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub audio_dir: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Saved pair plan JSON; built from the audio directory otherwise.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Seed for presentation order when building the plan.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Corpus JSONL path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::execute(cli, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
