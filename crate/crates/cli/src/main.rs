mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Speaker diarization with x-vector embeddings, PLDA scoring and AHC.
#[derive(Debug, Parser)]
#[command(name = "diarkit", version)]
pub struct Cli {
    /// Plain-text `key=value` config file; flags and `--set` win over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` setting, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Random seed; falls back to the config file, then DIARKIT_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-conversation stages.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Validate configuration and inputs, then stop without writing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// MFCC + sliding CMN for a list of `<conversation> <wav>` lines, plus
    /// the speech segments cut from the SAD marks.
    Features(FeaturesArgs),
    /// Writes a synthetic training corpus and test conversations.
    Synth(SynthArgs),
    /// Trains an embedding network on a `<utt> <speaker> <features>` manifest.
    Train(TrainArgs),
    /// Extracts segment embeddings.
    Embed(EmbedArgs),
    /// Fits length normalization, PCA whitening and PLDA on labelled embeddings.
    BackendFit(BackendFitArgs),
    /// Diarizes conversations into an RTTM file.
    Diarize(DiarizeArgs),
    /// Diarization error rate of a hypothesis RTTM against a reference.
    Score(ScoreArgs),
    /// Cross-validated AHC threshold selection.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub wavs: PathBuf,
    #[arg(long)]
    pub sad: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// tdnn, etdnn, ftdnn or ftdnn-msa.
    #[arg(long)]
    pub arch: Option<String>,
    /// Comma-separated pooling taps of the multi-scale net, e.g. `8,9`.
    #[arg(long)]
    pub taps: Option<String>,
    /// `toy` (desk-scale widths) or `full`.
    #[arg(long)]
    pub dims: Option<String>,
    /// Network description file used instead of `--arch`.
    #[arg(long, conflicts_with_all = ["arch", "taps", "dims"])]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step `step loss ortho lr` log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `<conversation> <features> [...]` list; needs `--sad` or `--segments`.
    #[arg(long, required_unless_present = "manifest")]
    pub conversations: Option<PathBuf>,
    #[arg(long)]
    pub sad: Option<PathBuf>,
    #[arg(long)]
    pub segments: Option<PathBuf>,
    /// Training manifest; its utterances are windowed like speech regions.
    #[arg(long, conflicts_with = "conversations")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// `<embedding_id> <speaker>` lines for manifest input.
    #[arg(long, requires = "manifest")]
    pub labels_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BackendFitArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// `<embedding_id> <speaker>` lines.
    #[arg(long)]
    pub labels: PathBuf,
    /// Dimensions kept by PCA whitening (default: all).
    #[arg(long)]
    pub pca_dim: Option<usize>,
    /// Share of whitened dimensions kept by conversation PCA.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiarizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub backend: PathBuf,
    #[arg(long)]
    pub conversations: PathBuf,
    #[arg(long)]
    pub sad: PathBuf,
    /// Stop merging below this PLDA score.
    #[arg(
        long,
        required_unless_present = "oracle_k",
        conflicts_with = "oracle_k"
    )]
    pub threshold: Option<f64>,
    /// File whose lines start with a conversation id and end with its
    /// speaker count.
    #[arg(long)]
    pub oracle_k: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long = "hyp")]
    pub hypothesis: PathBuf,
    /// Scored regions; defaults to the reference speech.
    #[arg(long)]
    pub sad: Option<PathBuf>,
    #[arg(long)]
    pub collar: Option<f64>,
    /// Score regions where reference speakers overlap.
    #[arg(long)]
    pub include_overlap: bool,
    /// Adds totals grouped by reference speaker count.
    #[arg(long)]
    pub breakdown: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub backend: PathBuf,
    #[arg(long)]
    pub conversations: PathBuf,
    #[arg(long)]
    pub sad: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub collar: Option<f64>,
    /// Held-out hypothesis RTTM, each fold diarized with its own threshold.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status per error class.
fn exit_code(err: &anyhow::Error) -> u8 {
    use diarkit::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) => 3,
                E::Parse { .. } | E::Format(_) => 4,
                E::InvalidInput(_) | E::Dimension { .. } => 5,
                E::Numerical(_) | E::NonFiniteLoss { .. } => 6,
                E::Unscorable(_) => 7,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    // configuration and usage problems
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
