//! `ssmkt` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ssmkt",
    version,
    about = "Selective state-space knowledge tracing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Map raw ids, split students and window sequences into a dataset directory.
    Prepare(PrepareArgs),
    /// Write a synthetic interaction CSV with a known mastery signal.
    Synth(SynthArgs),
    /// Train a model with early stopping into a run directory.
    Train(TrainArgs),
    /// Score a trained run on one split of a prepared dataset.
    Eval(EvalArgs),
    /// Export hidden-attention grids and heatmaps for one student.
    Explain(ExplainArgs),
    /// Compare time and tape memory of Mamba and attention across sequence lengths.
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub max_len: usize,
    /// Split seed; falls back to SSMKT_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub students: usize,
    #[arg(long = "len", default_value_t = 100)]
    pub t_len: usize,
    #[arg(long, default_value_t = 10)]
    pub concepts: usize,
    #[arg(long, default_value_t = 100)]
    pub questions: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shuffle all responses across the dataset (a no-signal control).
    #[arg(long)]
    pub permute_labels: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub n_state: Option<usize>,
    #[arg(long)]
    pub expand: Option<usize>,
    #[arg(long)]
    pub conv_kernel: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long = "lambda")]
    pub lambda: Option<f64>,
    /// Training-time drop rate; 0 disables dropout.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub no_ffn: bool,
    #[arg(long)]
    pub no_rasch: bool,
    /// per-block or final
    #[arg(long)]
    pub ffn_placement: Option<String>,
    #[arg(long)]
    pub head_concat_question: bool,
    /// parallel or sequential
    #[arg(long)]
    pub scan: Option<String>,
    #[arg(long)]
    pub use_skip: bool,
    #[arg(long)]
    pub freeze_a: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Student id, or the index of a window in the split.
    #[arg(long)]
    pub student: String,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Block to interpret; defaults to the last one.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// sequence or exercise
    #[arg(long, default_value = "sequence")]
    pub level: String,
    /// Target step for the exercise level; defaults to the last one.
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Materialize even beyond the memory guard.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "mamba,attention")]
    pub models: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "128,256,512")]
    pub seqlens: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 5)]
    pub layers: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Directory for bench.csv and bench.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Explain(a) => commands::explain(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_format() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
