//! `gapscope` — probe, evaluate and compare what a model knows against what
//! it says.
//!
//! Exit codes: 0 success, 1 invalid input data, 2 runtime failure, 64 usage.

mod commands;
mod error;
mod output;
mod toy;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

const USAGE_EXIT: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "gapscope", version, about = "Cognition vs. expression gap analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check an activation dump and print its validation report.
    Validate {
        #[arg(long)]
        dump: PathBuf,
    },
    /// Fit per-layer probes on a train dump and score them on a test dump.
    Probe(ProbeArgs),
    /// Score direct answers of a toy checkpoint or a recorded transcript.
    Express(ExpressArgs),
    /// Agreement between expressive and cognitive correctness records.
    Consistency(ConsistencyArgs),
    /// Answer changes between consecutive checkpoints.
    Inconsistency(InconsistencyArgs),
    /// KL divergence of vocabulary-layer distributions across checkpoints.
    VocabKl(VocabKlArgs),
    /// Residual-stream norm and cosine profile of a toy checkpoint.
    Residual(ResidualArgs),
    /// Toy model workflow.
    #[command(subcommand)]
    Toy(toy::ToyCommand),
    /// Merge summary files into series keyed by training tokens.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub train_dump: PathBuf,
    #[arg(long)]
    pub test_dump: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Plateau tolerance below the best layer accuracy.
    #[arg(long, default_value_t = gapscope::residual::DEFAULT_PLATEAU_EPSILON)]
    pub epsilon: f64,
    /// Also write a 2-D PCA projection of the test dump at this layer.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Run PCA on offsets from each question's mean row.
    #[arg(long)]
    pub differencing: bool,
    /// Also fit a linear SVM per layer.
    #[arg(long)]
    pub svm: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub svm_lambda: f64,
    #[arg(long, default_value_t = 50)]
    pub svm_epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExpressMode {
    ZeroShot,
    FewShot,
    Magical,
    Repeated,
    Likelihood,
}

#[derive(Debug, Args)]
pub struct ExpressArgs {
    /// Toy checkpoint to query.
    #[arg(long, conflicts_with = "transcript", required_unless_present = "transcript")]
    pub checkpoint: Option<PathBuf>,
    /// Run config of the checkpoint (defaults to the nearest config.json).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Recorded outputs of an external model.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long, value_enum, default_value_t = ExpressMode::ZeroShot)]
    pub mode: ExpressMode,
    /// Samples per question in repeated mode.
    #[arg(long, default_value_t = gapscope::expression::DEFAULT_REPEATS)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Greedy decoding instead of the default sampling parameters.
    #[arg(long)]
    pub greedy: bool,
    #[arg(long, default_value_t = 16)]
    pub max_tokens: usize,
    /// Question file whose first two questions become few-shot exemplars
    /// (default: the built-in English exemplars).
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
    /// Per-token instead of summed option log-probabilities.
    #[arg(long)]
    pub per_token: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Identity recorded in the summary for transcripts.
    #[arg(long, default_value = "transcript")]
    pub model_id: String,
    #[arg(long, default_value_t = 0)]
    pub training_tokens: u64,
}

#[derive(Debug, Args)]
pub struct ConsistencyArgs {
    /// CSV with `question_id` and `correct` columns from direct answers.
    #[arg(long)]
    pub expressive: PathBuf,
    /// CSV with `question_id` and `correct` columns from probing.
    #[arg(long)]
    pub cognitive: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InconsistencyArgs {
    /// Answer CSVs (`question_id`, `parsed_index`) in checkpoint order.
    #[arg(long = "answers", required = true, num_args = 2..)]
    pub answers: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VocabKlArgs {
    /// Toy checkpoints or standalone vocab-layer files, in training order.
    #[arg(long = "model", required = true, num_args = 2..)]
    pub models: Vec<PathBuf>,
    /// Direct-mode dumps whose final-layer mean forms the reference inputs.
    #[arg(long = "dump", required = true, num_args = 1..)]
    pub dumps: Vec<PathBuf>,
    #[arg(long)]
    pub symmetric: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ResidualArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub prompts: usize,
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also compute adjacent-layer gradient cosines.
    #[arg(long)]
    pub gradients: bool,
    /// First layer counted in the cosine-bound coverage.
    #[arg(long, default_value_t = 4)]
    pub from_layer: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `summary.json` files written by other subcommands.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Worker cap from `GAPSCOPE_THREADS`, if set.
pub fn threads() -> Option<usize> {
    std::env::var("GAPSCOPE_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(USAGE_EXIT),
            };
        }
    };
    if let Some(n) = threads() {
        gapscope::exec::init_threads(n);
    }
    let result = match cli.command {
        Command::Validate { dump } => commands::validate(&dump),
        Command::Probe(a) => commands::probe(&a),
        Command::Express(a) => commands::express(&a),
        Command::Consistency(a) => commands::consistency(&a),
        Command::Inconsistency(a) => commands::inconsistency(&a),
        Command::VocabKl(a) => commands::vocab_kl(&a),
        Command::Residual(a) => commands::residual(&a),
        Command::Toy(c) => toy::run(c),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Fails early, with a runtime error, when an input path is missing.
pub fn require_file(path: &std::path::Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::runtime(format!("{}: no such file", path.display())))
    }
}
