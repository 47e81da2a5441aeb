//! `tmdtts`: training, synthesis, evaluation and dataset-pipeline commands.
//!
//! Exit status: 0 on success, 2 for usage or configuration errors, 1 for
//! failures while running. Errors are printed to stderr as one JSON object
//! per line: `{"code":2,"error":"usage","message":"..."}`. Log verbosity
//! follows `TMD_LOG` (`error`, `warn`, `info`, `debug`, `trace`).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }

    fn kind(&self) -> &'static str {
        if self.code == 2 {
            "usage"
        } else {
            "runtime"
        }
    }
}

impl From<tmd_core::Error> for CliError {
    fn from(e: tmd_core::Error) -> Self {
        match e {
            tmd_core::Error::UnknownDialect(_) => CliError::usage(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tmdtts", version, about = "Multi-dialect Tibetan text-to-speech toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; flags override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random draw of the run
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the acoustic model on a manifest
    Train(TrainArgs),
    /// Synthesize one utterance to a WAV file
    Synth(SynthArgs),
    /// Score audio against references and a dialect classifier
    Eval(EvalArgs),
    /// Generate a quality-gated dataset from a text database
    Pipeline(PipelineArgs),
    /// Per-dialect file, size and duration statistics of a manifest
    Stats(StatsArgs),
    /// Export classifier softmax outputs and embeddings as CSV
    ExportFeatures(ExportFeaturesArgs),
    /// Write pending_review records to a CSV for manual screening
    ReviewExport(ReviewExportArgs),
    /// Apply reviewer verdicts (id,verdict CSV) to a manifest
    ReviewImport(ReviewImportArgs),
    /// Train the dialect classifier used for DECS and DCA
    TrainClassifier(TrainClassifierArgs),
    /// Write the synthetic three-dialect toy corpus (WAVs, manifest, texts, config)
    MakeToy(MakeToyArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training manifest (accepted and enhanced records are used)
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Output checkpoint
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Optimizer steps
    #[arg(long)]
    steps: Option<usize>,
    /// Utterances per step
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Vocabulary file (id<TAB>codepoint lines); built from the manifest texts when absent
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Also write the per-step losses as JSON lines
    #[arg(long, value_name = "FILE")]
    loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Model checkpoint
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Text to speak (may be empty)
    #[arg(long, allow_hyphen_values = true)]
    text: String,
    /// u-tsang, amdo or kham
    #[arg(long)]
    dialect: String,
    /// Output WAV
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Also write the generated mel-spectrogram (.tmel)
    #[arg(long, value_name = "FILE")]
    mel_out: Option<PathBuf>,
    /// Euler steps of the flow sampler
    #[arg(long)]
    ode_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Manifest of estimate audio
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Directory of reference WAVs, matched by file name
    #[arg(long, value_name = "DIR")]
    ref_dir: Option<PathBuf>,
    /// Read estimates from this directory (by file name) instead of the manifest paths
    #[arg(long, value_name = "DIR")]
    est_dir: Option<PathBuf>,
    /// Dialect classifier for DECS and DCA
    #[arg(long, value_name = "FILE")]
    classifier: Option<PathBuf>,
    /// Synthesis times as `utterance-id seconds` lines, for RTF
    #[arg(long, value_name = "FILE")]
    timings: Option<PathBuf>,
    /// Output directory for metrics.jsonl and summary.csv
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    /// Text database, one sentence per line
    #[arg(long, value_name = "FILE")]
    texts: PathBuf,
    /// Model checkpoint used for synthesis
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Dialect classifier for DECS
    #[arg(long, value_name = "FILE", required_unless_present = "decs")]
    classifier: Option<PathBuf>,
    /// DECS values as `utterance-id value` lines, instead of the classifier
    #[arg(long, value_name = "FILE")]
    decs: Option<PathBuf>,
    /// PESQ values as `utterance-id value` lines
    #[arg(long, value_name = "FILE")]
    pesq: Option<PathBuf>,
    /// DNSMOS values as `utterance-id value` lines
    #[arg(long, value_name = "FILE")]
    dnsmos: Option<PathBuf>,
    /// Enhancement command, run as `CMD [ARGS..] <in.wav> <out.wav>`
    #[arg(long, value_name = "CMD")]
    enhance_cmd: Option<PathBuf>,
    /// Extra argument passed to the enhancement command (repeatable)
    #[arg(long = "enhance-arg", value_name = "ARG", allow_hyphen_values = true)]
    enhance_args: Vec<String>,
    /// Output directory (manifest.jsonl and wavs/); an existing manifest is resumed
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Worker threads
    #[arg(long)]
    workers: Option<usize>,
    /// Stop after this many new records
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Manifest to summarize
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Count only accepted and enhanced records
    #[arg(long)]
    kept_only: bool,
    /// Print JSON instead of a table
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ExportFeaturesArgs {
    #[command(flatten)]
    common: Common,
    /// Manifest of audio to classify
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Dialect classifier
    #[arg(long, value_name = "FILE")]
    classifier: PathBuf,
    /// Output CSV
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReviewExportArgs {
    #[command(flatten)]
    common: Common,
    /// Manifest to scan for pending_review records
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Output CSV
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReviewImportArgs {
    /// Manifest to update in place
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Verdict CSV with columns id,verdict (accept or reject)
    #[arg(long, value_name = "FILE")]
    verdicts: PathBuf,
}

#[derive(Debug, Args)]
struct TrainClassifierArgs {
    #[command(flatten)]
    common: Common,
    /// Labelled manifest (every record is used)
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Output classifier file
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct MakeToyArgs {
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Distinct texts, each rendered in all three dialects
    #[arg(long, default_value_t = 20)]
    texts: usize,
    /// Corpus seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Synth(a) => commands::synth(a),
        Command::Eval(a) => commands::eval(a),
        Command::Pipeline(a) => commands::pipeline(a),
        Command::Stats(a) => commands::stats(a),
        Command::ExportFeatures(a) => commands::export_features(a),
        Command::ReviewExport(a) => commands::review_export(a),
        Command::ReviewImport(a) => commands::review_import(a),
        Command::TrainClassifier(a) => commands::train_classifier(a),
        Command::MakeToy(a) => commands::make_toy(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TMD_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "code": e.code, "message": e.message });
            eprintln!("{line}");
            ExitCode::from(e.code)
        }
    }
}
