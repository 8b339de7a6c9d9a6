//! `kalchas`: OCR, training, evaluation, corpus synthesis, segmentation,
//! gradient checks and the HTTP service from one binary.
//!
//! Exit codes: 0 success, 1 operational failure, 2 usage error. Data goes to
//! stdout; diagnostics go to stderr.

mod recognize;
mod tools;
mod training;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Marks an error as a usage problem, reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "kalchas", version, about = "Polytonic Greek OCR with a CRNN and CTC")]
pub struct Cli {
    /// Log verbosity for diagnostics on stderr (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Transcribe line images; one output line per input, in order.
    Ocr(OcrArgs),
    /// Train a model on a manifest; writes best/last checkpoints and curves.csv.
    Train(TrainArgs),
    /// Report CER, WER and the top confusions of a model on a manifest.
    Eval(EvalArgs),
    /// Render texts into a synthetic line corpus with a manifest.
    Synth(SynthArgs),
    /// Split a page image into line images.
    Segment(SegmentArgs),
    /// Run the finite-difference gradient suite; fails if any layer exceeds tolerance.
    Gradcheck(GradcheckArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct OcrArgs {
    /// Model file (.klch).
    #[arg(long)]
    pub model: PathBuf,
    /// Line images to transcribe.
    #[arg(long = "image", required = true, num_args = 1..)]
    pub images: Vec<PathBuf>,
    /// Lines per forward pass.
    #[arg(long, default_value_t = kalchas::model::OCR_CHUNK)]
    pub chunk: usize,
    /// Print a JSON array with confidences instead of plain text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    /// Full-size network (64..512 channels, 2x256 BiLSTM).
    Default,
    /// Reduced network for quick experiments and tests.
    Small,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSONL manifest or directory of image/.gt.txt pairs.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints and curves.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// RMSProp learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of entries used for training when the manifest has no split labels.
    #[arg(long, default_value_t = 0.9)]
    pub split: f64,
    /// Train on every entry with no validation set.
    #[arg(long)]
    pub no_val: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    /// Evaluate and checkpoint every N epochs.
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    #[arg(long, value_enum, default_value_t = Arch::Default)]
    pub arch: Arch,
    /// Training arithmetic; f64 runs are reproducible byte for byte.
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Charset file; defaults to the built-in polytonic charset.
    #[arg(long)]
    pub charset: Option<PathBuf>,
    /// Start from this model instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue from `<out>/last.state`.
    #[arg(long)]
    pub resume: bool,
    /// Name stored in the model files.
    #[arg(long, default_value = "Kalchas")]
    pub name: String,
    /// Print a JSON summary on stdout.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Confusion pairs to list.
    #[arg(long, default_value_t = 20)]
    pub top_k: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Glyph atlas (`.png` with a sibling `.json`); defaults to the built-in atlas.
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    /// Text file with one line of text per output image.
    #[arg(long)]
    pub texts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file of style ranges; defaults to clean rendering.
    #[arg(long)]
    pub style: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Blank rows that separate two lines.
    #[arg(long, default_value_t = kalchas::imaging::DEFAULT_MIN_GAP)]
    pub min_gap: usize,
    /// Shortest line kept, in rows.
    #[arg(long, default_value_t = kalchas::imaging::DEFAULT_MIN_HEIGHT)]
    pub min_height: usize,
    /// Deskew within +/- this many degrees first (0 < DEG <= 15).
    #[arg(long, value_name = "DEG")]
    pub deskew: Option<f64>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Seeds per check.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Restrict to these checks (default: all).
    #[arg(long = "check")]
    pub checks: Vec<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// TOML config; KALCHAS_* environment variables override it.
    #[arg(long)]
    pub config: PathBuf,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ocr(a) => recognize::ocr(a),
        Command::Train(a) => training::train(a),
        Command::Eval(a) => training::eval(a),
        Command::Synth(a) => tools::synth(a),
        Command::Segment(a) => tools::segment(a),
        Command::Gradcheck(a) => tools::gradcheck(a),
        Command::Serve(a) => tools::serve(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .parse_env("RUST_LOG")
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
