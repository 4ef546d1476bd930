//! Command-line surface binding the attack engine into reproducible runs:
//! synthetic data generation, victim training, universal attacks, evaluation,
//! transfer matrices, and merged reports.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 2).
    Usage(String),
    /// Unreadable or malformed inputs (exit 3).
    Input(String),
    /// Everything else (exit 4).
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Input(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Input(m) | CliError::Runtime(m) => m,
        }
    }

    pub fn usage_from(e: mmjail_core::Error) -> Self {
        CliError::Usage(e.to_string())
    }

    /// Classify a core error into an exit class.
    pub fn from_core(e: mmjail_core::Error) -> Self {
        use mmjail_core::Error as E;
        match e {
            E::Config(_) | E::UnknownPreset { .. } => CliError::Usage(e.to_string()),
            E::Corpus { .. }
            | E::Io { .. }
            | E::CheckpointFormat(_)
            | E::CheckpointVersion { .. }
            | E::InsufficientRecords { .. }
            | E::Json(_) => CliError::Input(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    Desk,
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    /// Pretrain a base instance on benign records only.
    Base,
    /// Align an instance from a shared base checkpoint.
    Align,
    /// Train an aligned instance from scratch.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Surrogate,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F64,
    F32,
}

#[derive(Parser)]
#[command(
    name = "mmjail",
    about = "Universal multimodal adversarial attacks against a bundled toy multimodal language model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic behavior corpus in the standard file format.
    GenData {
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 520)]
        size: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a victim checkpoint (pretrain a base, align from a base, or
    /// train an aligned instance from scratch).
    TrainToy {
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Stage::Full)]
        stage: Stage,
        /// Base checkpoint, required when --stage align.
        #[arg(long, value_name = "FILE")]
        base: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Parameter initialization seed (defaults to --seed).
        #[arg(long)]
        init_seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Arch::Desk)]
        arch: Arch,
        #[arg(long, value_enum, default_value_t = RoleArg::Surrogate)]
        role: RoleArg,
        /// Fraction of training examples re-presented with a junk suffix.
        #[arg(long)]
        junk_fraction: Option<f64>,
        #[arg(long)]
        max_junk_len: Option<usize>,
    },
    /// Synthesize a universal adversarial image/suffix pair.
    Attack {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// ours, ours@suffix, ours@image, ours@suffix_t, ours@image_t, gcg,
        /// visual-jailbreak.
        #[arg(long, default_value = "ours")]
        preset: String,
        /// Key-value configuration file.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Individual overrides, e.g. --set suffix_len=10 (flags win).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a saved pair against a checkpoint on held-out behaviors.
    Eval {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Bundle directory produced by `attack`.
        #[arg(long, value_name = "DIR")]
        bundle: PathBuf,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Prepend this many in-context demonstration rounds from the
        /// bundle's training split.
        #[arg(long, default_value_t = 0)]
        in_context: usize,
        /// File with one refusal phrase per line (overrides defaults).
        #[arg(long, value_name = "FILE")]
        refusal_phrases: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
        precision: PrecisionArg,
    },
    /// Evaluate several pairs against several checkpoints.
    Transfer {
        /// Bundle directories, comma-separated or repeated.
        #[arg(long, value_name = "DIR", value_delimiter = ',', required = true)]
        bundles: Vec<PathBuf>,
        /// Target checkpoints, comma-separated or repeated.
        #[arg(long, value_name = "FILE", value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
        precision: PrecisionArg,
    },
    /// Merge evaluation reports and transfer matrices into readable tables.
    Report {
        /// Report or matrix JSON files, comma-separated or repeated.
        #[arg(long, value_name = "FILE", value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
