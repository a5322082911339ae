mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gilt::GiltError;

use crate::manifest::Manifest;

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError { code: 3, msg: msg.into() }
    }
}

impl From<GiltError> for CliError {
    fn from(e: GiltError) -> Self {
        let code = match e {
            GiltError::InvalidSpec(_)
            | GiltError::Unsupported(_)
            | GiltError::Insufficient(_)
            | GiltError::Protocol(_)
            | GiltError::Shape(_) => 2,
            GiltError::Parse(_) | GiltError::Consistency(_) | GiltError::Io { .. } | GiltError::Checkpoint(_) => 3,
            GiltError::NonFinite(_) | GiltError::Numerical(_) => 4,
        };
        CliError { code, msg: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "gilt", version, about = "Graph in-context learning: pre-train once, classify new graphs from a few examples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assign splits and write datasets plus a registry in the JSON format.
    Prep(PrepArgs),
    /// Episodic multi-task pre-training.
    Pretrain(PretrainArgs),
    /// Few-shot evaluation of a checkpoint on one dataset.
    Eval(EvalArgs),
    /// Write the token matrices of one episode.
    Tokenize(TokenizeArgs),
}

#[derive(Args, Debug)]
pub struct PrepArgs {
    /// Registry of source datasets.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub registry: Option<PathBuf>,
    /// Generate this many stochastic-block-model graphs instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Train,valid,test fractions, or `none` to leave datasets unsplit.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub sbm: SbmArgs,
}

#[derive(Args, Debug)]
pub struct SbmArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub nodes_per_class: usize,
    /// Expected neighbours inside the own class.
    #[arg(long, default_value_t = 5.0)]
    pub intra_degree: f64,
    /// Expected neighbours in other classes.
    #[arg(long, default_value_t = 0.3)]
    pub inter_degree: f64,
    #[arg(long, default_value_t = 6)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.8)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value = "sbm")]
    pub prefix: String,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// `key = value` file; must state `schema_version`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base configuration: desk or paper-table6.
    #[arg(long)]
    pub preset: Option<String>,
    /// Registry of pre-training datasets (overrides `corpus` in the config).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint; its configuration is used unchanged.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also save `checkpoint-epochNNN.gilt` every this many epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Store parameters as f32 (not resumable bit-exactly).
    #[arg(long)]
    pub f32: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    /// Registry name (with --registry) or a dataset file path.
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long, default_value = "node")]
    pub level: String,
    #[arg(long = "n")]
    pub n_way: usize,
    #[arg(long = "k")]
    pub k_shot: usize,
    /// accuracy, roc-auc or hits@K; defaults to accuracy, or roc-auc for links.
    #[arg(long)]
    pub metric: Option<String>,
    /// Runs with seeds 0..runs.
    #[arg(long, default_value_t = 5, conflicts_with = "seeds")]
    pub runs: u64,
    /// Explicit comma-separated run seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 1)]
    pub neg_ratio: usize,
    /// Also evaluate these shot counts and write sweep.csv.
    #[arg(long, value_delimiter = ',')]
    pub sweep_k: Option<Vec<usize>>,
    /// no-transformer, no-encoder, full-token, encoder-layers=N,
    /// transformer-layers=N, unshared-attention or nonlinear.
    #[arg(long)]
    pub ablate: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    /// Trained model; without it a fresh model is drawn from --preset and --seed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Episode JSON to tokenize instead of sampling one.
    #[arg(long)]
    pub episode: Option<PathBuf>,
    #[arg(long, default_value = "node")]
    pub level: String,
    #[arg(long = "n", default_value_t = 2)]
    pub n_way: usize,
    #[arg(long = "k", default_value_t = 5)]
    pub k_shot: usize,
    #[arg(long, default_value_t = 1)]
    pub neg_ratio: usize,
    #[arg(long, default_value_t = 0)]
    pub sample_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn set_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("GILT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::usage(format!("GILT_THREADS=`{v}` is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, out) = match &cli.command {
        Command::Prep(a) => ("prep", a.out.clone()),
        Command::Pretrain(a) => ("pretrain", a.out.clone()),
        Command::Eval(a) => ("eval", a.out.clone()),
        Command::Tokenize(a) => ("tokenize", a.out.clone()),
    };
    let threads = set_threads();
    let mut m = Manifest::start(name);
    let result = threads.and_then(|_| match &cli.command {
        Command::Prep(a) => commands::prep(a, &mut m),
        Command::Pretrain(a) => commands::pretrain(a, &mut m),
        Command::Eval(a) => commands::eval(a, &mut m),
        Command::Tokenize(a) => commands::tokenize(a, &mut m),
    });
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("gilt {name}: {}", e.msg);
            e.code
        }
    };
    m.finish(code, result.err().map(|e| e.msg));
    if let Err(e) = m.write(&out) {
        eprintln!("gilt {name}: cannot write manifest to {}: {e}", out.display());
        return ExitCode::from(if code == 0 { 3 } else { code as u8 });
    }
    ExitCode::from(code as u8)
}
