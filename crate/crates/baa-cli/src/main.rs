//! `baa`: dataset generation, pretraining, adversarial adaptation,
//! evaluation, ablations and exclusivity histograms for the localisation
//! pipeline, driven by one TOML config file.
//!
//! Every command writes its artifacts under a run directory given with
//! `--out`, plus a `run_manifest.json` recording the resolved config and a
//! content hash of all inputs; reruns with identical inputs and seeds
//! reproduce every artifact byte for byte.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

mod config;
mod manifest;
mod plot;
mod run;

use baa::trainer::{AdaptMode, TrainError};

/// Error carrying its process exit code. 1 runtime, 2 config, 3 I/O,
/// 4 missing checkpoint.
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(error: impl Into<anyhow::Error>) -> Failure {
        Failure { code: 2, error: error.into() }
    }

    pub fn io(error: impl Into<anyhow::Error>) -> Failure {
        Failure { code: 3, error: error.into() }
    }

    pub fn missing_checkpoint(error: anyhow::Error) -> Failure {
        Failure { code: 4, error }
    }
}

pub fn train_failure(e: TrainError) -> Failure {
    let code = match &e {
        TrainError::Config(_) | TrainError::Dataset(_) => 2,
        TrainError::Diverged { .. } => 1,
        _ => 3,
    };
    Failure { code, error: e.into() }
}

pub fn world_failure(e: baa::synthworld::WorldError) -> Failure {
    let code = match &e {
        baa::synthworld::WorldError::BadConfig(_) => 2,
        _ => 3,
    };
    Failure { code, error: e.into() }
}

const CONFIG_HELP: &str = "\
CONFIG FILE (TOML; every key optional, defaults shown):
  seed = 0                     run seed; --seed overrides this and the dataset seed
  channels = 16                embedding channels
  temperature = 1.0            correspondence softmax temperature
  lambda_ce = 0.1              matching-loss weight inside the generator objective

  [weights]                    balance weights of the two-sided adversarial objective
  alpha = 0.02
  beta = 0.04

  [dataset]                    consumed by gen-data; later commands read the generated tree
  seed = 0
  image_size = 32
  train_scenes = 8
  test_scenes = 4
  clutter_per_scene = 10
  source_train_sequences = 2000
  seq_len = 5
  target_train_images = 4000
  test_trajectories = 20
  test_traj_len = 50
  train_seed_base = 1000
  test_seed_base = 2000

  [pretrain]
  lr = 0.001
  epochs = 10
  batch_sequences = 16

  [adapt]                      disc_lr:gen_lr is validated to 3:1
  batch = 32
  epochs = 10
  disc_lr = 0.0003
  gen_lr = 0.0001

  [eval]
  confidence_floor = 0.3
  refine_iters = 8
  max_len = 50
  max_step = 1200.0            pose solves moving further than this per frame are rejected

EXIT CODES: 0 success, 1 runtime failure (diverged game), 2 config error,
3 I/O error, 4 missing checkpoint.";

#[derive(Parser)]
#[command(
    name = "baa",
    version,
    about = "Localisation embeddings with balanced adversarial domain adaptation",
    after_long_help = CONFIG_HELP,
    after_help = "Run with --help for the full config key listing."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// TOML config file; defaults apply when omitted
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the run seed and the dataset seed
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Run directory for all artifacts
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic source and target splits to disk
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised matching pretraining on source sequences
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by gen-data
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Balanced adversarial adaptation of a pretrained checkpoint
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Pretraining checkpoint directory
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
    },
    /// Adaptation under an alternative scheme, for the comparison table
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// baa, s2t, t2s or none
        #[arg(long, value_parser = parse_mode)]
        mode: AdaptMode,
    },
    /// Frame-by-frame localisation of checkpoints on a test split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint directory; repeat for one curve per model
        #[arg(long, value_name = "DIR", required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Target)]
        split: SplitArg,
    },
    /// Embedding exclusivity histograms over both test splits
    Histogram {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// pre expects a pretrained checkpoint, post an adapted one
        #[arg(long, value_enum)]
        phase: PhaseArg,
    },
}

fn parse_mode(s: &str) -> Result<AdaptMode, String> {
    AdaptMode::parse(s).ok_or_else(|| format!("unknown mode `{s}`; use baa, s2t, t2s or none"))
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Source,
    Target,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Pre,
    Post,
}

impl PhaseArg {
    pub fn name(&self) -> &'static str {
        match self {
            PhaseArg::Pre => "pre",
            PhaseArg::Post => "post",
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::GenData { common } => run::gen_data(common),
        Cmd::Pretrain { common, data } => run::pretrain(common, data),
        Cmd::Adapt { common, data, checkpoint } => {
            run::adapt(common, data, checkpoint, AdaptMode::Balanced, "adapt")
        }
        Cmd::Ablate { common, data, checkpoint, mode } => {
            run::adapt(common, data, checkpoint, mode, "ablate")
        }
        Cmd::Eval { common, data, checkpoint, split } => {
            run::eval(common, data, checkpoint, split)
        }
        Cmd::Histogram { common, data, checkpoint, phase } => {
            run::histogram(common, data, checkpoint, phase)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(f) = dispatch(cli) {
        eprintln!("error: {:#}", f.error);
        std::process::exit(f.code);
    }
}
