use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use physe_core::model::ModelKind;
use physe_core::objectives::ContrastiveVariant;

#[derive(Debug, Parser)]
#[command(name = "physe-inv", version, about = "Physics-encoded inverse estimation of sea-ice thickness")]
pub struct Cli {
    /// Directory for every written artifact (overrides `out_dir` in the config).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic daily series as CSV.
    Synth(SynthArgs),
    /// Train one model and write its report, log, checkpoint and plot data.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test portion of a series.
    Eval(EvalArgs),
    /// Train every cell of a model/split/SCL/PE/seed grid.
    Ablate(AblateArgs),
    /// Finite-difference checks of every tape operation and the full model.
    Gradcheck(GradcheckArgs),
    /// Hydrostatic balance demonstrations.
    Physics(PhysicsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10958)]
    pub length: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output CSV; defaults to `synth.csv` in the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    pub fn enabled(self) -> bool {
        self == OnOff::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOffBoth {
    On,
    Off,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SclChoice {
    Off,
    /// The configured contrastive variant.
    On,
    /// Off and the configured variant.
    Both,
    /// Off, NT-Xent and the stability regularizer.
    All,
    #[value(name = "nt_xent")]
    NtXent,
    Stability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    #[value(name = "physe-inv")]
    PhysEInv,
    Lstm,
    Bilstm,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::PhysEInv => ModelKind::PhysEInv,
            ModelArg::Lstm => ModelKind::Lstm,
            ModelArg::Bilstm => ModelKind::BiLstm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    #[value(name = "nt_xent")]
    NtXent,
    Stability,
}

impl From<VariantArg> for ContrastiveVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::NtXent => ContrastiveVariant::NtXent,
            VariantArg::Stability => ContrastiveVariant::Stability,
        }
    }
}

/// Configuration layers shared by `train` and `ablate`. Precedence is
/// flag, then config file, then `PHYSE_INV_SEED` (seed only), then default.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON configuration file with flat keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Daily CSV series instead of the synthetic one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub synth_length: Option<usize>,
    #[arg(long)]
    pub synth_seed: Option<u64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long, value_enum)]
    pub cl_variant: Option<VariantArg>,
    #[arg(long)]
    pub lambda_pe: Option<f64>,
    #[arg(long)]
    pub lambda_cl: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rho_w: Option<f64>,
    #[arg(long)]
    pub rho_i: Option<f64>,
    /// Sub-batches per step whose gradients are summed in a fixed order.
    #[arg(long)]
    pub parallel_chunks: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long)]
    pub split: Option<f64>,
    /// Physics encoding and its loss term.
    #[arg(long, value_enum)]
    pub pe: Option<OnOff>,
    /// Contrastive term.
    #[arg(long, value_enum)]
    pub scl: Option<OnOff>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Series to evaluate; defaults to the data source stored with the checkpoint.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Model kinds; defaults to the configured one.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub models: Vec<ModelArg>,
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.6,0.5")]
    pub splits: Vec<f64>,
    #[arg(long, value_enum, default_value = "both")]
    pub scl: SclChoice,
    #[arg(long, value_enum, default_value = "both")]
    pub pe: OnOffBoth,
    /// Number of seeds, run as 1..=N.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    #[arg(long, default_value_t = 50)]
    pub seeds: u64,
    /// Restrict to these checks (operation names or composite checks).
    #[arg(long, value_delimiter = ',')]
    pub op: Vec<String>,
    /// Print the available check names and exit.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Args)]
pub struct PhysicsArgs {
    #[arg(long, default_value_t = 1024.0, global = true)]
    pub rho_w: f64,
    #[arg(long, default_value_t = 917.0, global = true)]
    pub rho_i: f64,
    #[command(subcommand)]
    pub command: PhysicsCommand,
}

#[derive(Debug, Subcommand)]
pub enum PhysicsCommand {
    /// Ice thickness from snow depth, freeboard and snow density.
    Forward {
        #[arg(long)]
        hs: f64,
        #[arg(long)]
        fb: f64,
        #[arg(long)]
        rhos: f64,
    },
    /// Hydrostatic residual of a column; ice thickness defaults to the balanced value.
    Residual {
        #[arg(long)]
        hs: f64,
        #[arg(long)]
        fb: f64,
        #[arg(long)]
        rhos: f64,
        #[arg(long)]
        hi: Option<f64>,
    },
    /// Proxy thickness target from concentration, albedo and snow density.
    Proxy {
        #[arg(long)]
        sic: f64,
        #[arg(long)]
        albedo: f64,
        #[arg(long, default_value_t = 330.0)]
        rhos: f64,
    },
    /// Grid of (h_s, f_b) pairs that all give the target thickness, as CSV.
    Nonunique {
        #[arg(long)]
        target: f64,
        #[arg(long, default_value_t = 330.0)]
        rhos: f64,
        /// Grid nodes per axis.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}
