//! Optimization loop, evaluation, run reports and the ablation grid.

mod ablation;
mod artifacts;
mod eval;
mod optim;
mod step;
mod trainer;

pub use ablation::{
    read_results_csv, run_ablation, summarize, write_results_csv, write_summary_csv, AblationGrid, CellResult,
    SclSetting, SummaryRow, RESULTS_HEADER,
};
pub use artifacts::{
    evaluate_restored, read_train_log, restore_run, write_run_artifacts, RestoredRun, RunArtifacts, TRAIN_LOG_HEADER,
};
pub use eval::{box_summary, evaluate, histogram, score, BoxSummary, Evaluation, Histogram};
pub use optim::{adam_step, AdamConfig, OptimError, OptimizerState};
pub use step::{batch_gradients, StepConfig, StepError};
pub use trainer::{load_series, prepare_dataset, train, EpochLog, RunReport, TrainOutcome};

use crate::config::ConfigError;
use crate::data::DataError;
use crate::model::{CheckpointError, Model};
use physe_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged in epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Parameters at the end of the last completed epoch.
        last_good: Box<Model>,
    },
}

impl TrainError {
    /// True for failures caused by non-finite or otherwise broken numerics.
    pub fn is_numeric(&self) -> bool {
        match self {
            TrainError::Numeric(_) | TrainError::Diverged { .. } => true,
            TrainError::Tensor(e) => matches!(e, TensorError::NonFinite { .. } | TensorError::Domain { .. }),
            _ => false,
        }
    }
}

/// Independent seed for stream `stream` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
