use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{batch_iterator, build_dataset, read_csv, synthesize_series, DailyRecord, DataError, Dataset, SynthParams};
use crate::model::{Model, ModelKind, Prediction};
use crate::objectives::{ContrastiveVariant, LossReport};

use super::{adam_step, batch_gradients, derive_seed, evaluate, Evaluation, OptimizerState, StepConfig, StepError, TrainError};

const STREAM_INIT: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_STEP: u64 = 4;

/// Mean loss components over the batches of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub mse: f64,
    pub pe: f64,
    pub cl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelKind,
    pub pe: bool,
    pub scl: bool,
    pub cl_variant: ContrastiveVariant,
    pub split: f64,
    pub seed: u64,
    pub config_hash: String,
    pub train_windows: usize,
    pub test_windows: usize,
    pub epochs: Vec<EpochLog>,
    /// Test metrics of the initial weights.
    pub initial: Evaluation,
    /// Test metrics after the final epoch.
    pub test: Evaluation,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    /// Equality ignoring the wall-clock time.
    pub fn same_results(&self, other: &RunReport) -> bool {
        let strip = |r: &RunReport| RunReport {
            wall_clock_seconds: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub report: RunReport,
    /// Final evaluation-mode predictions on the test windows.
    pub predictions: Prediction,
}

/// The configured CSV series, or the seeded synthetic one.
pub fn load_series(config: &RunConfig) -> Result<Vec<DailyRecord>, DataError> {
    match &config.data {
        Some(path) => read_csv(path),
        None => synthesize_series(config.synth_length, config.synth_seed, &SynthParams::default()),
    }
}

pub fn prepare_dataset(config: &RunConfig, series: &[DailyRecord]) -> Result<Dataset, DataError> {
    build_dataset(
        series,
        config.split,
        &config.constants(),
        config.noise_sigma,
        derive_seed(config.seed, STREAM_AUGMENT),
    )
}

fn step_failure(e: StepError) -> String {
    e.to_string()
}

/// Trains a fresh model on `dataset` and evaluates it on the test windows.
/// `on_epoch` observes each completed epoch.
pub fn train(config: &RunConfig, dataset: &Dataset, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let started = Instant::now();
    let mut model = Model::new(config.model_spec(), derive_seed(config.seed, STREAM_INIT))
        .map_err(|reason| TrainError::Contract(reason))?;
    let step_cfg = StepConfig {
        with_pe: config.pe,
        contrastive: config.scl,
        weights: config.loss_weights(),
        chunks: config.parallel_chunks,
    };
    let adam = config.adam();
    let (initial, _) = evaluate(&model, &dataset.test, config.pe, config.bins)?;
    if dataset.train.is_empty() {
        return Err(TrainError::Contract("no training windows".into()));
    }

    let mut state = OptimizerState::new(model.params());
    let mut last_good = model.clone();
    let mut epochs = Vec::with_capacity(config.epochs);
    let shuffle_base = derive_seed(config.seed, STREAM_SHUFFLE);
    let step_base = derive_seed(config.seed, STREAM_STEP);
    let mut global_step = 0u64;
    for epoch in 1..=config.epochs {
        let mut sum = LossReport::default();
        let mut batches = 0usize;
        let iter = batch_iterator(&dataset.train, config.batch_size, Some(derive_seed(shuffle_base, epoch as u64)))?;
        for batch in iter {
            let diverged = |reason: String, last_good: &Model| TrainError::Diverged {
                epoch,
                reason,
                last_good: Box::new(last_good.clone()),
            };
            let (report, grads) = batch_gradients(&model, &batch, &step_cfg, derive_seed(step_base, global_step))
                .map_err(|e| diverged(step_failure(e), &last_good))?;
            if !report.total.is_finite() {
                return Err(diverged(format!("loss became {}", report.total), &last_good));
            }
            adam_step(model.params_mut(), &grads, &mut state, &adam).map_err(|e| diverged(e.to_string(), &last_good))?;
            sum.total += report.total;
            sum.mse += report.mse;
            sum.pe += report.pe;
            sum.cl += report.cl;
            batches += 1;
            global_step += 1;
        }
        let n = batches as f64;
        let log = EpochLog {
            epoch,
            total: sum.total / n,
            mse: sum.mse / n,
            pe: sum.pe / n,
            cl: sum.cl / n,
        };
        on_epoch(&log);
        epochs.push(log);
        last_good = model.clone();
    }

    let (test, predictions) = evaluate(&model, &dataset.test, config.pe, config.bins).map_err(|e| match e {
        TrainError::Numeric(reason) => TrainError::Diverged {
            epoch: config.epochs,
            reason,
            last_good: Box::new(last_good.clone()),
        },
        other => other,
    })?;
    let report = RunReport {
        model: config.model,
        pe: config.pe,
        scl: config.scl,
        cl_variant: config.cl_variant,
        split: config.split,
        seed: config.seed,
        config_hash: config.hash(),
        train_windows: dataset.train.len(),
        test_windows: dataset.test.len(),
        epochs,
        initial,
        test,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        model,
        report,
        predictions,
    })
}
