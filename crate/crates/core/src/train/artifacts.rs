use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{build_dataset_with_stats, DailyRecord, Dataset, NormalizationStats};
use crate::model::{load_checkpoint, save_checkpoint, Model, Prediction};

use super::ablation::{write_results_csv, CellResult, SclSetting};
use super::{evaluate, EpochLog, Evaluation, TrainError, TrainOutcome};

pub const TRAIN_LOG_HEADER: [&str; 5] = ["epoch", "L_total", "L_MSE", "L_PE", "L_CL"];

/// Paths written by [`write_run_artifacts`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub report: PathBuf,
    pub results: PathBuf,
    pub train_log: PathBuf,
    pub checkpoint: PathBuf,
    pub config: PathBuf,
    pub timeseries: PathBuf,
    pub box_plot: PathBuf,
    pub histogram: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        RunArtifacts {
            report: dir.join("report.json"),
            results: dir.join("results.csv"),
            train_log: dir.join("train_log.tsv"),
            checkpoint: dir.join("checkpoint"),
            config: dir.join("config.json"),
            timeseries: dir.join("plot_timeseries.csv"),
            box_plot: dir.join("plot_box.json"),
            histogram: dir.join("plot_histogram.csv"),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(io(path))
}

pub fn write_train_log(path: &Path, epochs: &[EpochLog]) -> Result<(), TrainError> {
    let mut text = TRAIN_LOG_HEADER.join("\t");
    text.push('\n');
    for e in epochs {
        text.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.epoch, e.total, e.mse, e.pe, e.cl));
    }
    fs::write(path, text).map_err(io(path))
}

pub fn read_train_log(path: &Path) -> Result<Vec<EpochLog>, TrainError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(TRAIN_LOG_HEADER.join("\t").as_str()) {
        return Err(TrainError::Contract(format!("{}: unexpected header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || TrainError::Contract(format!("{}: malformed line {}", path.display(), i + 2));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|_| bad())?,
                total: num(1)?,
                mse: num(2)?,
                pe: num(3)?,
                cl: num(4)?,
            })
        })
        .collect()
}

/// Writes the report, results row, training log, checkpoint and plot data
/// of a finished run into `dir`.
pub fn write_run_artifacts(dir: &Path, config: &RunConfig, dataset: &Dataset, outcome: &TrainOutcome) -> Result<RunArtifacts, TrainError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let paths = RunArtifacts::in_dir(dir);
    let report = &outcome.report;
    write_json(&paths.report, report)?;
    fs::write(&paths.config, config.to_json() + "\n").map_err(io(&paths.config))?;
    write_train_log(&paths.train_log, &report.epochs)?;
    let row = CellResult {
        model: report.model,
        split: report.split,
        scl: SclSetting::from_flags(report.scl, report.cl_variant),
        pe: report.pe,
        seed: report.seed,
        outcome: Ok((report.test.mse, report.test.rmse)),
    };
    write_results_csv(&paths.results, std::slice::from_ref(&row))?;
    save_checkpoint(
        &outcome.model,
        &paths.checkpoint,
        serde_json::json!({
            "config": config,
            "input_stats": dataset.input_stats,
            "target_stats": dataset.target_stats,
            "test": report.test,
        }),
    )?;
    write_json(
        &paths.box_plot,
        &serde_json::json!({ "initial": report.initial.deviations, "final": report.test.deviations }),
    )?;
    let mut hist = csv::Writer::from_path(&paths.histogram).map_err(|e| csv_err(&paths.histogram, e))?;
    hist.write_record(["bin_left", "bin_right", "count"]).map_err(|e| csv_err(&paths.histogram, e))?;
    let h = &report.test.histogram;
    for (k, count) in h.counts.iter().enumerate() {
        hist.write_record([h.edges[k].to_string(), h.edges[k + 1].to_string(), count.to_string()])
            .map_err(|e| csv_err(&paths.histogram, e))?;
    }
    hist.flush().map_err(io(&paths.histogram))?;
    write_timeseries(&paths.timeseries, dataset, outcome)?;
    Ok(paths)
}

/// Per-window test series in normalized units; the parameter columns are
/// empty when parameter estimation is off.
fn write_timeseries(path: &Path, dataset: &Dataset, outcome: &TrainOutcome) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["date", "target", "pred", "h_est", "alpha", "beta", "gamma"])
        .map_err(|e| csv_err(path, e))?;
    let p = &outcome.predictions;
    let opt = |v: &[f64], i: usize| v.get(i).map_or(String::new(), f64::to_string);
    for i in 0..dataset.test.len() {
        w.write_record([
            dataset.test.dates[i].to_string(),
            dataset.test.y[i].to_string(),
            p.pred[i].to_string(),
            opt(&p.h_est, i),
            opt(&p.alpha, i),
            opt(&p.beta, i),
            opt(&p.gamma, i),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io(path))
}

/// A checkpoint written by [`write_run_artifacts`] together with the
/// configuration and normalization it was trained under.
#[derive(Debug, Clone)]
pub struct RestoredRun {
    pub model: Model,
    pub config: RunConfig,
    pub input_stats: NormalizationStats,
    pub target_stats: NormalizationStats,
}

pub fn restore_run(checkpoint: &Path) -> Result<RestoredRun, TrainError> {
    let (model, manifest) = load_checkpoint(checkpoint)?;
    let field = |key: &str| {
        manifest
            .metadata
            .get(key)
            .cloned()
            .ok_or_else(|| TrainError::Contract(format!("{}: metadata lacks `{key}`", checkpoint.display())))
    };
    let parse = |key: &str, e: serde_json::Error| {
        TrainError::Contract(format!("{}: bad `{key}` metadata: {e}", checkpoint.display()))
    };
    let config: RunConfig = serde_json::from_value(field("config")?).map_err(|e| parse("config", e))?;
    let input_stats = serde_json::from_value(field("input_stats")?).map_err(|e| parse("input_stats", e))?;
    let target_stats = serde_json::from_value(field("target_stats")?).map_err(|e| parse("target_stats", e))?;
    if config.model_spec() != *model.spec() {
        return Err(TrainError::Contract(format!(
            "{}: stored configuration does not match the checkpointed model",
            checkpoint.display()
        )));
    }
    Ok(RestoredRun {
        model,
        config,
        input_stats,
        target_stats,
    })
}

/// Evaluates a restored model on the test portion of `series`, split and
/// normalized exactly as during training.
pub fn evaluate_restored(run: &RestoredRun, series: &[DailyRecord]) -> Result<(Evaluation, Prediction), TrainError> {
    let c = &run.config;
    let dataset = build_dataset_with_stats(
        series,
        c.split,
        &c.constants(),
        c.noise_sigma,
        c.seed,
        Some((run.input_stats, run.target_stats)),
    )?;
    evaluate(&run.model, &dataset.test, c.pe, c.bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{load_series, prepare_dataset, read_results_csv, train};

    #[test]
    fn written_run_restores_to_identical_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            synth_length: 150,
            epochs: 2,
            hidden: 8,
            heads: 2,
            ffn_hidden: 8,
            ..RunConfig::default()
        };
        let series = load_series(&config).unwrap();
        let ds = prepare_dataset(&config, &series).unwrap();
        let out = train(&config, &ds, &mut |_| {}).unwrap();
        let paths = write_run_artifacts(dir.path(), &config, &ds, &out).unwrap();

        let run = restore_run(&paths.checkpoint).unwrap();
        assert_eq!(run.config, config);
        assert_eq!(run.model, out.model);
        let (eval, pred) = evaluate_restored(&run, &series).unwrap();
        assert_eq!(eval, out.report.test);
        assert_eq!(pred, out.predictions);

        assert_eq!(read_train_log(&paths.train_log).unwrap(), out.report.epochs);
        let rows = read_results_csv(&paths.results).unwrap();
        assert_eq!(rows[0].outcome, Ok((out.report.test.mse, out.report.test.rmse)));
        assert_eq!(RunConfig::load(&paths.config).unwrap(), config);
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(restore_run(&dir.path().join("nope")), Err(TrainError::Checkpoint(_))));
    }
}
