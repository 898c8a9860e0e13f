use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::DailyRecord;
use crate::model::ModelKind;
use crate::objectives::ContrastiveVariant;

use super::{prepare_dataset, train, TrainError};

pub const RESULTS_HEADER: [&str; 7] = ["model", "split", "scl", "pe", "seed", "mse", "rmse"];

/// Contrastive setting of an ablation cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SclSetting {
    Off,
    On(ContrastiveVariant),
}

impl SclSetting {
    pub fn from_flags(enabled: bool, variant: ContrastiveVariant) -> Self {
        if enabled {
            SclSetting::On(variant)
        } else {
            SclSetting::Off
        }
    }

    pub fn variant(self) -> Option<ContrastiveVariant> {
        match self {
            SclSetting::Off => None,
            SclSetting::On(v) => Some(v),
        }
    }
}

impl fmt::Display for SclSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant() {
            None => f.write_str("off"),
            Some(v) => v.fmt(f),
        }
    }
}

impl FromStr for SclSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "off" {
            return Ok(SclSetting::Off);
        }
        s.parse::<ContrastiveVariant>()
            .map(|v| SclSetting::from_flags(true, v))
            .map_err(|_| format!("unknown scl setting '{s}' (expected off, nt_xent or stability)"))
    }
}

/// Cross product of ablation factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub models: Vec<ModelKind>,
    pub splits: Vec<f64>,
    pub scl: Vec<SclSetting>,
    pub pe: Vec<bool>,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            models: ModelKind::ALL.to_vec(),
            splits: vec![0.8, 0.6, 0.5],
            scl: vec![
                SclSetting::Off,
                SclSetting::On(ContrastiveVariant::NtXent),
                SclSetting::On(ContrastiveVariant::Stability),
            ],
            pe: vec![true, false],
            seeds: (1..=5).collect(),
        }
    }
}

/// One cell of the grid with its outcome `(mse, rmse)` or failure message.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub model: ModelKind,
    pub split: f64,
    pub scl: SclSetting,
    pub pe: bool,
    pub seed: u64,
    pub outcome: Result<(f64, f64), String>,
}

impl AblationGrid {
    pub fn len(&self) -> usize {
        self.models.len() * self.splits.len() * self.scl.len() * self.pe.len() * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells in row order: model, split, scl, pe, seed.
    pub fn cells(&self) -> Vec<(ModelKind, f64, SclSetting, bool, u64)> {
        let mut out = Vec::with_capacity(self.len());
        for &m in &self.models {
            for &sp in &self.splits {
                for &scl in &self.scl {
                    for &pe in &self.pe {
                        for &seed in &self.seeds {
                            out.push((m, sp, scl, pe, seed));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Trains every cell of `grid` on `series`, starting from `base`. Cells run
/// in parallel and fail independently; results come back in grid order.
pub fn run_ablation(
    base: &RunConfig,
    series: &[DailyRecord],
    grid: &AblationGrid,
    on_cell: &(dyn Fn(&CellResult) + Sync),
) -> Result<Vec<CellResult>, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::Contract("ablation grid has no cells".into()));
    }
    let results = grid
        .cells()
        .into_par_iter()
        .map(|(model, split, scl, pe, seed)| {
            let config = RunConfig {
                model,
                split,
                scl: scl.variant().is_some(),
                cl_variant: scl.variant().unwrap_or(base.cl_variant),
                pe,
                seed,
                ..base.clone()
            };
            let outcome = prepare_dataset(&config, series)
                .map_err(TrainError::from)
                .and_then(|ds| train(&config, &ds, &mut |_| {}))
                .map(|o| (o.report.test.mse, o.report.test.rmse))
                .map_err(|e| e.to_string());
            let cell = CellResult {
                model,
                split,
                scl,
                pe,
                seed,
                outcome,
            };
            on_cell(&cell);
            cell
        })
        .collect();
    Ok(results)
}

fn csv_err(path: &Path, e: csv::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Writes `model,split,scl,pe,seed,mse,rmse` rows; failed cells carry `NaN`.
pub fn write_results_csv(path: &Path, rows: &[CellResult]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(RESULTS_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let (mse, rmse) = r.outcome.clone().unwrap_or((f64::NAN, f64::NAN));
        w.write_record([
            r.model.to_string(),
            r.split.to_string(),
            r.scl.to_string(),
            if r.pe { "on" } else { "off" }.to_string(),
            r.seed.to_string(),
            mse.to_string(),
            rmse.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_results_csv(path: &Path) -> Result<Vec<CellResult>, TrainError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(RESULTS_HEADER) {
        return Err(TrainError::Contract(format!("{}: unexpected header", path.display())));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let bad = |what: &str| TrainError::Contract(format!("{}: row {}: bad {what}", path.display(), i + 1));
            let num = |k: usize, what: &str| rec[k].parse::<f64>().map_err(|_| bad(what));
            let (mse, rmse) = (num(5, "mse")?, num(6, "rmse")?);
            Ok(CellResult {
                model: rec[0].parse().map_err(|_| bad("model"))?,
                split: num(1, "split")?,
                scl: rec[2].parse().map_err(|_| bad("scl"))?,
                pe: match &rec[3] {
                    "on" => true,
                    "off" => false,
                    _ => return Err(bad("pe")),
                },
                seed: rec[4].parse().map_err(|_| bad("seed"))?,
                outcome: if mse.is_nan() {
                    Err("failed".into())
                } else {
                    Ok((mse, rmse))
                },
            })
        })
        .collect()
}

/// Median metrics across seeds for one grid setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: ModelKind,
    pub split: f64,
    pub scl: String,
    pub pe: bool,
    pub runs: usize,
    pub failures: usize,
    pub median_mse: f64,
    pub median_rmse: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Groups results by everything but the seed, keeping first-seen order.
pub fn summarize(results: &[CellResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(ModelKind, u64, SclSetting, bool)> = Vec::new();
    for r in results {
        let key = (r.model, r.split.to_bits(), r.scl, r.pe);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(model, split_bits, scl, pe)| {
            let group: Vec<&CellResult> = results
                .iter()
                .filter(|r| (r.model, r.split.to_bits(), r.scl, r.pe) == (model, split_bits, scl, pe))
                .collect();
            let ok: Vec<(f64, f64)> = group.iter().filter_map(|r| r.outcome.clone().ok()).collect();
            SummaryRow {
                model,
                split: f64::from_bits(split_bits),
                scl: scl.to_string(),
                pe,
                runs: group.len(),
                failures: group.len() - ok.len(),
                median_mse: median(ok.iter().map(|o| o.0).collect()),
                median_rmse: median(ok.iter().map(|o| o.1).collect()),
            }
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}
