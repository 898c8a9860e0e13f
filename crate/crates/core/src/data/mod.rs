//! Series ingestion, proxy targets, normalization, windowing and batching.

mod batch;
mod csv_io;
mod dataset;
mod synth;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{batch_iterator, Batches, SequenceBatch};
pub use csv_io::{read_csv, write_csv, CSV_HEADER};
pub use dataset::{build_dataset, build_dataset_with_stats, Dataset, NormalizationStats, WindowSource, WINDOW};
pub use synth::{synthesize_series, SynthParams, MIN_SERIES_LEN};

/// One day of spatially averaged observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyRecord {
    pub date: NaiveDate,
    /// Snow density, kg/m³.
    pub rho_s: f64,
    /// Sea-ice concentration, fraction.
    pub sic: f64,
    /// Snow albedo, fraction.
    pub albedo: f64,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("header must be `{expected}`; missing column `{column}`")]
    MissingColumn { column: String, expected: String },
    #[error("header must be `{expected}`, found `{found}`")]
    HeaderMismatch { expected: String, found: String },
    #[error("line {line}: cannot parse {field} from `{value}`")]
    Parse {
        line: u64,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: {field} = {value} is out of range")]
    Range {
        line: u64,
        field: &'static str,
        value: f64,
    },
    #[error("line {line}: duplicate date {date}")]
    DuplicateDate { line: u64, date: NaiveDate },
    #[error("line {line}: date {date} is earlier than the previous row")]
    Ordering { line: u64, date: NaiveDate },
    #[error("degenerate series: {0} has zero variance on the training split")]
    Degenerate(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Physics(#[from] crate::physics::PhysicsError),
}

/// Checks value ranges and date ordering of a parsed series. `first_line` is
/// the file line of the first record, used in diagnostics.
pub fn validate_series(records: &[DailyRecord], first_line: u64) -> Result<(), DataError> {
    let mut prev: Option<NaiveDate> = None;
    for (k, r) in records.iter().enumerate() {
        let line = first_line + k as u64;
        if !(r.rho_s.is_finite() && r.rho_s > 0.0) {
            return Err(DataError::Range {
                line,
                field: "rho_s",
                value: r.rho_s,
            });
        }
        for (field, value) in [("sic", r.sic), ("albedo", r.albedo)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(DataError::Range { line, field, value });
            }
        }
        if let Some(p) = prev {
            if r.date == p {
                return Err(DataError::DuplicateDate { line, date: r.date });
            }
            if r.date < p {
                return Err(DataError::Ordering { line, date: r.date });
            }
        }
        prev = Some(r.date);
    }
    Ok(())
}
