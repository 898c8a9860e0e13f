use serde::{Deserialize, Serialize};

use crate::data::WindowSource;
use crate::model::{Model, Prediction};

use super::TrainError;

/// Windows evaluated per parallel block.
const EVAL_BLOCK: usize = 256;

/// Box-plot statistics; quartiles use linear interpolation between order
/// statistics and the whiskers reach the most extreme values within
/// 1.5 IQR of the quartiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: usize,
}

/// Equal-width histogram; `edges` has one more entry than `counts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Test metrics over final-step predictions (normalized units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub windows: usize,
    pub mse: f64,
    pub rmse: f64,
    /// Summary of prediction-minus-target deviations.
    pub deviations: BoxSummary,
    pub histogram: Histogram,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_summary(values: &[f64]) -> Option<BoxSummary> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let q1 = quantile(&s, 0.25);
    let q3 = quantile(&s, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = || s.iter().copied().filter(|v| (lo_fence..=hi_fence).contains(v));
    Some(BoxSummary {
        median: quantile(&s, 0.5),
        q1,
        q3,
        whisker_low: inside().fold(f64::INFINITY, f64::min),
        whisker_high: inside().fold(f64::NEG_INFINITY, f64::max),
        outliers: s.iter().filter(|v| !(lo_fence..=hi_fence).contains(*v)).count(),
    })
}

/// Histogram with `bins` equal-width bins over `[min, max]`; the last bin
/// is closed. When all values coincide the range is widened to `v ± 0.5`.
pub fn histogram(values: &[f64], bins: usize) -> Option<Histogram> {
    if values.is_empty() || bins == 0 {
        return None;
    }
    let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let k = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    Some(Histogram { edges, counts })
}

/// Metrics of `pred` against `target`.
pub fn score(pred: &[f64], target: &[f64], bins: usize) -> Result<Evaluation, TrainError> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(TrainError::Contract(format!(
            "cannot score {} predictions against {} targets",
            pred.len(),
            target.len()
        )));
    }
    let dev: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let mse = dev.iter().map(|d| d * d).sum::<f64>() / dev.len() as f64;
    if !mse.is_finite() {
        return Err(TrainError::Numeric("non-finite test error".into()));
    }
    Ok(Evaluation {
        windows: dev.len(),
        mse,
        rmse: mse.sqrt(),
        deviations: box_summary(&dev).expect("non-empty"),
        histogram: histogram(&dev, bins.max(1)).expect("non-empty"),
    })
}

/// Evaluation-mode metrics of `model` on every window of `source`.
pub fn evaluate(model: &Model, source: &WindowSource, with_pe: bool, bins: usize) -> Result<(Evaluation, Prediction), TrainError> {
    if source.is_empty() {
        return Err(TrainError::Contract("empty evaluation source".into()));
    }
    let indices: Vec<usize> = (0..source.len()).collect();
    let batch = crate::data::SequenceBatch::gather(source, &indices);
    let pred = model.predict(&batch.x, EVAL_BLOCK, with_pe)?;
    let eval = score(&pred.pred, &source.y, bins)?;
    Ok((eval, pred))
}
