use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DailyRecord, DataError, MIN_SERIES_LEN};
use crate::physics::{proxy_target, PhysicalConstants, ProxyInputs};

/// Steps per input window.
pub const WINDOW: usize = 10;

/// Z-score parameters (population standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
}

impl NormalizationStats {
    pub fn fit(values: &[f64], what: &'static str) -> Result<Self, DataError> {
        if values.is_empty() {
            return Err(DataError::InvalidArgument(format!("no values to normalize {what}")));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(DataError::Degenerate(what));
        }
        Ok(NormalizationStats { mean, std })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Stride-1 windows of one chronological portion.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSource {
    /// `[len, WINDOW]` normalized snow density, row-major.
    pub x: Vec<f64>,
    /// Noise-augmented copy of `x`.
    pub x_aug: Vec<f64>,
    /// Normalized proxy target at each window's final step.
    pub y: Vec<f64>,
    /// Date of each window's final step.
    pub dates: Vec<NaiveDate>,
}

impl WindowSource {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn window(&self, i: usize) -> &[f64] {
        &self.x[i * WINDOW..(i + 1) * WINDOW]
    }

    pub fn window_aug(&self, i: usize) -> &[f64] {
        &self.x_aug[i * WINDOW..(i + 1) * WINDOW]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: WindowSource,
    pub test: WindowSource,
    pub input_stats: NormalizationStats,
    pub target_stats: NormalizationStats,
    /// Index of the first test record in the source series.
    pub split_index: usize,
}

fn windows(
    inputs: &[f64],
    targets: &[f64],
    dates: &[NaiveDate],
    noise: &mut dyn FnMut() -> f64,
) -> WindowSource {
    let count = (inputs.len() + 1).saturating_sub(WINDOW);
    let mut x = Vec::with_capacity(count * WINDOW);
    for start in 0..count {
        x.extend_from_slice(&inputs[start..start + WINDOW]);
    }
    let x_aug = x.iter().map(|v| v + noise()).collect();
    WindowSource {
        x,
        x_aug,
        y: targets[WINDOW - 1..].to_vec(),
        dates: dates[WINDOW - 1..].to_vec(),
    }
}

/// Builds normalized train/test windows from a daily series.
///
/// The split is chronological at `floor(split_fraction * len)`; statistics
/// come from the training portion only, and no window crosses the split.
pub fn build_dataset(
    series: &[DailyRecord],
    split_fraction: f64,
    constants: &PhysicalConstants,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    build_dataset_with_stats(series, split_fraction, constants, noise_sigma, seed, None)
}

/// As [`build_dataset`], but normalizes with the given `(input, target)`
/// statistics instead of fitting them.
pub fn build_dataset_with_stats(
    series: &[DailyRecord],
    split_fraction: f64,
    constants: &PhysicalConstants,
    noise_sigma: f64,
    seed: u64,
    stats: Option<(NormalizationStats, NormalizationStats)>,
) -> Result<Dataset, DataError> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "split fraction {split_fraction} must lie strictly between 0 and 1"
        )));
    }
    if series.len() < MIN_SERIES_LEN {
        return Err(DataError::InvalidArgument(format!(
            "series length {} is below the minimum of {MIN_SERIES_LEN}",
            series.len()
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(DataError::InvalidArgument(format!("noise sigma {noise_sigma} must be >= 0")));
    }
    let split = (split_fraction * series.len() as f64).floor() as usize;
    if split < WINDOW || series.len() - split < WINDOW {
        return Err(DataError::InvalidArgument(format!(
            "split at {split} of {} leaves a portion shorter than one window",
            series.len()
        )));
    }

    let targets: Vec<f64> = series
        .iter()
        .map(|r| {
            proxy_target(
                &ProxyInputs {
                    sic: r.sic,
                    albedo: r.albedo,
                    rho_s: r.rho_s,
                },
                constants,
            )
        })
        .collect::<Result<_, _>>()?;
    let inputs: Vec<f64> = series.iter().map(|r| r.rho_s).collect();
    let dates: Vec<NaiveDate> = series.iter().map(|r| r.date).collect();

    let (input_stats, target_stats) = match stats {
        Some(pair) => pair,
        None => (
            NormalizationStats::fit(&inputs[..split], "rho_s")?,
            NormalizationStats::fit(&targets[..split], "proxy target")?,
        ),
    };
    let xs: Vec<f64> = inputs.iter().map(|&v| input_stats.apply(v)).collect();
    let ys: Vec<f64> = targets.iter().map(|&v| target_stats.apply(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sigma).expect("sigma checked above");
    let mut noise = || if noise_sigma == 0.0 { 0.0 } else { normal.sample(&mut rng) };

    let train = windows(&xs[..split], &ys[..split], &dates[..split], &mut noise);
    let test = windows(&xs[split..], &ys[split..], &dates[split..], &mut noise);
    Ok(Dataset {
        train,
        test,
        input_stats,
        target_stats,
        split_index: split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_series, SynthParams};

    fn series(len: usize) -> Vec<DailyRecord> {
        synthesize_series(len, 1, &SynthParams::default()).unwrap()
    }

    #[test]
    fn supplied_statistics_replace_fitted_ones() {
        let s = series(60);
        let c = PhysicalConstants::default();
        let fitted = build_dataset(&s, 0.5, &c, 0.1, 3).unwrap();
        let same = build_dataset_with_stats(&s, 0.5, &c, 0.1, 3, Some((fitted.input_stats, fitted.target_stats))).unwrap();
        assert_eq!(same, fitted);
        let unit = NormalizationStats { mean: 0.0, std: 1.0 };
        let raw = build_dataset_with_stats(&s, 0.5, &c, 0.0, 3, Some((unit, unit))).unwrap();
        assert_eq!(raw.train.x[0], s[0].rho_s);
    }

    #[test]
    fn full_scale_window_counts() {
        let ds = build_dataset(&series(10958), 0.8, &PhysicalConstants::default(), 0.1, 3).unwrap();
        assert_eq!(ds.split_index, 8766);
        assert_eq!(ds.train.len(), 8757);
        assert_eq!(ds.test.len(), 2183);
        assert_eq!(ds.train.x.len(), 8757 * WINDOW);
    }

    #[test]
    fn constant_series_is_degenerate() {
        let flat: Vec<DailyRecord> = series(40)
            .into_iter()
            .map(|r| DailyRecord {
                rho_s: 300.0,
                sic: 0.5,
                albedo: 0.5,
                ..r
            })
            .collect();
        assert!(matches!(
            build_dataset(&flat, 0.5, &PhysicalConstants::default(), 0.1, 0),
            Err(DataError::Degenerate(_))
        ));
    }

    #[test]
    fn zero_noise_leaves_augmented_view_equal() {
        let ds = build_dataset(&series(100), 0.6, &PhysicalConstants::default(), 0.0, 3).unwrap();
        assert_eq!(ds.train.x, ds.train.x_aug);
        assert_eq!(ds.test.x, ds.test.x_aug);
    }

    #[test]
    fn train_inputs_are_standardized() {
        let s = series(2000);
        let ds = build_dataset(&s, 0.7, &PhysicalConstants::default(), 0.1, 3).unwrap();
        let z: Vec<f64> = s[..ds.split_index]
            .iter()
            .map(|r| ds.input_stats.apply(r.rho_s))
            .collect();
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stats_come_from_the_training_portion() {
        let s = series(2000);
        let ds = build_dataset(&s, 0.7, &PhysicalConstants::default(), 0.1, 3).unwrap();
        let test_rho: Vec<f64> = s[ds.split_index..].iter().map(|r| r.rho_s).collect();
        let test_stats = NormalizationStats::fit(&test_rho, "rho_s").unwrap();
        assert_ne!(test_stats, ds.input_stats);
    }

    #[test]
    fn windows_stay_inside_their_portion() {
        let s = series(60);
        let ds = build_dataset(&s, 0.5, &PhysicalConstants::default(), 0.0, 0).unwrap();
        assert_eq!(ds.train.len(), 30 - WINDOW + 1);
        assert_eq!(ds.test.len(), 30 - WINDOW + 1);
        assert_eq!(ds.test.window(0)[0], ds.input_stats.apply(s[30].rho_s));
        assert_eq!(*ds.train.dates.last().unwrap(), s[29].date);
    }

    #[test]
    fn rejects_bad_split() {
        let s = series(100);
        let c = PhysicalConstants::default();
        assert!(build_dataset(&s, 0.0, &c, 0.1, 0).is_err());
        assert!(build_dataset(&s, 1.0, &c, 0.1, 0).is_err());
        assert!(build_dataset(&s, 0.05, &c, 0.1, 0).is_err());
    }
}
