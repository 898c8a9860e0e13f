use std::f64::consts::TAU;

use chrono::{Duration, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DailyRecord, DataError};

pub const MIN_SERIES_LEN: usize = 20;

/// Seasonal cycle and noise levels of the synthetic generator.
///
/// Each variable is `mean + amp * sin(2π (day - lag) / period)` plus a
/// stationary AR(1) process with standard deviation `noise * noise_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub start: NaiveDate,
    pub period_days: f64,
    pub rho_s_mean: f64,
    pub rho_s_amp: f64,
    pub rho_s_noise: f64,
    pub sic_mean: f64,
    pub sic_amp: f64,
    pub sic_lag_days: f64,
    pub sic_noise: f64,
    pub albedo_mean: f64,
    pub albedo_amp: f64,
    pub albedo_lag_days: f64,
    pub albedo_noise: f64,
    pub ar_coeff: f64,
    /// Multiplies every noise level; 0 gives pure sinusoids.
    pub noise_scale: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            start: NaiveDate::from_ymd_opt(1995, 1, 1).expect("valid date"),
            period_days: 365.25,
            rho_s_mean: 300.0,
            rho_s_amp: 40.0,
            rho_s_noise: 6.0,
            sic_mean: 0.82,
            sic_amp: 0.15,
            sic_lag_days: 30.0,
            sic_noise: 0.02,
            albedo_mean: 0.7,
            albedo_amp: 0.15,
            albedo_lag_days: 15.0,
            albedo_noise: 0.03,
            ar_coeff: 0.8,
            noise_scale: 1.0,
        }
    }
}

struct Ar1 {
    coeff: f64,
    innovation: f64,
    state: f64,
}

impl Ar1 {
    fn new(coeff: f64, sd: f64, rng: &mut ChaCha8Rng) -> Self {
        let z: f64 = StandardNormal.sample(rng);
        Ar1 {
            coeff,
            innovation: sd * (1.0 - coeff * coeff).sqrt(),
            state: sd * z,
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let out = self.state;
        let z: f64 = StandardNormal.sample(rng);
        self.state = self.coeff * self.state + self.innovation * z;
        out
    }
}

/// Deterministic synthetic daily series standing in for reanalysis input.
pub fn synthesize_series(
    length: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<Vec<DailyRecord>, DataError> {
    if length < MIN_SERIES_LEN {
        return Err(DataError::InvalidArgument(format!(
            "series length {length} is below the minimum of {MIN_SERIES_LEN}"
        )));
    }
    if !(params.ar_coeff.abs() < 1.0) || params.noise_scale < 0.0 || params.period_days <= 0.0 {
        return Err(DataError::InvalidArgument(
            "need |ar_coeff| < 1, noise_scale >= 0 and a positive period".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = params.noise_scale;
    let mut rho_noise = Ar1::new(params.ar_coeff, params.rho_s_noise * s, &mut rng);
    let mut sic_noise = Ar1::new(params.ar_coeff, params.sic_noise * s, &mut rng);
    let mut albedo_noise = Ar1::new(params.ar_coeff, params.albedo_noise * s, &mut rng);
    let wave = |day: f64, lag: f64| (TAU * (day - lag) / params.period_days).sin();

    (0..length)
        .map(|t| {
            let day = t as f64;
            let date = params.start + Duration::days(t as i64);
            let rho_s = params.rho_s_mean + params.rho_s_amp * wave(day, 0.0) + rho_noise.step(&mut rng);
            let sic = params.sic_mean
                + params.sic_amp * wave(day, params.sic_lag_days)
                + sic_noise.step(&mut rng);
            let albedo = params.albedo_mean
                + params.albedo_amp * wave(day, params.albedo_lag_days)
                + albedo_noise.step(&mut rng);
            Ok(DailyRecord {
                date,
                rho_s: rho_s.clamp(50.0, 650.0),
                sic: sic.clamp(0.0, 1.0),
                albedo: albedo.clamp(0.0, 1.0),
            })
        })
        .collect()
}
