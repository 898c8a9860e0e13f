//! Hydrostatic balance of a floating snow/ice column and the proxy target.
//!
//! The forward thickness relation and the proxy use denominators of opposite
//! sign (`rho_i - rho_w` and `rho_w - rho_i`); both are kept exactly as
//! derived. "albedo" here is the snow albedo input of the proxy and is
//! unrelated to the learned `alpha_param`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("singular densities: rho_i == rho_w == {0}")]
    SingularDensity(f64),
    #[error("invalid constants: need rho_w > rho_i > 0, got rho_w={rho_w}, rho_i={rho_i}")]
    InvalidConstants { rho_w: f64, rho_i: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("target thickness {target} is not attainable on the grid")]
    NotAttainable { target: f64 },
}

/// Seawater and sea-ice densities, kg/m³.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub rho_w: f64,
    pub rho_i: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        PhysicalConstants {
            rho_w: 1024.0,
            rho_i: 917.0,
        }
    }
}

impl PhysicalConstants {
    /// Constants for which ice floats.
    pub fn new(rho_w: f64, rho_i: f64) -> Result<Self, PhysicsError> {
        let c = PhysicalConstants { rho_w, rho_i };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        if self.rho_w == self.rho_i {
            return Err(PhysicsError::SingularDensity(self.rho_w));
        }
        if !(self.rho_w > self.rho_i && self.rho_i > 0.0) {
            return Err(PhysicsError::InvalidConstants {
                rho_w: self.rho_w,
                rho_i: self.rho_i,
            });
        }
        Ok(())
    }
}

/// One snow/ice column. Lengths in metres, snow density in kg/m³.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HydrostaticState {
    pub h_i: f64,
    pub h_s: f64,
    pub f_b: f64,
    pub h_sub: f64,
    pub rho_s: f64,
}

impl HydrostaticState {
    /// Builds a consistent column from snow depth and freeboard: ice
    /// thickness from [`forward_thickness`], submerged depth from
    /// `h_i + h_s - f_b`.
    pub fn from_forward(
        h_s: f64,
        f_b: f64,
        rho_s: f64,
        constants: &PhysicalConstants,
    ) -> Result<Self, PhysicsError> {
        let h_i = forward_thickness(h_s, f_b, rho_s, constants)?;
        let h_sub = h_i + h_s - f_b;
        if h_i < 0.0 || h_s < 0.0 || h_sub < 0.0 {
            return Err(PhysicsError::InvalidInput(format!(
                "negative column: h_i={h_i}, h_s={h_s}, h_sub={h_sub}"
            )));
        }
        Ok(HydrostaticState {
            h_i,
            h_s,
            f_b,
            h_sub,
            rho_s,
        })
    }
}

/// Ice thickness from snow depth and freeboard:
/// `h_i = [h_s (rho_w - rho_s) - rho_w f_b] / (rho_i - rho_w)`.
pub fn forward_thickness(
    h_s: f64,
    f_b: f64,
    rho_s: f64,
    constants: &PhysicalConstants,
) -> Result<f64, PhysicsError> {
    let PhysicalConstants { rho_w, rho_i } = *constants;
    if rho_i == rho_w {
        return Err(PhysicsError::SingularDensity(rho_w));
    }
    Ok((h_s * (rho_w - rho_s) - rho_w * f_b) / (rho_i - rho_w))
}

/// Freeboard that reproduces `h_i` for the given snow depth; the algebraic
/// inverse of [`forward_thickness`] in `f_b`.
pub fn invert_freeboard(
    h_i: f64,
    h_s: f64,
    rho_s: f64,
    constants: &PhysicalConstants,
) -> Result<f64, PhysicsError> {
    let PhysicalConstants { rho_w, rho_i } = *constants;
    if rho_w == 0.0 {
        return Err(PhysicsError::InvalidInput("rho_w must be non-zero".into()));
    }
    Ok((h_s * (rho_w - rho_s) - h_i * (rho_i - rho_w)) / rho_w)
}

/// Column weight minus displaced water, kg/m². Zero iff balanced.
pub fn hydrostatic_residual(state: &HydrostaticState, constants: &PhysicalConstants) -> f64 {
    constants.rho_i * state.h_i + state.rho_s * state.h_s - constants.rho_w * state.h_sub
}

/// Observed inputs of the proxy target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyInputs {
    /// Sea-ice concentration in [0, 1].
    pub sic: f64,
    /// Snow albedo in [0, 1].
    pub albedo: f64,
    /// Snow density, kg/m³.
    pub rho_s: f64,
}

impl ProxyInputs {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(0.0..=1.0).contains(&self.sic) {
            return Err(PhysicsError::InvalidInput(format!("sic {} outside [0, 1]", self.sic)));
        }
        if !(0.0..=1.0).contains(&self.albedo) {
            return Err(PhysicsError::InvalidInput(format!(
                "albedo {} outside [0, 1]",
                self.albedo
            )));
        }
        if !(self.rho_s > 0.0) {
            return Err(PhysicsError::InvalidInput(format!("rho_s {} must be positive", self.rho_s)));
        }
        Ok(())
    }
}

/// Proxy thickness `(rho_w C + albedo rho_s) / (rho_w - rho_i)`, in proxy
/// units (normalized downstream).
pub fn proxy_target(inputs: &ProxyInputs, constants: &PhysicalConstants) -> Result<f64, PhysicsError> {
    let PhysicalConstants { rho_w, rho_i } = *constants;
    if rho_w == rho_i {
        return Err(PhysicsError::SingularDensity(rho_w));
    }
    Ok((rho_w * inputs.sic + inputs.albedo * inputs.rho_s) / (rho_w - rho_i))
}

/// Sampling grid for [`demonstrate_nonuniqueness`].
#[derive(Debug, Clone, PartialEq)]
pub struct NonuniqueGrid {
    pub h_s_max: f64,
    pub f_b_max: f64,
    pub h_s_samples: usize,
    pub f_b_samples: usize,
    pub rho_s: f64,
    /// Accepted |forward_thickness - target|, metres.
    pub tolerance: f64,
}

impl Default for NonuniqueGrid {
    fn default() -> Self {
        // h_s step of 0.01 m puts 0.3 and 0.5 on grid nodes.
        NonuniqueGrid {
            h_s_max: 0.99,
            f_b_max: 0.99,
            h_s_samples: 100,
            f_b_samples: 100,
            rho_s: 330.0,
            tolerance: 1e-6,
        }
    }
}

fn linspace(max: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = max / (n - 1) as f64;
    (0..n).map(move |i| i as f64 * step)
}

/// Enumerates `(h_s, f_b)` columns that all produce `h_i_target`.
///
/// Each snow-depth node of the grid is paired with every freeboard interval;
/// thickness is affine in freeboard, so an interval whose end values bracket
/// the target contains exactly one solution, found by interpolation. Pairs
/// whose thickness misses the target by more than `grid.tolerance`, or whose
/// submerged depth would be negative, are dropped.
pub fn demonstrate_nonuniqueness(
    h_i_target: f64,
    constants: &PhysicalConstants,
    grid: &NonuniqueGrid,
) -> Result<Vec<(f64, f64)>, PhysicsError> {
    if grid.h_s_samples < 2 || grid.f_b_samples < 2 {
        return Err(PhysicsError::InvalidInput("grid needs at least 2 samples per axis".into()));
    }
    constants.validate()?;
    let f_b_nodes: Vec<f64> = linspace(grid.f_b_max, grid.f_b_samples).collect();
    let mut pairs = Vec::new();
    for h_s in linspace(grid.h_s_max, grid.h_s_samples) {
        for (j, w) in f_b_nodes.windows(2).enumerate() {
            let lo = forward_thickness(h_s, w[0], grid.rho_s, constants)? - h_i_target;
            let hi = forward_thickness(h_s, w[1], grid.rho_s, constants)? - h_i_target;
            let last = j + 2 == f_b_nodes.len();
            // Half-open intervals so a root on a shared node is counted once.
            let brackets = lo == 0.0 || (lo.signum() != hi.signum()) || (last && hi == 0.0);
            if !brackets {
                continue;
            }
            let f_b = if lo == 0.0 {
                w[0]
            } else if hi == 0.0 {
                w[1]
            } else {
                w[0] + (w[1] - w[0]) * lo / (lo - hi)
            };
            let h_i = forward_thickness(h_s, f_b, grid.rho_s, constants)?;
            let h_sub = h_i + h_s - f_b;
            if (h_i - h_i_target).abs() <= grid.tolerance && h_sub >= 0.0 {
                pairs.push((h_s, f_b));
            }
            break;
        }
    }
    if pairs.is_empty() {
        return Err(PhysicsError::NotAttainable { target: h_i_target });
    }
    Ok(pairs)
}
