//! Training objectives: supervised error, physics-encoding consistency,
//! contrastive alignment of original and augmented latents.

use physe_tensor::{Result, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

/// Contrastive objective applied to `(z, z_aug)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContrastiveVariant {
    /// Normalized temperature-scaled cross entropy over the batch.
    #[serde(rename = "nt_xent")]
    NtXent,
    /// Mean cosine distance between each latent and its augmented view.
    #[serde(rename = "stability")]
    Stability,
}

impl std::str::FromStr for ContrastiveVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "nt_xent" => Ok(ContrastiveVariant::NtXent),
            "stability" => Ok(ContrastiveVariant::Stability),
            other => Err(format!("unknown contrastive variant '{other}' (expected nt_xent or stability)")),
        }
    }
}

impl std::fmt::Display for ContrastiveVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ContrastiveVariant::NtXent => "nt_xent",
            ContrastiveVariant::Stability => "stability",
        })
    }
}

/// Weights and settings of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pe: f64,
    pub cl: f64,
    pub temperature: f64,
    pub variant: ContrastiveVariant,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pe: 1.0,
            cl: 0.5,
            temperature: 0.5,
            variant: ContrastiveVariant::NtXent,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.pe >= 0.0 && self.pe.is_finite()) {
            return Err(format!("lambda_pe must be non-negative, got {}", self.pe));
        }
        if !(self.cl >= 0.0 && self.cl.is_finite()) {
            return Err(format!("lambda_cl must be non-negative, got {}", self.cl));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(format!("tau must be positive, got {}", self.temperature));
        }
        Ok(())
    }
}

/// A loss component that could not be evaluated.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("loss component {component}: {source}")]
pub struct LossError {
    pub component: &'static str,
    #[source]
    pub source: TensorError,
}

fn component<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, LossError> {
    r.map_err(|source| LossError { component: name, source })
}

/// Tape handles of the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub mse: Var,
    pub pe: Option<Var>,
    pub cl: Option<Var>,
}

/// Scalar values of the loss terms; disabled terms report 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub mse: f64,
    pub pe: f64,
    pub cl: f64,
}

impl LossTerms {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let v = |x: Var| tape.value(x).data()[0];
        LossReport {
            total: v(self.total),
            mse: v(self.mse),
            pe: self.pe.map_or(0.0, v),
            cl: self.cl.map_or(0.0, v),
        }
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::Shape {
            op,
            shapes: vec![tape.shape(a).to_vec(), tape.shape(b).to_vec()],
        });
    }
    Ok(())
}

fn mean_squared_difference(tape: &mut Tape, op: &'static str, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, op, a, b)?;
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// `mean((pred - target)^2)`.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    mean_squared_difference(tape, "mse_loss", pred, target)
}

/// `mean((pred - est)^2)` between direct predictions and the physics-encoded estimate.
pub fn pe_loss(tape: &mut Tape, pred: Var, est: Var) -> Result<Var> {
    mean_squared_difference(tape, "pe_loss", pred, est)
}

/// Pairing that matches row `i` of `[z; z_aug]` with its other view.
pub fn view_pairing(m: usize) -> Vec<usize> {
    (0..2 * m).map(|i| (i + m) % (2 * m)).collect()
}

/// NT-Xent over the rows of `z_all` with positives given by `pairing`:
/// with `n_i` the unit-normalized rows and `s_ik = n_i · n_k / τ`, the loss
/// is `mean_i [ log Σ_{k≠i} exp(s_ik) − s_{i,pairing[i]} ]`.
pub fn nt_xent_loss(tape: &mut Tape, z_all: Var, pairing: &[usize], temperature: f64) -> Result<Var> {
    const OP: &str = "nt_xent_loss";
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(TensorError::Domain {
            op: OP,
            detail: format!("temperature must be positive, got {temperature}"),
        });
    }
    let shape = tape.shape(z_all).to_vec();
    if shape.len() != 2 || shape[0] < 2 || shape[0] != pairing.len() {
        return Err(TensorError::Contract(format!(
            "{OP} needs at least two rows and one partner per row, got shape {shape:?} and {} partners",
            pairing.len()
        )));
    }
    let n = shape[0];
    for (i, &p) in pairing.iter().enumerate() {
        if p >= n || p == i || pairing[p] != i {
            return Err(TensorError::Contract(format!(
                "{OP} pairing is not a perfect matching at row {i}"
            )));
        }
    }
    let unit = tape.row_normalize(z_all)?;
    let unit_t = tape.transpose(unit)?;
    let sim = tape.matmul(unit, unit_t)?;
    let sim = tape.scale(sim, 1.0 / temperature)?;

    // The shift is a constant, so it cancels exactly in the gradient.
    let s = tape.value(sim).data();
    let mut shift = vec![0.0; n];
    let mut off_diag = vec![1.0; n * n];
    let mut positive = vec![0.0; n * n];
    for i in 0..n {
        shift[i] = (0..n)
            .filter(|&k| k != i)
            .map(|k| s[i * n + k])
            .fold(f64::NEG_INFINITY, f64::max);
        off_diag[i * n + i] = 0.0;
        positive[i * n + pairing[i]] = 1.0;
    }
    let shift = tape.constant(Tensor::new(&[n, 1], shift)?)?;
    let off_diag = tape.constant(Tensor::new(&[n, n], off_diag)?)?;
    let positive = tape.constant(Tensor::new(&[n, n], positive)?)?;

    let centered = tape.sub(sim, shift)?;
    let e = tape.exp(centered)?;
    let e = tape.mul(e, off_diag)?;
    let denom = tape.sum_axis(e, 1)?;
    let lse = tape.log(denom)?;
    let lse = tape.add(lse, shift)?;
    let pos = tape.mul(sim, positive)?;
    let pos = tape.sum_axis(pos, 1)?;
    let per_view = tape.sub(lse, pos)?;
    tape.mean(per_view)
}

/// NT-Xent over `[z; z_aug]` where row `i` of `z` pairs with row `i` of `z_aug`.
pub fn nt_xent_views(tape: &mut Tape, z: Var, z_aug: Var, temperature: f64) -> Result<Var> {
    same_shape(tape, "nt_xent_loss", z, z_aug)?;
    let m = tape.shape(z)[0];
    let all = tape.concat(&[z, z_aug], 0)?;
    nt_xent_loss(tape, all, &view_pairing(m), temperature)
}

/// `mean(1 − cos(z, z_aug))` over the batch.
pub fn stability_regularizer(tape: &mut Tape, z: Var, z_aug: Var) -> Result<Var> {
    same_shape(tape, "stability_regularizer", z, z_aug)?;
    let cos = tape.cosine_similarity(z, z_aug)?;
    let dist = tape.scale(cos, -1.0)?;
    let dist = tape.shift(dist, 1.0)?;
    tape.mean(dist)
}

pub fn contrastive_loss(tape: &mut Tape, z: Var, z_aug: Var, weights: &LossWeights) -> Result<Var> {
    match weights.variant {
        ContrastiveVariant::NtXent => nt_xent_views(tape, z, z_aug, weights.temperature),
        ContrastiveVariant::Stability => stability_regularizer(tape, z, z_aug),
    }
}

/// Inputs to [`total_loss`]; absent optional parts disable their term.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs {
    /// Final-step predictions and targets, `[batch, 1]`.
    pub pred: Var,
    pub target: Var,
    /// Per-step direct predictions and physics-encoded estimates.
    pub physics: Option<(Var, Var)>,
    /// Latents of the original and augmented views.
    pub latents: Option<(Var, Var)>,
}

/// `MSE + λ_pe · PE + λ_cl · CL`. A term is evaluated when its inputs are
/// present; it enters the total only with a nonzero weight.
pub fn total_loss(tape: &mut Tape, inputs: &LossInputs, weights: &LossWeights) -> std::result::Result<LossTerms, LossError> {
    let mse = component("mse", mse_loss(tape, inputs.pred, inputs.target))?;
    let mut total = mse;
    let pe = match inputs.physics {
        Some((pred, est)) => {
            let pe = component("pe", pe_loss(tape, pred, est))?;
            if weights.pe != 0.0 {
                total = component("pe", tape.scale(pe, weights.pe).and_then(|t| tape.add(total, t)))?;
            }
            Some(pe)
        }
        None => None,
    };
    let cl = match inputs.latents {
        Some((z, z_aug)) => {
            let cl = component("cl", contrastive_loss(tape, z, z_aug, weights))?;
            if weights.cl != 0.0 {
                total = component("cl", tape.scale(cl, weights.cl).and_then(|t| tape.add(total, t)))?;
            }
            Some(cl)
        }
        None => None,
    };
    Ok(LossTerms { total, mse, pe, cl })
}
