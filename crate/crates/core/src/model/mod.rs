//! PhysE-Inv encoder/attention/decoder network, parameter head and the
//! recurrent baselines.

mod checkpoint;
mod layers;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointManifest, TensorEntry};
pub use layers::{self_attention, AttentionParams, Attended, FeedForward, Linear, LstmLayer, LstmStack};
pub use params::{Bound, ParamStore};

use physe_tensor::{Result as TensorResult, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Bound applied to the raw β output before exponentiation.
pub const BETA_RAW_LIMIT: f64 = 700.0;
/// Amplitude of the γ transform.
pub const GAMMA_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "physe-inv")]
    PhysEInv,
    #[serde(rename = "lstm")]
    Lstm,
    #[serde(rename = "bilstm")]
    BiLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Lstm, ModelKind::BiLstm, ModelKind::PhysEInv];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::PhysEInv => "physe-inv",
            ModelKind::Lstm => "lstm",
            ModelKind::BiLstm => "bilstm",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "physe-inv" => Ok(ModelKind::PhysEInv),
            "lstm" => Ok(ModelKind::Lstm),
            "bilstm" => Ok(ModelKind::BiLstm),
            other => Err(format!("unknown model '{other}' (expected physe-inv, lstm or bilstm)")),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ffn_hidden: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::PhysEInv,
            input_dim: 1,
            hidden: 64,
            layers: 2,
            heads: 4,
            dropout: 0.4,
            ffn_hidden: 64,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.input_dim == 0 || self.hidden == 0 || self.layers == 0 || self.ffn_hidden == 0 {
            return Err("input_dim, hidden, layers and ffn_hidden must be positive".into());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(format!("hidden size {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Width of the latent representation `z`.
    pub fn latent_dim(&self) -> usize {
        match self.kind {
            ModelKind::BiLstm => 2 * self.hidden,
            _ => self.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Backbone {
    PhysEInv {
        encoder: LstmStack,
        attention: AttentionParams,
        decoder: LstmStack,
    },
    Lstm {
        encoder: LstmStack,
    },
    BiLstm {
        forward: LstmStack,
        backward: LstmStack,
    },
}

/// A network together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    backbone: Backbone,
    prediction_head: Linear,
    parameter_head: FeedForward,
}

/// The surjective parameters `(α, β, γ)` as plain values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurjectiveParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl SurjectiveParams {
    /// Applies `α = 2σ(a) − 1`, `β = exp(b)`, `γ = 10 tanh(c)`.
    /// The second value reports whether the raw β input was clamped.
    pub fn from_raw(raw: [f64; 3]) -> (Self, bool) {
        let clamped = raw[1].abs() > BETA_RAW_LIMIT;
        let b = raw[1].clamp(-BETA_RAW_LIMIT, BETA_RAW_LIMIT);
        (
            SurjectiveParams {
                alpha: 2.0 * physe_tensor::sigmoid(raw[0]) - 1.0,
                beta: b.exp(),
                gamma: GAMMA_SCALE * raw[2].tanh(),
            },
            clamped,
        )
    }

    /// Raw head outputs that map to these parameters; `None` outside
    /// `(-1, 1) × (0, ∞) × (-10, 10)`.
    pub fn to_raw(&self) -> Option<[f64; 3]> {
        let ok = self.alpha.abs() < 1.0 && self.beta > 0.0 && self.beta.is_finite() && self.gamma.abs() < GAMMA_SCALE;
        ok.then(|| {
            let p = (self.alpha + 1.0) / 2.0;
            [(p / (1.0 - p)).ln(), self.beta.ln(), (self.gamma / GAMMA_SCALE).atanh()]
        })
    }
}

/// Parameter-estimation outputs of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PhysicsVars {
    /// Raw parameter-head outputs, `[batch, 3]`.
    pub raw: Var,
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Var,
    /// Physics-encoded estimate for every step, `[batch, steps]`.
    pub h_est: Var,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Direct thickness predictions for every step, `[batch, steps]`.
    pub pred_steps: Var,
    /// Prediction at the final step, `[batch, 1]`.
    pub pred_final: Var,
    /// Latent representation `z`, `[batch, latent]`.
    pub latent: Var,
    /// Present when parameter estimation is attached.
    pub physics: Option<PhysicsVars>,
    /// Attention weights per sequence and head (empty for the baselines).
    pub attention: Vec<Var>,
}

/// Plain-value predictions for a set of windows; the physics fields hold
/// final-step values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Prediction {
    pub pred: Vec<f64>,
    pub h_est: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, String> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (h, l, d) = (spec.hidden, spec.layers, spec.dropout);
        let backbone = match spec.kind {
            ModelKind::PhysEInv => Backbone::PhysEInv {
                encoder: LstmStack::new(&mut store, "encoder", spec.input_dim, h, l, d, &mut rng),
                attention: AttentionParams::new(&mut store, "attention", h, spec.heads, &mut rng),
                decoder: LstmStack::new(&mut store, "decoder", h, h, l, d, &mut rng),
            },
            ModelKind::Lstm => Backbone::Lstm {
                encoder: LstmStack::new(&mut store, "encoder", spec.input_dim, h, l, d, &mut rng),
            },
            ModelKind::BiLstm => Backbone::BiLstm {
                forward: LstmStack::new(&mut store, "forward", spec.input_dim, h, l, d, &mut rng),
                backward: LstmStack::new(&mut store, "backward", spec.input_dim, h, l, d, &mut rng),
            },
        };
        let latent = spec.latent_dim();
        let prediction_head = Linear::new(&mut store, "prediction_head", latent, 1, &mut rng);
        let parameter_head = FeedForward::new(&mut store, "parameter_head", latent, spec.ffn_hidden, 3, &mut rng);
        Ok(Model {
            spec,
            params: store,
            backbone,
            prediction_head,
            parameter_head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Splits `[batch, steps, features]` into per-step `[batch, features]` constants.
    pub fn input_steps(&self, tape: &mut Tape, x: &Tensor) -> TensorResult<Vec<Var>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.spec.input_dim || shape[1] == 0 || shape[0] == 0 {
            return Err(physe_tensor::TensorError::Shape {
                op: "model_input",
                shapes: vec![shape.to_vec(), vec![0, 0, self.spec.input_dim]],
            });
        }
        let (b, t, f) = (shape[0], shape[1], shape[2]);
        let data = x.data();
        (0..t)
            .map(|step| {
                let mut col = Vec::with_capacity(b * f);
                for i in 0..b {
                    let base = (i * t + step) * f;
                    col.extend_from_slice(&data[base..base + f]);
                }
                tape.constant(Tensor::new(&[b, f], col)?)
            })
            .collect()
    }

    /// Per-step backbone outputs and the latent `z` (the final step's state).
    fn backbone_steps(
        &self,
        tape: &mut Tape,
        p: &Bound,
        steps: &[Var],
        train: bool,
        rng: &mut impl Rng,
    ) -> TensorResult<(Vec<Var>, Var, Vec<Var>)> {
        match &self.backbone {
            Backbone::PhysEInv {
                encoder,
                attention,
                decoder,
            } => {
                let encoded = encoder.forward(tape, p, steps, train, rng)?;
                let attended = self_attention(tape, p, attention, &encoded)?;
                let decoded = decoder.forward(tape, p, &attended.steps, train, rng)?;
                let z = *decoded.last().expect("non-empty sequence");
                Ok((decoded, z, attended.weights))
            }
            Backbone::Lstm { encoder } => {
                let encoded = encoder.forward(tape, p, steps, train, rng)?;
                let z = *encoded.last().expect("non-empty sequence");
                Ok((encoded, z, Vec::new()))
            }
            Backbone::BiLstm { forward, backward } => {
                let fwd = forward.forward(tape, p, steps, train, rng)?;
                let reversed: Vec<Var> = steps.iter().rev().copied().collect();
                let mut bwd = backward.forward(tape, p, &reversed, train, rng)?;
                let bwd_final = *bwd.last().expect("non-empty sequence");
                bwd.reverse();
                let per_step = fwd
                    .iter()
                    .zip(&bwd)
                    .map(|(&f, &b)| tape.concat(&[f, b], 1))
                    .collect::<TensorResult<Vec<_>>>()?;
                let z = tape.concat(&[*fwd.last().expect("non-empty sequence"), bwd_final], 1)?;
                Ok((per_step, z, Vec::new()))
            }
        }
    }

    /// Latent representation only, `[batch, latent]`.
    pub fn latent(&self, tape: &mut Tape, p: &Bound, x: &Tensor, train: bool, rng: &mut impl Rng) -> TensorResult<Var> {
        let steps = self.input_steps(tape, x)?;
        Ok(self.backbone_steps(tape, p, &steps, train, rng)?.1)
    }

    /// Direct predictions `[batch, steps]` from per-step states.
    pub fn predict_direct(&self, tape: &mut Tape, p: &Bound, states: &[Var]) -> TensorResult<Var> {
        let batch = tape.shape(states[0])[0];
        let stacked = tape.concat(states, 0)?;
        let out = self.prediction_head.forward(tape, p, stacked)?;
        let grid = tape.reshape(out, &[states.len(), batch])?;
        tape.transpose(grid)
    }

    /// Raw head outputs and the transformed `(α, β, γ)`, each `[batch, 1]`.
    pub fn estimate_params(&self, tape: &mut Tape, p: &Bound, z: Var) -> TensorResult<(Var, Var, Var, Var)> {
        let raw = self.parameter_head.forward(tape, p, z)?;
        let (alpha, beta, gamma) = surjective_transform(tape, raw)?;
        Ok((raw, alpha, beta, gamma))
    }

    /// Full forward pass; `with_pe` attaches the parameter head and physics encoding.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: &Tensor,
        train: bool,
        with_pe: bool,
        rng: &mut impl Rng,
    ) -> TensorResult<ForwardOutput> {
        let steps = self.input_steps(tape, x)?;
        let n = steps.len();
        let (states, latent, attention) = self.backbone_steps(tape, p, &steps, train, rng)?;
        let pred_steps = self.predict_direct(tape, p, &states)?;
        let pred_final = tape.slice(pred_steps, 1, n - 1, n)?;
        let physics = if with_pe {
            let (raw, alpha, beta, gamma) = self.estimate_params(tape, p, latent)?;
            let h_est = physics_encode(tape, pred_steps, alpha, beta, gamma)?;
            Some(PhysicsVars {
                raw,
                alpha,
                beta,
                gamma,
                h_est,
            })
        } else {
            None
        };
        Ok(ForwardOutput {
            pred_steps,
            pred_final,
            latent,
            physics,
            attention,
        })
    }

    /// Evaluation-mode predictions for `[n, steps, features]` windows,
    /// processed in parallel blocks of `chunk` windows. The physics fields
    /// stay empty unless `with_pe` is set.
    pub fn predict(&self, x: &Tensor, chunk: usize, with_pe: bool) -> TensorResult<Prediction> {
        let shape = x.shape();
        if shape.len() != 3 {
            return Err(physe_tensor::TensorError::Shape {
                op: "predict",
                shapes: vec![shape.to_vec()],
            });
        }
        let (n, t, f) = (shape[0], shape[1], shape[2]);
        let chunk = chunk.max(1);
        let starts: Vec<usize> = (0..n).step_by(chunk).collect();
        let parts = starts
            .par_iter()
            .map(|&start| {
                let end = (start + chunk).min(n);
                let part = Tensor::new(&[end - start, t, f], x.data()[start * t * f..end * t * f].to_vec())?;
                let mut tape = Tape::new();
                let p = self.params.bind(&mut tape, false)?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let o = self.forward(&mut tape, &p, &part, false, with_pe, &mut rng)?;
                let mut out = Prediction {
                    pred: tape.value(o.pred_final).data().to_vec(),
                    ..Prediction::default()
                };
                if let Some(ph) = o.physics {
                    let est = tape.value(ph.h_est);
                    out.h_est = (0..end - start).map(|i| est.data()[i * t + t - 1]).collect();
                    out.alpha = tape.value(ph.alpha).data().to_vec();
                    out.beta = tape.value(ph.beta).data().to_vec();
                    out.gamma = tape.value(ph.gamma).data().to_vec();
                }
                Ok(out)
            })
            .collect::<TensorResult<Vec<_>>>()?;
        let mut out = Prediction::default();
        for part in parts {
            out.pred.extend(part.pred);
            out.h_est.extend(part.h_est);
            out.alpha.extend(part.alpha);
            out.beta.extend(part.beta);
            out.gamma.extend(part.gamma);
        }
        Ok(out)
    }

    /// Evaluation-mode attention weights per sequence and head.
    pub fn attention_weights(&self, x: &Tensor) -> TensorResult<Vec<Tensor>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let o = self.forward(&mut tape, &p, x, false, false, &mut rng)?;
        Ok(o.attention.iter().map(|&w| tape.value(w).clone()).collect())
    }
}

/// Maps raw head outputs `[batch, 3]` to `α = 2σ(a) − 1`, `β = exp(b)`
/// (with `b` clamped to ±700) and `γ = 10 tanh(c)`, each `[batch, 1]`.
pub fn surjective_transform(tape: &mut Tape, raw: Var) -> TensorResult<(Var, Var, Var)> {
    let a = tape.slice(raw, 1, 0, 1)?;
    let a = tape.sigmoid(a)?;
    let a = tape.scale(a, 2.0)?;
    let alpha = tape.shift(a, -1.0)?;
    let b = tape.slice(raw, 1, 1, 2)?;
    let b = tape.clamp(b, -BETA_RAW_LIMIT, BETA_RAW_LIMIT)?;
    let beta = tape.exp(b)?;
    let g = tape.slice(raw, 1, 2, 3)?;
    let g = tape.tanh(g)?;
    let gamma = tape.scale(g, GAMMA_SCALE)?;
    Ok((alpha, beta, gamma))
}

/// `ĥ_est = α · mean_t(ĥ_pred) + β · ĥ_pred + γ` with `pred: [batch, steps]`
/// and per-sequence `α, β, γ: [batch, 1]`.
pub fn physics_encode(tape: &mut Tape, pred: Var, alpha: Var, beta: Var, gamma: Var) -> TensorResult<Var> {
    let mean = tape.mean_axis(pred, 1)?;
    let offset = tape.mul(mean, alpha)?;
    let offset = tape.add(offset, gamma)?;
    let scaled = tape.mul(pred, beta)?;
    tape.add(scaled, offset)
}
