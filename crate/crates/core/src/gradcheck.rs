//! Finite-difference check of the full model and loss stack with respect
//! to every parameter tensor.

use physe_tensor::{finite_difference_check, GradCheck, GradCheckError, ParamId, Result as TensorResult, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Bound, Model, ModelKind, ModelSpec};
use crate::objectives::{total_loss, ContrastiveVariant, LossInputs, LossWeights};

/// Parameters whose gradient is identically zero: a key bias adds the same
/// amount to every score in a softmax row.
pub const STRUCTURAL_ZEROS: &[&str] = &["attention.k.b"];

const KINK_MARGIN: f64 = 1e-2;

/// Result of [`composite_check`]. Coordinate `i` of the check is the
/// directional derivative along a random direction in `names[i]`.
#[derive(Debug, Clone)]
pub struct CompositeCheck {
    pub check: GradCheck,
    pub names: Vec<String>,
}

impl CompositeCheck {
    /// Name of the parameter tensor with the largest error.
    pub fn worst(&self) -> &str {
        &self.names[self.check.worst_coordinate]
    }
}

/// Loss of a 2-sequence micro-batch as a function of `v`, where parameter
/// `k` is `value_k + v[k] * direction_k`: training-mode forward with fixed
/// dropout masks, physics encoding and the contrastive term on augmented
/// inputs.
struct Probe {
    model: Model,
    /// `[len, 1]` per parameter.
    directions: Vec<Option<Tensor>>,
    x: Tensor,
    x_aug: Tensor,
    y: Tensor,
    weights: LossWeights,
    dropout_seed: u64,
}

impl Probe {
    fn bind(&self, tape: &mut Tape, v: Var) -> TensorResult<Bound> {
        let mut k = 0;
        let mut vars = Vec::with_capacity(self.directions.len());
        for ((_, _, value), direction) in self.model.params().iter().zip(&self.directions) {
            let base = tape.constant(value.clone())?;
            let Some(direction) = direction else {
                vars.push(base);
                continue;
            };
            let d = tape.constant(direction.clone())?;
            let t = tape.slice(v, 0, k, k + 1)?;
            let step = tape.matmul(d, t)?;
            let step = tape.reshape(step, value.shape())?;
            vars.push(tape.add(base, step)?);
            k += 1;
        }
        Ok(Bound::from_vars(vars))
    }

    /// Shifts parameter-head biases so that every ReLU input at the probe
    /// point is at least `margin` away from zero.
    fn clear_relu_kinks(&mut self, margin: f64) -> TensorResult<()> {
        let mut tape = Tape::new();
        let p = self.model.params().bind(&mut tape, false)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let o = self.model.forward(&mut tape, &p, &self.x, true, false, &mut rng)?;
        let mut h = tape.value(o.latent).clone();
        for layer in ["parameter_head.l0", "parameter_head.l1"] {
            let params = self.model.params();
            let w = params.id(&format!("{layer}.w")).expect("parameter head weight");
            let b = params.id(&format!("{layer}.b")).expect("parameter head bias");
            let mut tape = Tape::new();
            let a = tape.constant(h)?;
            let wv = tape.constant(params.get(w).clone())?;
            let m = tape.matmul(a, wv)?;
            let mut pre = tape.value(m).clone();
            let (rows, cols) = pre.dims2()?;
            let bias = self.model.params_mut().get_mut(b).data_mut();
            for j in 0..cols {
                let column = (0..rows).map(|r| pre.data()[r * cols + j] + bias[j]);
                if column.clone().any(|v| v.abs() < margin) {
                    bias[j] += margin - column.fold(f64::INFINITY, f64::min);
                }
                for r in 0..rows {
                    pre.data_mut()[r * cols + j] += bias[j];
                }
            }
            h = pre.map(|v| v.max(0.0));
        }
        Ok(())
    }

    fn loss(&self, tape: &mut Tape, v: Var) -> TensorResult<Var> {
        let p = self.bind(tape, v)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let o = self.model.forward(tape, &p, &self.x, true, true, &mut rng)?;
        let za = self.model.latent(tape, &p, &self.x_aug, true, &mut rng)?;
        let target = tape.constant(self.y.clone())?;
        let inputs = LossInputs {
            pred: o.pred_final,
            target,
            physics: o.physics.map(|ph| (o.pred_steps, ph.h_est)),
            latents: Some((o.latent, za)),
        };
        total_loss(tape, &inputs, &self.weights)
            .map(|t| t.total)
            .map_err(|e| e.source)
    }
}

/// Checks the gradient of the complete objective (encoder, attention,
/// decoder, both heads, MSE, PE and contrastive terms) along one random
/// unit-length direction per parameter tensor outside [`STRUCTURAL_ZEROS`].
///
/// The model is freshly initialized, then its biases are shifted by draws
/// from `[-0.5, 0.5)`, and parameter-head biases are moved further where a
/// ReLU input lies within 0.01 of its kink.
pub fn composite_check(kind: ModelKind, variant: ContrastiveVariant, seed: u64, eps: f64) -> Result<CompositeCheck, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ModelSpec {
        kind,
        ..ModelSpec::default()
    };
    let mut model = Model::new(spec, rng.gen()).expect("default spec is valid");
    let ids: Vec<ParamId> = model.params().ids().collect();
    for &id in &ids {
        if model.params().name(id).ends_with(".b") {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
    }
    let mut names = Vec::new();
    let mut directions = Vec::with_capacity(ids.len());
    for &id in &ids {
        let name = model.params().name(id);
        if STRUCTURAL_ZEROS.contains(&name) {
            directions.push(None);
            continue;
        }
        names.push(name.to_string());
        let n = model.params().get(id).len();
        let mut d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= norm);
        directions.push(Some(Tensor::new(&[n, 1], d).expect("shape")));
    }
    let mut sample = |n: usize, scale: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-scale..scale)).collect() };
    let x = sample(20, 1.5);
    let noise = sample(20, 0.1);
    let x_aug: Vec<f64> = x.iter().zip(&noise).map(|(a, b)| a + b).collect();
    let mut probe = Probe {
        x: Tensor::new(&[2, 10, 1], x).expect("shape"),
        x_aug: Tensor::new(&[2, 10, 1], x_aug).expect("shape"),
        y: Tensor::new(&[2, 1], sample(2, 1.0)).expect("shape"),
        weights: LossWeights {
            variant,
            ..LossWeights::default()
        },
        dropout_seed: rng.gen(),
        model,
        directions,
    };
    probe.clear_relu_kinks(KINK_MARGIN).map_err(|source| GradCheckError::Eval { coordinate: None, source })?;
    let x0 = Tensor::zeros(&[names.len(), 1]);
    let check = finite_difference_check(|tape, v| probe.loss(tape, v), &x0, eps)?;
    Ok(CompositeCheck { check, names })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, synthesize_series, SequenceBatch, SynthParams};
    use crate::physics::PhysicalConstants;
    use crate::train::{batch_gradients, StepConfig};

    #[test]
    fn full_model_passes() {
        let r = composite_check(ModelKind::PhysEInv, ContrastiveVariant::NtXent, 1, 1e-4).unwrap();
        assert_eq!(r.names.len(), r.check.analytic.len());
        assert!(r.check.max_rel_error < 1e-3, "{} at {}", r.check.max_rel_error, r.worst());
    }

    #[test]
    fn baselines_pass_too() {
        for kind in [ModelKind::Lstm, ModelKind::BiLstm] {
            let r = composite_check(kind, ContrastiveVariant::Stability, 2, 1e-4).unwrap();
            assert!(r.check.max_rel_error < 1e-3, "{kind}: {} at {}", r.check.max_rel_error, r.worst());
        }
    }

    #[test]
    fn key_bias_gradient_is_zero() {
        let s = synthesize_series(100, 1, &SynthParams::default()).unwrap();
        let ds = build_dataset(&s, 0.5, &PhysicalConstants::default(), 0.1, 1).unwrap();
        let batch = SequenceBatch::gather(&ds.train, &[0, 5, 9]);
        let model = Model::new(ModelSpec::default(), 3).unwrap();
        let cfg = StepConfig {
            with_pe: true,
            contrastive: true,
            weights: LossWeights::default(),
            chunks: 1,
        };
        let (_, grads) = batch_gradients(&model, &batch, &cfg, 4).unwrap();
        let norm = |name: &str| {
            let id = model.params().id(name).unwrap();
            grads.get(id).unwrap().data().iter().map(|v| v.abs()).fold(0.0, f64::max)
        };
        assert!(norm("attention.k.b") < 1e-12 * norm("attention.q.b").max(1.0));
    }
}
