use physe_tensor::{GradientMap, Tensor};

use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return Err(format!("epsilon {} must be positive", self.epsilon));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {param} at index {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("gradient for parameter {param} has shape {found:?}, expected {expected:?}")]
    Shape {
        param: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having gradient zero. Nothing is modified when any gradient
/// is non-finite or mis-shaped.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradientMap,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<(), OptimError> {
    for (id, g) in grads.iter() {
        let p = params.get(id);
        if g.shape() != p.shape() {
            return Err(OptimError::Shape {
                param: params.name(id).to_string(),
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGradient {
                param: params.name(id).to_string(),
                index,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let grad = grads.get(id).map(Tensor::data);
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let p = params.get_mut(id).data_mut();
        for k in 0..p.len() {
            let g = grad.map_or(0.0, |g| g[k]);
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use physe_tensor::ParamId;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[1], v));
        s
    }

    fn grad(v: f64) -> GradientMap {
        let mut g = GradientMap::default();
        g.accumulate(ParamId(0), Tensor::full(&[1], v));
        g
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut p = scalar_store(1.0);
        let mut st = OptimizerState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &grad(1.0), &mut st, &cfg).unwrap();
        let moved = 1.0 - p.get(ParamId(0)).data()[0];
        let expect = 0.0005 / (1.0 + 1e-8);
        assert!((moved - expect).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut p = scalar_store(2.0);
        let mut st = OptimizerState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &grad(1.0), &mut st, &cfg).unwrap();
        let before = p.get(ParamId(0)).data()[0];
        let (m0, v0) = (st.m[0].data()[0], st.v[0].data()[0]);
        let mut zero = scalar_store(0.0);
        let mut zst = OptimizerState::new(&zero);
        adam_step(&mut zero, &grad(0.0), &mut zst, &cfg).unwrap();
        assert_eq!(zero.get(ParamId(0)).data()[0], 0.0);
        adam_step(&mut p, &grad(0.0), &mut st, &cfg).unwrap();
        assert_eq!(st.m[0].data()[0], 0.9 * m0);
        assert_eq!(st.v[0].data()[0], 0.999 * v0);
        assert_ne!(p.get(ParamId(0)).data()[0], before);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut p = scalar_store(1.0);
        let mut st = OptimizerState::new(&p);
        let err = adam_step(&mut p, &grad(f64::NAN), &mut st, &AdamConfig::default()).unwrap_err();
        assert_eq!(
            err,
            OptimError::NonFiniteGradient {
                param: "w".into(),
                index: 0
            }
        );
        assert_eq!(p.get(ParamId(0)).data()[0], 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn first_step_is_bounded_by_the_learning_rate() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[5], vec![0.0; 5]).unwrap());
        let mut g = GradientMap::default();
        g.accumulate(ParamId(0), Tensor::new(&[5], vec![1e-9, -3.0, 1e6, 0.5, -1e-3]).unwrap());
        let mut st = OptimizerState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        for v in p.get(ParamId(0)).data() {
            assert!(v.abs() <= cfg.learning_rate * (1.0 + 1e-12));
        }
    }
}
