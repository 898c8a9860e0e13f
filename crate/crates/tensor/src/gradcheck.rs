//! Central-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::TensorError;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor in the relative error.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
    #[error("function is not scalar-valued (shape {0:?})")]
    NotScalar(Vec<usize>),
    #[error("evaluation failed at coordinate {coordinate:?}: {source}")]
    Eval {
        /// `None` for the unperturbed analytic pass.
        coordinate: Option<usize>,
        #[source]
        source: TensorError,
    },
}

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn evaluate<F>(f: &F, x: &Tensor, coordinate: Option<usize>) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let wrap = |source| GradCheckError::Eval { coordinate, source };
    let mut tape = Tape::new();
    let leaf = tape.constant(x.clone()).map_err(wrap)?;
    let out = f(&mut tape, leaf).map_err(wrap)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(GradCheckError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Compares the reverse-mode gradient of scalar `f` at `x` against central
/// differences with step `eps`.
///
/// The error per coordinate is `|a - n| / max(1e-8, |a| + |n|)`; the maximum
/// over all coordinates is returned.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck, GradCheckError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    if !(eps > 0.0) {
        return Err(GradCheckError::BadStep(eps));
    }
    let wrap = |source| GradCheckError::Eval {
        coordinate: None,
        source,
    };
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true).map_err(wrap)?;
    let out = f(&mut tape, leaf).map_err(wrap)?;
    if tape.value(out).len() != 1 {
        return Err(GradCheckError::NotScalar(tape.value(out).shape().to_vec()));
    }
    let analytic = if tape.requires_grad(out) {
        let grads = tape.backward(out).map_err(wrap)?;
        grads
            .wrt(leaf)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; x.len()])
    } else {
        vec![0.0; x.len()]
    };

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = evaluate(&f, &probe, Some(i))?;
        probe.data_mut()[i] = orig - eps;
        let minus = evaluate(&f, &probe, Some(i))?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }

    let (worst_coordinate, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / REL_FLOOR.max(a.abs() + n.abs()))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheck {
        max_rel_error,
        worst_coordinate,
        analytic,
        numeric,
    })
}

/// A named gradient probe over one operation kind.
pub struct OpCheck {
    pub name: &'static str,
    /// Runs the probe for one seed and returns the worst relative error
    /// across all differentiable operands.
    pub run: fn(u64, f64) -> Result<f64, GradCheckError>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Checks `kind` with respect to every operand; the output is reduced with
/// random weights so no adjoint can hide behind a symmetric sum.
fn check_kind(
    kind: OpKind,
    inputs: Vec<Tensor>,
    rng: &mut ChaCha8Rng,
    eps: f64,
) -> Result<f64, GradCheckError> {
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| probe.constant(t.clone()))
        .collect::<Result<_, _>>()
        .map_err(|source| GradCheckError::Eval {
            coordinate: None,
            source,
        })?;
    let out = probe
        .apply(kind.clone(), &vars)
        .map_err(|source| GradCheckError::Eval {
            coordinate: None,
            source,
        })?;
    let weights = uniform(rng, probe.shape(out), -1.0, 1.0);

    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let f = |tape: &mut Tape, x: Var| {
            let mut args = Vec::with_capacity(inputs.len());
            for (j, t) in inputs.iter().enumerate() {
                args.push(if j == k { x } else { tape.constant(t.clone())? });
            }
            let y = tape.apply(kind.clone(), &args)?;
            let w = tape.constant(weights.clone())?;
            let wy = tape.mul(y, w)?;
            tape.sum(wy)
        };
        let report = finite_difference_check(f, &inputs[k], eps)?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Right operand shape cycling through same-shape, row and column broadcast.
fn rhs_shape(seed: u64) -> [usize; 2] {
    match seed % 3 {
        0 => [3, 4],
        1 => [1, 4],
        _ => [3, 1],
    }
}

/// One probe per recordable operation kind.
pub fn op_suite() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "matmul",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                let b = uniform(&mut r, &[4, 2], -1.0, 1.0);
                check_kind(OpKind::MatMul, vec![a, b], &mut r, eps)
            },
        },
        OpCheck {
            name: "add",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                let b = uniform(&mut r, &rhs_shape(s), -1.0, 1.0);
                check_kind(OpKind::Add, vec![a, b], &mut r, eps)
            },
        },
        OpCheck {
            name: "sub",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                let b = uniform(&mut r, &rhs_shape(s), -1.0, 1.0);
                check_kind(OpKind::Sub, vec![a, b], &mut r, eps)
            },
        },
        OpCheck {
            name: "mul",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                let b = uniform(&mut r, &rhs_shape(s), -1.0, 1.0);
                check_kind(OpKind::Mul, vec![a, b], &mut r, eps)
            },
        },
        OpCheck {
            name: "div",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                let b = away_from_zero(&mut r, &rhs_shape(s), 0.5, 2.0);
                check_kind(OpKind::Div, vec![a, b], &mut r, eps)
            },
        },
        OpCheck {
            name: "scale",
            run: |s, eps| {
                let mut r = rng(s);
                let c = r.gen_range(-3.0..3.0);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                check_kind(OpKind::Scale(c), vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "shift",
            run: |s, eps| {
                let mut r = rng(s);
                let c = r.gen_range(-3.0..3.0);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                check_kind(OpKind::Shift(c), vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "sigmoid",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -3.0, 3.0);
                check_kind(OpKind::Sigmoid, vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "tanh",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
                check_kind(OpKind::Tanh, vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "exp",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
                check_kind(OpKind::Exp, vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "log",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], 0.5, 3.0);
                check_kind(OpKind::Log, vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "relu",
            run: |s, eps| {
                let mut r = rng(s);
                let a = away_from_zero(&mut r, &[3, 4], 0.05, 2.0);
                check_kind(OpKind::Relu, vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "power",
            run: |s, eps| {
                let mut r = rng(s);
                let p = r.gen_range(0.5..3.5);
                let a = uniform(&mut r, &[3, 4], 0.5, 2.0);
                check_kind(OpKind::Power(p), vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "clamp",
            run: |s, eps| {
                let mut r = rng(s);
                // Values sit at least 0.05 from either bound.
                let a = away_from_zero(&mut r, &[3, 4], 0.05, 0.45)
                    .map(|v| if v.abs() > 0.25 { v * 4.0 } else { v });
                check_kind(OpKind::Clamp { lo: -0.5, hi: 0.5 }, vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "sum",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                check_kind(OpKind::Sum, vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "mean",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                check_kind(OpKind::Mean, vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "sum_axis",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                check_kind(OpKind::SumAxis((s % 2) as usize), vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "mean_axis",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                check_kind(OpKind::MeanAxis((s % 2) as usize), vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "concat",
            run: |s, eps| {
                let mut r = rng(s);
                let axis = (s % 2) as usize;
                let second = if axis == 0 { [2, 4] } else { [3, 2] };
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                let b = uniform(&mut r, &second, -1.0, 1.0);
                check_kind(OpKind::Concat(axis), vec![a, b], &mut r, eps)
            },
        },
        OpCheck {
            name: "slice",
            run: |s, eps| {
                let mut r = rng(s);
                let axis = (s % 2) as usize;
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                check_kind(OpKind::Slice { axis, start: 1, end: 3 }, vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "gather_rows",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                let rows = (0..5).map(|_| r.gen_range(0..3)).collect();
                check_kind(OpKind::GatherRows(rows), vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "transpose",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                check_kind(OpKind::Transpose, vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "row_softmax",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
                check_kind(OpKind::RowSoftmax, vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "dropout",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                let kind = OpKind::Dropout {
                    rate: 0.4,
                    train: true,
                    seed: s,
                };
                check_kind(kind, vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "cosine_similarity",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                let b = uniform(&mut r, &[3, 4], -1.0, 1.0);
                check_kind(OpKind::CosineSimilarity, vec![a, b], &mut r, eps)
            },
        },
        OpCheck {
            name: "row_normalize",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                check_kind(OpKind::RowNormalize, vec![a], &mut r, eps)
            },
        },
        OpCheck {
            name: "reshape",
            run: |s, eps| {
                let mut r = rng(s);
                let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
                check_kind(OpKind::Reshape(vec![2, 6]), vec![a], &mut r, eps)
            },
        },
    ]
}
