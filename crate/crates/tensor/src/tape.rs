//! Dynamic tape for reverse-mode differentiation.
//!
//! Every forward call appends a node holding its output value; node ids are
//! handed out as [`Var`]s and always refer to earlier nodes, so the node list
//! is topologically ordered by construction. [`Tape::backward`] consumes the
//! tape and walks it once in reverse.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{gemm, Layout};
use crate::tensor::Tensor;

/// Norms below this are treated as degenerate by the cosine operations.
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier attached to trainable leaves so gradients can be routed back.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Operation kinds that can be recorded.
///
/// Binary elementwise kinds broadcast their right operand when it is a row
/// `[1, n]`, a column `[m, 1]` or a single value.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Shift(f64),
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Relu,
    Power(f64),
    Clamp { lo: f64, hi: f64 },
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    GatherRows(Vec<usize>),
    Transpose,
    RowSoftmax,
    /// Inverted dropout with a mask drawn from `seed`; identity when `train` is false.
    Dropout { rate: f64, train: bool, seed: u64 },
    /// Row-wise cosine similarity of two `[n, d]` operands, giving `[n, 1]`.
    CosineSimilarity,
    RowNormalize,
    Reshape(Vec<usize>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale(_) => "scale",
            OpKind::Shift(_) => "shift",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Relu => "relu",
            OpKind::Power(_) => "power",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis(_) => "sum_axis",
            OpKind::MeanAxis(_) => "mean_axis",
            OpKind::Concat(_) => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::Transpose => "transpose",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::Dropout { .. } => "dropout",
            OpKind::CosineSimilarity => "cosine_similarity",
            OpKind::RowNormalize => "row_normalize",
            OpKind::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::CosineSimilarity => Some(2),
            OpKind::Concat(_) => None,
            _ => Some(1),
        }
    }
}

/// Data captured at forward time for the adjoint.
#[derive(Debug)]
enum Saved {
    None,
    Param(ParamId),
    Broadcast(Bcast),
    Sizes(Vec<usize>),
    Mask(Vec<f64>),
    Norms(Vec<f64>),
    PairNorms(Vec<f64>, Vec<f64>),
    Shape(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    kind: Option<OpKind>,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    saved: Saved,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        Ok(self.push(None, Vec::new(), value, requires_grad, Saved::None))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Trainable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Result<Var> {
        value.check_finite("param")?;
        Ok(self.push(None, Vec::new(), value, true, Saved::Param(id)))
    }

    fn push(
        &mut self,
        kind: Option<OpKind>,
        inputs: Vec<Var>,
        value: Tensor,
        requires_grad: bool,
        saved: Saved,
    ) -> Var {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            requires_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `kind` applied to `inputs` and returns the output node.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let name = kind.name();
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(TensorError::Contract(format!(
                    "{name} takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(TensorError::Contract(format!("{name} needs inputs")));
        }
        if let OpKind::Dropout { train, rate, .. } = kind {
            if !(0.0..1.0).contains(&rate) {
                return Err(TensorError::Domain {
                    op: name,
                    detail: format!("rate {rate} outside [0, 1)"),
                });
            }
            if !train || rate == 0.0 {
                return Ok(inputs[0]);
            }
        }
        let (value, saved) = forward(&kind, inputs.iter().map(|v| &self.nodes[v.0].value))?;
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let saved = if requires_grad { saved } else { Saved::None };
        Ok(self.push(Some(kind), inputs.to_vec(), value, requires_grad, saved))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Div, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Shift(c), &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn power(&mut self, a: Var, p: f64) -> Result<Var> {
        self.apply(OpKind::Power(p), &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(OpKind::Clamp { lo, hi }, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::SumAxis(axis), &[a])
    }
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::MeanAxis(axis), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat(axis), parts)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::Slice { axis, start, end }, &[a])
    }
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::GatherRows(rows), &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::RowSoftmax, &[a])
    }
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, seed: u64) -> Result<Var> {
        self.apply(OpKind::Dropout { rate, train, seed }, &[a])
    }
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::CosineSimilarity, &[a, b])
    }
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::RowNormalize, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }

    /// Reverse pass from a scalar loss node. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let len = self.nodes[loss.0].value.len();
        if len != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let seed = Tensor::ones(self.nodes[loss.0].value.shape());
        self.backward_seeded(vec![(loss, seed)])
    }

    /// Reverse pass with explicit upstream gradients for any set of nodes.
    pub fn backward_seeded(mut self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut start = 0;
        for (v, g) in seeds {
            let node = &self.nodes[v.0];
            if g.len() != node.value.len() {
                return Err(TensorError::shape(
                    "backward_seeded",
                    &[node.value.shape(), g.shape()],
                ));
            }
            match &mut grads[v.0] {
                Some(acc) => acc.accumulate(&g),
                slot => *slot = Some(g),
            }
            start = start.max(v.0 + 1);
        }

        let mut params = Vec::new();
        for i in (0..start).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            let Some(kind) = &node.kind else {
                if let Saved::Param(id) = node.saved {
                    params.push((id, i));
                }
                grads[i] = Some(g);
                continue;
            };
            if matches!(kind, OpKind::MatMul) {
                matmul_adjoint_into(node, &self.nodes, &g, &mut grads)?;
                self.nodes[i].value = Tensor::zeros(&[0]);
                continue;
            }
            let input_grads = adjoint(kind, node, &self.nodes, &g)?;
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.accumulate(&ig),
                    slot => *slot = Some(ig),
                }
            }
            // Interior values are not read again once their adjoint has run.
            self.nodes[i].value = Tensor::zeros(&[0]);
        }
        Ok(Gradients { grads, params })
    }
}

/// Gradients produced by one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient reaching leaf `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn into_param_map(mut self) -> GradientMap {
        let mut map = GradientMap::default();
        for (id, node) in self.params {
            if let Some(g) = self.grads[node].take() {
                map.accumulate(id, g);
            }
        }
        map
    }
}

/// Parameter gradients keyed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    entries: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.get(&id)
    }

    pub fn accumulate(&mut self, id: ParamId, g: Tensor) {
        match self.entries.get_mut(&id) {
            Some(acc) => acc.accumulate(&g),
            None => {
                self.entries.insert(id, g);
            }
        }
    }

    pub fn merge(&mut self, other: GradientMap) {
        for (id, g) in other.entries {
            self.accumulate(id, g);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn broadcast_kind(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<(usize, usize, Bcast)> {
    let (m, n) = lhs.dims2()?;
    let (rm, rn) = rhs.dims2()?;
    let kind = if (rm, rn) == (m, n) {
        Bcast::Same
    } else if rm == 1 && rn == n {
        Bcast::Row
    } else if rn == 1 && rm == m {
        Bcast::Col
    } else if rm == 1 && rn == 1 {
        Bcast::Scalar
    } else {
        return Err(TensorError::shape(op, &[lhs.shape(), rhs.shape()]));
    };
    Ok((m, n, kind))
}

#[inline]
fn rhs_index(b: Bcast, i: usize, j: usize, n: usize) -> usize {
    match b {
        Bcast::Same => i * n + j,
        Bcast::Row => j,
        Bcast::Col => i,
        Bcast::Scalar => 0,
    }
}

fn binary(
    op: &'static str,
    lhs: &Tensor,
    rhs: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Tensor, Saved)> {
    let (m, n, b) = broadcast_kind(op, lhs, rhs)?;
    let l = lhs.data();
    let r = rhs.data();
    let mut out = Vec::with_capacity(m * n);
    if b == Bcast::Same {
        out.extend(l.iter().zip(r).map(|(&x, &y)| f(x, y)));
    } else {
        for i in 0..m {
            for j in 0..n {
                out.push(f(l[i * n + j], r[rhs_index(b, i, j, n)]));
            }
        }
    }
    Ok((
        Tensor::from_parts(lhs.shape().to_vec(), out),
        Saved::Broadcast(b),
    ))
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> (Tensor, Saved) {
    (x.map(f), Saved::None)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

fn row_norms(op: &'static str, x: &Tensor) -> Result<Vec<f64>> {
    let (m, n) = x.dims2()?;
    let d = x.data();
    (0..m)
        .map(|i| {
            let norm = d[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_FLOOR {
                Err(TensorError::Domain {
                    op,
                    detail: format!("degenerate similarity: row {i} has norm {norm:e}"),
                })
            } else {
                Ok(norm)
            }
        })
        .collect()
}

fn forward<'a>(
    kind: &OpKind,
    mut inputs: impl Iterator<Item = &'a Tensor>,
) -> Result<(Tensor, Saved)> {
    let name = kind.name();
    let mut next = || inputs.next().expect("arity checked");
    match kind {
        OpKind::MatMul => {
            let a = next();
            let b = next();
            let (m, k) = a.dims2()?;
            let (k2, n) = b.dims2()?;
            if a.shape().len() != 2 || b.shape().len() != 2 || k != k2 {
                return Err(TensorError::shape(name, &[a.shape(), b.shape()]));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), Layout::Normal, b.data(), Layout::Normal, &mut out, false);
            Ok((Tensor::from_parts(vec![m, n], out), Saved::None))
        }
        OpKind::Add => binary(name, next(), next(), |x, y| x + y),
        OpKind::Sub => binary(name, next(), next(), |x, y| x - y),
        OpKind::Mul => binary(name, next(), next(), |x, y| x * y),
        OpKind::Div => {
            let a = next();
            let b = next();
            if let Some(i) = b.data().iter().position(|&v| v == 0.0) {
                return Err(TensorError::Domain {
                    op: name,
                    detail: format!("zero divisor at flat index {i}"),
                });
            }
            binary(name, a, b, |x, y| x / y)
        }
        OpKind::Scale(c) => Ok(unary(next(), |x| c * x)),
        OpKind::Shift(c) => Ok(unary(next(), |x| x + c)),
        OpKind::Sigmoid => Ok(unary(next(), sigmoid)),
        OpKind::Tanh => Ok(unary(next(), f64::tanh)),
        OpKind::Exp => Ok(unary(next(), f64::exp)),
        OpKind::Log => {
            let a = next();
            if let Some(i) = a.data().iter().position(|&v| v <= 0.0) {
                return Err(TensorError::Domain {
                    op: name,
                    detail: format!("non-positive argument {} at flat index {i}", a.data()[i]),
                });
            }
            Ok(unary(a, f64::ln))
        }
        OpKind::Relu => Ok(unary(next(), |x| x.max(0.0))),
        OpKind::Power(p) => {
            let a = next();
            if p.fract() != 0.0 {
                if let Some(i) = a.data().iter().position(|&v| v < 0.0) {
                    return Err(TensorError::Domain {
                        op: name,
                        detail: format!("negative base at flat index {i} with exponent {p}"),
                    });
                }
            }
            Ok(unary(a, |x| x.powf(*p)))
        }
        OpKind::Clamp { lo, hi } => {
            if lo > hi {
                return Err(TensorError::Domain {
                    op: name,
                    detail: format!("empty interval [{lo}, {hi}]"),
                });
            }
            Ok(unary(next(), |x| x.clamp(*lo, *hi)))
        }
        OpKind::Sum => Ok((Tensor::scalar(next().data().iter().sum()), Saved::None)),
        OpKind::Mean => {
            let a = next();
            if a.is_empty() {
                return Err(TensorError::Contract("mean of empty tensor".into()));
            }
            let s: f64 = a.data().iter().sum();
            Ok((Tensor::scalar(s / a.len() as f64), Saved::None))
        }
        OpKind::SumAxis(axis) | OpKind::MeanAxis(axis) => {
            let a = next();
            let (m, n) = a.dims2()?;
            let d = a.data();
            let (shape, mut out) = match axis {
                0 => {
                    let mut out = vec![0.0; n];
                    for i in 0..m {
                        for (o, v) in out.iter_mut().zip(&d[i * n..(i + 1) * n]) {
                            *o += v;
                        }
                    }
                    (vec![1, n], out)
                }
                1 => (
                    vec![m, 1],
                    (0..m).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect(),
                ),
                _ => return Err(TensorError::shape(name, &[a.shape()])),
            };
            if matches!(kind, OpKind::MeanAxis(_)) {
                let count = if *axis == 0 { m } else { n } as f64;
                out.iter_mut().for_each(|v| *v /= count);
            }
            Ok((Tensor::from_parts(shape, out), Saved::None))
        }
        OpKind::Concat(axis) => {
            let parts: Vec<&Tensor> = std::iter::from_fn(|| inputs.next()).collect();
            concat_forward(name, &parts, *axis)
        }
        OpKind::Slice { axis, start, end } => {
            let a = next();
            let (m, n) = a.dims2()?;
            let limit = if *axis == 0 { m } else { n };
            if *axis > 1 || start >= end || *end > limit {
                return Err(TensorError::shape(name, &[a.shape(), &[*start, *end]]));
            }
            let d = a.data();
            let (shape, out) = if *axis == 0 {
                (vec![end - start, n], d[start * n..end * n].to_vec())
            } else {
                let w = end - start;
                let mut out = Vec::with_capacity(m * w);
                for i in 0..m {
                    out.extend_from_slice(&d[i * n + start..i * n + end]);
                }
                (vec![m, w], out)
            };
            Ok((Tensor::from_parts(shape, out), Saved::None))
        }
        OpKind::GatherRows(rows) => {
            let a = next();
            let (m, n) = a.dims2()?;
            if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
                return Err(TensorError::shape(name, &[a.shape(), &[bad]]));
            }
            let d = a.data();
            let mut out = Vec::with_capacity(rows.len() * n);
            for &r in rows {
                out.extend_from_slice(&d[r * n..(r + 1) * n]);
            }
            Ok((Tensor::from_parts(vec![rows.len(), n], out), Saved::None))
        }
        OpKind::Transpose => {
            let a = next();
            let (m, n) = a.dims2()?;
            let d = a.data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = d[i * n + j];
                }
            }
            Ok((Tensor::from_parts(vec![n, m], out), Saved::None))
        }
        OpKind::RowSoftmax => {
            let a = next();
            let (m, n) = a.dims2()?;
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(n.max(1)).take(m) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
            Ok((Tensor::from_parts(a.shape().to_vec(), out), Saved::None))
        }
        OpKind::Dropout { rate, seed, .. } => {
            let a = next();
            let mask = dropout_mask(a.len(), *rate, *seed);
            let out = a.data().iter().zip(&mask).map(|(x, k)| x * k).collect();
            Ok((Tensor::from_parts(a.shape().to_vec(), out), Saved::Mask(mask)))
        }
        OpKind::CosineSimilarity => {
            let a = next();
            let b = next();
            if a.dims2()? != b.dims2()? {
                return Err(TensorError::shape(name, &[a.shape(), b.shape()]));
            }
            let (m, n) = a.dims2()?;
            let na = row_norms(name, a)?;
            let nb = row_norms(name, b)?;
            let (ad, bd) = (a.data(), b.data());
            let out = (0..m)
                .map(|i| {
                    let dot: f64 = ad[i * n..(i + 1) * n]
                        .iter()
                        .zip(&bd[i * n..(i + 1) * n])
                        .map(|(x, y)| x * y)
                        .sum();
                    dot / (na[i] * nb[i])
                })
                .collect();
            Ok((Tensor::from_parts(vec![m, 1], out), Saved::PairNorms(na, nb)))
        }
        OpKind::RowNormalize => {
            let a = next();
            let (_, n) = a.dims2()?;
            let norms = row_norms(name, a)?;
            let out = a
                .data()
                .iter()
                .enumerate()
                .map(|(k, v)| v / norms[k / n])
                .collect();
            Ok((Tensor::from_parts(a.shape().to_vec(), out), Saved::Norms(norms)))
        }
        OpKind::Reshape(shape) => {
            let a = next();
            let prev = a.shape().to_vec();
            let t = a.clone().reshape(shape)?;
            Ok((t, Saved::Shape(prev)))
        }
    }
}

fn concat_forward(name: &'static str, parts: &[&Tensor], axis: usize) -> Result<(Tensor, Saved)> {
    let dims: Vec<(usize, usize)> = parts.iter().map(|p| p.dims2()).collect::<Result<_>>()?;
    let shapes: Vec<&[usize]> = parts.iter().map(|p| p.shape()).collect();
    match axis {
        0 => {
            let n = dims[0].1;
            if dims.iter().any(|d| d.1 != n) {
                return Err(TensorError::shape(name, &shapes));
            }
            let m: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(m * n);
            for p in parts {
                out.extend_from_slice(p.data());
            }
            let sizes = dims.iter().map(|d| d.0).collect();
            Ok((Tensor::from_parts(vec![m, n], out), Saved::Sizes(sizes)))
        }
        1 => {
            let m = dims[0].0;
            if dims.iter().any(|d| d.0 != m) {
                return Err(TensorError::shape(name, &shapes));
            }
            let n: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for (p, d) in parts.iter().zip(&dims) {
                    out.extend_from_slice(&p.data()[i * d.1..(i + 1) * d.1]);
                }
            }
            let sizes = dims.iter().map(|d| d.1).collect();
            Ok((Tensor::from_parts(vec![m, n], out), Saved::Sizes(sizes)))
        }
        _ => Err(TensorError::shape(name, &shapes)),
    }
}

fn reduce_to_rhs(b: Bcast, g: &[f64], m: usize, n: usize, f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    match b {
        Bcast::Same => g.iter().enumerate().map(|(k, &v)| f(k, v)).collect(),
        Bcast::Row => {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += f(i * n + j, g[i * n + j]);
                }
            }
            out
        }
        Bcast::Col => (0..m)
            .map(|i| (0..n).map(|j| f(i * n + j, g[i * n + j])).sum())
            .collect(),
        Bcast::Scalar => vec![g.iter().enumerate().map(|(k, &v)| f(k, v)).sum()],
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), data)
}

/// Input gradients of one node given its output gradient `g`.
/// Matrix-product adjoint that adds straight into existing gradient buffers.
fn matmul_adjoint_into(node: &Node, nodes: &[Node], g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let (ia, ib) = (node.inputs[0].0, node.inputs[1].0);
    let a = &nodes[ia].value;
    let b = &nodes[ib].value;
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    let gd = g.data();
    if nodes[ia].requires_grad {
        let slot = &mut grads[ia];
        let acc = slot.is_some();
        let out = slot.get_or_insert_with(|| Tensor::zeros(a.shape()));
        gemm(m, n, k, gd, Layout::Normal, b.data(), Layout::Trans, out.data_mut(), acc);
    }
    if nodes[ib].requires_grad {
        let slot = &mut grads[ib];
        let acc = slot.is_some();
        let out = slot.get_or_insert_with(|| Tensor::zeros(b.shape()));
        gemm(k, m, n, a.data(), Layout::Trans, gd, Layout::Normal, out.data_mut(), acc);
    }
    Ok(())
}

fn adjoint(kind: &OpKind, node: &Node, nodes: &[Node], g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let input = |k: usize| &nodes[node.inputs[k].0].value;
    let wants = |k: usize| nodes[node.inputs[k].0].requires_grad;
    let y = &node.value;
    let gd = g.data();
    let elementwise = |f: &dyn Fn(usize, f64) -> f64| {
        let x = input(0);
        Ok(vec![Some(like(x, gd.iter().enumerate().map(|(k, &v)| f(k, v)).collect()))])
    };

    match kind {
        OpKind::MatMul => {
            let a = input(0);
            let b = input(1);
            let (m, k) = a.dims2()?;
            let (_, n) = b.dims2()?;
            let da = wants(0).then(|| {
                let mut out = vec![0.0; m * k];
                gemm(m, n, k, gd, Layout::Normal, b.data(), Layout::Trans, &mut out, false);
                like(a, out)
            });
            let db = wants(1).then(|| {
                let mut out = vec![0.0; k * n];
                gemm(k, m, n, a.data(), Layout::Trans, gd, Layout::Normal, &mut out, false);
                like(b, out)
            });
            Ok(vec![da, db])
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let Saved::Broadcast(b) = node.saved else {
                unreachable!("binary node without broadcast record")
            };
            let l = input(0);
            let r = input(1);
            let (m, n) = l.dims2()?;
            let (ld, rd) = (l.data(), r.data());
            let rv = |k: usize| rd[rhs_index(b, k / n, k % n, n)];
            let dl: Vec<f64> = match kind {
                OpKind::Add | OpKind::Sub => gd.to_vec(),
                OpKind::Mul => gd.iter().enumerate().map(|(k, v)| v * rv(k)).collect(),
                _ => gd.iter().enumerate().map(|(k, v)| v / rv(k)).collect(),
            };
            let dr = wants(1).then(|| {
                let data = match kind {
                    OpKind::Add => reduce_to_rhs(b, gd, m, n, |_, v| v),
                    OpKind::Sub => reduce_to_rhs(b, gd, m, n, |_, v| -v),
                    OpKind::Mul => reduce_to_rhs(b, gd, m, n, |k, v| v * ld[k]),
                    _ => reduce_to_rhs(b, gd, m, n, |k, v| {
                        let d = rv(k);
                        -v * ld[k] / (d * d)
                    }),
                };
                like(r, data)
            });
            Ok(vec![wants(0).then(|| like(l, dl)), dr])
        }
        OpKind::Scale(c) => elementwise(&|_, v| v * c),
        OpKind::Shift(_) => elementwise(&|_, v| v),
        OpKind::Sigmoid => {
            let yd = y.data();
            elementwise(&|k, v| v * yd[k] * (1.0 - yd[k]))
        }
        OpKind::Tanh => {
            let yd = y.data();
            elementwise(&|k, v| v * (1.0 - yd[k] * yd[k]))
        }
        OpKind::Exp => {
            let yd = y.data();
            elementwise(&|k, v| v * yd[k])
        }
        OpKind::Log => {
            let xd = input(0).data();
            elementwise(&|k, v| v / xd[k])
        }
        OpKind::Relu => {
            let xd = input(0).data();
            elementwise(&|k, v| if xd[k] > 0.0 { v } else { 0.0 })
        }
        OpKind::Power(p) => {
            let xd = input(0).data();
            elementwise(&|k, v| v * p * xd[k].powf(p - 1.0))
        }
        OpKind::Clamp { lo, hi } => {
            let xd = input(0).data();
            elementwise(&|k, v| if xd[k] >= *lo && xd[k] <= *hi { v } else { 0.0 })
        }
        OpKind::Sum => {
            let x = input(0);
            Ok(vec![Some(Tensor::full(x.shape(), gd[0]))])
        }
        OpKind::Mean => {
            let x = input(0);
            Ok(vec![Some(Tensor::full(x.shape(), gd[0] / x.len() as f64))])
        }
        OpKind::SumAxis(axis) | OpKind::MeanAxis(axis) => {
            let x = input(0);
            let (m, n) = x.dims2()?;
            let scale = match kind {
                OpKind::MeanAxis(_) => 1.0 / if *axis == 0 { m } else { n } as f64,
                _ => 1.0,
            };
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = scale * if *axis == 0 { gd[j] } else { gd[i] };
                }
            }
            Ok(vec![Some(like(x, out))])
        }
        OpKind::Concat(axis) => {
            let Saved::Sizes(sizes) = &node.saved else {
                unreachable!("concat node without sizes")
            };
            let (m, n) = y.dims2()?;
            let mut out = Vec::with_capacity(sizes.len());
            let mut offset = 0;
            for (k, &s) in sizes.iter().enumerate() {
                if !wants(k) {
                    out.push(None);
                    offset += s;
                    continue;
                }
                let data = if *axis == 0 {
                    gd[offset * n..(offset + s) * n].to_vec()
                } else {
                    let mut d = Vec::with_capacity(m * s);
                    for i in 0..m {
                        d.extend_from_slice(&gd[i * n + offset..i * n + offset + s]);
                    }
                    d
                };
                out.push(Some(like(input(k), data)));
                offset += s;
            }
            Ok(out)
        }
        OpKind::Slice { axis, start, end } => {
            let x = input(0);
            let (m, n) = x.dims2()?;
            let mut out = vec![0.0; m * n];
            if *axis == 0 {
                out[start * n..end * n].copy_from_slice(gd);
            } else {
                let w = end - start;
                for i in 0..m {
                    out[i * n + start..i * n + end].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
            }
            Ok(vec![Some(like(x, out))])
        }
        OpKind::GatherRows(rows) => {
            let x = input(0);
            let (m, n) = x.dims2()?;
            let mut out = vec![0.0; m * n];
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..n {
                    out[r * n + j] += gd[k * n + j];
                }
            }
            Ok(vec![Some(like(x, out))])
        }
        OpKind::Transpose => {
            let x = input(0);
            let (m, n) = x.dims2()?;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = gd[j * m + i];
                }
            }
            Ok(vec![Some(like(x, out))])
        }
        OpKind::RowSoftmax => {
            let (_, n) = y.dims2()?;
            let yd = y.data();
            let mut out = vec![0.0; yd.len()];
            for ((o, yr), gr) in out.chunks_mut(n).zip(yd.chunks(n)).zip(gd.chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            Ok(vec![Some(like(y, out))])
        }
        OpKind::Dropout { .. } => {
            let Saved::Mask(mask) = &node.saved else {
                unreachable!("dropout node without mask")
            };
            elementwise(&|k, v| v * mask[k])
        }
        OpKind::CosineSimilarity => {
            let Saved::PairNorms(na, nb) = &node.saved else {
                unreachable!("cosine node without norms")
            };
            let a = input(0);
            let b = input(1);
            let (m, n) = a.dims2()?;
            let (ad, bd, s) = (a.data(), b.data(), y.data());
            let mut da = vec![0.0; m * n];
            let mut db = vec![0.0; m * n];
            for i in 0..m {
                let inv = 1.0 / (na[i] * nb[i]);
                for j in 0..n {
                    let k = i * n + j;
                    da[k] = gd[i] * (bd[k] * inv - s[i] * ad[k] / (na[i] * na[i]));
                    db[k] = gd[i] * (ad[k] * inv - s[i] * bd[k] / (nb[i] * nb[i]));
                }
            }
            Ok(vec![
                wants(0).then(|| like(a, da)),
                wants(1).then(|| like(b, db)),
            ])
        }
        OpKind::RowNormalize => {
            let Saved::Norms(norms) = &node.saved else {
                unreachable!("normalize node without norms")
            };
            let (m, n) = y.dims2()?;
            let yd = y.data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = i * n..(i + 1) * n;
                let dot: f64 = yd[row.clone()].iter().zip(&gd[row.clone()]).map(|(a, b)| a * b).sum();
                for k in row {
                    out[k] = (gd[k] - yd[k] * dot) / norms[i];
                }
            }
            Ok(vec![Some(like(input(0), out))])
        }
        OpKind::Reshape(_) => {
            let Saved::Shape(prev) = &node.saved else {
                unreachable!("reshape node without shape")
            };
            Ok(vec![Some(Tensor::from_parts(prev.clone(), gd.to_vec()))])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 0.5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 10], 3.7)).unwrap();
        let y = tape.row_softmax(x).unwrap();
        for &w in tape.value(y).data() {
            assert!((w - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_of_ones() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::ones(&[3, 2])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 2]);
        assert!(tape.value(c).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_shape_error_names_kind_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::ones(&[2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                shapes: vec![vec![2, 3], vec![2, 3]]
            }
        );
    }

    #[test]
    fn division_by_zero_is_a_domain_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = tape.constant(t(&[2], &[1.0, 0.0])).unwrap();
        assert!(matches!(tape.div(a, b), Err(TensorError::Domain { op: "div", .. })));
    }

    #[test]
    fn log_of_nonpositive_is_a_domain_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, -2.0])).unwrap();
        assert!(matches!(tape.log(a), Err(TensorError::Domain { op: "log", .. })));
    }

    #[test]
    fn overflow_is_reported_not_propagated() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(tape.exp(a), Err(TensorError::NonFinite { op: "exp", .. })));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true).unwrap();
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), true).unwrap();
        let y = tape.sigmoid(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, -2.0, 5.0, 0.5]), true).unwrap();
        let y = tape.mean(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true).unwrap();
        let y = tape.tanh(x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let y = tape.dropout(x, 0.4, false, 9).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_uses_inverted_scaling() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1000])).unwrap();
        let y = tape.dropout(x, 0.4, true, 3).unwrap();
        for &v in tape.value(y).data() {
            assert!(v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcasting_forms() {
        let mut tape = Tape::new();
        let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let row = tape.constant(t(&[3], &[10.0, 20.0, 30.0])).unwrap();
        let col = tape.constant(t(&[2, 1], &[100.0, 200.0])).unwrap();
        let s = tape.constant(Tensor::scalar(2.0)).unwrap();
        let a = tape.add(m, row).unwrap();
        assert_eq!(tape.value(a).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let b = tape.add(m, col).unwrap();
        assert_eq!(tape.value(b).data(), &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]);
        let c = tape.mul(m, s).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
        let bad = tape.constant(Tensor::ones(&[2, 2])).unwrap();
        assert!(tape.add(m, bad).is_err());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0])).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice(c, 1, 0, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(a));
        let rows = tape.concat(&[a, a], 0).unwrap();
        assert_eq!(tape.shape(rows), &[4, 2]);
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0])).unwrap();
        let b = tape.constant(Tensor::ones(&[2, 2])).unwrap();
        assert!(matches!(
            tape.cosine_similarity(a, b),
            Err(TensorError::Domain { op: "cosine_similarity", .. })
        ));
    }

    #[test]
    fn param_gradients_are_keyed() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(4), t(&[2, 1], &[1.0, 2.0])).unwrap();
        let x = tape.constant(t(&[1, 2], &[3.0, 5.0])).unwrap();
        let y = tape.matmul(x, w).unwrap();
        let y = tape.sum(y).unwrap();
        let map = tape.backward(y).unwrap().into_param_map();
        assert_eq!(map.get(ParamId(4)).unwrap().data(), &[3.0, 5.0]);
    }
}
