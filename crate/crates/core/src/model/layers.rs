//! Recurrent, attention and feed-forward building blocks on the tape.

use physe_tensor::{ParamId, Result, Tape, Tensor, Var};
use rand::Rng;

use super::params::{uniform_init, Bound, ParamStore};

/// Affine map `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: store.insert(&format!("{name}.w"), uniform_init(rng, &[input, output], input)),
            b: store.insert(&format!("{name}.b"), Tensor::zeros(&[1, output])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add(y, p.var(self.b))
    }
}

/// One LSTM layer with fused gate weights `[input + hidden, 4 hidden]`,
/// gate order input, forget, cell, output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let fan_in = input + hidden;
        let w = uniform_init(rng, &[fan_in, 4 * hidden], fan_in);
        let mut b = Tensor::zeros(&[1, 4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmLayer {
            w: store.insert(&format!("{name}.w"), w),
            b: store.insert(&format!("{name}.b"), b),
            input,
            hidden,
        }
    }

    /// Runs the recurrence from zero states over `inputs` (each `[batch, input]`)
    /// and returns the hidden state at every step.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, inputs: &[Var]) -> Result<Vec<Var>> {
        let Some(&first) = inputs.first() else {
            return Ok(Vec::new());
        };
        let batch = tape.shape(first)[0];
        let h_dim = self.hidden;
        let mut h = tape.constant(Tensor::zeros(&[batch, h_dim]))?;
        let mut c = h;
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let xh = tape.concat(&[x, h], 1)?;
            let gates = tape.matmul(xh, p.var(self.w))?;
            let gates = tape.add(gates, p.var(self.b))?;
            let i_f = tape.slice(gates, 1, 0, 2 * h_dim)?;
            let i_f = tape.sigmoid(i_f)?;
            let i = tape.slice(i_f, 1, 0, h_dim)?;
            let f = tape.slice(i_f, 1, h_dim, 2 * h_dim)?;
            let g = tape.slice(gates, 1, 2 * h_dim, 3 * h_dim)?;
            let g = tape.tanh(g)?;
            let o = tape.slice(gates, 1, 3 * h_dim, 4 * h_dim)?;
            let o = tape.sigmoid(o)?;
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let tc = tape.tanh(c)?;
            h = tape.mul(o, tc)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Stacked LSTM with dropout between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
    pub dropout: f64,
}

impl LstmStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let width = if l == 0 { input } else { hidden };
                LstmLayer::new(store, &format!("{name}.l{l}"), width, hidden, rng)
            })
            .collect();
        LstmStack { layers, dropout }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: &[Var],
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Vec<Var>> {
        let mut seq = inputs.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                seq = seq
                    .iter()
                    .map(|&h| tape.dropout(h, self.dropout, train, rng.gen()))
                    .collect::<Result<_>>()?;
            }
            seq = layer.forward(tape, p, &seq)?;
        }
        Ok(seq)
    }
}

/// Query, key, value and output projections for multi-head self-attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        AttentionParams {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            o: Linear::new(store, &format!("{name}.o"), width, width, rng),
            heads,
        }
    }
}

/// Output of [`self_attention`].
#[derive(Debug, Clone)]
pub struct Attended {
    /// Refined states per step, each `[batch, width]`.
    pub steps: Vec<Var>,
    /// Attention weights `[steps, steps]` indexed `[b * heads + head]`.
    pub weights: Vec<Var>,
}

/// Scaled dot-product self-attention over a sequence of `[batch, width]`
/// states. For each sequence and head the weights are
/// `softmax_j(q_t · k_j / sqrt(d_k))` and the head output at `t` is
/// `Σ_j w_tj v_j`; heads are concatenated and passed through the output map.
pub fn self_attention(tape: &mut Tape, p: &Bound, attn: &AttentionParams, seq: &[Var]) -> Result<Attended> {
    let steps = seq.len();
    let shape = tape.shape(seq[0]).to_vec();
    let (batch, width) = (shape[0], shape[1]);
    let heads = attn.heads;
    let d_k = width / heads;
    let scale = 1.0 / (d_k as f64).sqrt();

    // Rows are step-major: row t * batch + b.
    let stacked = tape.concat(seq, 0)?;
    let q_all = attn.q.forward(tape, p, stacked)?;
    let k_all = attn.k.forward(tape, p, stacked)?;
    let v_all = attn.v.forward(tape, p, stacked)?;

    let mut per_seq = Vec::with_capacity(batch);
    let mut weights = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        let rows: Vec<usize> = (0..steps).map(|t| t * batch + b).collect();
        let q = tape.gather_rows(q_all, rows.clone())?;
        let k = tape.gather_rows(k_all, rows.clone())?;
        let v = tape.gather_rows(v_all, rows)?;
        let mut head_out = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * d_k, (h + 1) * d_k);
            let qh = tape.slice(q, 1, lo, hi)?;
            let kh = tape.slice(k, 1, lo, hi)?;
            let vh = tape.slice(v, 1, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let w = tape.row_softmax(scores)?;
            weights.push(w);
            head_out.push(tape.matmul(w, vh)?);
        }
        per_seq.push(if heads == 1 { head_out[0] } else { tape.concat(&head_out, 1)? });
    }
    // Rows are sequence-major here: row b * steps + t.
    let joined = tape.concat(&per_seq, 0)?;
    let projected = attn.o.forward(tape, p, joined)?;
    let steps_out = (0..steps)
        .map(|t| tape.gather_rows(projected, (0..batch).map(|b| b * steps + t).collect()))
        .collect::<Result<_>>()?;
    Ok(Attended {
        steps: steps_out,
        weights,
    })
}

/// Three-layer feed-forward map with ReLU between layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedForward {
    pub layers: [Linear; 3],
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        FeedForward {
            layers: [
                Linear::new(store, &format!("{name}.l0"), input, hidden, rng),
                Linear::new(store, &format!("{name}.l1"), hidden, hidden, rng),
                Linear::new(store, &format!("{name}.l2"), hidden, output, rng),
            ],
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let h = self.layers[1].forward(tape, p, h)?;
        let h = tape.relu(h)?;
        self.layers[2].forward(tape, p, h)
    }
}
