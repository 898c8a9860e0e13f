use physe_tensor::{GradientMap, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::SequenceBatch;
use crate::model::Model;
use crate::objectives::{total_loss, LossError, LossInputs, LossReport, LossWeights};

use super::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub with_pe: bool,
    pub contrastive: bool,
    pub weights: LossWeights,
    pub chunks: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum StepError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Forward tape of one sub-batch with its exported outputs in the order
/// pred_final, [pred_steps, h_est], [z, z_aug].
struct ChunkPass {
    tape: Tape,
    outputs: Vec<Var>,
}

fn rows(t: &Tensor, start: usize, end: usize) -> Tensor {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(&shape, t.data()[start * per..end * per].to_vec()).expect("row slice")
}

fn chunk_forward(model: &Model, batch: &SequenceBatch, range: (usize, usize), cfg: &StepConfig, seed: u64) -> Result<ChunkPass, TensorError> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rows(&batch.x, range.0, range.1);
    let o = model.forward(&mut tape, &p, &x, true, cfg.with_pe, &mut rng)?;
    let mut outputs = vec![o.pred_final];
    if let Some(ph) = o.physics {
        outputs.extend([o.pred_steps, ph.h_est]);
    }
    if cfg.contrastive {
        let xa = rows(&batch.x_aug, range.0, range.1);
        let za = model.latent(&mut tape, &p, &xa, true, &mut rng)?;
        outputs.extend([o.latent, za]);
    }
    Ok(ChunkPass { tape, outputs })
}

/// Loss and parameter gradients of one training batch.
///
/// The batch is cut into `cfg.chunks` contiguous sub-batches whose forward
/// and reverse passes run independently; the loss is evaluated on a
/// separate tape over their outputs and the per-chunk gradients are summed
/// in chunk order, so the result is independent of the thread count.
pub fn batch_gradients(model: &Model, batch: &SequenceBatch, cfg: &StepConfig, seed: u64) -> Result<(LossReport, GradientMap), StepError> {
    let b = batch.len();
    let k = cfg.chunks.clamp(1, b.max(1));
    let ranges: Vec<(usize, usize)> = (0..k).map(|c| (c * b / k, (c + 1) * b / k)).collect();
    let passes = ranges
        .par_iter()
        .enumerate()
        .map(|(c, &r)| chunk_forward(model, batch, r, cfg, derive_seed(seed, c as u64)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut head = Tape::new();
    let leaves: Vec<Vec<Var>> = passes
        .iter()
        .map(|pass| {
            pass.outputs
                .iter()
                .map(|&v| head.leaf(pass.tape.value(v).clone(), true))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let joined = |head: &mut Tape, slot: usize| -> Result<Var, TensorError> {
        let parts: Vec<Var> = leaves.iter().map(|l| l[slot]).collect();
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            head.concat(&parts, 0)
        }
    };
    let pred = joined(&mut head, 0)?;
    let mut slot = 1;
    let physics = if cfg.with_pe {
        slot += 2;
        Some((joined(&mut head, 1)?, joined(&mut head, 2)?))
    } else {
        None
    };
    let latents = if cfg.contrastive {
        Some((joined(&mut head, slot)?, joined(&mut head, slot + 1)?))
    } else {
        None
    };
    let target = head.constant(batch.y.clone())?;
    let inputs = LossInputs {
        pred,
        target,
        physics,
        latents,
    };
    let terms = total_loss(&mut head, &inputs, &cfg.weights)?;
    let report = terms.report(&head);
    let head_grads = head.backward(terms.total)?;

    let seeded: Vec<(ChunkPass, Vec<(Var, Tensor)>)> = passes
        .into_iter()
        .zip(&leaves)
        .map(|(pass, l)| {
            let seeds = pass
                .outputs
                .iter()
                .zip(l)
                .filter_map(|(&out, &leaf)| head_grads.wrt(leaf).map(|g| (out, g.clone())))
                .collect();
            (pass, seeds)
        })
        .collect();
    let maps = seeded
        .into_par_iter()
        .map(|(pass, seeds)| pass.tape.backward_seeded(seeds).map(|g| g.into_param_map()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut grads = GradientMap::default();
    for m in maps {
        grads.merge(m);
    }
    Ok((report, grads))
}
