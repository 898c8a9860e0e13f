use physe_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, WindowSource, WINDOW};

/// A batch of windows: `x` and `x_aug` are `[b, WINDOW, 1]`, `y` is `[b, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub x: Tensor,
    pub x_aug: Tensor,
    pub y: Tensor,
    /// Window indices within the source.
    pub indices: Vec<usize>,
}

impl SequenceBatch {
    pub fn gather(source: &WindowSource, indices: &[usize]) -> Self {
        let b = indices.len();
        let mut x = Vec::with_capacity(b * WINDOW);
        let mut x_aug = Vec::with_capacity(b * WINDOW);
        let mut y = Vec::with_capacity(b);
        for &i in indices {
            x.extend_from_slice(source.window(i));
            x_aug.extend_from_slice(source.window_aug(i));
            y.push(source.y[i]);
        }
        SequenceBatch {
            x: Tensor::new(&[b, WINDOW, 1], x).expect("window shape"),
            x_aug: Tensor::new(&[b, WINDOW, 1], x_aug).expect("window shape"),
            y: Tensor::new(&[b, 1], y).expect("target shape"),
            indices: indices.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Iterator over batches covering every window once.
pub struct Batches<'a> {
    source: &'a WindowSource,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    /// True when the source had no windows; the iterator then yields nothing.
    pub fn source_is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = SequenceBatch::gather(self.source, &self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

/// Batches in source order, or shuffled deterministically when a seed is given.
/// The final partial batch is kept.
pub fn batch_iterator(
    source: &WindowSource,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Batches<'_>, DataError> {
    if batch_size == 0 {
        return Err(DataError::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches {
        source,
        order,
        batch_size,
        pos: 0,
    })
}
