//! Epoch-shuffled mini-batch scheduling.
//!
//! A [`Batcher`] owns no data; it maps an optimizer step number to the
//! positions (0..n) that step should train on. Each epoch draws a fresh
//! permutation from its own seeded stream, every instance appears exactly
//! once per epoch, and the final short batch is emitted rather than dropped.
//! Because the schedule is a pure function of (seed, step), a resumed run
//! sees exactly the batches an uninterrupted run would have seen, without
//! replaying history. It also lets a prefetching producer materialize
//! batches ahead of the consumer without touching determinism.

use super::DataError;
use crate::tensor::Rng;

#[derive(Debug, Clone)]
pub struct Batcher {
    n: usize,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self, DataError> {
        if n == 0 {
            return Err(DataError::Empty);
        }
        if batch_size == 0 {
            return Err(DataError::Format("batch_size must be positive".into()));
        }
        Ok(Batcher {
            n,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// Positions for optimizer step `step` (0-based, counted across epochs).
    pub fn batch_for_step(&self, step: u64) -> Vec<usize> {
        let bpe = self.batches_per_epoch() as u64;
        let epoch = step / bpe;
        let slot = (step % bpe) as usize;
        let mut perm: Vec<usize> = (0..self.n).collect();
        Rng::stream(self.seed, epoch).shuffle(&mut perm);
        let lo = slot * self.batch_size;
        let hi = (lo + self.batch_size).min(self.n);
        perm[lo..hi].to_vec()
    }
}
