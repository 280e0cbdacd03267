//! Mini-batch plumbing shared by the trainable models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decode::sequence_seed;
use crate::error::{Error, Result};
use crate::nn::{Adam, Gradients, ParamStore, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: Real,
    /// Global gradient-norm clipping threshold.
    pub clip: Real,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 64,
            lr: crate::nn::DEFAULT_LR,
            clip: crate::nn::DEFAULT_CLIP_NORM,
            seed: 1,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::InvalidArgument("lr and clip must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch mean losses of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub train_losses: Vec<Real>,
    pub valid_losses: Vec<Real>,
    pub steps: usize,
    /// Epoch (1-based) whose parameters were kept; 0 when none ran.
    pub best_epoch: usize,
}

/// Shuffled mini-batches of `0..n` for one epoch.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(seed, epoch as u64));
    idx.shuffle(&mut rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Shuffled mini-batches whose members have similar `lengths`, to limit
/// padding. Batches are formed inside shuffled pools of `50 * batch` items.
pub fn bucketed_batches(lengths: &[usize], batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let batch = batch.max(1);
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(seed, epoch as u64));
    idx.shuffle(&mut rng);
    let mut batches = Vec::new();
    for pool in idx.chunks(batch * 50) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| lengths[i]);
        batches.extend(pool.chunks(batch).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Accumulates, clips and applies one optimizer update.
pub(crate) fn apply_update(
    store: &mut ParamStore,
    adam: &mut Adam,
    grads: &Gradients,
    clip: Real,
    step: usize,
) -> Result<()> {
    store.zero_grad();
    store.accumulate(grads);
    let norm = store.clip_grad_norm(clip);
    if !norm.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: "non-finite gradient norm".into(),
        });
    }
    adam.step(store)
}

/// Rewrites a non-finite forward value as a divergence at `step`.
pub(crate) fn at_step<T>(r: Result<T>, step: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(what) => Error::Divergence {
            step,
            detail: format!("non-finite {what}"),
        },
        other => other,
    })
}
