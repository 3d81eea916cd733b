//! Shared minibatch training loop: seeded shuffling, fixed epoch budget with
//! early stop on stalled epoch-mean loss, and non-finite loss detection.
//!
//! Each training stage of a procedure runs as one phase with a fresh
//! optimizer (momentum does not leak across stages).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::LossError;
use crate::model::{Gradients, Model, ModelError, Sgd};
use crate::scenarios::DataError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("procedure contract violated: {0}")]
    Procedure(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Optimizer and schedule settings for one training phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Epoch budget per phase; early stop may end a phase sooner.
    pub epochs: usize,
    /// An epoch counts as stalled when the best epoch-mean loss improves by
    /// less than this.
    pub early_stop_min_delta: f64,
    /// Consecutive stalled epochs before the phase stops.
    pub early_stop_patience: usize,
    /// Base seed; shuffling and stage-local randomness derive from it.
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr: 0.1,
            momentum: 0.9,
            batch_size: 32,
            epochs: 20,
            early_stop_min_delta: 1e-4,
            early_stop_patience: 5,
            seed: 0,
        }
    }
}

/// Stable seed derivation for sub-streams (per stage, per task, per probe).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    // splitmix64 over the combined value
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-phase outcome: epoch-mean losses in order, plus the best value seen.
#[derive(Debug, Clone)]
pub struct PhaseStats {
    pub epoch_losses: Vec<f64>,
    pub best_loss: f64,
}

impl PhaseStats {
    pub fn epochs_run(&self) -> usize {
        self.epoch_losses.len()
    }
}

/// Runs one training phase over `n_rows` samples.
///
/// `step_fn` maps (model, batch row indices) to the batch loss and its
/// gradients; this loop owns shuffling, the optimizer, early stopping and
/// failure detection. Deterministic given `phase_seed` and the model state.
pub fn run_phase<F>(
    model: &mut Model,
    n_rows: usize,
    settings: &TrainSettings,
    phase_seed: u64,
    mut step_fn: F,
) -> Result<PhaseStats, TrainError>
where
    F: FnMut(&Model, &[usize]) -> Result<(f64, Gradients), TrainError>,
{
    let mut opt = Sgd::new(settings.lr, settings.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(phase_seed);
    let mut indices: Vec<usize> = (0..n_rows).collect();
    let batch = settings.batch_size.max(1);

    let mut stats = PhaseStats { epoch_losses: Vec::new(), best_loss: f64::INFINITY };
    let mut stalled = 0usize;

    for epoch in 0..settings.epochs {
        indices.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in indices.chunks(batch).enumerate() {
            let (loss, grads) = step_fn(model, chunk)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            opt.step(model, &grads)?;
            total += loss;
            batches += 1;
        }
        let epoch_loss = total / batches as f64;
        stats.epoch_losses.push(epoch_loss);

        if stats.best_loss - epoch_loss < settings.early_stop_min_delta {
            stalled += 1;
        } else {
            stalled = 0;
        }
        stats.best_loss = stats.best_loss.min(epoch_loss);
        if stalled >= settings.early_stop_patience {
            break;
        }
    }
    Ok(stats)
}

/// Same schedule semantics as [`run_phase`] for trainables that are not a
/// [`Model`] (autoencoder, bias transform): the step closure computes the
/// batch loss and applies its own parameter update.
pub fn run_custom_phase<F>(
    n_rows: usize,
    settings: &TrainSettings,
    phase_seed: u64,
    mut step_fn: F,
) -> Result<PhaseStats, TrainError>
where
    F: FnMut(&[usize]) -> Result<f64, TrainError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(phase_seed);
    let mut indices: Vec<usize> = (0..n_rows).collect();
    let batch = settings.batch_size.max(1);

    let mut stats = PhaseStats { epoch_losses: Vec::new(), best_loss: f64::INFINITY };
    let mut stalled = 0usize;
    for epoch in 0..settings.epochs {
        indices.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in indices.chunks(batch).enumerate() {
            let loss = step_fn(chunk)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            total += loss;
            batches += 1;
        }
        let epoch_loss = total / batches as f64;
        stats.epoch_losses.push(epoch_loss);
        if stats.best_loss - epoch_loss < settings.early_stop_min_delta {
            stalled += 1;
        } else {
            stalled = 0;
        }
        stats.best_loss = stats.best_loss.min(epoch_loss);
        if stalled >= settings.early_stop_patience {
            break;
        }
    }
    Ok(stats)
}
