//! Shared training plumbing: batching, optimizer construction and loss logs.

use std::collections::BTreeMap;

use candle_core::Var;
pub use candle_nn::Optimizer;
use candle_nn::{AdamW, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{permutation, SeededRng};

/// Per-epoch losses of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_loss: Vec<f64>,
    /// Validation metric after each epoch.
    pub val_metric: Vec<f64>,
    /// Validation metric before the first update.
    #[serde(default)]
    pub initial_val: Option<f64>,
    /// 0-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
}

impl TrainLog {
    pub fn best_val(&self) -> Option<f64> {
        self.val_metric.get(self.best_epoch).copied()
    }
}

pub fn adamw(vars: Vec<Var>, lr: f64, weight_decay: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay,
            ..ParamsAdamW::default()
        },
    )?)
}

pub fn ensure_finite(loss: f64, what: &'static str, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { what, epoch, loss })
    }
}

/// Shuffled mini-batches in which every item has the same length, so
/// variable-length sequences batch without padding.
pub fn length_batches(lengths: &[usize], batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &len) in lengths.iter().enumerate() {
        buckets.entry(len).or_default().push(i);
    }
    let mut batches = Vec::new();
    for items in buckets.into_values() {
        let order = permutation(rng, items.len());
        let shuffled: Vec<usize> = order.into_iter().map(|k| items[k]).collect();
        batches.extend(shuffled.chunks(batch_size.max(1)).map(|c| c.to_vec()));
    }
    let order = permutation(rng, batches.len());
    order.into_iter().map(|k| batches[k].clone()).collect()
}

/// Unshuffled same-length groups (evaluation order).
pub fn length_groups(lengths: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &len) in lengths.iter().enumerate() {
        buckets.entry(len).or_default().push(i);
    }
    buckets
        .into_values()
        .flat_map(|items| items.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect::<Vec<_>>())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn batches_are_homogeneous_and_cover_everything() {
        let lengths = [3, 5, 3, 3, 5, 7, 3, 5];
        let batches = length_batches(&lengths, 2, &mut seeded(0));
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.len() <= 2);
            assert!(b.iter().all(|&i| lengths[i] == lengths[b[0]]));
        }
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        assert!(ensure_finite(1.0, "x", 0).is_ok());
        assert!(matches!(ensure_finite(f64::NAN, "x", 3), Err(Error::Diverged { epoch: 3, .. })));
    }
}
