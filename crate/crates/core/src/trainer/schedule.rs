use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warm-up to a cap, then step decay:
/// `min(warmup_rate·T, cap) · decay_factor^k`, where `k` counts the decay
/// epochs `decay_start, decay_start + decay_every, …` that are `≤ T`.
/// Epochs are 1-indexed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub warmup_rate: f64,
    pub cap: f64,
    pub decay_start: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::paper()
    }
}

impl Schedule {
    pub fn paper() -> Self {
        Self {
            warmup_rate: 2.5e-5,
            cap: 1e-4,
            decay_start: 10,
            decay_every: 2,
            decay_factor: 0.2,
            epochs: 13,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.decay_every == 0 {
            return Err(Error::Config("epochs and decay_every must be positive".into()));
        }
        let positive = [self.warmup_rate, self.cap, self.decay_factor];
        if positive.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config(
                "warmup_rate, cap and decay_factor must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn decays_by(&self, epoch: usize) -> usize {
        if epoch < self.decay_start {
            0
        } else {
            (epoch - self.decay_start) / self.decay_every + 1
        }
    }

    /// Learning rate for 1-indexed `epoch`. The result is rounded to 12
    /// significant digits so decimal settings give decimal rates
    /// (`3 × 2.5e-5` is `7.5e-5`, not `7.500000000000001e-5`).
    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if !(1..=self.epochs).contains(&epoch) {
            return Err(Error::Config(format!(
                "epoch {epoch} outside 1..={}",
                self.epochs
            )));
        }
        let base = (self.warmup_rate * epoch as f64).min(self.cap);
        let lr = base * self.decay_factor.powi(self.decays_by(epoch) as i32);
        Ok(format!("{lr:.11e}").parse().expect("formatted float parses"))
    }
}
