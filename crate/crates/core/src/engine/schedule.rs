use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Piecewise-constant learning rate.
///
/// Without overrides the rate is `initial_lr * drop_factor^floor(epoch / drop_every)`.
/// An override entry `e -> lr` pins the rate from epoch `e` until the next entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub drop_factor: f64,
    pub drop_every: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<usize, f64>,
}

impl LrSchedule {
    pub fn step_decay(initial_lr: f64, drop_factor: f64, drop_every: usize) -> Self {
        LrSchedule { initial_lr, drop_factor, drop_every, overrides: BTreeMap::new() }
    }

    pub fn constant(lr: f64) -> Self {
        Self::step_decay(lr, 1.0, 1)
    }

    /// Starts at `initial_lr` and switches to each `(epoch, lr)` milestone.
    pub fn milestones(initial_lr: f64, table: &[(usize, f64)]) -> Self {
        LrSchedule { initial_lr, drop_factor: 1.0, drop_every: 1, overrides: table.iter().copied().collect() }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.initial_lr.is_finite()
            && self.initial_lr > 0.0
            && self.drop_factor > 0.0
            && self.drop_factor <= 1.0
            && self.drop_every >= 1
            && self.overrides.values().all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if let Some((_, &lr)) = self.overrides.range(..=epoch).next_back() {
            return lr;
        }
        // repeated multiplication keeps e.g. 1e-3 * 0.2 * 0.2 == 4e-5 exactly
        let drops = epoch / self.drop_every.max(1);
        (0..drops).fold(self.initial_lr, |lr, _| lr * self.drop_factor)
    }
}
