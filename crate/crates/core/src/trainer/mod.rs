//! Mini-batch training of probes: AdamW with decoupled weight decay, cosine
//! learning-rate annealing, best-epoch selection on a validation metric and
//! grid sweeps.

mod optim;
mod sweep;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

pub use optim::{adamw_step, cosine_lr, AdamState};
pub use sweep::{resolve, sensitivity, sensitivity_csv, sweep, Sampling, SensitivityRow, SweepGrid, SweepRun};
pub use train::{
    evaluate, positive_class, predict, train, train_store, write_run, Data, EpochLog, TrainOutcome,
    TrainReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EarlyStopMetric {
    F1,
    Accuracy,
}

/// Optimization settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub early_stop_metric: EarlyStopMetric,
    /// Epochs without improvement before stopping. `None` trains every epoch
    /// and keeps the best one.
    pub patience: Option<usize>,
    pub seed: u64,
    pub shuffle: bool,
    /// Fraction of train carved off for validation when the store has no val
    /// split.
    pub val_fraction: f64,
    /// Per-class loss weights. Unweighted when absent.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 10,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Cosine,
            early_stop_metric: EarlyStopMetric::F1,
            patience: None,
            seed: 0,
            shuffle: true,
            val_fraction: 0.1,
            class_weights: None,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ProbeError::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return bad(format!("learning_rate {} outside (0, 1)", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) outside [0, 1)", self.beta1, self.beta2));
        }
        if !(self.eps >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps and weight_decay must be non-negative".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("class weights must be finite and non-negative".into());
            }
        }
        Ok(())
    }
}
