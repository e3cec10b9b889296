//! Online test-time training: supervision at interval `tau`, per-layer
//! learning rates adapted by hypergradients, and extra steps on hard
//! samples.

mod engine;
mod state;

pub use engine::{is_opportunity, schedule_supervision, EventKind, StepLog, SupervisionEvent, TttEngine, STEP_LOG_SCHEMA};
pub use state::{hypergrad_update_alpha, hypergradient, is_hard_sample, update_running_stats, AlphaUpdate, RunningStats, TttState};

use serde::{Deserialize, Serialize};

use crate::optim::OptimizerKind;
use crate::{Error, Result};

/// Which loss defines the error `e` used by the hardness test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HardError {
    #[default]
    Reg,
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TttConfig {
    /// Supervision interval in timesteps.
    pub tau: usize,
    pub alpha_init: f64,
    /// Step size of the per-layer learning-rate update; 0 disables it.
    pub gamma: f64,
    /// Number of past gradients averaged in the hypergradient.
    pub tau_alpha: usize,
    /// Hardness threshold multiplier.
    pub k: f64,
    /// Apply a regular update on every `f`-th opportunity.
    pub update_frequency: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// EMA weight of the running error statistics.
    pub stat_decay: f64,
    /// Samples averaged exactly before the EMA takes over.
    pub stat_warmup: usize,
    /// Update alpha only every `tau_alpha` regular steps.
    pub strict_alpha_interval: bool,
    pub hard_error: HardError,
    /// Enable hard-sample extra steps.
    pub hsd: bool,
    /// Use actor tokens during adaptation.
    pub tokens: bool,
}

impl Default for TttConfig {
    fn default() -> Self {
        TttConfig {
            tau: 12,
            alpha_init: 1e-3,
            gamma: 1e-4,
            tau_alpha: 8,
            k: 3.0,
            update_frequency: 1,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 1e-3,
            alpha_min: 1e-6,
            alpha_max: 1.0,
            stat_decay: 0.05,
            stat_warmup: 10,
            strict_alpha_interval: false,
            hard_error: HardError::Reg,
            hsd: true,
            tokens: true,
        }
    }
}

impl TttConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let v = |f: &str, m: &str| Err(Error::validation(format!("{prefix}.{f}"), m));
        if self.tau == 0 {
            return v("tau", "must be >= 1");
        }
        if self.update_frequency == 0 {
            return v("update_frequency", "must be >= 1");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return v("gamma", "must be finite and >= 0");
        }
        if !(self.k > 0.0) {
            return v("k", "must be > 0");
        }
        if self.tau_alpha == 0 {
            return v("tau_alpha", "must be >= 1");
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha_max && self.alpha_max.is_finite()) {
            return v("alpha_min", "need 0 < alpha_min <= alpha_max");
        }
        if !(self.alpha_init >= self.alpha_min && self.alpha_init <= self.alpha_max) {
            return v("alpha_init", "must lie in [alpha_min, alpha_max]");
        }
        if !(self.stat_decay > 0.0 && self.stat_decay <= 1.0) {
            return v("stat_decay", "must lie in (0, 1]");
        }
        if !(self.weight_decay >= 0.0) {
            return v("weight_decay", "must be >= 0");
        }
        Ok(())
    }

    /// Fixed-rule TTT: no learning-rate adaptation, no hard samples.
    pub fn fixed_rule(&self) -> TttConfig {
        TttConfig {
            gamma: 0.0,
            hsd: false,
            ..self.clone()
        }
    }
}
