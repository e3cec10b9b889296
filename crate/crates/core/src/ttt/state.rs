use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::TttConfig;
use crate::optim::{AdamWConfig, Optimizer};
use crate::predictor::ModelParams;

/// Running mean and standard deviation of the supervision error: exact
/// averaging for the first `warmup` samples, then an EMA.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: f64,
    pub var: f64,
    pub count: usize,
}

impl RunningStats {
    pub fn std(&self) -> f64 {
        self.var.max(0.0).sqrt()
    }
}

/// Fold `e` into the statistics. Non-finite or negative errors are ignored
/// and `false` is returned.
pub fn update_running_stats(stats: &mut RunningStats, e: f64, rho: f64, warmup: usize) -> bool {
    if !e.is_finite() || e < 0.0 {
        log::warn!("ignoring supervision error {e}");
        return false;
    }
    stats.count += 1;
    let d = e - stats.mean;
    if stats.count <= warmup.max(1) {
        let n = stats.count as f64;
        let mean = stats.mean + d / n;
        // Population variance, updated with Welford's recurrence.
        stats.var = (stats.var * (n - 1.0) + d * (e - mean)) / n;
        stats.mean = mean;
    } else {
        stats.mean += rho * d;
        stats.var = (1.0 - rho) * (stats.var + rho * d * d);
    }
    true
}

/// `e > m + k sigma`, closed during warm-up.
pub fn is_hard_sample(stats: &RunningStats, e: f64, k: f64, warmup: usize) -> bool {
    stats.count >= warmup.max(1) && e > stats.mean + k * stats.std()
}

/// Per-layer derivative of the current loss with respect to the previous
/// step's learning rate: minus the dot product of the current gradient and
/// the mean of the stored ones. `None` while the history is empty.
pub fn hypergradient(current: &[f64], history: &VecDeque<Vec<f64>>) -> Option<f64> {
    if history.is_empty() {
        return None;
    }
    let mut dot = 0.0;
    for h in history {
        dot += current.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
    }
    Some(-dot / history.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlphaUpdate {
    /// Per-layer hypergradient, `None` where the history was empty.
    pub hypergrad: Vec<Option<f64>>,
    /// Layers whose update hit `alpha_min` or `alpha_max`.
    pub clamped: Vec<usize>,
    pub applied: bool,
}

#[derive(Debug, Clone)]
pub struct TttState {
    /// Regular update steps taken.
    pub p: usize,
    pub alpha: Vec<f64>,
    pub grad_history: Vec<VecDeque<Vec<f64>>>,
    pub last_grad: Option<Vec<Vec<f64>>>,
    pub stats: RunningStats,
    pub optimizer: Optimizer,
    pub regular_updates: usize,
    pub hard_updates: usize,
    pub failed_events: usize,
}

impl TttState {
    pub fn new(cfg: &TttConfig, model: &ModelParams) -> Self {
        let layers = model.num_layers();
        TttState {
            p: 0,
            alpha: vec![cfg.alpha_init; layers],
            grad_history: vec![VecDeque::new(); layers],
            last_grad: None,
            stats: RunningStats::default(),
            optimizer: Optimizer::new(
                cfg.optimizer,
                AdamWConfig {
                    weight_decay: cfg.weight_decay,
                    ..AdamWConfig::default()
                },
            ),
            regular_updates: 0,
            hard_updates: 0,
            failed_events: 0,
        }
    }
}

/// Ascend the averaged gradient dot product per layer, clamp, then push
/// `current` into the history. `current` is this step's per-layer gradient,
/// taken at the parameters before the step.
pub fn hypergrad_update_alpha(state: &mut TttState, current: Vec<Vec<f64>>, cfg: &TttConfig) -> AlphaUpdate {
    let mut out = AlphaUpdate {
        hypergrad: vec![None; current.len()],
        ..AlphaUpdate::default()
    };
    if cfg.gamma == 0.0 {
        return out;
    }
    let apply = !cfg.strict_alpha_interval || state.p % cfg.tau_alpha == 0;
    for (l, g) in current.iter().enumerate() {
        let Some(h) = hypergradient(g, &state.grad_history[l]) else {
            continue;
        };
        out.hypergrad[l] = Some(h);
        if !apply {
            continue;
        }
        let raw = state.alpha[l] - cfg.gamma * h;
        let next = if raw.is_finite() { raw.clamp(cfg.alpha_min, cfg.alpha_max) } else { cfg.alpha_max };
        if next != raw {
            log::debug!("alpha of layer {l} clamped from {raw:e} to {next:e}");
            out.clamped.push(l);
        }
        state.alpha[l] = next;
        out.applied = true;
    }
    for (l, g) in current.iter().enumerate() {
        let hist = &mut state.grad_history[l];
        hist.push_back(g.clone());
        while hist.len() > cfg.tau_alpha {
            hist.pop_front();
        }
    }
    state.last_grad = Some(current);
    out
}
