//! Parameter update rules shared by offline training, meta pre-training and
//! the online engine. Every rule takes one learning rate per registry layer.

use serde::{Deserialize, Serialize};

use crate::numcore::{Gradients, ParamSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Adaptive moments with decoupled weight decay.
    #[default]
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// First and second moment buffers, one per tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub steps: u64,
}

impl Moments {
    pub fn reset(&mut self) {
        *self = Moments::default();
    }

    fn fit(&mut self, params: &ParamSet) {
        let n = params.tensors().len();
        self.first.resize_with(n, Vec::new);
        self.second.resize_with(n, Vec::new);
        for (i, t) in params.tensors().iter().enumerate() {
            // Growing token tables get zero moments for their new rows;
            // cleared tables drop theirs.
            self.first[i].resize(t.len(), 0.0);
            self.second[i].resize(t.len(), 0.0);
        }
    }
}

fn check(params: &ParamSet, grads: &Gradients, lrs: &[f64]) -> Result<()> {
    if lrs.len() != params.registry().len() {
        return Err(Error::usage(format!(
            "{} learning rates for {} layers",
            lrs.len(),
            params.registry().len()
        )));
    }
    if grads.tensors.len() != params.tensors().len() {
        return Err(Error::usage("gradient set does not match parameter set"));
    }
    if !grads.is_finite() {
        return Err(Error::numeric("non-finite gradient; step skipped"));
    }
    Ok(())
}

/// `theta <- theta - lr_layer * grad`.
pub fn sgd_step(params: &mut ParamSet, grads: &Gradients, lrs: &[f64]) -> Result<()> {
    check(params, grads, lrs)?;
    let registry = params.registry().clone();
    for (layer, &lr) in lrs.iter().enumerate() {
        if lr == 0.0 {
            continue;
        }
        for &t in registry.members(layer) {
            let g = &grads.tensors[t];
            for (v, d) in params.tensor_mut(t).values_mut().iter_mut().zip(g) {
                *v -= lr * d;
            }
        }
    }
    Ok(())
}

/// One bias-corrected adaptive-moment step with decoupled weight decay:
///
/// ```text
/// m <- b1 m + (1 - b1) g          v <- b2 v + (1 - b2) g^2
/// theta <- theta - lr * wd * theta - lr * m_hat / (sqrt(v_hat) + eps)
/// ```
pub fn adamw_step(params: &mut ParamSet, grads: &Gradients, lrs: &[f64], moments: &mut Moments, cfg: &AdamWConfig) -> Result<()> {
    check(params, grads, lrs)?;
    moments.fit(params);
    moments.steps += 1;
    let t = moments.steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let registry = params.registry().clone();
    for (layer, &lr) in lrs.iter().enumerate() {
        for &ti in registry.members(layer) {
            let g = &grads.tensors[ti];
            let m = &mut moments.first[ti];
            let v = &mut moments.second[ti];
            let values = params.tensor_mut(ti).values_mut();
            for (j, theta) in values.iter_mut().enumerate() {
                let gj = g.get(j).copied().unwrap_or(0.0);
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *theta -= lr * cfg.weight_decay * *theta + lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
    Ok(())
}

/// An optimizer kind together with its state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub adamw: AdamWConfig,
    pub moments: Moments,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, adamw: AdamWConfig) -> Self {
        Optimizer {
            kind,
            adamw,
            moments: Moments::default(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lrs: &[f64]) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, lrs),
            OptimizerKind::Adamw => adamw_step(params, grads, lrs, &mut self.moments, &self.adamw),
        }
    }

    pub fn reset(&mut self) {
        self.moments.reset();
    }
}

/// Cosine decay from `start` at step 0 to `end` at step `total - 1`.
pub fn cosine_schedule(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let frac = (step.min(total - 1)) as f64 / (total - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * frac).cos())
}
