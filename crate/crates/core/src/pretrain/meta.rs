use serde::{Deserialize, Serialize};

use super::sample_gradient;
use crate::numcore::{sample_stream, stream_id, streams, Gradients, RngStream};
use crate::optim::{cosine_schedule, AdamWConfig, Optimizer, OptimizerKind};
use crate::par::{self, Execution};
use crate::predictor::{gradients, loss_mae, MaeLoss, ModelParams};
use crate::scenegen::TttTask;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Tasks per outer step (B).
    pub batch_size: usize,
    pub k_inner: usize,
    pub alpha_in: f64,
    pub beta_init: f64,
    pub beta_final: f64,
    pub epochs: usize,
    pub tau: usize,
    pub inner_optimizer: OptimizerKind,
    pub outer_optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Adapt actor tokens in the inner loop.
    pub tokens_in_inner: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            batch_size: 4,
            k_inner: 4,
            alpha_in: 1e-3,
            beta_init: 5e-4,
            beta_final: 1e-6,
            epochs: 8,
            tau: 12,
            inner_optimizer: OptimizerKind::Sgd,
            outer_optimizer: OptimizerKind::Adamw,
            weight_decay: 1e-3,
            tokens_in_inner: true,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let v = |f: &str, m: &str| Err(Error::validation(format!("{prefix}.{f}"), m));
        if self.batch_size == 0 {
            return v("batch_size", "must be >= 1");
        }
        if self.k_inner == 0 {
            return v("k_inner", "must be >= 1");
        }
        if !(self.alpha_in >= 0.0 && self.alpha_in.is_finite()) {
            return v("alpha_in", "must be finite and >= 0");
        }
        if !(self.beta_final > 0.0) {
            return v("beta_final", "must be > 0");
        }
        if !(self.beta_init >= self.beta_final && self.beta_init.is_finite()) {
            return v("beta_init", "must be >= beta_final");
        }
        if self.tau == 0 {
            return v("tau", "must be >= 1");
        }
        if !(self.weight_decay >= 0.0) {
            return v("weight_decay", "must be >= 0");
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct InnerOutcome {
    pub adapted: ModelParams,
    /// Loss at the evaluation sample, with its forward cache.
    pub eval_loss: MaeLoss,
}

/// Simulated test-time adaptation on a copy of `theta`: `k_inner` plain
/// steps (or the configured inner optimizer) on the matured supervision
/// samples of `task`, then the loss on its evaluation sample.
pub fn inner_adapt(
    theta: &ModelParams,
    task: &TttTask,
    alpha_in: f64,
    k_inner: usize,
    cfg: &MetaConfig,
    seed: u64,
    salt: u64,
) -> Result<InnerOutcome> {
    if k_inner > task.k_inner() {
        return Err(Error::config(format!("k_inner {k_inner} exceeds the task schedule ({})", task.k_inner())));
    }
    let mut m = theta.clone();
    let ttt = cfg.tokens_in_inner;
    if ttt {
        m.ensure_tokens(&task.scene.agent_ids);
    }
    let seq = task.sequence();
    let mut opt = Optimizer::new(cfg.inner_optimizer, cfg.adamw());
    let lrs = vec![alpha_in; m.num_layers()];
    for j in 0..k_inner {
        let (obs, fut) = task.supervision(&seq, j)?;
        let mut mask = sample_stream(seed, streams::META_MASK, task.scene.id, obs.t, salt);
        let (_, g) = sample_gradient(&m, &obs, &fut, ttt, &mut mask)?;
        opt.step(m.params_mut(), &g, &lrs)?;
    }
    let (obs, fut) = task.evaluation(&seq)?;
    let mut mask = sample_stream(seed, streams::META_MASK, task.scene.id, obs.t, salt);
    let eval_loss = loss_mae(&m, &obs, &fut, ttt, &mut mask)?;
    Ok(InnerOutcome { adapted: m, eval_loss })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OuterStepReport {
    pub used: usize,
    pub failed: usize,
    /// Mean adapted evaluation loss over the tasks that succeeded.
    pub mean_loss: Option<f64>,
    pub skipped: bool,
}

fn is_task_failure(e: &Error) -> bool {
    matches!(e, Error::Numeric(_) | Error::Diverged { .. })
}

/// One first-order meta update: the gradient of each task's adapted
/// evaluation loss, taken at the adapted parameters, is summed over the
/// batch and applied to `theta` with step `beta`.
#[allow(clippy::too_many_arguments)]
pub fn meta_outer_step(
    theta: &mut ModelParams,
    batch: &[TttTask],
    cfg: &MetaConfig,
    beta: f64,
    opt: &mut Optimizer,
    seed: u64,
    salt: u64,
    exec: Execution,
) -> Result<OuterStepReport> {
    let model: &ModelParams = theta;
    let results = par::map(exec, batch, |_, task| {
        let out = inner_adapt(model, task, cfg.alpha_in, cfg.k_inner, cfg, seed, salt)?;
        let g = gradients(&out.adapted, &out.eval_loss)?;
        if !g.is_finite() {
            return Err(Error::numeric("non-finite outer gradient"));
        }
        Ok((out.eval_loss.total(), g))
    });
    let tokens = theta.slots.tokens;
    let mut sum = Gradients::zeros_like(theta.params());
    let mut report = OuterStepReport::default();
    let mut loss = 0.0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((l, mut g)) => {
                // Tokens live only in the adapted copies.
                g.tensors[tokens].clear();
                sum.add_assign(&g);
                loss += l;
                report.used += 1;
            }
            Err(e) if is_task_failure(&e) => {
                log::warn!("meta task {i} (scene {}) failed: {e}", batch[i].scene.id);
                report.failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if report.used == 0 {
        log::warn!("all {} tasks in the meta batch failed; outer step skipped", batch.len());
        report.skipped = true;
        return Ok(report);
    }
    report.mean_loss = Some(loss / report.used as f64);
    let lrs = vec![beta; theta.num_layers()];
    opt.step(theta.params_mut(), &sum, &lrs)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaEpochLog {
    pub epoch: usize,
    /// Epoch 0: mean adapted evaluation loss of the initial parameters over
    /// all tasks. Later epochs: mean over the epoch's batches.
    pub meta_loss: f64,
    pub beta_last: f64,
    pub failed_tasks: usize,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone)]
pub struct MetaOutcome {
    pub model: ModelParams,
    pub log: Vec<MetaEpochLog>,
}

/// Mean adapted evaluation loss of `theta` over `tasks`.
pub fn mean_adapted_loss(theta: &ModelParams, tasks: &[TttTask], cfg: &MetaConfig, seed: u64, exec: Execution) -> Result<f64> {
    let losses = par::map(exec, tasks, |_, t| {
        inner_adapt(theta, t, cfg.alpha_in, cfg.k_inner, cfg, seed, 0).map(|o| o.eval_loss.total())
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / tasks.len().max(1) as f64)
}

/// Algorithm-1 meta pre-training starting from `theta_off`, with the outer
/// step size cosine-decayed from `beta_init` to `beta_final`.
pub fn meta_pretrain(theta_off: ModelParams, tasks: &[TttTask], cfg: &MetaConfig, seed: u64, exec: Execution) -> Result<MetaOutcome> {
    cfg.validate("meta")?;
    if tasks.is_empty() {
        return Err(Error::config("meta pre-training needs a non-empty task set"));
    }
    let mut theta = theta_off;
    let mut log = vec![MetaEpochLog {
        epoch: 0,
        meta_loss: mean_adapted_loss(&theta, tasks, cfg, seed, exec)?,
        beta_last: cfg.beta_init,
        failed_tasks: 0,
        skipped_steps: 0,
    }];
    let per_epoch = tasks.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut opt = Optimizer::new(cfg.outer_optimizer, cfg.adamw());
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        RngStream::new(seed, stream_id(streams::META_ORDER, epoch as u64)).shuffle(&mut order);
        let mut entry = MetaEpochLog {
            epoch,
            meta_loss: 0.0,
            beta_last: cfg.beta_init,
            failed_tasks: 0,
            skipped_steps: 0,
        };
        let mut loss_sum = 0.0;
        let mut counted = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<TttTask> = idx.iter().map(|&i| tasks[i].clone()).collect();
            let beta = cosine_schedule(cfg.beta_init, cfg.beta_final, step, total);
            let r = meta_outer_step(&mut theta, &batch, cfg, beta, &mut opt, seed, epoch as u64, exec)?;
            step += 1;
            entry.beta_last = beta;
            entry.failed_tasks += r.failed;
            entry.skipped_steps += r.skipped as usize;
            if let Some(l) = r.mean_loss {
                loss_sum += l;
                counted += 1;
            }
        }
        entry.meta_loss = if counted > 0 { loss_sum / counted as f64 } else { f64::NAN };
        log::debug!("meta epoch {epoch}: {entry:?}");
        log.push(entry);
    }
    Ok(MetaOutcome { model: theta, log })
}
