use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::sample_gradient;
use crate::numcore::{sample_stream, stream_id, streams, Gradients, RngStream};
use crate::optim::{AdamWConfig, Optimizer, OptimizerKind};
use crate::par::{self, Execution};
use crate::predictor::{evaluate_mae, ModelParams};
use crate::scenegen::Scene;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Use every `sample_stride`-th timestep of each scene.
    pub sample_stride: usize,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            epochs: 12,
            batch_size: 16,
            lr: 2e-3,
            weight_decay: 1e-3,
            sample_stride: 2,
        }
    }
}

impl OfflineConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("{prefix}.lr"), "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::validation(format!("{prefix}.weight_decay"), "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation(format!("{prefix}.batch_size"), "must be >= 1"));
        }
        if self.sample_stride == 0 {
            return Err(Error::validation(format!("{prefix}.sample_stride"), "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch; absent for epoch 0.
    pub train_loss: Option<f64>,
    /// Validation loss after the epoch (epoch 0 = initialisation).
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OfflineOutcome {
    pub model: ModelParams,
    pub log: Vec<EpochLog>,
}

/// All `(scene index, t)` pairs with a full past and a full future.
pub fn offline_samples(scenes: &[Arc<Scene>], stride: usize) -> Vec<(usize, usize)> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (s.t_h..=s.t_s).step_by(stride.max(1)).map(move |t| (i, t)))
        .collect()
}

/// Mean joint loss over `scenes` with fixed masks, tokens off.
pub fn dataset_loss(model: &ModelParams, scenes: &[Arc<Scene>], stride: usize, seed: u64, exec: Execution) -> Result<f64> {
    let samples = offline_samples(scenes, stride);
    if samples.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    let losses = par::map(exec, &samples, |_, &(si, t)| {
        let s = &scenes[si];
        let (obs, fut) = s.sample(t)?;
        let mut mask = sample_stream(seed, streams::EVAL_MASK, s.id, t, 0);
        Ok(evaluate_mae(model, &obs, &fut, false, &mut mask)?.total)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

/// Minimise the joint loss over source samples with AdamW minibatches.
pub fn offline_pretrain(
    mut model: ModelParams,
    train: &[Arc<Scene>],
    val: &[Arc<Scene>],
    cfg: &OfflineConfig,
    seed: u64,
    exec: Execution,
) -> Result<OfflineOutcome> {
    cfg.validate("offline")?;
    let samples = offline_samples(train, cfg.sample_stride);
    if samples.is_empty() {
        return Err(Error::config("source corpus is empty"));
    }
    let val_loss = |m: &ModelParams| -> Result<Option<f64>> {
        if val.is_empty() {
            Ok(None)
        } else {
            dataset_loss(m, val, cfg.sample_stride, seed, exec).map(Some)
        }
    };
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: None,
        val_loss: val_loss(&model)?,
    }];
    let mut opt = Optimizer::new(
        OptimizerKind::Adamw,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let lrs = vec![cfg.lr; model.num_layers()];
    for epoch in 1..=cfg.epochs {
        let mut order = samples.clone();
        RngStream::new(seed, stream_id(streams::OFFLINE_ORDER, epoch as u64)).shuffle(&mut order);
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let results = par::map(exec, batch, |_, &(si, t)| {
                let s = &train[si];
                let (obs, fut) = s.sample(t)?;
                let mut mask = sample_stream(seed, streams::OFFLINE_MASK, s.id, t, epoch as u64);
                sample_gradient(&model, &obs, &fut, false, &mut mask)
            });
            let mut g = Gradients::zeros_like(model.params());
            let mut loss = 0.0;
            for r in results {
                let (l, gi) = r.map_err(|e| diverged_or(e, epoch, &model))?;
                loss += l.total;
                g.add_assign(&gi);
            }
            loss /= batch.len() as f64;
            if !loss.is_finite() || !g.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss,
                    last_good: model.to_bytes(),
                });
            }
            g.scale(1.0 / batch.len() as f64);
            let before = model.to_bytes();
            opt.step(model.params_mut(), &g, &lrs)?;
            if !model.params().is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss,
                    last_good: before,
                });
            }
            sum += loss;
            batches += 1;
        }
        let entry = EpochLog {
            epoch,
            train_loss: Some(sum / batches as f64),
            val_loss: val_loss(&model)?,
        };
        log::debug!("offline epoch {epoch}: {entry:?}");
        log.push(entry);
    }
    Ok(OfflineOutcome { model, log })
}

fn diverged_or(e: Error, epoch: usize, model: &ModelParams) -> Error {
    match e {
        Error::Numeric(_) => Error::Diverged {
            epoch,
            loss: f64::NAN,
            last_good: model.to_bytes(),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::ModelConfig;
    use crate::scenegen::{generate_corpus, DomainFamily, Horizons, SceneShape};

    fn corpus(count: usize, ns: u32) -> Vec<Arc<Scene>> {
        let shape = SceneShape {
            agents: 3,
            length: 40,
            horizons: Horizons::LONG_TERM,
            min_length: 0,
        };
        generate_corpus(&DomainFamily::source(), &shape, count, 5, ns, Execution::Sequential)
            .unwrap()
            .into_iter()
            .map(Arc::new)
            .collect()
    }

    fn model() -> ModelParams {
        let cfg = ModelConfig {
            emb_dim: 8,
            hidden_dim: 16,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, 4, 12, &mut RngStream::new(1, 0)).unwrap()
    }

    #[test]
    fn zero_epochs_is_identity() {
        let cfg = OfflineConfig {
            epochs: 0,
            ..OfflineConfig::default()
        };
        let m = model();
        let out = offline_pretrain(m.clone(), &corpus(2, 1), &[], &cfg, 0, Execution::Sequential).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn empty_corpus_rejected() {
        let r = offline_pretrain(model(), &[], &[], &OfflineConfig::default(), 0, Execution::Sequential);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn bad_config_names_field() {
        let cfg = OfflineConfig {
            lr: 0.0,
            ..OfflineConfig::default()
        };
        match cfg.validate("offline") {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "offline.lr"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn training_reduces_validation_loss_deterministically() {
        let cfg = OfflineConfig {
            epochs: 4,
            ..OfflineConfig::default()
        };
        let (train, val) = (corpus(8, 1), corpus(2, 3));
        let a = offline_pretrain(model(), &train, &val, &cfg, 9, Execution::Parallel).unwrap();
        let first = a.log[0].val_loss.unwrap();
        let last = a.log.last().unwrap().val_loss.unwrap();
        assert!(last < 0.8 * first, "{first} -> {last}");
        assert!(a.model.tokens_all_zero() && a.model.token_ids().is_empty());
        let b = offline_pretrain(model(), &train, &val, &cfg, 9, Execution::Sequential).unwrap();
        assert_eq!(a.model.checksum(), b.model.checksum());
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn divergence_reports_last_good_checkpoint() {
        let cfg = OfflineConfig {
            epochs: 1,
            ..OfflineConfig::default()
        };
        let mut m = model();
        let w = m.params_mut().tensor_mut(0).values_mut();
        w[0] = f64::NAN;
        let r = offline_pretrain(m, &corpus(2, 1), &[], &cfg, 0, Execution::Sequential);
        assert!(matches!(r, Err(Error::Diverged { epoch: 1, .. })), "{r:?}");
    }
}
