use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::state::{hypergrad_update_alpha, is_hard_sample, update_running_stats, TttState};
use super::{HardError, TttConfig};
use crate::numcore::{sample_stream, streams};
use crate::predictor::{gradients, loss_mae, Futures, ModelParams, Observation};
use crate::scenegen::OnlineSequence;
use crate::{Error, Result};

pub const STEP_LOG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    /// No matured supervision at this clock.
    None,
    /// An opportunity passed over by the update frequency.
    Skipped,
    Regular,
    /// The step failed numerically and was rolled back.
    Failed,
}

/// A matured supervision pair available at clock `t`.
#[derive(Debug, Clone)]
pub struct SupervisionEvent {
    pub t: usize,
    /// Index of the supervised sample, `t - tau`.
    pub sample: usize,
    pub obs: Observation,
    pub fut: Futures,
    /// Whether this opportunity carries a regular update.
    pub regular: bool,
}

/// Whether clock `t` is a supervision opportunity.
pub fn is_opportunity(t: usize, t_h: usize, tau: usize) -> bool {
    tau > 0 && t % tau == 0 && t >= tau + t_h
}

/// The sample that matures at clock `t`, if `t` is an opportunity.
/// `regular` is set on every `f`-th opportunity.
pub fn schedule_supervision(stream: &OnlineSequence, t: usize, cfg: &TttConfig) -> Result<Option<SupervisionEvent>> {
    let tau = cfg.tau;
    if !is_opportunity(t, stream.t_h(), tau) {
        return Ok(None);
    }
    let sample = t - tau;
    // Y_{t - tau} spans [t - tau, t - tau + t_f); with tau < t_f it has not
    // matured yet and the accessor refuses it.
    let obs = stream.observation(sample)?;
    let fut = stream.label(sample)?;
    Ok(Some(SupervisionEvent {
        t,
        sample,
        obs,
        fut,
        regular: (t / tau) % cfg.update_frequency == 0,
    }))
}

/// One record per timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub schema: u32,
    pub scene: u64,
    pub t: usize,
    pub event: EventKind,
    pub loss_reg: Option<f64>,
    pub loss_recon: Option<f64>,
    pub loss_total: Option<f64>,
    /// Supervision error used by the hardness test.
    pub e: Option<f64>,
    /// Running statistics before `e` is folded in.
    pub m: Option<f64>,
    pub sigma: Option<f64>,
    pub hard: bool,
    /// Per-layer learning rates after this timestep.
    pub alpha: Vec<f64>,
    pub hypergrad: Option<Vec<Option<f64>>>,
    pub clamped: Vec<usize>,
    /// Learning rates just before and after the hard extra step.
    pub alpha_before_hard: Option<Vec<f64>>,
    pub alpha_after_hard: Option<Vec<f64>>,
    /// Wall-clock time of the step; kept out of serialised logs so they
    /// stay reproducible.
    #[serde(skip)]
    pub micros: u64,
}

impl StepLog {
    fn idle(scene: u64, t: usize, alpha: &[f64]) -> Self {
        StepLog {
            schema: STEP_LOG_SCHEMA,
            scene,
            t,
            event: EventKind::None,
            loss_reg: None,
            loss_recon: None,
            loss_total: None,
            e: None,
            m: None,
            sigma: None,
            hard: false,
            alpha: alpha.to_vec(),
            hypergrad: None,
            clamped: Vec::new(),
            alpha_before_hard: None,
            alpha_after_hard: None,
            micros: 0,
        }
    }
}

/// Test-time training state for one target stream (possibly spanning many
/// scenes).
#[derive(Debug, Clone)]
pub struct TttEngine {
    pub cfg: TttConfig,
    pub state: TttState,
    seed: u64,
    pub logs: Vec<StepLog>,
    pub keep_logs: bool,
}

impl TttEngine {
    pub fn new(cfg: TttConfig, model: &ModelParams, seed: u64) -> Result<Self> {
        cfg.validate("ttt")?;
        Ok(TttEngine {
            state: TttState::new(&cfg, model),
            cfg,
            seed,
            logs: Vec::new(),
            keep_logs: true,
        })
    }

    /// Scene boundary: optimizer moments and actor tokens are reset; the
    /// weights, learning rates, non-token gradient history and error
    /// statistics carry over.
    pub fn begin_scene(&mut self, model: &mut ModelParams, agent_ids: &[u64]) {
        self.state.optimizer.reset();
        let tl = model.token_layer();
        if !model.config().tokens_persist {
            model.reset_tokens();
            self.state.grad_history[tl].clear();
            if let Some(last) = self.state.last_grad.as_mut() {
                last[tl].clear();
            }
        }
        if self.cfg.tokens {
            model.ensure_tokens(agent_ids);
        }
    }

    fn mask(&self, scene: u64, sample: usize) -> crate::numcore::RngStream {
        sample_stream(self.seed, streams::TTT_MASK, scene, sample, 0)
    }

    /// Run the engine at clock `t` (the stream clock must already be `t`).
    pub fn step(&mut self, model: &mut ModelParams, stream: &OnlineSequence, t: usize) -> Result<StepLog> {
        if stream.clock() != t {
            return Err(Error::usage(format!("engine stepped at t={t} but the stream clock is {}", stream.clock())));
        }
        let started = Instant::now();
        let scene = stream.scene_id();
        let mut log = StepLog::idle(scene, t, &self.state.alpha);
        if let Some(ev) = schedule_supervision(stream, t, &self.cfg)? {
            let mut m2 = model.clone();
            let mut s2 = self.state.clone();
            match self.event(&mut m2, &mut s2, &ev, scene, &mut log) {
                Ok(()) => {
                    *model = m2;
                    self.state = s2;
                }
                Err(e @ (Error::Numeric(_) | Error::Diverged { .. })) => {
                    log::warn!("TTT event at t={t} in scene {scene} failed and was rolled back: {e}");
                    log = StepLog::idle(scene, t, &self.state.alpha);
                    log.event = EventKind::Failed;
                    self.state.failed_events += 1;
                }
                Err(e) => return Err(e),
            }
        }
        log.alpha.clone_from(&self.state.alpha);
        log.micros = started.elapsed().as_micros() as u64;
        if self.keep_logs {
            self.logs.push(log.clone());
        }
        Ok(log)
    }

    fn event(
        &self,
        model: &mut ModelParams,
        state: &mut TttState,
        ev: &SupervisionEvent,
        scene: u64,
        log: &mut StepLog,
    ) -> Result<()> {
        let cfg = &self.cfg;
        let loss = loss_mae(model, &ev.obs, &ev.fut, cfg.tokens, &mut self.mask(scene, ev.sample))?;
        let b = &loss.breakdown;
        log.loss_reg = Some(b.reg);
        log.loss_recon = Some(b.recon);
        log.loss_total = Some(b.total);
        let e = match cfg.hard_error {
            HardError::Reg => b.reg,
            HardError::Total => b.total,
        };
        log.event = EventKind::Skipped;
        if ev.regular {
            let g = gradients(model, &loss)?;
            state.optimizer.step(model.params_mut(), &g, &state.alpha)?;
            state.p += 1;
            state.regular_updates += 1;
            let upd = hypergrad_update_alpha(state, g.per_layer(model.params().registry()), cfg);
            log.hypergrad = Some(upd.hypergrad);
            log.clamped = upd.clamped;
            log.event = EventKind::Regular;
        }
        if cfg.hsd {
            log.e = Some(e);
            if state.stats.count >= cfg.stat_warmup.max(1) {
                log.m = Some(state.stats.mean);
                log.sigma = Some(state.stats.std());
            }
            let hard = is_hard_sample(&state.stats, e, cfg.k, cfg.stat_warmup);
            update_running_stats(&mut state.stats, e, cfg.stat_decay, cfg.stat_warmup);
            if hard {
                // Gradient at the current parameters; the pre-update forward
                // is reused when no regular step moved them.
                let g = if ev.regular {
                    let l2 = loss_mae(model, &ev.obs, &ev.fut, cfg.tokens, &mut self.mask(scene, ev.sample))?;
                    gradients(model, &l2)?
                } else {
                    gradients(model, &loss)?
                };
                log.alpha_before_hard = Some(state.alpha.clone());
                state.optimizer.step(model.params_mut(), &g, &state.alpha)?;
                state.hard_updates += 1;
                log.alpha_after_hard = Some(state.alpha.clone());
                log.hard = true;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::numcore::RngStream;
    use crate::optim::{Optimizer, OptimizerKind};
    use crate::predictor::ModelConfig;
    use crate::scenegen::{generate_scene, sample_domain_params, DomainFamily, Horizons, SceneShape};

    fn stream(length: usize, seed: u64) -> OnlineSequence {
        let mut rng = RngStream::new(seed, 0);
        let d = sample_domain_params(&DomainFamily::target(), &mut rng).unwrap();
        let shape = SceneShape {
            agents: 3,
            length,
            horizons: Horizons::LONG_TERM,
            min_length: 0,
        };
        OnlineSequence::new(Arc::new(generate_scene(&d, &shape, seed, &mut rng).unwrap()))
    }

    fn model() -> ModelParams {
        let cfg = ModelConfig {
            emb_dim: 8,
            hidden_dim: 12,
            k_modes: 3,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, 4, 12, &mut RngStream::new(2, 0)).unwrap()
    }

    fn run(cfg: &TttConfig, s: &OnlineSequence, m: &mut ModelParams) -> TttEngine {
        let mut eng = TttEngine::new(cfg.clone(), m, 5).unwrap();
        eng.begin_scene(m, &s.scene().agent_ids);
        for t in s.t_h()..=s.last_sample() {
            s.set_clock(t);
            eng.step(m, s, t).unwrap();
        }
        eng
    }

    fn events(f: usize, len: usize) -> Vec<usize> {
        let s = stream(len, 1);
        let cfg = TttConfig {
            update_frequency: f,
            ..TttConfig::default()
        };
        (0..=len)
            .filter(|&t| {
                s.set_clock(t);
                schedule_supervision(&s, t, &cfg).unwrap().is_some_and(|e| e.regular)
            })
            .collect()
    }

    #[test]
    fn schedule_enumeration() {
        assert_eq!(events(1, 120), vec![24, 36, 48, 60, 72, 84, 96, 108, 120]);
        assert_eq!(events(2, 60), vec![24, 48]);
        assert!(events(1, 120).iter().all(|&t| t >= 12));
        let s = stream(40, 1);
        s.set_clock(6);
        assert!(schedule_supervision(&s, 6, &TttConfig::default()).unwrap().is_none());
    }

    #[test]
    fn regular_update_count_matches_schedule() {
        let s = stream(120, 3);
        let mut m = model();
        let eng = run(&TttConfig::default(), &s, &mut m);
        assert_eq!(eng.state.regular_updates, 9);
        assert_eq!(eng.logs.len(), 117);
        assert!(eng.logs.iter().all(|l| l.alpha.iter().all(|&a| (1e-6..=1.0).contains(&a))));
    }

    #[test]
    fn fixed_rule_matches_reference_loop() {
        let s = stream(120, 4);
        let cfg = TttConfig {
            gamma: 0.0,
            k: f64::INFINITY,
            ..TttConfig::default()
        };
        let mut a = model();
        run(&cfg, &s, &mut a);

        let mut b = model();
        b.ensure_tokens(&s.scene().agent_ids);
        let mut opt = Optimizer::new(OptimizerKind::Adamw, crate::optim::AdamWConfig::default());
        let lrs = vec![cfg.alpha_init; b.num_layers()];
        for t in (24..=120).step_by(12) {
            let (obs, fut) = s.scene().sample(t - 12).unwrap();
            let mut mask = sample_stream(5, streams::TTT_MASK, s.scene().id, t - 12, 0);
            let loss = loss_mae(&b, &obs, &fut, true, &mut mask).unwrap();
            let g = gradients(&b, &loss).unwrap();
            opt.step(b.params_mut(), &g, &lrs).unwrap();
        }
        assert_eq!(a, b);

        let mut c = model();
        run(&cfg.fixed_rule(), &s, &mut c);
        assert_eq!(a, c);
    }

    #[test]
    fn hard_steps_leave_alpha_and_history_alone() {
        let s = stream(400, 6);
        let cfg = TttConfig {
            k: 0.5,
            gamma: 1e-3,
            ..TttConfig::default()
        };
        let mut m = model();
        let eng = run(&cfg, &s, &mut m);
        assert!(eng.state.hard_updates > 0);
        for l in eng.logs.iter().filter(|l| l.hard) {
            assert_eq!(l.alpha_before_hard, l.alpha_after_hard);
            assert_eq!(l.alpha_after_hard.as_ref(), Some(&l.alpha));
        }
        assert!(eng.state.grad_history.iter().all(|h| h.len() <= cfg.tau_alpha));
        assert!(eng.state.grad_history[0].len() == eng.state.regular_updates.min(cfg.tau_alpha));
    }

    #[test]
    fn frequency_two_halves_updates_but_hsd_checks_every_opportunity() {
        let s = stream(240, 7);
        let mut m = model();
        let cfg = TttConfig {
            update_frequency: 2,
            ..TttConfig::default()
        };
        let eng = run(&cfg, &s, &mut m);
        let opportunities = eng.logs.iter().filter(|l| l.e.is_some()).count();
        assert_eq!(opportunities, 19);
        assert_eq!(eng.state.regular_updates, 10);
    }

    #[test]
    fn immature_supervision_is_refused() {
        let s = stream(60, 8);
        let cfg = TttConfig {
            tau: 6,
            ..TttConfig::default()
        };
        s.set_clock(24);
        assert!(matches!(schedule_supervision(&s, 24, &cfg), Err(Error::Maturation { .. })));
    }

    #[test]
    fn failed_event_rolls_back() {
        let s = stream(60, 9);
        let mut m = model();
        let mut eng = TttEngine::new(TttConfig::default(), &m, 0).unwrap();
        eng.begin_scene(&mut m, &s.scene().agent_ids);
        m.params_mut().tensor_mut(0).values_mut()[0] = f64::INFINITY;
        let before = m.clone();
        s.set_clock(24);
        let log = eng.step(&mut m, &s, 24).unwrap();
        assert_eq!(log.event, EventKind::Failed);
        assert_eq!(eng.state.regular_updates, 0);
        assert_eq!(m.params().tensor(1), before.params().tensor(1));
    }

    #[test]
    fn scene_boundary_resets_tokens_and_moments() {
        let s = stream(60, 10);
        let mut m = model();
        let eng = run(&TttConfig::default(), &s, &mut m);
        assert!(!m.tokens_all_zero());
        let mut eng = eng;
        let s2 = stream(60, 11);
        eng.begin_scene(&mut m, &s2.scene().agent_ids);
        assert!(m.tokens_all_zero());
        assert_eq!(m.token_ids(), s2.scene().agent_ids.as_slice());
        assert_eq!(eng.state.optimizer.moments.steps, 0);
        assert!(eng.state.grad_history[m.token_layer()].is_empty());
        assert!(!eng.state.grad_history[0].is_empty());
    }
}
