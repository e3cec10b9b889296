//! Streaming evaluation: best-of-K displacement metrics with deferred
//! scoring, and an audit of every clocked data access.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::predictor::{forward_predict, Futures, ModelParams, Prediction};
use crate::scenegen::{Access, AccessKind, OnlineSequence};
use crate::ttt::TttEngine;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Modes considered by the best-of-K metrics.
    pub k: usize,
    /// Final displacement (m) above which a prediction counts as a miss.
    pub miss_threshold: f64,
    /// Record accessor calls for the causality audit.
    pub trace: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 6,
            miss_threshold: 2.0,
            trace: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.k == 0 {
            return Err(Error::validation(format!("{prefix}.k"), "must be >= 1"));
        }
        if !(self.miss_threshold > 0.0) {
            return Err(Error::validation(format!("{prefix}.miss_threshold"), "must be > 0"));
        }
        Ok(())
    }
}

/// `(ADE, FDE)` per agent and mode.
pub fn displacement_errors(pred: &Prediction, y: &Futures) -> Result<Vec<Vec<(f64, f64)>>> {
    if pred.num_agents() != y.len() {
        return Err(Error::config(format!("{} predictions for {} ground truths", pred.num_agents(), y.len())));
    }
    pred.trajectories
        .iter()
        .zip(y)
        .map(|(modes, truth)| {
            if truth.is_empty() {
                return Err(Error::config("empty ground-truth horizon"));
            }
            modes
                .iter()
                .map(|m| {
                    if m.len() != truth.len() {
                        return Err(Error::config(format!("horizon {} vs ground truth {}", m.len(), truth.len())));
                    }
                    let d: Vec<f64> = m.iter().zip(truth).map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1])).collect();
                    Ok((d.iter().sum::<f64>() / d.len() as f64, d[d.len() - 1]))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestOfK {
    pub ade_k: f64,
    pub fde_k: f64,
    pub miss: bool,
    /// ADE of mode 0.
    pub ade_1: f64,
    /// Mode with the smallest ADE among the first K (ties to the lowest).
    pub best_mode: usize,
}

/// Minimum ADE and minimum FDE over the first `k` modes, each taken
/// separately; the miss flag tests the minimum FDE.
pub fn best_of_k(per_mode: &[(f64, f64)], k: usize, miss_threshold: f64) -> Result<BestOfK> {
    if k == 0 {
        return Err(Error::config("best-of-K needs K >= 1"));
    }
    if k > per_mode.len() {
        return Err(Error::config(format!("K = {k} exceeds the {} predicted modes", per_mode.len())));
    }
    let mut best_mode = 0;
    let mut fde_k = per_mode[0].1;
    for (m, &(ade, fde)) in per_mode.iter().enumerate().take(k).skip(1) {
        if ade < per_mode[best_mode].0 {
            best_mode = m;
        }
        fde_k = fde_k.min(fde);
    }
    Ok(BestOfK {
        ade_k: per_mode[best_mode].0,
        fde_k,
        miss: fde_k > miss_threshold,
        ade_1: per_mode[0].0,
        best_mode,
    })
}

/// One scored (agent, timestep) prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene: u64,
    pub t: usize,
    pub agent: u64,
    pub ade_k: f64,
    pub fde_k: f64,
    pub miss: bool,
    pub ade_1: f64,
    pub best_mode: usize,
    /// Checksum of the parameters that produced the prediction.
    pub model_checksum: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub made_k: f64,
    pub mfde_k: f64,
    pub mr_k: f64,
    pub made_1: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLedger {
    sum_ade_k: f64,
    sum_fde_k: f64,
    misses: usize,
    sum_ade_1: f64,
    pub records: Vec<PredictionRecord>,
    /// Keep per-record entries (the running sums are always kept).
    pub keep_records: bool,
    count: usize,
}

impl MetricsLedger {
    pub fn new(keep_records: bool) -> Self {
        MetricsLedger {
            keep_records,
            ..MetricsLedger::default()
        }
    }

    pub fn push(&mut self, r: PredictionRecord) {
        self.sum_ade_k += r.ade_k;
        self.sum_fde_k += r.fde_k;
        self.misses += r.miss as usize;
        self.sum_ade_1 += r.ade_1;
        self.count += 1;
        if self.keep_records {
            self.records.push(r);
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn aggregate(&self) -> Metrics {
        if self.count == 0 {
            return Metrics::default();
        }
        let n = self.count as f64;
        Metrics {
            made_k: self.sum_ade_k / n,
            mfde_k: self.sum_fde_k / n,
            mr_k: self.misses as f64 / n,
            made_1: self.sum_ade_1 / n,
            count: self.count,
        }
    }

    /// Aggregates recomputed from the stored records.
    pub fn recompute(&self) -> Metrics {
        let mut l = MetricsLedger::new(false);
        for r in &self.records {
            l.push(r.clone());
        }
        l.aggregate()
    }

    pub fn merge(&mut self, other: MetricsLedger) {
        self.sum_ade_k += other.sum_ade_k;
        self.sum_fde_k += other.sum_fde_k;
        self.misses += other.misses;
        self.sum_ade_1 += other.sum_ade_1;
        self.count += other.count;
        if self.keep_records {
            self.records.extend(other.records);
        }
    }
}

/// Adaptation hook called at every clock before the prediction.
pub trait TttHook {
    fn begin_scene(&mut self, _model: &mut ModelParams, _stream: &OnlineSequence) -> Result<()> {
        Ok(())
    }

    fn at_clock(&mut self, model: &mut ModelParams, stream: &OnlineSequence, t: usize) -> Result<()>;

    /// Whether predictions should use actor tokens.
    fn ttt_mode(&self) -> bool {
        false
    }
}

impl TttHook for TttEngine {
    fn begin_scene(&mut self, model: &mut ModelParams, stream: &OnlineSequence) -> Result<()> {
        TttEngine::begin_scene(self, model, stream.agent_ids());
        Ok(())
    }

    fn at_clock(&mut self, model: &mut ModelParams, stream: &OnlineSequence, t: usize) -> Result<()> {
        self.step(model, stream, t).map(|_| ())
    }

    fn ttt_mode(&self) -> bool {
        self.cfg.tokens
    }
}

/// Per-stream bookkeeping besides the metrics.
#[derive(Debug, Clone, Default)]
pub struct StreamRun {
    pub timesteps: usize,
    /// Wall-clock time of the update/predict loop.
    pub loop_micros: u64,
    pub trace: Option<Vec<Access>>,
}

/// Result of a (possibly aborted) evaluation: the ledger holds every
/// prediction scored before `error`.
#[derive(Debug)]
pub struct EvalOutcome {
    pub ledger: MetricsLedger,
    pub run: StreamRun,
    pub error: Option<Error>,
}

fn score(
    pending: &mut VecDeque<(usize, Prediction, u64)>,
    stream: &OnlineSequence,
    cfg: &EvalConfig,
    ledger: &mut MetricsLedger,
    agent_ids: &[u64],
) -> Result<()> {
    let t_f = stream.t_f();
    while let Some((t, _, _)) = pending.front() {
        if t + t_f > stream.clock() {
            break;
        }
        let (t, pred, checksum) = pending.pop_front().expect("front exists");
        let y = stream.label(t)?;
        for (i, modes) in displacement_errors(&pred, &y)?.iter().enumerate() {
            let b = best_of_k(modes, cfg.k, cfg.miss_threshold)?;
            ledger.push(PredictionRecord {
                scene: stream.scene_id(),
                t,
                agent: agent_ids[i],
                ade_k: b.ade_k,
                fde_k: b.fde_k,
                miss: b.miss,
                ade_1: b.ade_1,
                best_mode: b.best_mode,
                model_checksum: checksum,
            });
        }
    }
    Ok(())
}

/// Online evaluation of one stream: at each clock `t` the hook adapts
/// the model, then `X_t` is predicted; each prediction is scored once its
/// label matures, and the clock runs on `t_f` steps past the end to drain.
pub fn streaming_eval(
    model: &mut ModelParams,
    stream: &OnlineSequence,
    mut hook: Option<&mut dyn TttHook>,
    cfg: &EvalConfig,
    ledger: &mut MetricsLedger,
) -> (StreamRun, Result<()>) {
    if cfg.trace {
        stream.enable_tracing();
    }
    let mut run = StreamRun::default();
    let started = Instant::now();
    let result = (|| -> Result<()> {
        cfg.validate("eval")?;
        let agent_ids = stream.agent_ids().to_vec();
        let ttt_mode = hook.as_ref().is_some_and(|h| h.ttt_mode());
        stream.set_clock(stream.t_h());
        if let Some(h) = hook.as_deref_mut() {
            h.begin_scene(model, stream)?;
        }
        let mut pending = VecDeque::new();
        for t in stream.t_h()..=stream.last_sample() {
            stream.set_clock(t);
            if let Some(h) = hook.as_deref_mut() {
                h.at_clock(model, stream, t)?;
            }
            let obs = stream.observation(t)?;
            let pred = forward_predict(model, &obs, ttt_mode)?;
            pending.push_back((t, pred, model.checksum()));
            run.timesteps += 1;
            score(&mut pending, stream, cfg, ledger, &agent_ids)?;
        }
        let end = stream.last_sample() + stream.t_f();
        for clock in stream.last_sample() + 1..=end {
            stream.set_clock(clock);
            score(&mut pending, stream, cfg, ledger, &agent_ids)?;
        }
        Ok(())
    })();
    run.loop_micros = started.elapsed().as_micros() as u64;
    if cfg.trace {
        run.trace = stream.take_trace();
    }
    (run, result)
}

/// Evaluate a sequence of streams with one model and hook; scenes are
/// processed in order, and the first error stops the run with the ledger
/// so far preserved.
pub fn evaluate_streams(
    model: &mut ModelParams,
    streams: &[OnlineSequence],
    mut hook: Option<&mut dyn TttHook>,
    cfg: &EvalConfig,
    keep_records: bool,
) -> EvalOutcome {
    let mut ledger = MetricsLedger::new(keep_records);
    let mut total = StreamRun {
        trace: cfg.trace.then(Vec::new),
        ..StreamRun::default()
    };
    for s in streams {
        let h: Option<&mut dyn TttHook> = match hook.as_mut() {
            Some(h) => Some(&mut **h),
            None => None,
        };
        let (run, res) = streaming_eval(model, s, h, cfg, &mut ledger);
        total.timesteps += run.timesteps;
        total.loop_micros += run.loop_micros;
        if let (Some(all), Some(tr)) = (total.trace.as_mut(), run.trace) {
            all.extend(tr);
        }
        if let Err(e) = res {
            return EvalOutcome {
                ledger,
                run: total,
                error: Some(e),
            };
        }
    }
    EvalOutcome {
        ledger,
        run: total,
        error: None,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub accesses: usize,
    pub observations: usize,
    pub labels: usize,
    pub violations: Vec<ViolationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub kind: String,
    pub t: usize,
    pub clock: usize,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check a recorded access trace: observations must not run ahead of the
/// clock and labels must have matured. `None` means tracing was off.
pub fn causality_audit(trace: Option<&[Access]>, t_f: usize) -> Result<AuditReport> {
    let trace = trace.ok_or_else(|| Error::Audit("access tracing was not enabled for this run".into()))?;
    let mut rep = AuditReport {
        accesses: trace.len(),
        ..AuditReport::default()
    };
    for a in trace {
        let bad = match a.kind {
            AccessKind::Observation => {
                rep.observations += 1;
                a.t > a.clock
            }
            AccessKind::Label => {
                rep.labels += 1;
                a.clock < a.t + t_f
            }
        };
        if bad || a.violation {
            rep.violations.push(ViolationRecord {
                kind: format!("{:?}", a.kind).to_lowercase(),
                t: a.t,
                clock: a.clock,
            });
        }
    }
    Ok(rep)
}
