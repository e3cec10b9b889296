use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Toggles};
use crate::eval::{evaluate_streams, AuditReport, causality_audit, EvalConfig, TttHook};
use crate::numcore::{stream_id, streams, RngStream};
use crate::par::Execution;
use crate::predictor::ModelParams;
use crate::pretrain::{meta_pretrain, offline_pretrain, EpochLog, MetaEpochLog};
use crate::scenegen::{generate_corpus, make_ttt_task_set, DomainFamily, OnlineSequence, Scene, SceneShape, TttTask};
use crate::ttt::{is_opportunity, TttConfig, TttEngine};
use crate::{Error, Result};

/// Corpora for one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub source: Vec<Arc<Scene>>,
    pub val: Vec<Arc<Scene>>,
    pub target: Vec<Arc<Scene>>,
    pub tasks: Vec<TttTask>,
}

fn corpus(cfg: &ExperimentConfig, family: &DomainFamily, count: usize, length: usize, seed: u64, ns: u32, exec: Execution) -> Result<Vec<Arc<Scene>>> {
    let shape = SceneShape {
        agents: cfg.data.agents,
        length,
        horizons: cfg.horizons.horizons(),
        min_length: 0,
    };
    Ok(generate_corpus(family, &shape, count, seed, ns, exec)?.into_iter().map(Arc::new).collect())
}

pub fn generate_data(cfg: &ExperimentConfig, seed: u64, exec: Execution) -> Result<SeedData> {
    let d = &cfg.data;
    let source = corpus(cfg, &cfg.source, d.source_scenes, d.source_length, seed, streams::SOURCE_CORPUS, exec)?;
    let val = corpus(cfg, &cfg.source, d.val_scenes, d.source_length, seed, streams::VALIDATION_CORPUS, exec)?;
    let target = corpus(cfg, &cfg.target, d.target_scenes, d.target_length, seed, streams::TARGET_CORPUS, exec)?;
    let mut rng = RngStream::new(seed, stream_id(streams::TASK_SET, 0));
    let tasks = make_ttt_task_set(&source, cfg.meta.k_inner, cfg.meta.tau, &mut rng)?.tasks;
    Ok(SeedData {
        seed,
        source,
        val,
        target,
        tasks,
    })
}

/// Pre-trained initialisations for one seed.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub offline: ModelParams,
    pub offline_log: Vec<EpochLog>,
    pub meta: Option<ModelParams>,
    pub meta_log: Vec<MetaEpochLog>,
}

pub fn init_model(cfg: &ExperimentConfig, seed: u64) -> Result<ModelParams> {
    let h = cfg.horizons.horizons();
    ModelParams::init(&cfg.model, h.t_h, h.t_f, &mut RngStream::new(seed, stream_id(streams::MODEL_INIT, 0)))
}

/// Config fields that pretraining depends on, hashed into checkpoint names.
pub fn pretrain_key(cfg: &ExperimentConfig) -> String {
    let mut c = ExperimentConfig::default();
    c.source = cfg.source.clone();
    c.target = cfg.target.clone();
    c.horizons = cfg.horizons;
    c.data = cfg.data.clone();
    c.model = cfg.model.clone();
    c.offline = cfg.offline.clone();
    c.meta = cfg.meta.clone();
    c.hash()[..16].to_string()
}

/// Prepared seeds, shared across cells and optionally mirrored to
/// checkpoint files so later runs skip pretraining.
#[derive(Debug)]
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub exec: Execution,
    pub checkpoint_dir: Option<PathBuf>,
    seeds: Mutex<BTreeMap<u64, Arc<Prepared>>>,
}

#[derive(Debug)]
pub struct Prepared {
    pub data: SeedData,
    pub models: Pretrained,
}

/// A failure tagged with the pipeline stage that produced it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.stage, self.error)
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|error| StageError { stage: name, error })
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, exec: Execution) -> Self {
        Pipeline {
            cfg,
            exec,
            checkpoint_dir: None,
            seeds: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    fn ckpt_path(&self, seed: u64, what: &str) -> Option<PathBuf> {
        let dir = self.checkpoint_dir.as_ref()?;
        Some(dir.join(format!("{what}-{}-seed{seed}.bin", pretrain_key(&self.cfg))))
    }

    fn load_or_train(
        &self,
        seed: u64,
        what: &str,
        train: impl FnOnce() -> Result<ModelParams>,
    ) -> Result<(ModelParams, bool)> {
        let h = self.cfg.horizons.horizons();
        if let Some(p) = self.ckpt_path(seed, what) {
            if p.exists() {
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                return Ok((ModelParams::from_bytes(&bytes, &self.cfg.model, h.t_h, h.t_f)?, true));
            }
        }
        let m = train()?;
        if let Some(p) = self.ckpt_path(seed, what) {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::write(&p, m.to_bytes()).map_err(|e| Error::io(&p, e))?;
        }
        Ok((m, false))
    }

    /// Data and pretrained models for `seed`, computed once.
    pub fn prepare(&self, seed: u64, need_meta: bool) -> std::result::Result<Arc<Prepared>, StageError> {
        let cached = self.seeds.lock().expect("cache lock").get(&seed).cloned();
        if let Some(p) = &cached {
            if p.models.meta.is_some() || !need_meta {
                return Ok(p.clone());
            }
        }
        let cfg = &self.cfg;
        let (data, offline, offline_log) = match cached {
            Some(p) => (p.data.clone(), p.models.offline.clone(), p.models.offline_log.clone()),
            None => {
                let data = stage("gen", generate_data(cfg, seed, self.exec))?;
                let mut log = Vec::new();
                let (offline, _) = stage(
                    "pretrain",
                    self.load_or_train(seed, "offline", || {
                        let out = offline_pretrain(init_model(cfg, seed)?, &data.source, &data.val, &cfg.offline, seed, self.exec)?;
                        log = out.log;
                        Ok(out.model)
                    }),
                )?;
                (data, offline, log)
            }
        };
        let mut meta_log = Vec::new();
        let meta = if need_meta {
            let (m, _) = stage(
                "meta",
                self.load_or_train(seed, "meta", || {
                    let out = meta_pretrain(offline.clone(), &data.tasks, &cfg.meta, seed, self.exec)?;
                    meta_log = out.log;
                    Ok(out.model)
                }),
            )?;
            Some(m)
        } else {
            None
        };
        let p = Arc::new(Prepared {
            data,
            models: Pretrained {
                offline,
                offline_log,
                meta,
                meta_log,
            },
        });
        self.seeds.lock().expect("cache lock").insert(seed, p.clone());
        Ok(p)
    }
}

/// One configuration of the online phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub method: String,
    pub toggles: Toggles,
    /// Run test-time training at all; `false` is the no-adaptation row.
    pub ttt: bool,
    pub alpha_init: f64,
    pub frequency: usize,
    /// Cap on supervision opportunities used for updates.
    pub budget: Option<usize>,
    /// Record accessor calls and audit them.
    pub audit: bool,
}

impl CellSpec {
    pub fn new(method: &str, toggles: Toggles, cfg: &ExperimentConfig) -> Self {
        CellSpec {
            method: method.into(),
            toggles,
            ttt: true,
            alpha_init: cfg.ttt.alpha_init,
            frequency: cfg.ttt.update_frequency,
            budget: None,
            audit: false,
        }
    }

    pub fn no_adapt(cfg: &ExperimentConfig) -> Self {
        CellSpec {
            ttt: false,
            ..CellSpec::new("no-adapt", Toggles::NONE, cfg)
        }
    }

    pub fn id(&self, seed: u64) -> String {
        let mut id = format!("{}/{}/a{}/f{}", self.method, self.toggles.code(), self.alpha_init, self.frequency);
        if let Some(b) = self.budget {
            id.push_str(&format!("/b{b}"));
        }
        id.push_str(&format!("/s{seed}"));
        id
    }

    /// The engine configuration this cell runs with.
    pub fn ttt_config(&self, base: &TttConfig) -> TttConfig {
        TttConfig {
            alpha_init: self.alpha_init,
            update_frequency: self.frequency,
            gamma: if self.toggles.dlo { base.gamma } else { 0.0 },
            hsd: self.toggles.hsd,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub cell: String,
    pub method: String,
    pub mp: bool,
    pub dlo: bool,
    pub hsd: bool,
    pub ttt: bool,
    pub seed: u64,
    pub alpha_init: f64,
    pub frequency: usize,
    pub budget: Option<usize>,
    /// The budget exceeded the available opportunities.
    pub budget_capped: bool,
    /// `ok` or `failed:<stage>`.
    pub status: String,
    pub count: usize,
    pub made_k: f64,
    pub mfde_k: f64,
    pub made_1: f64,
    pub mr_k: f64,
    pub regular_updates: usize,
    pub hard_updates: usize,
    pub failed_events: usize,
    pub violations: usize,
    pub timesteps: usize,
    pub loop_micros: u64,
}

impl ResultRow {
    fn empty(spec: &CellSpec, seed: u64) -> Self {
        ResultRow {
            cell: spec.id(seed),
            method: spec.method.clone(),
            mp: spec.toggles.mp,
            dlo: spec.toggles.dlo,
            hsd: spec.toggles.hsd,
            ttt: spec.ttt,
            seed,
            alpha_init: spec.alpha_init,
            frequency: spec.frequency,
            budget: spec.budget,
            budget_capped: false,
            status: "ok".into(),
            count: 0,
            made_k: 0.0,
            mfde_k: 0.0,
            made_1: 0.0,
            mr_k: 0.0,
            regular_updates: 0,
            hard_updates: 0,
            failed_events: 0,
            violations: 0,
            timesteps: 0,
            loop_micros: 0,
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    /// Evaluation timesteps per wall-clock second.
    pub fn fps(&self) -> f64 {
        self.timesteps as f64 / (self.loop_micros.max(1) as f64 * 1e-6)
    }

    pub fn failed(spec: &CellSpec, seed: u64, err: &StageError) -> Self {
        log::error!("cell {} failed in {err}", spec.id(seed));
        ResultRow {
            status: format!("failed:{}", err.stage),
            ..ResultRow::empty(spec, seed)
        }
    }
}

/// Caps the number of supervision opportunities an engine may use.
pub struct Budgeted {
    pub engine: TttEngine,
    pub remaining: Option<usize>,
    pub opportunities: usize,
}

impl TttHook for Budgeted {
    fn begin_scene(&mut self, model: &mut ModelParams, stream: &OnlineSequence) -> Result<()> {
        if self.remaining == Some(0) {
            model.reset_tokens();
            return Ok(());
        }
        self.engine.begin_scene(model, stream.agent_ids());
        Ok(())
    }

    fn at_clock(&mut self, model: &mut ModelParams, stream: &OnlineSequence, t: usize) -> Result<()> {
        if is_opportunity(t, stream.t_h(), self.engine.cfg.tau) {
            self.opportunities += 1;
            if let Some(r) = self.remaining.as_mut() {
                if *r == 0 {
                    return Ok(());
                }
                *r -= 1;
            }
        }
        self.engine.step(model, stream, t).map(|_| ())
    }

    fn ttt_mode(&self) -> bool {
        self.engine.cfg.tokens && self.remaining != Some(0)
    }
}

/// Online phase of one cell on prepared data.
pub fn run_cell(cfg: &ExperimentConfig, spec: &CellSpec, prep: &Prepared) -> ResultRow {
    let seed = prep.data.seed;
    let mut row = ResultRow::empty(spec, seed);
    let mut model = if spec.toggles.mp {
        match &prep.models.meta {
            Some(m) => m.clone(),
            None => {
                let e = StageError {
                    stage: "meta",
                    error: Error::usage("meta-pretrained model missing"),
                };
                return ResultRow::failed(spec, seed, &e);
            }
        }
    } else {
        prep.models.offline.clone()
    };
    let eval_cfg = EvalConfig {
        trace: spec.audit || cfg.eval.trace,
        ..cfg.eval.clone()
    };
    let streams: Vec<OnlineSequence> = prep.data.target.iter().map(|s| OnlineSequence::new(s.clone())).collect();
    let mut hook = if spec.ttt {
        match TttEngine::new(spec.ttt_config(&cfg.ttt), &model, seed) {
            Ok(mut engine) => {
                engine.keep_logs = false;
                Some(Budgeted {
                    engine,
                    remaining: spec.budget,
                    opportunities: 0,
                })
            }
            Err(error) => return ResultRow::failed(spec, seed, &StageError { stage: "ttt", error }),
        }
    } else {
        None
    };
    let out = evaluate_streams(&mut model, &streams, hook.as_mut().map(|h| h as &mut dyn TttHook), &eval_cfg, false);
    let m = out.ledger.aggregate();
    row.count = m.count;
    row.made_k = m.made_k;
    row.mfde_k = m.mfde_k;
    row.made_1 = m.made_1;
    row.mr_k = m.mr_k;
    row.timesteps = out.run.timesteps;
    row.loop_micros = out.run.loop_micros;
    if let Some(h) = &hook {
        row.regular_updates = h.engine.state.regular_updates;
        row.hard_updates = h.engine.state.hard_updates;
        row.failed_events = h.engine.state.failed_events;
        row.budget_capped = spec.budget.is_some_and(|b| b > h.opportunities);
    }
    if eval_cfg.trace {
        match causality_audit(out.run.trace.as_deref(), prep.data.target.first().map_or(0, |s| s.t_f)) {
            Ok(AuditReport { violations, .. }) => row.violations = violations.len(),
            Err(error) => return ResultRow::failed(spec, seed, &StageError { stage: "audit", error }),
        }
    }
    if let Some(e) = out.error {
        log::error!("cell {} stopped early: {e}", row.cell);
        row.status = if e.is_validation() { "failed:config".into() } else { "failed:eval".into() };
    }
    row
}

/// Full pipeline for one cell, pretraining included.
pub fn run_experiment_cell(cfg: &ExperimentConfig, spec: &CellSpec, seed: u64) -> ResultRow {
    let pipe = Pipeline::new(cfg.clone(), Execution::Sequential);
    match pipe.prepare(seed, spec.toggles.mp) {
        Ok(p) => run_cell(cfg, spec, &p),
        Err(e) => ResultRow::failed(spec, seed, &e),
    }
}
