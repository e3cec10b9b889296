use serde::{Deserialize, Serialize};

use super::cell::{run_cell, CellSpec, Pipeline, ResultRow};
use super::config::{ExperimentConfig, Toggles};
use crate::par;

/// Seed-averaged statistics of one method row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub mp: bool,
    pub dlo: bool,
    pub hsd: bool,
    pub ttt: bool,
    pub alpha_init: f64,
    pub frequency: usize,
    pub budget: Option<usize>,
    pub seeds: usize,
    pub failed: usize,
    pub made_k: MeanStd,
    pub mfde_k: MeanStd,
    pub made_1: MeanStd,
    pub mr_k: MeanStd,
    pub regular_updates: f64,
    pub hard_updates: f64,
    /// Host dependent, so kept out of the serialised summary.
    #[serde(skip)]
    pub fps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> MeanStd {
        if xs.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

/// All cells of one experiment, in spec-major, seed-minor order.
#[derive(Debug, Clone)]
pub struct MatrixRun {
    pub kind: String,
    pub specs: Vec<CellSpec>,
    pub rows: Vec<ResultRow>,
}

impl MatrixRun {
    /// Rows of the `i`-th spec, one per seed.
    pub fn rows_for(&self, i: usize) -> &[ResultRow] {
        let n = self.rows.len() / self.specs.len().max(1);
        &self.rows[i * n..(i + 1) * n]
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        self.specs.iter().enumerate().map(|(i, s)| summarize(s, self.rows_for(i))).collect()
    }

    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| !r.ok())
    }
}

pub fn summarize(spec: &CellSpec, rows: &[ResultRow]) -> SummaryRow {
    let ok: Vec<&ResultRow> = rows.iter().filter(|r| r.ok()).collect();
    let col = |f: fn(&ResultRow) -> f64| -> Vec<f64> { ok.iter().map(|r| f(r)).collect() };
    let mean = |xs: Vec<f64>| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    SummaryRow {
        method: spec.method.clone(),
        mp: spec.toggles.mp,
        dlo: spec.toggles.dlo,
        hsd: spec.toggles.hsd,
        ttt: spec.ttt,
        alpha_init: spec.alpha_init,
        frequency: spec.frequency,
        budget: spec.budget,
        seeds: rows.len(),
        failed: rows.len() - ok.len(),
        made_k: MeanStd::of(&col(|r| r.made_k)),
        mfde_k: MeanStd::of(&col(|r| r.mfde_k)),
        made_1: MeanStd::of(&col(|r| r.made_1)),
        mr_k: MeanStd::of(&col(|r| r.mr_k)),
        regular_updates: mean(col(|r| r.regular_updates as f64)),
        hard_updates: mean(col(|r| r.hard_updates as f64)),
        fps: mean(col(|r| r.fps())),
    }
}

/// Run every spec for every configured seed. Seeds are prepared first,
/// then all cells run in the worker pool; rows come back in a fixed order.
pub fn run_matrix(pipe: &Pipeline, kind: &str, specs: Vec<CellSpec>) -> MatrixRun {
    let cfg = &pipe.cfg;
    let need_meta = specs.iter().any(|s| s.toggles.mp);
    let prepared = par::map(pipe.exec, &cfg.seeds, |_, &seed| pipe.prepare(seed, need_meta));
    let cells: Vec<(usize, usize)> = (0..specs.len()).flat_map(|s| (0..cfg.seeds.len()).map(move |k| (s, k))).collect();
    let rows = par::map(pipe.exec, &cells, |_, &(s, k)| match &prepared[k] {
        Ok(p) => run_cell(cfg, &specs[s], p),
        Err(e) => ResultRow::failed(&specs[s], cfg.seeds[k], e),
    });
    MatrixRun {
        kind: kind.into(),
        specs,
        rows,
    }
}

/// No adaptation, then the toggle rows of the component ablation.
pub fn ablation_specs(cfg: &ExperimentConfig) -> Vec<CellSpec> {
    let rows = [
        ("fixed-ttt", false, false, false),
        ("mp", true, false, false),
        ("dlo", false, true, false),
        ("hsd", false, false, true),
        ("mp+dlo", true, true, false),
        ("metadat", true, true, true),
    ];
    let mut specs = vec![CellSpec::no_adapt(cfg)];
    specs.extend(rows.iter().map(|&(name, mp, dlo, hsd)| CellSpec::new(name, Toggles { mp, dlo, hsd }, cfg)));
    specs
}

/// Fixed rule, fixed rule with hypergradient rates, and the full method,
/// for each initial learning rate.
pub fn lr_sweep_specs(cfg: &ExperimentConfig, alphas: &[f64]) -> Vec<CellSpec> {
    let methods = [
        ("fixed-ttt", Toggles::NONE),
        (
            "fixed-ttt+dlo",
            Toggles {
                dlo: true,
                ..Toggles::NONE
            },
        ),
        ("metadat", Toggles::ALL),
    ];
    let mut specs = Vec::new();
    for &a in alphas {
        for (name, t) in methods {
            specs.push(CellSpec {
                alpha_init: a,
                ..CellSpec::new(name, t, cfg)
            });
        }
    }
    specs
}

pub fn freq_sweep_specs(cfg: &ExperimentConfig, freqs: &[usize]) -> Vec<CellSpec> {
    let mut specs = Vec::new();
    for (name, t) in [("fixed-ttt", Toggles::NONE), ("metadat", Toggles::ALL)] {
        for &f in freqs {
            specs.push(CellSpec {
                frequency: f,
                ..CellSpec::new(name, t, cfg)
            });
        }
    }
    specs
}

/// Budget 0 is the no-adaptation reference.
pub fn fewshot_specs(cfg: &ExperimentConfig, budgets: &[usize]) -> Vec<CellSpec> {
    let mut specs = Vec::new();
    for (name, t) in [("fixed-ttt", Toggles::NONE), ("metadat", Toggles::ALL)] {
        for &b in budgets {
            specs.push(CellSpec {
                budget: Some(b),
                ..CellSpec::new(name, t, cfg)
            });
        }
    }
    specs
}

pub fn run_ablation_matrix(pipe: &Pipeline) -> MatrixRun {
    run_matrix(pipe, "ablate", ablation_specs(&pipe.cfg))
}

pub fn run_lr_sweep(pipe: &Pipeline, alphas: &[f64]) -> MatrixRun {
    run_matrix(pipe, "lr-sweep", lr_sweep_specs(&pipe.cfg, alphas))
}

pub fn run_frequency_sweep(pipe: &Pipeline, freqs: &[usize]) -> MatrixRun {
    run_matrix(pipe, "freq-sweep", freq_sweep_specs(&pipe.cfg, freqs))
}

pub fn run_fewshot(pipe: &Pipeline, budgets: &[usize]) -> MatrixRun {
    run_matrix(pipe, "fewshot", fewshot_specs(&pipe.cfg, budgets))
}
