use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::cell::{Prepared, ResultRow, SeedData, StageError};
use super::config::ExperimentConfig;
use super::matrix::{MatrixRun, SummaryRow};
use crate::predictor::ModelParams;
use crate::{Error, Result};

/// Column order of the per-cell results table.
pub const RESULT_COLUMNS: [&str; 21] = [
    "cell",
    "method",
    "mp",
    "dlo",
    "hsd",
    "ttt",
    "seed",
    "alpha_init",
    "frequency",
    "budget",
    "budget_capped",
    "status",
    "count",
    "made_6",
    "mfde_6",
    "made_1",
    "mr_6",
    "regular_updates",
    "hard_updates",
    "failed_events",
    "violations",
];

pub const TIMING_COLUMNS: [&str; 4] = ["cell", "timesteps", "loop_micros", "fps"];

pub fn version() -> String {
    format!("metadat-v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    experiment: &'a str,
    version: String,
    config_hash: String,
    seeds: &'a [u64],
    cells: usize,
    failed_cells: usize,
    rows: &'a [SummaryRow],
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn result_record(r: &ResultRow) -> Vec<String> {
    vec![
        r.cell.clone(),
        r.method.clone(),
        r.mp.to_string(),
        r.dlo.to_string(),
        r.hsd.to_string(),
        r.ttt.to_string(),
        r.seed.to_string(),
        r.alpha_init.to_string(),
        r.frequency.to_string(),
        opt(r.budget),
        r.budget_capped.to_string(),
        r.status.clone(),
        r.count.to_string(),
        r.made_k.to_string(),
        r.mfde_k.to_string(),
        r.made_1.to_string(),
        r.mr_k.to_string(),
        r.regular_updates.to_string(),
        r.hard_updates.to_string(),
        r.failed_events.to_string(),
        r.violations.to_string(),
    ]
}

fn write_csv(path: &Path, header: &[&str], records: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::persistence(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in records {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Files written for one experiment.
#[derive(Debug, Clone)]
pub struct ResultFiles {
    pub results: PathBuf,
    pub summary: PathBuf,
    pub timings: PathBuf,
}

/// Write `<kind>_results.csv`, `<kind>_summary.json` and
/// `<kind>_timings.csv` under `dir`. The first two depend only on the
/// rows and the config; wall-clock numbers go to the timings file.
pub fn write_results(run: &MatrixRun, cfg: &ExperimentConfig, dir: &Path) -> Result<ResultFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ResultFiles {
        results: dir.join(format!("{}_results.csv", run.kind)),
        summary: dir.join(format!("{}_summary.json", run.kind)),
        timings: dir.join(format!("{}_timings.csv", run.kind)),
    };
    write_csv(&files.results, &RESULT_COLUMNS, run.rows.iter().map(result_record))?;
    write_csv(
        &files.timings,
        &TIMING_COLUMNS,
        run.rows.iter().map(|r| vec![r.cell.clone(), r.timesteps.to_string(), r.loop_micros.to_string(), format!("{:.1}", r.fps())]),
    )?;
    let rows = run.summary();
    let summary = Summary {
        experiment: &run.kind,
        version: version(),
        config_hash: cfg.hash(),
        seeds: &cfg.seeds,
        cells: run.rows.len(),
        failed_cells: run.rows.iter().filter(|r| !r.ok()).count(),
        rows: &rows,
    };
    write_json(&files.summary, &summary)?;
    Ok(files)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::persistence(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRow {
    pub seed: u64,
    /// `ok` or `failed:<stage>`.
    pub status: String,
    pub epochs: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    /// sha256 of the checkpoint bytes.
    pub checksum: Option<String>,
}

impl StageRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Serialize)]
struct StageSummary<'a, R> {
    experiment: &'a str,
    version: String,
    config_hash: String,
    seeds: &'a [u64],
    rows: &'a [R],
}

/// Write `gen_corpus.csv` (one line per agent position) and
/// `gen_summary.json`.
pub fn write_corpora(data: &[SeedData], cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("gen_corpus.csv");
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for d in data {
        for (split, scenes) in [("source", &d.source), ("val", &d.val), ("target", &d.target)] {
            let mut points = 0usize;
            for s in scenes.iter() {
                for (a, track) in s.tracks.iter().enumerate() {
                    for (t, p) in track.iter().enumerate() {
                        points += 1;
                        records.push(vec![
                            d.seed.to_string(),
                            split.to_string(),
                            s.id.to_string(),
                            s.agent_ids[a].to_string(),
                            t.to_string(),
                            p[0].to_string(),
                            p[1].to_string(),
                        ]);
                    }
                }
            }
            rows.push(CorpusRow {
                seed: d.seed,
                split,
                scenes: scenes.len(),
                points,
                tasks: if split == "source" { d.tasks.len() } else { 0 },
            });
        }
    }
    write_csv(&csv_path, &["seed", "split", "scene", "agent", "t", "x", "y"], records.into_iter())?;
    let summary_path = dir.join("gen_summary.json");
    write_json(
        &summary_path,
        &StageSummary {
            experiment: "gen",
            version: version(),
            config_hash: cfg.hash(),
            seeds: &cfg.seeds,
            rows: &rows,
        },
    )?;
    Ok(vec![csv_path, summary_path])
}

#[derive(Debug, Serialize)]
struct CorpusRow {
    seed: u64,
    split: &'static str,
    scenes: usize,
    points: usize,
    tasks: usize,
}

/// Write `<kind>_log.csv`, `<kind>_summary.json` and one
/// `<kind>_seed<s>.bin` checkpoint per successful seed. `kind` is
/// `pretrain` (offline weights) or `meta`.
pub fn write_pretraining(
    kind: &str,
    preps: &[(u64, std::result::Result<Arc<Prepared>, StageError>)],
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<Vec<StageRow>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = kind == "meta";
    let mut log = Vec::new();
    let mut rows = Vec::new();
    for (seed, p) in preps {
        let p = match p {
            Ok(p) => p,
            Err(e) => {
                rows.push(StageRow {
                    seed: *seed,
                    status: format!("failed:{}", e.stage),
                    epochs: 0,
                    first_loss: None,
                    last_loss: None,
                    checksum: None,
                });
                continue;
            }
        };
        let m = &p.models;
        let (model, losses): (&ModelParams, Vec<f64>) = if meta {
            let Some(model) = m.meta.as_ref() else {
                return Err(Error::usage("meta results requested for a seed prepared without meta pre-training"));
            };
            for l in &m.meta_log {
                log.push(vec![
                    seed.to_string(),
                    l.epoch.to_string(),
                    l.meta_loss.to_string(),
                    l.beta_last.to_string(),
                    l.failed_tasks.to_string(),
                    l.skipped_steps.to_string(),
                ]);
            }
            (model, m.meta_log.iter().map(|l| l.meta_loss).collect())
        } else {
            for l in &m.offline_log {
                log.push(vec![seed.to_string(), l.epoch.to_string(), opt(l.train_loss), opt(l.val_loss)]);
            }
            (&m.offline, m.offline_log.iter().filter_map(|l| l.val_loss).collect())
        };
        let bytes = model.to_bytes();
        let ckpt = dir.join(format!("{kind}_seed{seed}.bin"));
        std::fs::write(&ckpt, &bytes).map_err(|e| Error::io(&ckpt, e))?;
        rows.push(StageRow {
            seed: *seed,
            status: "ok".into(),
            epochs: losses.len().saturating_sub(1),
            first_loss: losses.first().copied(),
            last_loss: losses.last().copied(),
            checksum: Some(hex::encode(Sha256::digest(&bytes))),
        });
    }
    let header: &[&str] = if meta {
        &["seed", "epoch", "meta_loss", "beta_last", "failed_tasks", "skipped_steps"]
    } else {
        &["seed", "epoch", "train_loss", "val_loss"]
    };
    write_csv(&dir.join(format!("{kind}_log.csv")), header, log.into_iter())?;
    write_json(
        &dir.join(format!("{kind}_summary.json")),
        &StageSummary {
            experiment: kind,
            version: version(),
            config_hash: cfg.hash(),
            seeds: &cfg.seeds,
            rows: &rows,
        },
    )?;
    Ok(rows)
}
