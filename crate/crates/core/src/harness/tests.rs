use super::*;
use crate::par::Execution;

fn tiny() -> ExperimentConfig {
    parse_config(
        "seeds = [3, 4]
data.source_scenes = 6
data.val_scenes = 2
data.target_scenes = 3
offline.epochs = 2
meta.epochs = 1
",
    )
    .unwrap()
}

fn bits(r: &ResultRow) -> [u64; 4] {
    [r.made_k.to_bits(), r.mfde_k.to_bits(), r.made_1.to_bits(), r.mr_k.to_bits()]
}

#[test]
fn same_cell_twice_gives_identical_rows() {
    let cfg = tiny();
    let spec = CellSpec::new("metadat", Toggles::ALL, &cfg);
    let a = run_experiment_cell(&cfg, &spec, 3);
    let b = run_experiment_cell(&cfg, &spec, 3);
    assert!(a.ok());
    assert_eq!(
        ResultRow { loop_micros: 0, ..a },
        ResultRow { loop_micros: 0, ..b }
    );
}

#[test]
fn parallel_matrix_matches_sequential_cells() {
    let cfg = tiny();
    let par = run_ablation_matrix(&Pipeline::new(cfg.clone(), Execution::Parallel));
    let seq = run_ablation_matrix(&Pipeline::new(cfg.clone(), Execution::Sequential));
    assert_eq!(par.rows.len(), 7 * 2);
    for (a, b) in par.rows.iter().zip(&seq.rows) {
        assert_eq!(a.cell, b.cell);
        assert_eq!(bits(a), bits(b), "{}", a.cell);
        assert_eq!((a.regular_updates, a.hard_updates), (b.regular_updates, b.hard_updates));
    }
    // Each cell alone reproduces its matrix row.
    let lone = run_experiment_cell(&cfg, &par.specs[5], 4);
    assert_eq!(bits(&lone), bits(&par.rows_for(5)[1]));
}

#[test]
fn zero_gamma_dlo_row_equals_fixed_row() {
    let mut cfg = tiny();
    cfg.ttt.gamma = 0.0;
    let run = run_lr_sweep(&Pipeline::new(cfg, Execution::Sequential), &[1e-3]);
    assert_eq!(run.specs.len(), 3);
    for (f, d) in run.rows_for(0).iter().zip(run.rows_for(1)) {
        assert!(d.dlo && !f.dlo);
        assert_eq!(bits(f), bits(d));
    }
}

#[test]
fn disabled_components_match_plain_fixed_rule() {
    let cfg = tiny();
    let pipe = Pipeline::new(cfg.clone(), Execution::Sequential);
    let fixed = CellSpec::new("fixed", Toggles::NONE, &cfg);
    let mut no_hsd = cfg.clone();
    no_hsd.ttt.gamma = 0.0;
    let dlo_off = CellSpec::new("dlo", Toggles { dlo: true, ..Toggles::NONE }, &no_hsd);
    let p = pipe.prepare(3, false).unwrap();
    assert_eq!(bits(&run_cell(&cfg, &fixed, &p)), bits(&run_cell(&no_hsd, &dlo_off, &p)));
}

#[test]
fn zero_budget_equals_no_adaptation() {
    let cfg = tiny();
    let run = run_fewshot(&Pipeline::new(cfg.clone(), Execution::Sequential), &[0, 5, 1000]);
    let none = run_matrix(&Pipeline::new(cfg.clone(), Execution::Sequential), "none", vec![CellSpec::no_adapt(&cfg)]);
    for (b0, na) in run.rows_for(0).iter().zip(&none.rows) {
        assert_eq!(bits(b0), bits(na));
        assert_eq!(b0.regular_updates, 0);
        assert!(!b0.budget_capped);
    }
    for r in run.rows_for(1) {
        assert!(r.regular_updates <= 5);
    }
    // 3 scenes cannot provide 1000 opportunities.
    assert!(run.rows_for(2).iter().all(|r| r.budget_capped));
}

#[test]
fn half_frequency_halves_updates() {
    let cfg = tiny();
    let run = run_frequency_sweep(&Pipeline::new(cfg, Execution::Sequential), &[1, 2]);
    for (f1, f2) in run.rows_for(0).iter().zip(run.rows_for(1)) {
        let per_scene = f1.regular_updates / 3;
        // Rounding happens per scene because counters restart with each stream.
        assert!(f2.regular_updates.abs_diff(f1.regular_updates / 2) <= 3, "{} vs {}", f1.regular_updates, f2.regular_updates);
        assert_eq!(f2.regular_updates, 3 * per_scene.div_ceil(2));
    }
}

#[test]
fn summary_recomputes_from_rows() {
    let cfg = tiny();
    let run = run_ablation_matrix(&Pipeline::new(cfg, Execution::Sequential));
    for (i, s) in run.summary().iter().enumerate() {
        let rows = run.rows_for(i);
        let mean = rows.iter().map(|r| r.made_k).sum::<f64>() / rows.len() as f64;
        assert!((s.made_k.mean - mean).abs() < 1e-12);
        let var = rows.iter().map(|r| (r.made_k - mean).powi(2)).sum::<f64>() / (rows.len() - 1) as f64;
        assert!((s.made_k.std - var.sqrt()).abs() < 1e-12);
        assert_eq!(s.seeds, 2);
    }
}

#[test]
fn result_files_are_stable() {
    let cfg = tiny();
    let run = run_matrix(&Pipeline::new(cfg.clone(), Execution::Sequential), "t", vec![CellSpec::new("fixed", Toggles::NONE, &cfg)]);
    let dir = tempfile::tempdir().unwrap();
    let f = write_results(&run, &cfg, dir.path()).unwrap();
    let csv = std::fs::read_to_string(&f.results).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "cell,method,mp,dlo,hsd,ttt,seed,alpha_init,frequency,budget,budget_capped,status,count,made_6,mfde_6,made_1,mr_6,regular_updates,hard_updates,failed_events,violations"
    );
    assert_eq!(std::fs::read_to_string(&f.timings).unwrap().lines().next().unwrap(), "cell,timesteps,loop_micros,fps");
    let summary = std::fs::read(&f.summary).unwrap();
    write_results(&run, &cfg, dir.path()).unwrap();
    assert_eq!(csv, std::fs::read_to_string(&f.results).unwrap());
    assert_eq!(summary, std::fs::read(&f.summary).unwrap());
    let json: serde_json::Value = serde_json::from_slice(&summary).unwrap();
    assert_eq!(json["config_hash"], cfg.hash());
    assert_eq!(json["seeds"], serde_json::json!([3, 4]));
    assert!(json["rows"][0].get("fps").is_none());
}

#[test]
fn unwritable_output_names_the_path() {
    let cfg = tiny();
    let run = MatrixRun {
        kind: "x".into(),
        specs: vec![],
        rows: vec![],
    };
    let file = tempfile::NamedTempFile::new().unwrap();
    let err = write_results(&run, &cfg, &file.path().join("sub")).unwrap_err();
    assert!(err.to_string().contains(&file.path().display().to_string()), "{err}");
}

#[test]
fn failed_seed_leaves_other_cells_intact() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(format!("offline-{}-seed4.bin", pretrain_key(&cfg))), b"bad").unwrap();
    let pipe = Pipeline::new(cfg.clone(), Execution::Parallel).with_checkpoints(dir.path());
    let run = run_matrix(&pipe, "t", vec![CellSpec::new("fixed", Toggles::NONE, &cfg)]);
    assert!(run.any_failed());
    assert_eq!(run.rows[1].status, "failed:pretrain");
    let clean = run_experiment_cell(&cfg, &run.specs[0], 3);
    assert_eq!(bits(&run.rows[0]), bits(&clean));
    let s = run.summary();
    assert_eq!((s[0].seeds, s[0].failed), (2, 1));
    assert_eq!(s[0].made_k.mean, clean.made_k);
}

#[test]
fn checkpoints_reload_bitwise() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let spec = CellSpec::new("metadat", Toggles::ALL, &cfg);
    let fresh = Pipeline::new(cfg.clone(), Execution::Sequential).with_checkpoints(dir.path());
    let a = run_cell(&cfg, &spec, &fresh.prepare(3, true).unwrap());
    let reload = Pipeline::new(cfg.clone(), Execution::Sequential).with_checkpoints(dir.path());
    let b = run_cell(&cfg, &spec, &reload.prepare(3, true).unwrap());
    assert_eq!(bits(&a), bits(&b));
}
