//! Sequential against rayon execution for the two data-parallel hot spots:
//! corpus generation and a cell matrix over prepared seeds.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use metadat::harness::{ablation_specs, generate_data, parse_config, run_matrix, ExperimentConfig, Pipeline};
use metadat::par::Execution;

fn config() -> ExperimentConfig {
    parse_config(
        "seeds = [0, 1]
data.source_scenes = 16
data.val_scenes = 4
data.target_scenes = 4
offline.epochs = 2
meta.epochs = 1
",
    )
    .expect("bench config")
}

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn corpus(c: &mut Criterion) {
    let cfg = config();
    let mut g = c.benchmark_group("generate_data");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| b.iter(|| generate_data(&cfg, 0, exec).unwrap()));
    }
    g.finish();
}

fn matrix(c: &mut Criterion) {
    let cfg = config();
    let mut g = c.benchmark_group("ablation_cells");
    g.sample_size(10);
    for (name, exec) in MODES {
        let pipe = Pipeline::new(cfg.clone(), exec);
        for &s in &cfg.seeds {
            pipe.prepare(s, true).expect("prepare");
        }
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_matrix(&pipe, "bench", ablation_specs(&cfg))));
    }
    g.finish();
}

criterion_group!(benches, corpus, matrix);
criterion_main!(benches);
