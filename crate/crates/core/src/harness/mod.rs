//! Experiment orchestration: configuration files, the ablation and sweep
//! matrices, and result files.
//!
//! Every random draw in a run is keyed by the seed and the pipeline stage
//! (corpus, initialisation, batch order, masks), never by the cell, so all
//! methods of one seed see the same corpora and the same pretrained
//! weights and differ only in what their configuration changes.

mod cell;
mod config;
mod matrix;
mod results;

pub use cell::{
    generate_data, init_model, pretrain_key, run_cell, run_experiment_cell, Budgeted, CellSpec, Pipeline, Prepared, Pretrained,
    ResultRow, SeedData, StageError,
};
pub use config::{load_config, parse_config, DataConfig, ExperimentConfig, HorizonPreset, SweepConfig, Toggles};
pub use matrix::{
    ablation_specs, fewshot_specs, freq_sweep_specs, lr_sweep_specs, run_ablation_matrix, run_fewshot, run_frequency_sweep,
    run_lr_sweep, run_matrix, summarize, MatrixRun, MeanStd, SummaryRow,
};
pub use results::{version, write_corpora, write_pretraining, write_results, ResultFiles, StageRow, RESULT_COLUMNS, TIMING_COLUMNS};

#[cfg(test)]
mod tests;
