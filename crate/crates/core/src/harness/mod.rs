//! Experiment orchestration: configuration, the end-to-end pipeline, grid
//! searches and latent-size sweeps.

mod config;
mod grid;
mod pipeline;
mod table;

pub use config::{
    AeGrid, AssimSection, CaeSection, ExperimentConfig, GridSection, LstmGrid, LstmSection,
    ObservationConfig, RSampleSet, SensorConfig, SplitConfig, SweepSection,
};
pub use grid::{
    best_cell, run_ae_grid, run_grid, run_lstm_grid, write_folds_csv, write_grid_csv, CellOutcome,
    GridCell, GridResult,
};
pub use pipeline::{
    assimilate_all, encode_all, lstm_samples, prepare_data, run_full_pipeline, run_latent_sweep,
    train_models, write_history, write_runs_csv, write_split, write_triptychs, AssimilationSummary,
    PipelineReport, PreparedData, StageTimer, SweepResult, TrainedModels,
};
pub use table::ResultTable;
