//! End-to-end experiment orchestration: ablation modes, grid search with
//! the composite objective, trajectory export, and the theory property
//! suite.

pub mod experiment;
pub mod grid;
pub mod theory;
pub mod trace;

pub use experiment::{
    prepare_models, run_experiment, run_mode, samples_csv, ExperimentOutcome, Mode, SampleRow,
};
pub use grid::{grid_search, rank_cells, CellResult, GridSearchReport, GridSearchSpec};
pub use theory::{theory_suite, CheckResult, TheoryReport};
pub use trace::{export_trajectories, TrajectoryExport};
