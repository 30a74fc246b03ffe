//! Benchmark harness: a declarative run matrix executed into per-row
//! results and aggregate reports.

mod config;
mod report;
mod run;

use std::path::Path;

use crate::tensor_io::BundleError;

pub use config::{
    Architecture, AsoComparison, Checkpoint, DatasetSource, NoiseAxis, NoiseSetting, RunMatrixConfig, TrainingAxis,
};
pub use report::{
    aso_table, best_case_table, cell_summaries, correlation_table, emit_reports, label_source_violations, rows_csv,
    AsoRow, BestCase, BestCaseKey, CellSummary, Correlation, EvalReport, FORMAT_VERSION, MIN_CORRELATION_ROWS,
    OUTPUT_FILES, ROWS_COLUMNS,
};
pub use run::{features_for, planned_rows, run_matrix, CellKey, CellRecord, Failure, Row, RunOptions, RunStats};

/// The built-in desk-scale matrix.
pub const DESK_CONFIG: &str = include_str!("../../configs/desk.toml");

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("run error: {0}")]
    Run(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

impl HarnessError {
    /// Configuration problems are the caller's to fix; everything else is
    /// an execution failure.
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

pub fn desk_config() -> RunMatrixConfig {
    RunMatrixConfig::from_toml(DESK_CONFIG).expect("built-in config is valid")
}

/// Runs the matrix and writes every report file to `opts.out_dir`.
pub fn benchmark(cfg: &RunMatrixConfig, opts: &RunOptions) -> Result<(EvalReport, RunStats), HarnessError> {
    let (records, stats) = run_matrix(cfg, opts)?;
    let planned = planned_for(cfg)?;
    let report = EvalReport::new(cfg.clone(), planned, records);
    emit_reports(&report, &opts.out_dir)?;
    Ok((report, stats))
}

/// Planned (cell, OOD set) pairs, reading only dataset layouts.
pub fn planned_for(cfg: &RunMatrixConfig) -> Result<usize, HarnessError> {
    let layouts = cfg
        .datasets
        .iter()
        .map(|d| match d {
            DatasetSource::Synthetic { hypercube, .. } => Ok((false, hypercube.ood_sets.len())),
            DatasetSource::Bundles { path, .. } => {
                let n = std::fs::read_dir(path.join("ood"))
                    .map(|it| it.filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).count())
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
                Ok((true, n))
            }
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(planned_rows(cfg, &layouts))
}

/// Rebuilds the report from completion markers of a previous run.
pub fn report_from_markers(cfg: &RunMatrixConfig, out_dir: &Path) -> Result<EvalReport, HarnessError> {
    let opts = RunOptions { out_dir: out_dir.to_path_buf(), workers: 1, resume: true };
    let (records, stats) = run_matrix(cfg, &opts)?;
    if stats.cells_computed > 0 || stats.models_trained > 0 {
        log::warn!("{} cells were missing from the cache and were recomputed", stats.cells_computed);
    }
    Ok(EvalReport::new(cfg.clone(), planned_for(cfg)?, records))
}
