//! Experiment orchestration: configuration, metrics, grids and file outputs.

pub mod config;
pub mod eval;
pub mod grid;
pub mod pipeline;
pub mod report;

use std::path::Path;

use crate::error::{Error, Result};

pub use config::ExperimentConfig;
pub use eval::{evaluate, metrics, EvalReport, HorizonMetrics};
pub use grid::{run_grid, Ablation, Cell, CellOutcome, CellStatus, GridRun};
pub use pipeline::{load_dataset, pretrain, pretrained, run_scheme, PretrainSpec, SchemeRun, DATA_ROOT_ENV};
pub use report::{dump_features, efficiency_report, emit_forecast_plots, write_attention_csv, write_val_curve, ForecastSeries};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Run directory for a configuration: `root/<config hash>`.
pub fn run_dir(root: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    root.join(cfg.hash())
}
