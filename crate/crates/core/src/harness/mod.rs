//! Experiment orchestration behind the `vipamin` command line: every command
//! reads an [`ExperimentConfig`] and writes its artifacts into
//! `<out_dir>/<run_id>/`.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod plot;

use std::path::{Path, PathBuf};

use serde::Serialize;

pub use commands::{
    cmd_compare, cmd_diagnose, cmd_init, cmd_pretrain, cmd_sweep, cmd_train, run_comparison,
    run_sweep, CompareReport,
    CompareRow, Metric, RunFile,
};
pub use config::{ExperimentConfig, Initializer};

use crate::error::{Error, Result};

/// Creates a fresh run directory; an existing one is refused so that runs
/// are never silently overwritten.
pub fn prepare_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    if dir.exists() {
        return Err(Error::Config(format!(
            "run id {:?} already exists in {}",
            cfg.run_id,
            cfg.out_dir.display()
        )));
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
