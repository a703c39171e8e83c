//! Experiment front-end: configuration, single runs, sweeps, ablations,
//! reports and embedding import.

pub mod ablation;
pub mod config;
pub mod import;
pub mod report;
pub mod run;
pub mod svg;
pub mod sweep;

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::datasets::DatasetError;
use crate::game::GameError;
use crate::nn::NnError;

pub use ablation::{run_ablation, AblationReport};
pub use config::{DatasetConfig, ExperimentConfig, Overrides};
pub use import::{import_embeddings, ImportOptions, ImportSummary};
pub use report::{report, ReportOptions};
pub use run::{evaluate_run, run_experiment, RunOutput, SeedSummary};
pub use sweep::{run_sweep, SweepGrid, SweepOutcome};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "REFGAME_OUT";

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad configuration; detected before any work starts.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    /// Process exit code: 1 for configuration errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename,
/// so readers never observe a half-written file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = parent.join(format!(".{name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| HarnessError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| HarnessError::io(&tmp, e))?;
        f.sync_all().map_err(|e| HarnessError::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let s = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// Serializes rows to CSV bytes with a header taken from the row type.
pub(crate) fn csv_bytes<T: serde::Serialize>(rows: &[T]) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| HarnessError::Runtime(format!("csv buffer: {e}")))
}

/// Reads every row of a CSV file.
pub(crate) fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// Mean of the finite values, `NaN` when there are none.
pub(crate) fn finite_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Sample standard deviation of the finite values, `NaN` below two values.
pub(crate) fn finite_std(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}
