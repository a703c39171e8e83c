//! Matched-seed comparison of plain cross-entropy training against training
//! with the alignment penalty.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{run_experiment, seed_dir, METRICS_FILE};
use super::{csv_bytes, finite_mean, read_csv, write_atomic, write_json, HarnessError};
use crate::game::LossKind;
use crate::metrics::MetricsRecord;

/// Both conditions at one epoch of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub ce_ce: f64,
    pub ce_ce_rsa: f64,
    pub accuracy_ce: f64,
    pub accuracy_ce_rsa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDivergence {
    pub seed: u64,
    /// Largest per-epoch `|ce_rsa − ce| / ce` over the train-split curve.
    pub max_relative_ce_divergence: f64,
    /// `mean |ce_rsa − ce| / mean ce` over the train-split curve.
    pub relative_mean_abs_ce_difference: f64,
    /// Whether both conditions scored identically before any update.
    pub epoch0_identical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dir: PathBuf,
    pub seeds: Vec<SeedDivergence>,
    pub max_relative_ce_divergence: f64,
    pub mean_relative_mean_abs_ce_difference: f64,
    /// Relative mean absolute difference between the seed-averaged curves.
    pub averaged_curve_relative_difference: f64,
}

/// Trains every seed under both losses into `<out>/<name>/{ce,ce_rsa}` and
/// compares the curves.
pub fn run_ablation(cfg: &ExperimentConfig, workers: usize) -> Result<AblationReport, HarnessError> {
    let root = cfg.out_dir.join(if cfg.run_name.is_empty() {
        "ablation".to_string()
    } else {
        cfg.run_name.clone()
    });
    let mut dirs = Vec::new();
    for loss in [LossKind::Ce, LossKind::CeRsa] {
        let c = ExperimentConfig {
            loss,
            out_dir: root.clone(),
            run_name: loss.name().into(),
            ..cfg.clone()
        };
        dirs.push(run_experiment(&c, workers)?.dir);
    }
    let mut curves = Vec::new();
    let mut seeds = Vec::new();
    let (mut mean_ce, mut mean_rsa): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let a: Vec<MetricsRecord> = read_csv(&seed_dir(&dirs[0], seed).join(METRICS_FILE))?;
        let b: Vec<MetricsRecord> = read_csv(&seed_dir(&dirs[1], seed).join(METRICS_FILE))?;
        if a.len() != b.len() {
            return Err(HarnessError::Runtime(format!(
                "seed {seed}: curves of different lengths ({} vs {})",
                a.len(),
                b.len()
            )));
        }
        for (x, y) in a.iter().zip(&b) {
            curves.push(CurveRow {
                seed,
                epoch: x.epoch,
                split: x.split.clone(),
                ce_ce: x.ce,
                ce_ce_rsa: y.ce,
                accuracy_ce: x.accuracy,
                accuracy_ce_rsa: y.accuracy,
            });
        }
        let train = |rows: &[MetricsRecord]| -> Vec<f64> {
            rows.iter().filter(|r| r.split == "train").map(|r| r.ce).collect()
        };
        let (ca, cb) = (train(&a), train(&b));
        let same0 = a
            .iter()
            .zip(&b)
            .filter(|(x, _)| x.epoch == 0)
            .all(|(x, y)| {
                x.accuracy == y.accuracy
                    && x.ce == y.ce
                    && x.rsa_sl == y.rsa_sl
                    && x.rsa_si == y.rsa_si
                    && x.rsa_li == y.rsa_li
                    && x.topsim == y.topsim
                    && x.unique_messages == y.unique_messages
            });
        seeds.push(SeedDivergence {
            seed,
            max_relative_ce_divergence: ca
                .iter()
                .zip(&cb)
                .map(|(x, y)| (y - x).abs() / x.abs().max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max),
            relative_mean_abs_ce_difference: relative_mad(&ca, &cb),
            epoch0_identical: same0,
        });
        mean_ce.push(ca);
        mean_rsa.push(cb);
    }
    let average = |curves: &[Vec<f64>]| -> Vec<f64> {
        let n = curves.iter().map(|c| c.len()).min().unwrap_or(0);
        (0..n).map(|e| finite_mean(curves.iter().map(|c| c[e]))).collect()
    };
    let report = AblationReport {
        dir: root.clone(),
        max_relative_ce_divergence: seeds
            .iter()
            .map(|s| s.max_relative_ce_divergence)
            .fold(0.0, f64::max),
        mean_relative_mean_abs_ce_difference: finite_mean(
            seeds.iter().map(|s| s.relative_mean_abs_ce_difference),
        ),
        averaged_curve_relative_difference: relative_mad(&average(&mean_ce), &average(&mean_rsa)),
        seeds,
    };
    write_atomic(&root.join("ablation_curves.csv"), &csv_bytes(&curves)?)?;
    write_json(&root.join("ablation.json"), &report)?;
    Ok(report)
}

/// `mean |b − a| / mean |a|`.
pub fn relative_mad(a: &[f64], b: &[f64]) -> f64 {
    let diff = finite_mean(a.iter().zip(b).map(|(x, y)| (y - x).abs()));
    diff / finite_mean(a.iter().map(|x| x.abs()))
}
