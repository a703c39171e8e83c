//! Channel-capacity sweeps over vocabulary size and message length.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::{error, info};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{completed_seed, prepare_run_dir, run_seed, seed_dir, PairSets, SeedSummary, METRICS_FILE};
use super::{csv_bytes, finite_mean, read_csv, write_atomic, write_json, HarnessError};
use crate::game::LossKind;
use crate::metrics::MetricsRecord;

pub const INDEX_FILE: &str = "sweep_index.json";
pub const SUMMARY_FILE: &str = "sweep_summary.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub vocab_sizes: Vec<usize>,
    pub max_lens: Vec<usize>,
}

impl Default for SweepGrid {
    /// The full 7 × 6 grid.
    fn default() -> Self {
        SweepGrid {
            vocab_sizes: vec![3, 5, 10, 20, 40, 50, 100],
            max_lens: vec![2, 3, 5, 10, 50, 100],
        }
    }
}

impl SweepGrid {
    /// `(V, L)` cells, vocabulary-major.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.vocab_sizes
            .iter()
            .flat_map(|&v| self.max_lens.iter().map(move |&l| (v, l)))
            .collect()
    }
}

/// One finished (or failed) run, as registered in the sweep index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub loss: String,
    pub vocab: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Seed directory relative to the sweep directory.
    pub dir: String,
    pub error: Option<String>,
}

/// One heatmap row: mean-over-seeds final validation metrics of a cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub vocab: usize,
    pub max_len: usize,
    pub runs: usize,
    pub failed: usize,
    pub accuracy: f64,
    pub topsim: f64,
    pub rsa_sl: f64,
    pub rsa_si: f64,
    pub rsa_li: f64,
}

/// Mean validation RSA of a cell at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub vocab: usize,
    pub max_len: usize,
    pub epoch: usize,
    pub rsa_sl: f64,
    pub rsa_si: f64,
    pub rsa_li: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCell {
    pub loss: String,
    pub vocab: usize,
    pub max_len: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub cells_per_loss: usize,
    pub seeds: Vec<u64>,
    pub losses: Vec<String>,
    pub best: Vec<BestCell>,
    pub failures: Vec<IndexEntry>,
}

pub fn cell_dir(sweep_dir: &Path, loss: LossKind, vocab: usize, max_len: usize) -> PathBuf {
    sweep_dir.join(loss.name()).join(format!("V{vocab}-L{max_len}"))
}

/// Runs every (loss, cell, seed) combination on a bounded worker pool.
/// A failing run is recorded and the sweep carries on.
pub fn run_sweep(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    losses: &[LossKind],
    workers: usize,
) -> Result<SweepOutcome, HarnessError> {
    if grid.vocab_sizes.is_empty() || grid.max_lens.is_empty() || losses.is_empty() {
        return Err(HarnessError::Config("empty sweep grid".into()));
    }
    let cells = grid.cells();
    let mut configs = Vec::new();
    for &loss in losses {
        for &(vocab, max_len) in &cells {
            let cfg = ExperimentConfig {
                loss,
                vocab,
                max_len,
                ..base.clone()
            };
            cfg.validate()?;
            configs.push(cfg);
        }
    }
    let sweep_dir = base.out_dir.join(if base.run_name.is_empty() {
        "sweep".to_string()
    } else {
        base.run_name.clone()
    });
    let dataset = base.dataset.load()?;
    let pairs = PairSets::build(base, dataset.dim())?;
    for cfg in &configs {
        prepare_run_dir(cfg, &cell_dir(&sweep_dir, cfg.loss, cfg.vocab, cfg.max_len))?;
    }
    write_atomic(&sweep_dir.join("config.toml"), base.to_toml().as_bytes())?;

    let jobs: Vec<(&ExperimentConfig, u64)> = configs
        .iter()
        .flat_map(|c| base.seeds.iter().map(move |&s| (c, s)))
        .collect();
    info!("sweep: {} runs on {} workers", jobs.len(), workers.max(1));
    let index: Mutex<Vec<IndexEntry>> = Mutex::new(Vec::new());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Runtime(format!("worker pool: {e}")))?;
    pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter().for_each(|&(cfg, seed)| {
            let dir = cell_dir(&sweep_dir, cfg.loss, cfg.vocab, cfg.max_len);
            let result = match completed_seed(&dir, seed) {
                Some(_) => Ok(()),
                None => run_seed(cfg, &dataset, &pairs, seed, &dir).map(|_| ()),
            };
            let entry = IndexEntry {
                loss: cfg.loss.name().into(),
                vocab: cfg.vocab,
                max_len: cfg.max_len,
                seed,
                dir: seed_dir(&dir, seed)
                    .strip_prefix(&sweep_dir)
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
                error: result.err().map(|e| e.to_string()),
            };
            if let Some(e) = &entry.error {
                error!("sweep run {} seed {seed} failed: {e}", entry.dir);
            }
            let mut idx = index.lock().unwrap_or_else(|p| p.into_inner());
            idx.push(entry);
            idx.sort_by(|a, b| a.dir.cmp(&b.dir));
            if let Err(e) = write_json(&sweep_dir.join(INDEX_FILE), &*idx) {
                error!("cannot register run in sweep index: {e}");
            }
        });
    });
    let index = index.into_inner().unwrap_or_else(|p| p.into_inner());
    summarize_sweep(&sweep_dir, grid, losses, &base.seeds, &index)
}

fn summarize_sweep(
    sweep_dir: &Path,
    grid: &SweepGrid,
    losses: &[LossKind],
    seeds: &[u64],
    index: &[IndexEntry],
) -> Result<SweepOutcome, HarnessError> {
    let mut best = Vec::new();
    for &loss in losses {
        let mut heat = Vec::new();
        let mut trend = Vec::new();
        for (vocab, max_len) in grid.cells() {
            let dir = cell_dir(sweep_dir, loss, vocab, max_len);
            let done: Vec<SeedSummary> = seeds.iter().filter_map(|&s| completed_seed(&dir, s)).collect();
            let vals: Vec<&MetricsRecord> = done.iter().map(|s| &s.validation).collect();
            heat.push(HeatmapRow {
                vocab,
                max_len,
                runs: done.len(),
                failed: seeds.len() - done.len(),
                accuracy: finite_mean(vals.iter().map(|r| r.accuracy)),
                topsim: finite_mean(vals.iter().map(|r| r.topsim)),
                rsa_sl: finite_mean(vals.iter().map(|r| r.rsa_sl)),
                rsa_si: finite_mean(vals.iter().map(|r| r.rsa_si)),
                rsa_li: finite_mean(vals.iter().map(|r| r.rsa_li)),
            });
            let mut curves: Vec<Vec<MetricsRecord>> = Vec::new();
            for s in &done {
                let rows: Vec<MetricsRecord> = read_csv(&seed_dir(&dir, s.seed).join(METRICS_FILE))?;
                curves.push(rows.into_iter().filter(|r| r.split == "validation").collect());
            }
            let epochs = curves.iter().map(|c| c.len()).min().unwrap_or(0);
            for e in 0..epochs {
                trend.push(TrendRow {
                    vocab,
                    max_len,
                    epoch: curves[0][e].epoch,
                    rsa_sl: finite_mean(curves.iter().map(|c| c[e].rsa_sl)),
                    rsa_si: finite_mean(curves.iter().map(|c| c[e].rsa_si)),
                    rsa_li: finite_mean(curves.iter().map(|c| c[e].rsa_li)),
                });
            }
        }
        if let Some(top) = heat
            .iter()
            .filter(|h| h.accuracy.is_finite())
            .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy))
        {
            best.push(BestCell {
                loss: loss.name().into(),
                vocab: top.vocab,
                max_len: top.max_len,
                accuracy: top.accuracy,
            });
        }
        write_atomic(
            &sweep_dir.join(format!("heatmap_{}.csv", loss.name())),
            &csv_bytes(&heat)?,
        )?;
        write_atomic(
            &sweep_dir.join(format!("rsa_trend_{}.csv", loss.name())),
            &csv_bytes(&trend)?,
        )?;
    }
    let outcome = SweepOutcome {
        dir: sweep_dir.to_path_buf(),
        cells_per_loss: grid.cells().len(),
        seeds: seeds.to_vec(),
        losses: losses.iter().map(|l| l.name().to_string()).collect(),
        best,
        failures: index.iter().filter(|e| e.error.is_some()).cloned().collect(),
    };
    write_json(&sweep_dir.join(SUMMARY_FILE), &outcome)?;
    Ok(outcome)
}
