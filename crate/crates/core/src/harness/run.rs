//! Single experiments: one training run per seed, each written to a private
//! directory that only appears once complete.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::{csv_bytes, read_json, write_atomic, write_json, HarnessError};
use crate::agents::AgentPair;
use crate::datasets::{noise_pairs, winoground_analog, EmbeddingDataset, FixedPairSet, Split};
use crate::game::{evaluate_pairs, evaluate_split, Evaluation, Trainer};
use crate::metrics::MetricsRecord;
use crate::nn::Checkpoint;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "agents.rgck";

/// Final results of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub loss: String,
    pub vocab: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub train: MetricsRecord,
    pub validation: MetricsRecord,
    pub noise: Option<MetricsRecord>,
    pub winoground: Option<MetricsRecord>,
}

/// Where an experiment wrote its results.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summaries: Vec<SeedSummary>,
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed-{seed}"))
}

/// The fixed out-of-distribution evaluation sets of a configuration.
pub struct PairSets {
    pub noise: Option<FixedPairSet>,
    pub winoground: Option<FixedPairSet>,
}

impl PairSets {
    pub fn build(cfg: &ExperimentConfig, dim: usize) -> Result<Self, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.pairs_seed);
        rng.set_stream(0);
        let noise = (cfg.noise_pairs > 0).then(|| noise_pairs(cfg.noise_pairs, dim, &mut rng));
        let winoground = match (cfg.dataset.synthetic(), cfg.winoground_pairs) {
            (Some(spec), n) if n > 0 => {
                rng.set_stream(1);
                Some(winoground_analog(spec, n, &mut rng)?)
            }
            _ => None,
        };
        Ok(PairSets { noise, winoground })
    }
}

fn eval_rng(cfg: &ExperimentConfig, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed);
    rng.set_stream(match split {
        Split::Train => 2,
        Split::Validation => 3,
    });
    rng
}

/// Greedy evaluation of both splits with the configuration's fixed
/// evaluation distractors, so every epoch is scored on the same rounds.
fn evaluate_splits(
    agents: &mut AgentPair,
    dataset: &EmbeddingDataset,
    cfg: &ExperimentConfig,
) -> Result<(Evaluation, Evaluation), HarnessError> {
    let tc = cfg.train_config();
    let train = evaluate_split(agents, dataset, Split::Train, &tc, &mut eval_rng(cfg, Split::Train))?;
    let val = evaluate_split(
        agents,
        dataset,
        Split::Validation,
        &tc,
        &mut eval_rng(cfg, Split::Validation),
    )?;
    Ok((train, val))
}

/// Evaluates trained agents on the validation split and the fixed pairs.
pub fn final_evaluation(
    agents: &mut AgentPair,
    dataset: &EmbeddingDataset,
    pairs: &PairSets,
    cfg: &ExperimentConfig,
    epoch: usize,
) -> Result<(MetricsRecord, MetricsRecord, Option<MetricsRecord>, Option<MetricsRecord>), HarnessError> {
    let tc = cfg.train_config();
    let (train, val) = evaluate_splits(agents, dataset, cfg)?;
    let eval_pairs = |agents: &mut AgentPair, set: &Option<FixedPairSet>, name: &str| {
        set.as_ref()
            .map(|s| {
                evaluate_pairs(agents, s, &tc, cfg.pairs_one_direction).map(|e| e.record(epoch, name))
            })
            .transpose()
    };
    let noise = eval_pairs(agents, &pairs.noise, "noise")?;
    let wino = eval_pairs(agents, &pairs.winoground, "winoground")?;
    Ok((train.record(epoch, "train"), val.record(epoch, "validation"), noise, wino))
}

/// Trains one seed from scratch and writes its directory.
///
/// Rows are written for epoch 0 (before any update) and after every epoch,
/// each for the train and validation splits.
pub fn run_seed(
    cfg: &ExperimentConfig,
    dataset: &EmbeddingDataset,
    pairs: &PairSets,
    seed: u64,
    run_dir: &Path,
) -> Result<SeedSummary, HarnessError> {
    let final_dir = seed_dir(run_dir, seed);
    let partial = run_dir.join(format!(".seed-{seed}.partial"));
    if partial.exists() {
        std::fs::remove_dir_all(&partial).map_err(|e| HarnessError::io(&partial, e))?;
    }
    std::fs::create_dir_all(&partial).map_err(|e| HarnessError::io(&partial, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents = AgentPair::new(cfg.agent_spec(dataset.dim()), &mut rng)?;
    let mut trainer = Trainer::new(agents, cfg.train_config());
    let mut rows = Vec::with_capacity(2 * (cfg.epochs + 1));

    let (train, val) = evaluate_splits(&mut trainer.agents, dataset, cfg)?;
    rows.push(train.record(0, "train"));
    rows.push(val.record(0, "validation"));
    for epoch in 1..=cfg.epochs {
        let stats = trainer.train_epoch(dataset, epoch, &mut rng)?;
        let (train, val) = evaluate_splits(&mut trainer.agents, dataset, cfg)?;
        info!(
            "seed {seed} epoch {epoch}: loss {:.4} train acc {:.3} val acc {:.3} rsa_sl {:.3}",
            stats.mean_loss.total, train.accuracy, val.accuracy, val.rsa_sl
        );
        rows.push(train.record(epoch, "train"));
        rows.push(val.record(epoch, "validation"));
    }

    let (train, validation, noise, winoground) =
        final_evaluation(&mut trainer.agents, dataset, pairs, cfg, cfg.epochs)?;
    let summary = SeedSummary {
        seed,
        loss: cfg.loss.name().into(),
        vocab: cfg.vocab,
        max_len: cfg.max_len,
        epochs: cfg.epochs,
        train,
        validation,
        noise,
        winoground,
    };
    write_atomic(&partial.join(METRICS_FILE), &csv_bytes(&rows)?)?;
    trainer
        .agents
        .to_checkpoint()
        .save(&partial.join(CHECKPOINT_FILE))?;
    write_json(&partial.join(SUMMARY_FILE), &summary)?;
    if final_dir.exists() {
        std::fs::remove_dir_all(&final_dir).map_err(|e| HarnessError::io(&final_dir, e))?;
    }
    std::fs::rename(&partial, &final_dir).map_err(|e| HarnessError::io(&final_dir, e))?;
    Ok(summary)
}

/// A completed seed directory's summary, if there is one.
pub fn completed_seed(run_dir: &Path, seed: u64) -> Option<SeedSummary> {
    let path = seed_dir(run_dir, seed).join(SUMMARY_FILE);
    if !path.exists() {
        return None;
    }
    match read_json(&path) {
        Ok(s) => Some(s),
        Err(e) => {
            warn!("ignoring unreadable {}: {e}", path.display());
            None
        }
    }
}

/// Writes the resolved configuration into `run_dir`, refusing to mix runs of
/// a different configuration into an existing directory.
pub fn prepare_run_dir(cfg: &ExperimentConfig, run_dir: &Path) -> Result<(), HarnessError> {
    let path = run_dir.join(CONFIG_FILE);
    if path.exists() {
        let old = ExperimentConfig::from_file(&path, &ExperimentConfig::default())?;
        if old.run_key() != cfg.run_key() {
            return Err(HarnessError::Config(format!(
                "{} holds runs of a different configuration; choose another output directory or run name",
                run_dir.display()
            )));
        }
    }
    write_atomic(&path, cfg.to_toml().as_bytes())
}

/// Trains every configured seed, skipping seeds whose directory is already
/// complete, with up to `workers` seeds in parallel.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let dataset = cfg.dataset.load()?;
    let pairs = PairSets::build(cfg, dataset.dim())?;
    let dir = cfg.run_dir();
    prepare_run_dir(cfg, &dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Runtime(format!("worker pool: {e}")))?;
    let results: Vec<Result<SeedSummary, HarnessError>> = pool.install(|| {
        use rayon::prelude::*;
        cfg.seeds
            .par_iter()
            .map(|&seed| match completed_seed(&dir, seed) {
                Some(done) => {
                    info!("seed {seed}: already complete in {}", dir.display());
                    Ok(done)
                }
                None => run_seed(cfg, &dataset, &pairs, seed, &dir),
            })
            .collect()
    });
    let summaries = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(RunOutput { dir, summaries })
}

/// Re-evaluates the saved agents of every seed of a run directory.
pub fn evaluate_run(run_dir: &Path) -> Result<Vec<SeedSummary>, HarnessError> {
    let cfg = ExperimentConfig::from_file(&run_dir.join(CONFIG_FILE), &ExperimentConfig::default())?;
    cfg.validate()?;
    let dataset = cfg.dataset.load()?;
    let pairs = PairSets::build(&cfg, dataset.dim())?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let path = seed_dir(run_dir, seed).join(CHECKPOINT_FILE);
        if !path.exists() {
            warn!("seed {seed}: no checkpoint at {}", path.display());
            continue;
        }
        let mut agents = AgentPair::new(cfg.agent_spec(dataset.dim()), &mut ChaCha8Rng::seed_from_u64(seed))?;
        agents.load_checkpoint(&Checkpoint::load(&path)?)?;
        let (train, validation, noise, winoground) =
            final_evaluation(&mut agents, &dataset, &pairs, &cfg, cfg.epochs)?;
        out.push(SeedSummary {
            seed,
            loss: cfg.loss.name().into(),
            vocab: cfg.vocab,
            max_len: cfg.max_len,
            epochs: cfg.epochs,
            train,
            validation,
            noise,
            winoground,
        });
    }
    if out.is_empty() {
        return Err(HarnessError::Runtime(format!(
            "{} has no trained seeds",
            run_dir.display()
        )));
    }
    Ok(out)
}
