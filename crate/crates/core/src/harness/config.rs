//! Experiment configuration: TOML documents layered over built-in defaults,
//! with command-line overrides applied last.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, OUT_ENV};
use crate::agents::AgentSpec;
use crate::datasets::{load_embeddings, synthetic_dataset, EmbeddingDataset, SyntheticSpec};
use crate::diffrank::SoftRankConfig;
use crate::game::{LossKind, RewardKind, TrainConfig};

/// Seeds of the reference configuration.
pub const PAPER_SEEDS: [u64; 15] = [16, 22, 41, 56, 67, 77, 14, 78, 99, 23, 82, 40, 51, 37, 62];

/// Where the items come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Generated compositional data.
    Synthetic(SyntheticSpec),
    /// An embedding file plus a labels file.
    Embeddings {
        path: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        split_seed: u64,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<EmbeddingDataset, HarnessError> {
        Ok(match self {
            DatasetConfig::Synthetic(spec) => synthetic_dataset(spec)?,
            DatasetConfig::Embeddings {
                path,
                labels,
                split_seed,
            } => load_embeddings(path, labels, *split_seed)?,
        })
    }

    pub fn synthetic(&self) -> Option<&SyntheticSpec> {
        match self {
            DatasetConfig::Synthetic(spec) => Some(spec),
            DatasetConfig::Embeddings { .. } => None,
        }
    }
}

/// Everything needed to reproduce a set of runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub loss: LossKind,
    /// Vocabulary size V, EOS included.
    pub vocab: usize,
    /// Maximum message length L.
    pub max_len: usize,
    /// Hidden size of both agents.
    pub hidden: usize,
    /// Symbol embedding size.
    pub embed_dim: usize,
    /// Listener softmax temperature.
    pub temperature: f64,
    /// Re-embed the speaker's hidden state before each symbol input.
    pub reembed: bool,
    pub speaker_lr: f64,
    pub listener_lr: f64,
    pub batch_size: usize,
    pub n_candidates: usize,
    pub epochs: usize,
    /// Weight λ_H of the speaker's entropy bonus.
    pub entropy_coef: f64,
    pub reward: RewardKind,
    /// Soft-rank smoothness ε of the alignment penalty.
    pub soft_rank_epsilon: f64,
    /// Number of Gaussian-noise evaluation pairs; 0 disables them.
    pub noise_pairs: usize,
    /// Number of conceptually-similar evaluation pairs (synthetic data
    /// only); 0 disables them.
    pub winoground_pairs: usize,
    /// Evaluate fixed pairs with the first item as target only.
    pub pairs_one_direction: bool,
    /// Seeds the fixed evaluation pairs.
    pub pairs_seed: u64,
    /// Seeds the distractors of the per-epoch evaluation rounds.
    pub eval_seed: u64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Run directory name below `out_dir`; derived from loss, V and L when
    /// empty.
    pub run_name: String,
    pub dataset: DatasetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            loss: LossKind::Ce,
            vocab: 10,
            max_len: 5,
            hidden: 64,
            embed_dim: 50,
            temperature: 0.1,
            reembed: false,
            speaker_lr: 0.01,
            listener_lr: 0.001,
            batch_size: 32,
            n_candidates: 2,
            epochs: 30,
            entropy_coef: 0.1,
            reward: RewardKind::NegCe,
            soft_rank_epsilon: 0.1,
            noise_pairs: 200,
            winoground_pairs: 200,
            pairs_one_direction: false,
            pairs_seed: 0,
            eval_seed: 0,
            seeds: vec![1],
            out_dir: default_out_dir(),
            run_name: String::new(),
            dataset: DatasetConfig::default(),
        }
    }
}

/// `$REFGAME_OUT` when set, else `runs`.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

impl ExperimentConfig {
    /// The full-size reference configuration: 768 hidden units, V=40, L=2
    /// and fifteen fixed seeds.
    pub fn paper_params() -> Self {
        ExperimentConfig {
            vocab: 40,
            max_len: 2,
            hidden: 768,
            embed_dim: 50,
            temperature: 0.1,
            speaker_lr: 0.01,
            listener_lr: 0.001,
            batch_size: 32,
            epochs: 30,
            seeds: PAPER_SEEDS.to_vec(),
            ..ExperimentConfig::default()
        }
    }

    /// Parses a (possibly partial) TOML document on top of `base`.
    pub fn from_toml_over(base: &ExperimentConfig, text: &str) -> Result<Self, HarnessError> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(base)
            .map_err(|e| HarnessError::Config(format!("cannot encode defaults: {e}")))?;
        // Switching dataset kinds replaces the whole table instead of mixing
        // fields of both kinds.
        if let (Some(toml::Value::Table(new)), Some(toml::Value::Table(old))) =
            (overlay.get("dataset"), merged.get("dataset"))
        {
            if new.get("kind").is_some() && new.get("kind") != old.get("kind") {
                merged.remove("dataset");
            }
        }
        merge_tables(&mut merged, overlay);
        let cfg: ExperimentConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        Self::from_toml_over(&ExperimentConfig::default(), text)
    }

    pub fn from_file(path: &Path, base: &ExperimentConfig) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_over(base, &text)
    }

    /// Defaults (or the reference preset), then the config file, then flags.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self, HarnessError> {
        let base = if overrides.paper_params {
            ExperimentConfig::paper_params()
        } else {
            ExperimentConfig::default()
        };
        let mut cfg = match file {
            Some(p) => Self::from_file(p, &base)?,
            None => base,
        };
        overrides.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration is always representable as TOML")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        for (name, v) in [
            ("vocab", self.vocab),
            ("max_len", self.max_len),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.vocab < 2 {
            return bad("vocab must be at least 2 (EOS plus one symbol)".into());
        }
        if self.batch_size < crate::game::MIN_BATCH {
            return bad(format!(
                "batch_size must be at least {}",
                crate::game::MIN_BATCH
            ));
        }
        if self.n_candidates < 2 {
            return bad("n_candidates must be at least 2".into());
        }
        for (name, v) in [
            ("temperature", self.temperature),
            ("soft_rank_epsilon", self.soft_rank_epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a positive number, got {v}"));
            }
        }
        for (name, v) in [
            ("speaker_lr", self.speaker_lr),
            ("listener_lr", self.listener_lr),
            ("entropy_coef", self.entropy_coef),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        let per_pair = if self.pairs_one_direction { 1 } else { 2 };
        for (name, n) in [
            ("noise_pairs", self.noise_pairs),
            ("winoground_pairs", self.winoground_pairs),
        ] {
            if n > 0 && n * per_pair < crate::game::MIN_BATCH {
                return bad(format!(
                    "{name} = {n} gives fewer than {} evaluation rounds",
                    crate::game::MIN_BATCH
                ));
            }
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if let DatasetConfig::Synthetic(spec) = &self.dataset {
            spec.validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if self.run_name.contains("..") || Path::new(&self.run_name).is_absolute() {
            return bad(format!("run_name '{}' must be a relative name", self.run_name));
        }
        Ok(())
    }

    pub fn run_name(&self) -> String {
        if self.run_name.is_empty() {
            format!("{}-V{}-L{}", self.loss.name(), self.vocab, self.max_len)
        } else {
            self.run_name.clone()
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_name())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            speaker_lr: self.speaker_lr,
            listener_lr: self.listener_lr,
            batch_size: self.batch_size,
            n_candidates: self.n_candidates,
            entropy_coef: self.entropy_coef,
            reward: self.reward,
            soft_rank: SoftRankConfig::with_strength(self.soft_rank_epsilon),
        }
    }

    pub fn agent_spec(&self, input_dim: usize) -> AgentSpec {
        AgentSpec {
            input_dim,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            vocab: self.vocab,
            max_len: self.max_len,
            temperature: self.temperature,
            reembed: self.reembed,
        }
    }

    /// The same configuration with everything that names outputs or seeds
    /// blanked; two configs with equal keys produce the same per-seed runs.
    pub(crate) fn run_key(&self) -> String {
        ExperimentConfig {
            seeds: Vec::new(),
            out_dir: PathBuf::new(),
            run_name: String::new(),
            ..self.clone()
        }
        .to_toml()
    }
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Command-line overrides; `None` leaves the configured value alone.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub paper_params: bool,
    pub loss: Option<LossKind>,
    pub vocab: Option<usize>,
    pub max_len: Option<usize>,
    pub epochs: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
    pub run_name: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.loss {
            cfg.loss = v;
        }
        if let Some(v) = self.vocab {
            cfg.vocab = v;
        }
        if let Some(v) = self.max_len {
            cfg.max_len = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = &self.run_name {
            cfg.run_name = v.clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let preset = ExperimentConfig::paper_params();
        assert_eq!(ExperimentConfig::from_toml(&preset.to_toml()).unwrap(), preset);
    }

    #[test]
    fn partial_documents_layer_over_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "loss = \"ce_rsa\"\nvocab = 20\n[dataset]\nkind = \"synthetic\"\nnoise = 0.1\n",
        )
        .unwrap();
        assert_eq!(cfg.loss, LossKind::CeRsa);
        assert_eq!(cfg.vocab, 20);
        assert_eq!(cfg.max_len, 5);
        let spec = cfg.dataset.synthetic().unwrap();
        assert_eq!(spec.noise, 0.1);
        assert_eq!(spec.n_attributes, SyntheticSpec::default().n_attributes);
    }

    #[test]
    fn switching_dataset_kind_replaces_the_table() {
        let cfg = ExperimentConfig::from_toml(
            "[dataset]\nkind = \"embeddings\"\npath = \"x.emb\"\nlabels = \"x.csv\"\n",
        )
        .unwrap();
        assert_eq!(
            cfg.dataset,
            DatasetConfig::Embeddings {
                path: "x.emb".into(),
                labels: "x.csv".into(),
                split_seed: 0
            }
        );
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let e = ExperimentConfig::from_toml("vocabulary = 3").unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = ExperimentConfig::from_toml("[dataset]\nkind = \"synthetic\"\nbogus = 1\n").unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let mut cfg = ExperimentConfig {
            vocab: 1,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.vocab = 10;
        cfg.seeds = vec![3, 3];
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![3];
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flags_win_over_file_and_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "vocab = 20\nmax_len = 3\n").unwrap();
        let ov = Overrides {
            paper_params: true,
            max_len: Some(7),
            seeds: Some(vec![5, 6]),
            ..Overrides::default()
        };
        let cfg = ExperimentConfig::resolve(Some(&path), &ov).unwrap();
        assert_eq!((cfg.vocab, cfg.max_len, cfg.hidden), (20, 7, 768));
        assert_eq!(cfg.seeds, vec![5, 6]);
    }

    #[test]
    fn reference_preset_matches_its_table() {
        let p = ExperimentConfig::paper_params();
        assert_eq!((p.batch_size, p.vocab, p.max_len, p.hidden, p.embed_dim), (32, 40, 2, 768, 50));
        assert_eq!((p.speaker_lr, p.listener_lr, p.temperature), (0.01, 0.001, 0.1));
        assert_eq!(p.seeds.len(), 15);
    }

    #[test]
    fn run_names_derive_from_loss_and_channel() {
        let cfg = ExperimentConfig {
            loss: LossKind::CeRsa,
            vocab: 3,
            max_len: 2,
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.run_name(), "ce_rsa-V3-L2");
        let bad = ExperimentConfig {
            run_name: "../escape".into(),
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
