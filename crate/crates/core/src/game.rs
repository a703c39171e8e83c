//! The referential game: rounds, losses, REINFORCE updates, the epoch loop
//! and evaluation.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{normalize_rows, AgentPair, Generation};
use crate::autodiff::{zero_grads, AutodiffError, Tape, Tensor, Var};
use crate::datasets::{DatasetError, EmbeddingDataset, FixedPairSet, RoundInputs, Split};
use crate::diffrank::{soft_spearman, RankError, SoftRankConfig};
use crate::message::Message;
use crate::metrics::{self, InputDistance, MetricsError, MetricsRecord};
use crate::nn::{AdamState, Mode, NnError};

/// Probability floor inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Training batches smaller than this are skipped: the alignment penalty
/// needs three pairwise similarities and batch statistics need two rows.
pub const MIN_BATCH: usize = 3;

#[derive(Debug, Error)]
pub enum GameError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    CeRsa,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::CeRsa => "ce_rsa",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "ce_rsa" => Ok(LossKind::CeRsa),
            other => Err(format!("unknown loss '{other}' (expected ce or ce_rsa)")),
        }
    }
}

/// Per-sample speaker reward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Negative cross-entropy of the sample.
    NegCe,
    /// 1 when the listener's argmax is the target, else 0.
    Accuracy,
}

/// Optimization settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub speaker_lr: f64,
    pub listener_lr: f64,
    pub batch_size: usize,
    pub n_candidates: usize,
    pub entropy_coef: f64,
    pub reward: RewardKind,
    pub soft_rank: SoftRankConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Ce,
            speaker_lr: 0.01,
            listener_lr: 0.001,
            batch_size: 32,
            n_candidates: 2,
            entropy_coef: 0.1,
            reward: RewardKind::NegCe,
            soft_rank: SoftRankConfig::default(),
        }
    }
}

/// A played round: representations, messages and the listener's
/// distribution, all on the tape.
pub struct Round {
    pub batch: usize,
    pub n_candidates: usize,
    pub target_index: Vec<usize>,
    /// `[batch × dim]` target embeddings (constant).
    pub inputs: Var,
    /// `[batch × hidden]` speaker representations of the targets.
    pub r_s: Var,
    /// `[batch × hidden]` listener representations of the targets.
    pub r_l_targets: Var,
    pub generation: Generation,
    /// `[batch × n_candidates]`
    pub distribution: Var,
}

impl Round {
    pub fn messages(&self) -> &[Message] {
        &self.generation.messages
    }
}

/// Speaker describes each target; listener scores that row's candidates.
pub fn play_round<R: Rng + ?Sized>(
    tape: &mut Tape,
    inputs: &RoundInputs,
    agents: &mut AgentPair,
    mode: Mode,
    rng: &mut R,
) -> Result<Round, GameError> {
    let batch = inputs.batch_size();
    let n = inputs.n_candidates;
    let d = inputs.dim;
    let targets = tape.constant(vec![batch, d], inputs.target_embeddings.clone())?;
    let candidates = tape.constant(vec![batch * n, d], inputs.candidate_embeddings.clone())?;
    let r_s = agents.speaker.represent(tape, targets, mode)?;
    let generation = agents.speaker.generate(tape, r_s, mode, rng)?;
    let encoded = agents.listener.encode(tape, &generation.messages)?;
    let cand_reprs = agents.listener.represent(tape, candidates, mode)?;
    let distribution = agents.listener.score(tape, encoded, cand_reprs, n)?;
    let target_rows: Vec<usize> = inputs
        .target_index
        .iter()
        .enumerate()
        .map(|(row, t)| row * n + t)
        .collect();
    let r_l_targets = tape.gather_rows(cand_reprs, &target_rows)?;
    Ok(Round {
        batch,
        n_candidates: n,
        target_index: inputs.target_index.clone(),
        inputs: targets,
        r_s,
        r_l_targets,
        generation,
        distribution,
    })
}

/// Per-row −log p(target) on the tape, probabilities floored.
pub fn per_sample_ce(tape: &mut Tape, distribution: Var, target_index: &[usize]) -> Result<Var, GameError> {
    let n = *tape.shape(distribution).last().unwrap_or(&1);
    let flat: Vec<usize> = target_index
        .iter()
        .enumerate()
        .map(|(row, t)| row * n + t)
        .collect();
    let p = tape.select(distribution, &flat)?;
    let p = tape.clamp_min(p, PROB_FLOOR);
    let lp = tape.log(p);
    Ok(tape.neg(lp))
}

/// Mean over the batch of −log p(target).
pub fn ce_loss(tape: &mut Tape, distribution: Var, target_index: &[usize]) -> Result<Var, GameError> {
    let per = per_sample_ce(tape, distribution, target_index)?;
    Ok(tape.mean(per))
}

/// Upper-triangle pairwise cosine similarities of the rows of `x`.
pub fn pairwise_cosine_var(tape: &mut Tape, x: Var) -> Result<Var, GameError> {
    let n = tape.shape(x)[0];
    let unit = normalize_rows(tape, x)?;
    let gram = tape.matmul_t(unit, unit)?;
    let flat: Vec<usize> = metrics::upper_pairs(n).map(|(i, j)| i * n + j).collect();
    Ok(tape.select(gram, &flat)?)
}

/// (1−RSA_sl) + (1−RSA_si) + (1−RSA_li) with soft Spearman correlations.
pub fn rsa_penalty(
    tape: &mut Tape,
    r_s: Var,
    r_l: Var,
    inputs: Var,
    cfg: &SoftRankConfig,
) -> Result<Var, GameError> {
    let n = tape.shape(r_s)[0];
    if n < MIN_BATCH {
        return Err(GameError::Invalid(format!(
            "the alignment penalty needs at least {MIN_BATCH} items, got {n}"
        )));
    }
    if tape.shape(r_l)[0] != n || tape.shape(inputs)[0] != n {
        return Err(GameError::Invalid(
            "the alignment penalty needs equally many items per set".into(),
        ));
    }
    let s = pairwise_cosine_var(tape, r_s)?;
    let l = pairwise_cosine_var(tape, r_l)?;
    let i = pairwise_cosine_var(tape, inputs)?;
    let sl = soft_spearman(tape, s, l, cfg)?;
    let si = soft_spearman(tape, s, i, cfg)?;
    let li = soft_spearman(tape, l, i, cfg)?;
    let sum = tape.add(sl, si)?;
    let sum = tape.add(sum, li)?;
    Ok(tape.rsub_scalar(3.0, sum))
}

/// Running arithmetic mean of batch-mean rewards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub mean: f64,
    pub count: u64,
}

impl BaselineState {
    pub fn update(&mut self, batch_mean: f64) {
        self.count += 1;
        self.mean += (batch_mean - self.mean) / self.count as f64;
    }
}

pub struct PolicyLoss {
    /// Mean of −(reward − baseline)·log_prob.
    pub policy: Var,
    /// Mean per-sample entropy.
    pub entropy: Var,
    /// `policy − λ_H·entropy`.
    pub loss: Var,
}

/// REINFORCE with a running-mean baseline and an entropy bonus. The
/// baseline is read, then updated with this batch's mean reward.
pub fn speaker_policy_loss(
    tape: &mut Tape,
    log_probs: Var,
    entropies: Var,
    rewards: &[f64],
    baseline: &mut BaselineState,
    entropy_coef: f64,
) -> Result<PolicyLoss, GameError> {
    let n = rewards.len();
    if tape.value(log_probs).len() != n || n == 0 {
        return Err(GameError::Invalid(format!(
            "{n} rewards for {} log-probabilities",
            tape.value(log_probs).len()
        )));
    }
    let advantage: Vec<f64> = rewards.iter().map(|r| -(r - baseline.mean)).collect();
    let adv = tape.constant(vec![n], advantage)?;
    let weighted = tape.mul(adv, log_probs)?;
    let policy = tape.mean(weighted);
    let entropy = tape.mean(entropies);
    let bonus = tape.scale(entropy, entropy_coef);
    let loss = tape.sub(policy, bonus)?;
    baseline.update(rewards.iter().sum::<f64>() / n as f64);
    Ok(PolicyLoss {
        policy,
        entropy,
        loss,
    })
}

/// Scalar loss components of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub l_rsa: f64,
    pub speaker_policy_loss: f64,
    pub entropy_bonus: f64,
    pub total: f64,
}

/// Agents plus optimizer and baseline state of one run.
pub struct Trainer {
    pub agents: AgentPair,
    pub config: TrainConfig,
    pub speaker_opt: AdamState,
    pub listener_opt: AdamState,
    pub baseline: BaselineState,
}

/// Aggregate of the batches of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub record: MetricsRecord,
    pub steps: usize,
    pub mean_loss: LossReport,
}

impl Trainer {
    pub fn new(agents: AgentPair, config: TrainConfig) -> Self {
        Trainer {
            speaker_opt: AdamState::new(config.speaker_lr),
            listener_opt: AdamState::new(config.listener_lr),
            agents,
            config,
            baseline: BaselineState::default(),
        }
    }

    /// One optimization step on a batch of rounds.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        inputs: &RoundInputs,
        rng: &mut R,
    ) -> Result<(LossReport, Round, Tape), GameError> {
        let mut tape = Tape::new();
        let round = play_round(&mut tape, inputs, &mut self.agents, Mode::Train, rng)?;
        let per_ce = per_sample_ce(&mut tape, round.distribution, &round.target_index)?;
        let ce = tape.mean(per_ce);
        let l_rsa = match self.config.loss {
            LossKind::Ce => None,
            LossKind::CeRsa => Some(rsa_penalty(
                &mut tape,
                round.r_s,
                round.r_l_targets,
                round.inputs,
                &self.config.soft_rank,
            )?),
        };
        let rewards: Vec<f64> = match self.config.reward {
            RewardKind::NegCe => tape.value(per_ce).iter().map(|c| -c).collect(),
            RewardKind::Accuracy => tape
                .value(round.distribution)
                .chunks(round.n_candidates)
                .zip(&round.target_index)
                .map(|(row, t)| f64::from(u8::from(metrics::argmax(row) == *t)))
                .collect(),
        };
        let policy = speaker_policy_loss(
            &mut tape,
            round.generation.log_probs,
            round.generation.entropies,
            &rewards,
            &mut self.baseline,
            self.config.entropy_coef,
        )?;
        let mut total = tape.add(ce, policy.loss)?;
        if let Some(l) = l_rsa {
            total = tape.add(total, l)?;
        }
        let grads = tape.backward(total)?;

        let mut speaker = self.agents.speaker.params_mut();
        let mut listener = self.agents.listener.params_mut();
        zero_grads(speaker.iter_mut().map(|t| &mut **t));
        zero_grads(listener.iter_mut().map(|t| &mut **t));
        for t in speaker.iter_mut().chain(listener.iter_mut()) {
            grads.accumulate_into(t)?;
        }
        self.speaker_opt.step(&mut speaker)?;
        self.listener_opt.step(&mut listener)?;

        let report = LossReport {
            ce: tape.value(ce)[0],
            l_rsa: l_rsa.map_or(0.0, |l| tape.value(l)[0]),
            speaker_policy_loss: tape.value(policy.policy)[0],
            entropy_bonus: tape.value(policy.entropy)[0],
            total: tape.value(total)[0],
        };
        Ok((report, round, tape))
    }

    /// One pass over the training split with freshly sampled distractors.
    pub fn train_epoch<R: Rng + ?Sized>(
        &mut self,
        dataset: &EmbeddingDataset,
        epoch: usize,
        rng: &mut R,
    ) -> Result<EpochStats, GameError> {
        let batches = dataset.epoch_batches(
            Split::Train,
            self.config.batch_size,
            self.config.n_candidates,
            rng,
        )?;
        let mut sums = [0.0f64; 9];
        let mut steps = 0usize;
        let mut messages = Vec::new();
        for inputs in &batches {
            if inputs.batch_size() < MIN_BATCH {
                debug!("skipping a batch of {} rounds", inputs.batch_size());
                continue;
            }
            let (report, round, tape) = self.train_step(inputs, rng)?;
            let accuracy = metrics::accuracy(
                tape.value(round.distribution),
                round.n_candidates,
                &round.target_index,
            );
            let (sl, si, li) = hard_rsa_triple(&tape, &round, round.batch)?;
            let ts = metrics::topsim(
                &rows(tape.value(round.inputs), round.batch),
                round.messages(),
                InputDistance::Cosine,
            )?;
            for (acc, v) in sums.iter_mut().zip([
                accuracy,
                sl,
                si,
                li,
                ts,
                report.ce,
                report.l_rsa,
                report.speaker_policy_loss,
                report.entropy_bonus,
            ]) {
                *acc += v;
            }
            messages.extend_from_slice(round.messages());
            steps += 1;
        }
        if steps == 0 {
            return Err(GameError::Invalid(format!(
                "no training batch has at least {MIN_BATCH} rounds"
            )));
        }
        let m: Vec<f64> = sums.iter().map(|s| s / steps as f64).collect();
        let ce_w = self.config.entropy_coef;
        Ok(EpochStats {
            record: MetricsRecord {
                epoch,
                split: "train_batches".into(),
                accuracy: m[0],
                rsa_sl: m[1],
                rsa_si: m[2],
                rsa_li: m[3],
                topsim: m[4],
                unique_messages: metrics::unique_messages(&messages),
                ce: m[5],
                l_rsa: m[6],
            },
            steps,
            mean_loss: LossReport {
                ce: m[5],
                l_rsa: m[6],
                speaker_policy_loss: m[7],
                entropy_bonus: m[8],
                total: m[5] + m[6] + m[7] - ce_w * m[8],
            },
        })
    }
}

fn rows(flat: &[f64], n: usize) -> Vec<&[f64]> {
    if n == 0 {
        return Vec::new();
    }
    flat.chunks(flat.len() / n).collect()
}

fn hard_rsa_triple(tape: &Tape, round: &Round, n: usize) -> Result<(f64, f64, f64), GameError> {
    let s = rows(tape.value(round.r_s), n);
    let l = rows(tape.value(round.r_l_targets), n);
    let i = rows(tape.value(round.inputs), n);
    Ok((
        metrics::rsa(&s, &l)?,
        metrics::rsa(&s, &i)?,
        metrics::rsa(&l, &i)?,
    ))
}

/// Everything an evaluation pass measured.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub rsa_sl: f64,
    pub rsa_si: f64,
    pub rsa_li: f64,
    pub topsim: f64,
    pub unique_messages: usize,
    pub ce: f64,
    pub l_rsa: f64,
    pub messages: Vec<Message>,
    /// `[n × hidden]` representations of the targets.
    pub speaker_repr: Vec<f64>,
    pub listener_repr: Vec<f64>,
    pub distribution: Vec<f64>,
}

impl Evaluation {
    pub fn record(&self, epoch: usize, split: &str) -> MetricsRecord {
        MetricsRecord {
            epoch,
            split: split.into(),
            accuracy: self.accuracy,
            rsa_sl: self.rsa_sl,
            rsa_si: self.rsa_si,
            rsa_li: self.rsa_li,
            topsim: self.topsim,
            unique_messages: self.unique_messages,
            ce: self.ce,
            l_rsa: self.l_rsa,
        }
    }
}

/// Greedy, batch-statistics-free pass over a whole set of rounds. Nothing is
/// updated. `l_rsa` is reported only for `ce_rsa` runs.
pub fn evaluate(
    agents: &mut AgentPair,
    inputs: &RoundInputs,
    config: &TrainConfig,
) -> Result<Evaluation, GameError> {
    let n = inputs.batch_size();
    if n < MIN_BATCH {
        return Err(GameError::Invalid(format!(
            "evaluation needs at least {MIN_BATCH} rounds, got {n}"
        )));
    }
    let mut tape = Tape::new();
    // Greedy decoding never draws from the generator.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let round = play_round(&mut tape, inputs, agents, Mode::Eval, &mut unused)?;
    let ce = ce_loss(&mut tape, round.distribution, &round.target_index)?;
    let l_rsa = match config.loss {
        LossKind::Ce => 0.0,
        LossKind::CeRsa => {
            let v = rsa_penalty(
                &mut tape,
                round.r_s,
                round.r_l_targets,
                round.inputs,
                &config.soft_rank,
            )?;
            tape.value(v)[0]
        }
    };
    let (rsa_sl, rsa_si, rsa_li) = hard_rsa_triple(&tape, &round, n)?;
    let topsim = metrics::topsim(
        &rows(tape.value(round.inputs), n),
        round.messages(),
        InputDistance::Cosine,
    )?;
    let distribution = tape.value(round.distribution).to_vec();
    Ok(Evaluation {
        accuracy: metrics::accuracy(&distribution, round.n_candidates, &round.target_index),
        rsa_sl,
        rsa_si,
        rsa_li,
        topsim,
        unique_messages: metrics::unique_messages(round.messages()),
        ce: tape.value(ce)[0],
        l_rsa,
        speaker_repr: tape.value(round.r_s).to_vec(),
        listener_repr: tape.value(round.r_l_targets).to_vec(),
        messages: round.generation.messages,
        distribution,
    })
}

/// Evaluates a dataset split with distractors drawn by `rng`; every split
/// item is a target exactly once.
pub fn evaluate_split<R: Rng + ?Sized>(
    agents: &mut AgentPair,
    dataset: &EmbeddingDataset,
    split: Split,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Evaluation, GameError> {
    let items = dataset.split(split);
    if items.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let inputs = dataset.round_inputs(split, items, config.n_candidates, rng)?;
    evaluate(agents, &inputs, config)
}

/// Accuracy over fixed pairs, both directions unless `one_direction`.
pub fn evaluate_pairs(
    agents: &mut AgentPair,
    pairs: &FixedPairSet,
    config: &TrainConfig,
    one_direction: bool,
) -> Result<Evaluation, GameError> {
    let inputs = pairs.round_inputs(!one_direction);
    let cfg = TrainConfig {
        n_candidates: 2,
        ..config.clone()
    };
    evaluate(agents, &inputs, &cfg)
}

/// All parameter tensors of a pair, speaker first.
pub fn parameter_snapshot(agents: &AgentPair) -> Vec<Tensor> {
    agents
        .speaker
        .params()
        .into_iter()
        .chain(agents.listener.params())
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests;
