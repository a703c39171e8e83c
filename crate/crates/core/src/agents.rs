//! Speaker and listener agents.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::message::{Message, EOS};
use crate::metrics::argmax;
use crate::nn::{
    uniform_tensor, BatchNormLayer, Checkpoint, EmbeddingTable, GruCell, LinearLayer, Mode,
    NnError,
};

/// Norm floor used by the guarded cosine.
pub const NORM_FLOOR: f64 = 1e-12;

/// Architecture of an agent pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub input_dim: usize,
    /// Representation size; also the GRU hidden size.
    pub hidden: usize,
    pub embed_dim: usize,
    /// Vocabulary size including EOS.
    pub vocab: usize,
    pub max_len: usize,
    pub temperature: f64,
    /// Pass r_s through an extra linear map before seeding the generator.
    pub reembed: bool,
}

impl AgentSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Shape(m.to_string()));
        if self.input_dim == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return bad("agent dimensions must be positive");
        }
        if self.vocab < 2 {
            return bad("vocabulary needs EOS plus at least one symbol");
        }
        if self.max_len == 0 {
            return bad("maximum message length must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        Ok(())
    }
}

/// `[rows × d]` input tensor check.
fn check_input(tape: &Tape, x: Var, dim: usize) -> Result<usize, NnError> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != dim {
        return Err(NnError::Shape(format!(
            "expected [batch × {dim}] embeddings, got {s:?}"
        )));
    }
    Ok(s[0])
}

/// Rows divided by their guarded L2 norm; a zero row stays zero.
pub fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var, NnError> {
    let rows = tape.shape(x)[0];
    let n = tape.l2_norm(x);
    let n = tape.clamp_min(n, NORM_FLOOR);
    let n = tape.reshape(n, vec![rows, 1])?;
    Ok(tape.div(x, n)?)
}

#[derive(Clone, Debug)]
pub struct SpeakerAgent {
    pub repr_layer: LinearLayer,
    pub repr_norm: BatchNormLayer,
    pub symbol_embed: EmbeddingTable,
    pub generator: GruCell,
    pub output_proj: LinearLayer,
    pub bos_embedding: Tensor,
    pub reembed: Option<LinearLayer>,
    pub max_len: usize,
}

/// Output of [`SpeakerAgent::generate`].
pub struct Generation {
    pub messages: Vec<Message>,
    /// `[batch]`: summed log-probabilities of the emitted symbols.
    pub log_probs: Var,
    /// `[batch]`: mean per-step entropy over the emitted steps.
    pub entropies: Var,
}

impl SpeakerAgent {
    pub fn new<R: Rng + ?Sized>(spec: &AgentSpec, rng: &mut R) -> Self {
        SpeakerAgent {
            repr_layer: LinearLayer::new(spec.input_dim, spec.hidden, rng),
            repr_norm: BatchNormLayer::new(spec.hidden),
            symbol_embed: EmbeddingTable::new(spec.vocab, spec.embed_dim, rng),
            generator: GruCell::new(spec.embed_dim, spec.hidden, rng),
            output_proj: LinearLayer::new(spec.hidden, spec.vocab, rng),
            bos_embedding: uniform_tensor(vec![spec.embed_dim], 0.1, rng),
            reembed: spec
                .reembed
                .then(|| LinearLayer::new(spec.hidden, spec.hidden, rng)),
            max_len: spec.max_len,
        }
    }

    pub fn vocab(&self) -> usize {
        self.output_proj.output_size()
    }

    /// r_s = batchnorm(linear(embeddings)).
    pub fn represent(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var, NnError> {
        check_input(tape, x, self.repr_layer.input_size())?;
        let h = self.repr_layer.forward(tape, x)?;
        self.repr_norm.forward(tape, h, mode)
    }

    /// Spells out one message per row of `r_s`. Train mode samples each
    /// symbol; eval mode decodes greedily. Rows stop at EOS or after
    /// `max_len` symbols.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        r_s: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Generation, NnError> {
        let batch = check_input(tape, r_s, self.generator.hidden_size())?;
        let vocab = self.vocab();
        let mut h = match &self.reembed {
            Some(layer) => layer.forward(tape, r_s)?,
            None => r_s,
        };
        let bos = tape.param(&self.bos_embedding);
        let bos = tape.reshape(bos, vec![1, self.bos_embedding.len()])?;
        let mut x = tape.gather_rows(bos, &vec![0; batch])?;

        let mut symbols: Vec<Vec<usize>> = vec![Vec::new(); batch];
        let mut alive = vec![true; batch];
        let mut log_prob_sum = tape.constant(vec![batch], vec![0.0; batch])?;
        let mut entropy_sum = tape.constant(vec![batch], vec![0.0; batch])?;
        let mut steps = vec![0.0f64; batch];

        for _ in 0..self.max_len {
            if !alive.iter().any(|a| *a) {
                break;
            }
            h = self.generator.step(tape, x, h)?;
            let logits = self.output_proj.forward(tape, h)?;
            let logp = tape.log_softmax(logits);
            let p = tape.exp(logp);
            let plogp = tape.mul(p, logp)?;
            let neg_entropy = tape.sum_axis(plogp, 1)?;

            let mask: Vec<f64> = alive.iter().map(|a| f64::from(u8::from(*a))).collect();
            let mut chosen = vec![EOS; batch];
            {
                let probs = tape.value(p);
                for row in 0..batch {
                    if !alive[row] {
                        continue;
                    }
                    let dist = &probs[row * vocab..(row + 1) * vocab];
                    chosen[row] = match mode {
                        Mode::Eval => argmax(dist),
                        Mode::Train => WeightedIndex::new(dist)
                            .map_err(|e| NnError::Shape(format!("symbol distribution: {e}")))?
                            .sample(rng),
                    };
                }
            }
            let flat: Vec<usize> = chosen
                .iter()
                .enumerate()
                .map(|(row, s)| row * vocab + s)
                .collect();
            let picked = tape.select(logp, &flat)?;
            let mask_v = tape.constant(vec![batch], mask.clone())?;
            let picked = tape.mul(picked, mask_v)?;
            log_prob_sum = tape.add(log_prob_sum, picked)?;
            let masked_neg_entropy = tape.mul(neg_entropy, mask_v)?;
            entropy_sum = tape.sub(entropy_sum, masked_neg_entropy)?;

            for row in 0..batch {
                if alive[row] {
                    symbols[row].push(chosen[row]);
                    steps[row] += 1.0;
                    if chosen[row] == EOS {
                        alive[row] = false;
                    }
                }
            }
            x = self.symbol_embed.lookup(tape, &chosen)?;
        }
        let steps = tape.constant(vec![batch], steps.iter().map(|s| s.max(1.0)).collect())?;
        let entropies = tape.div(entropy_sum, steps)?;
        Ok(Generation {
            messages: symbols.into_iter().map(Message::new).collect(),
            log_probs: log_prob_sum,
            entropies,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.repr_layer.params();
        p.extend(self.repr_norm.params());
        p.push(&self.symbol_embed.table);
        p.extend(self.generator.params());
        p.extend(self.output_proj.params());
        p.push(&self.bos_embedding);
        if let Some(l) = &self.reembed {
            p.extend(l.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.repr_layer.params_mut();
        p.extend(self.repr_norm.params_mut());
        p.extend(self.symbol_embed.params_mut());
        p.extend(self.generator.params_mut());
        p.extend(self.output_proj.params_mut());
        p.push(&mut self.bos_embedding);
        if let Some(l) = &mut self.reembed {
            p.extend(l.params_mut());
        }
        p
    }
}

#[derive(Clone, Debug)]
pub struct ListenerAgent {
    pub repr_layer: LinearLayer,
    pub repr_norm: BatchNormLayer,
    pub symbol_embed: EmbeddingTable,
    pub encoder: GruCell,
    pub temperature: f64,
}

impl ListenerAgent {
    pub fn new<R: Rng + ?Sized>(spec: &AgentSpec, rng: &mut R) -> Self {
        ListenerAgent {
            repr_layer: LinearLayer::new(spec.input_dim, spec.hidden, rng),
            repr_norm: BatchNormLayer::new(spec.hidden),
            symbol_embed: EmbeddingTable::new(spec.vocab, spec.embed_dim, rng),
            encoder: GruCell::new(spec.embed_dim, spec.hidden, rng),
            temperature: spec.temperature,
        }
    }

    /// r_l = batchnorm(linear(embeddings)).
    pub fn represent(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var, NnError> {
        check_input(tape, x, self.repr_layer.input_size())?;
        let h = self.repr_layer.forward(tape, x)?;
        self.repr_norm.forward(tape, h, mode)
    }

    /// Final GRU state after reading each message through its first EOS,
    /// starting from zeros. Rows that have ended keep their state.
    pub fn encode(&self, tape: &mut Tape, messages: &[Message]) -> Result<Var, NnError> {
        let batch = messages.len();
        let hidden = self.encoder.hidden_size();
        let vocab = self.symbol_embed.vocab();
        for m in messages {
            if let Some(&s) = m.symbols.iter().find(|&&s| s >= vocab) {
                return Err(NnError::SymbolOutOfRange { symbol: s, vocab });
            }
        }
        let mut h = tape.constant(vec![batch, hidden], vec![0.0; batch * hidden])?;
        let longest = messages.iter().map(|m| m.through_eos().len()).max().unwrap_or(0);
        for t in 0..longest {
            let mut ids = Vec::with_capacity(batch);
            let mut mask = Vec::with_capacity(batch);
            for m in messages {
                let s = m.through_eos();
                ids.push(s.get(t).copied().unwrap_or(EOS));
                mask.push(f64::from(u8::from(t < s.len())));
            }
            let x = self.symbol_embed.lookup(tape, &ids)?;
            let next = self.encoder.step(tape, x, h)?;
            if mask.iter().all(|m| *m == 1.0) {
                h = next;
            } else {
                let m = tape.constant(vec![batch, 1], mask)?;
                let delta = tape.sub(next, h)?;
                let delta = tape.mul(delta, m)?;
                h = tape.add(h, delta)?;
            }
        }
        Ok(h)
    }

    /// Softmax over candidates of cosine(message, candidate) / temperature.
    /// `cand_reprs` is `[batch·n_candidates × hidden]`, rows grouped by round.
    pub fn score(
        &self,
        tape: &mut Tape,
        msg_enc: Var,
        cand_reprs: Var,
        n_candidates: usize,
    ) -> Result<Var, NnError> {
        listener_score(tape, msg_enc, cand_reprs, n_candidates, self.temperature)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.repr_layer.params();
        p.extend(self.repr_norm.params());
        p.push(&self.symbol_embed.table);
        p.extend(self.encoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.repr_layer.params_mut();
        p.extend(self.repr_norm.params_mut());
        p.extend(self.symbol_embed.params_mut());
        p.extend(self.encoder.params_mut());
        p
    }
}

/// Temperature-weighted cosine scores turned into a distribution over each
/// round's candidates. Returns `[batch × n_candidates]`.
pub fn listener_score(
    tape: &mut Tape,
    msg_enc: Var,
    cand_reprs: Var,
    n_candidates: usize,
    temperature: f64,
) -> Result<Var, NnError> {
    if !(temperature > 0.0) {
        return Err(NnError::Shape(format!("temperature {temperature} must be positive")));
    }
    let (ms, cs) = (tape.shape(msg_enc).to_vec(), tape.shape(cand_reprs).to_vec());
    if ms.len() != 2 || cs.len() != 2 || ms[1] != cs[1] || cs[0] != ms[0] * n_candidates {
        return Err(NnError::Shape(format!(
            "scoring {ms:?} messages against {cs:?} candidates with {n_candidates} per round"
        )));
    }
    let batch = ms[0];
    let m = normalize_rows(tape, msg_enc)?;
    let c = normalize_rows(tape, cand_reprs)?;
    let repeat: Vec<usize> = (0..batch * n_candidates).map(|i| i / n_candidates).collect();
    let m = tape.gather_rows(m, &repeat)?;
    let prod = tape.mul(m, c)?;
    let cos = tape.sum_axis(prod, 1)?;
    let cos = tape.reshape(cos, vec![batch, n_candidates])?;
    let logits = tape.scale(cos, 1.0 / temperature);
    Ok(tape.softmax(logits))
}

/// A speaker and a listener trained together.
#[derive(Clone, Debug)]
pub struct AgentPair {
    pub spec: AgentSpec,
    pub speaker: SpeakerAgent,
    pub listener: ListenerAgent,
}

impl AgentPair {
    pub fn new<R: Rng + ?Sized>(spec: AgentSpec, rng: &mut R) -> Result<Self, NnError> {
        spec.validate()?;
        let speaker = SpeakerAgent::new(&spec, rng);
        let listener = ListenerAgent::new(&spec, rng);
        Ok(AgentPair {
            spec,
            speaker,
            listener,
        })
    }

    /// Every learned tensor and batchnorm statistic, by stable name.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (name, t) in self.named_tensors() {
            ck.push(name, t.shape(), t.data());
        }
        for (prefix, bn) in [
            ("speaker.repr_norm", &self.speaker.repr_norm),
            ("listener.repr_norm", &self.listener.repr_norm),
        ] {
            let n = bn.running_mean.len();
            ck.push(format!("{prefix}.running_mean"), &[n], &bn.running_mean);
            ck.push(format!("{prefix}.running_var"), &[n], &bn.running_var);
        }
        ck
    }

    /// Restores state written by [`AgentPair::to_checkpoint`] for the same spec.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<(), NnError> {
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f64>, NnError> {
            let e = ck
                .get(name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing entry '{name}'")))?;
            if e.shape != shape {
                return Err(NnError::Checkpoint(format!(
                    "entry '{name}' has shape {:?}, expected {shape:?}",
                    e.shape
                )));
            }
            Ok(e.data.clone())
        };
        let names: Vec<(String, Vec<usize>)> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mut values = Vec::with_capacity(names.len());
        for (n, s) in &names {
            values.push(fetch(n, s)?);
        }
        let mut stats = Vec::new();
        for prefix in ["speaker.repr_norm", "listener.repr_norm"] {
            let n = self.spec.hidden;
            stats.push(fetch(&format!("{prefix}.running_mean"), &[n])?);
            stats.push(fetch(&format!("{prefix}.running_var"), &[n])?);
        }
        for ((_, shape), (t, v)) in names.iter().zip(self.tensors_mut().into_iter().zip(values)) {
            t.assign(shape, &v)?;
        }
        let mut stats = stats.into_iter();
        for bn in [&mut self.speaker.repr_norm, &mut self.listener.repr_norm] {
            bn.running_mean = stats.next().expect("four statistics");
            bn.running_var = stats.next().expect("four statistics");
        }
        Ok(())
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let s = &self.speaker;
        let l = &self.listener;
        let mut out: Vec<(String, &Tensor)> = vec![
            ("speaker.repr.weight".into(), &s.repr_layer.weight),
            ("speaker.repr.bias".into(), &s.repr_layer.bias),
            ("speaker.repr_norm.gamma".into(), &s.repr_norm.gamma),
            ("speaker.repr_norm.beta".into(), &s.repr_norm.beta),
            ("speaker.symbol_embed".into(), &s.symbol_embed.table),
        ];
        out.extend(gru_named("speaker.generator", &s.generator));
        out.push(("speaker.output_proj.weight".into(), &s.output_proj.weight));
        out.push(("speaker.output_proj.bias".into(), &s.output_proj.bias));
        out.push(("speaker.bos".into(), &s.bos_embedding));
        if let Some(r) = &s.reembed {
            out.push(("speaker.reembed.weight".into(), &r.weight));
            out.push(("speaker.reembed.bias".into(), &r.bias));
        }
        out.push(("listener.repr.weight".into(), &l.repr_layer.weight));
        out.push(("listener.repr.bias".into(), &l.repr_layer.bias));
        out.push(("listener.repr_norm.gamma".into(), &l.repr_norm.gamma));
        out.push(("listener.repr_norm.beta".into(), &l.repr_norm.beta));
        out.push(("listener.symbol_embed".into(), &l.symbol_embed.table));
        out.extend(gru_named("listener.encoder", &l.encoder));
        out
    }

    /// Same order as [`AgentPair::named_tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let s = &mut self.speaker;
        let l = &mut self.listener;
        let mut out: Vec<&mut Tensor> = vec![
            &mut s.repr_layer.weight,
            &mut s.repr_layer.bias,
            &mut s.repr_norm.gamma,
            &mut s.repr_norm.beta,
            &mut s.symbol_embed.table,
        ];
        out.extend(s.generator.params_mut());
        out.push(&mut s.output_proj.weight);
        out.push(&mut s.output_proj.bias);
        out.push(&mut s.bos_embedding);
        if let Some(r) = &mut s.reembed {
            out.extend(r.params_mut());
        }
        out.extend(l.repr_layer.params_mut());
        out.extend(l.repr_norm.params_mut());
        out.extend(l.symbol_embed.params_mut());
        out.extend(l.encoder.params_mut());
        out
    }
}

fn gru_named<'a>(prefix: &str, g: &'a GruCell) -> Vec<(String, &'a Tensor)> {
    ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"]
        .iter()
        .zip(g.params())
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> AgentSpec {
        AgentSpec {
            input_dim: 6,
            hidden: 5,
            embed_dim: 4,
            vocab: 7,
            max_len: 3,
            temperature: 0.1,
            reembed: false,
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Vec<f64> {
        (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn represent_matches_separate_layers_and_is_deterministic_in_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut pair = AgentPair::new(spec(), &mut rng).unwrap();
        let x = random_input(&mut rng, 4, 6);
        let lin = pair.speaker.repr_layer.clone();
        let mut bn = pair.speaker.repr_norm.clone();

        let mut tape = Tape::new();
        let xv = tape.constant(vec![4, 6], x.clone()).unwrap();
        let r = pair.speaker.represent(&mut tape, xv, Mode::Train).unwrap();
        let composed = {
            let h = lin.forward(&mut tape, xv).unwrap();
            bn.forward(&mut tape, h, Mode::Train).unwrap()
        };
        assert_eq!(tape.value(r), tape.value(composed));

        let a = pair.listener.represent(&mut tape, xv, Mode::Eval).unwrap();
        let b = pair.listener.represent(&mut tape, xv, Mode::Eval).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn identical_rows_give_identical_representations() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut pair = AgentPair::new(spec(), &mut rng).unwrap();
        let row = random_input(&mut rng, 1, 6);
        let x: Vec<f64> = row.iter().cycle().take(18).copied().collect();
        let mut tape = Tape::new();
        let xv = tape.constant(vec![3, 6], x).unwrap();
        let r = pair.speaker.represent(&mut tape, xv, Mode::Train).unwrap();
        let v = tape.value(r);
        assert_eq!(&v[0..5], &v[5..10]);
        assert_eq!(&v[0..5], &v[10..15]);
    }

    #[test]
    fn represent_rejects_wrong_input_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut pair = AgentPair::new(spec(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(vec![2, 5], vec![0.0; 10]).unwrap();
        assert!(pair.speaker.represent(&mut tape, xv, Mode::Eval).is_err());
    }

    #[test]
    fn eval_generation_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let pair = AgentPair::new(spec(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let r = tape.constant(vec![8, 5], random_input(&mut rng, 8, 5)).unwrap();
        let a = pair.speaker.generate(&mut tape, r, Mode::Eval, &mut rng).unwrap();
        let b = pair.speaker.generate(&mut tape, r, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a.messages, b.messages);
        for m in &a.messages {
            assert!(m.symbols.len() <= 3);
            assert!(m.symbols.iter().all(|s| *s < 7));
            // Nothing is generated past EOS.
            assert_eq!(m.through_eos().len(), m.symbols.len());
        }
    }

    #[test]
    fn length_one_messages_have_one_symbol() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let pair = AgentPair::new(AgentSpec { max_len: 1, ..spec() }, &mut rng).unwrap();
        let mut tape = Tape::new();
        let r = tape.constant(vec![16, 5], random_input(&mut rng, 16, 5)).unwrap();
        let g = pair.speaker.generate(&mut tape, r, Mode::Train, &mut rng).unwrap();
        assert!(g.messages.iter().all(|m| m.symbols.len() == 1));
    }

    #[test]
    fn dominant_logit_is_sampled_almost_always() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut pair = AgentPair::new(AgentSpec { max_len: 1, ..spec() }, &mut rng).unwrap();
        let v = 7;
        let mut bias = vec![0.0; v];
        bias[3] = 50.0;
        pair.speaker.output_proj.weight.data_mut().fill(0.0);
        pair.speaker.output_proj.bias.assign(&[v], &bias).unwrap();
        let n = 10_000;
        let mut tape = Tape::new();
        let r = tape.constant(vec![n, 5], vec![0.3; n * 5]).unwrap();
        let g = pair.speaker.generate(&mut tape, r, Mode::Train, &mut rng).unwrap();
        let hits = g.messages.iter().filter(|m| m.symbols == [3]).count();
        assert!(hits as f64 / n as f64 > 0.999);
    }

    #[test]
    fn log_probs_and_entropies_match_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let pair = AgentPair::new(spec(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let r = tape.constant(vec![6, 5], random_input(&mut rng, 6, 5)).unwrap();
        let g = pair.speaker.generate(&mut tape, r, Mode::Train, &mut rng).unwrap();
        // Replay each message row by row on a fresh tape.
        for (row, m) in g.messages.iter().enumerate() {
            let mut t2 = Tape::new();
            let mut h = t2.constant(vec![1, 5], tape.value(r)[row * 5..row * 5 + 5].to_vec()).unwrap();
            let bos = pair.speaker.bos_embedding.data().to_vec();
            let mut x = t2.constant(vec![1, 4], bos).unwrap();
            let (mut lp, mut ent) = (0.0, 0.0);
            for &s in &m.symbols {
                h = pair.speaker.generator.step(&mut t2, x, h).unwrap();
                let logits = pair.speaker.output_proj.forward(&mut t2, h).unwrap();
                let logp = t2.log_softmax(logits);
                let lv = t2.value(logp).to_vec();
                lp += lv[s];
                ent -= lv.iter().map(|l| l.exp() * l).sum::<f64>();
                x = t2.constant(vec![1, 4], pair.speaker.symbol_embed.table.row(s).to_vec()).unwrap();
            }
            assert!((tape.value(g.log_probs)[row] - lp).abs() < 1e-12);
            let mean_ent = ent / m.symbols.len() as f64;
            assert!((tape.value(g.entropies)[row] - mean_ent).abs() < 1e-12);
        }
    }

    #[test]
    fn encoding_ignores_symbols_after_eos() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let pair = AgentPair::new(spec(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let msgs = vec![
            Message::new(vec![2, 0, 5]),
            Message::new(vec![2, 0, 6]),
            Message::new(vec![2, 0]),
            Message::new(vec![4, 1, 3]),
            Message::new(vec![4, 1, 3]),
        ];
        let e = pair.listener.encode(&mut tape, &msgs).unwrap();
        let v = tape.value(e);
        assert_eq!(&v[0..5], &v[5..10]);
        assert_eq!(&v[0..5], &v[10..15]);
        assert_eq!(&v[15..20], &v[20..25]);
        assert!(pair
            .listener
            .encode(&mut tape, &[Message::new(vec![9])])
            .is_err());
    }

    #[test]
    fn zero_weight_encoder_gives_zero_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let mut pair = AgentPair::new(spec(), &mut rng).unwrap();
        pair.listener.encoder = GruCell::zeroed(4, 5);
        let mut tape = Tape::new();
        let e = pair
            .listener
            .encode(&mut tape, &[Message::new(vec![1, 2, 3]), Message::new(vec![0])])
            .unwrap();
        assert!(tape.value(e).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn score_examples() {
        let mut tape = Tape::new();
        // Identical candidates → uniform.
        let m = tape.constant(vec![1, 3], vec![0.2, -1.0, 0.5]).unwrap();
        let c = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let p = listener_score(&mut tape, m, c, 2, 0.1).unwrap();
        assert_eq!(tape.value(p), &[0.5, 0.5]);
        // Equal vs orthogonal at τ = 0.1 → softmax([10, 0]).
        let m = tape.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let c = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = listener_score(&mut tape, m, c, 2, 0.1).unwrap();
        let expect = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((tape.value(p)[0] - expect).abs() < 1e-12);
        assert!((tape.value(p)[0] - 0.99995).abs() < 1e-5);
        // Scaling a candidate leaves probabilities unchanged.
        let c5 = tape.constant(vec![2, 2], vec![5.0, 0.0, 0.0, 1.0]).unwrap();
        let p5 = listener_score(&mut tape, m, c5, 2, 0.1).unwrap();
        assert!((tape.value(p)[0] - tape.value(p5)[0]).abs() < 1e-15);
        // Zero vector → cosine 0, no NaN.
        let z = tape.constant(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let pz = listener_score(&mut tape, m, z, 2, 0.1).unwrap();
        assert!(tape.value(pz).iter().all(|v| v.is_finite()));
        assert!(listener_score(&mut tape, m, c, 2, 0.0).is_err());
    }

    #[test]
    fn score_rows_sum_to_one_and_gradients_reach_all_modules() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let mut pair = AgentPair::new(spec(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(vec![4, 6], random_input(&mut rng, 4, 6)).unwrap();
        let cands = tape.constant(vec![8, 6], random_input(&mut rng, 8, 6)).unwrap();
        let rs = pair.speaker.represent(&mut tape, x, Mode::Train).unwrap();
        let g = pair.speaker.generate(&mut tape, rs, Mode::Train, &mut rng).unwrap();
        let enc = pair.listener.encode(&mut tape, &g.messages).unwrap();
        let rl = pair.listener.represent(&mut tape, cands, Mode::Train).unwrap();
        let p = pair.listener.score(&mut tape, enc, rl, 2).unwrap();
        for row in tape.value(p).chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let target = tape.select(p, &[0, 3, 4, 7]).unwrap();
        let lt = tape.log(target);
        let loss = tape.mean(lt);
        let grads = tape.backward(loss).unwrap();
        let nonzero = |t: &Tensor| grads.of(t).is_some_and(|g| g.iter().any(|v| *v != 0.0));
        assert!(nonzero(&pair.listener.repr_layer.weight));
        assert!(nonzero(&pair.listener.encoder.w_h));
        assert!(nonzero(&pair.listener.symbol_embed.table));
        // Sampled log-probs reach the speaker's representation layer.
        let lp = tape.sum(g.log_probs);
        let grads = tape.backward(lp).unwrap();
        let nonzero = |t: &Tensor| grads.of(t).is_some_and(|g| g.iter().any(|v| *v != 0.0));
        assert!(nonzero(&pair.speaker.repr_layer.weight));
        assert!(nonzero(&pair.speaker.output_proj.weight));
        assert!(nonzero(&pair.speaker.bos_embedding));
    }

    #[test]
    fn score_argmax_invariant_to_positive_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let m = tape.constant(vec![2, 4], random_input(&mut rng, 2, 4)).unwrap();
            let raw = random_input(&mut rng, 6, 4);
            let scales: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..10.0)).collect();
            let scaled: Vec<f64> = raw.iter().enumerate().map(|(i, v)| v * scales[i / 4]).collect();
            let c = tape.constant(vec![6, 4], raw).unwrap();
            let cs = tape.constant(vec![6, 4], scaled).unwrap();
            let p = listener_score(&mut tape, m, c, 3, 0.1).unwrap();
            let ps = listener_score(&mut tape, m, cs, 3, 0.1).unwrap();
            for (a, b) in tape.value(p).chunks(3).zip(tape.value(ps).chunks(3)) {
                assert_eq!(argmax(a), argmax(b));
            }
        }
    }

    #[test]
    fn listener_score_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..50 {
            let m = Tensor::matrix(2, 3, random_input(&mut rng, 2, 3)).unwrap();
            let c = Tensor::matrix(4, 3, random_input(&mut rng, 4, 3)).unwrap();
            let w: Vec<f64> = random_input(&mut rng, 1, 4);
            let r = gradcheck::check(&[m, c], gradcheck::DEFAULT_STEP, |tape, v| {
                let p = listener_score(tape, v[0], v[1], 2, 0.5)?;
                let wv = tape.constant(vec![2, 2], w.clone())?;
                let s = tape.mul(p, wv)?;
                Ok::<_, NnError>(tape.sum(s))
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
        }
    }

    #[test]
    fn checkpoint_round_trip_restores_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let spec = AgentSpec { reembed: true, ..spec() };
        let mut a = AgentPair::new(spec.clone(), &mut rng).unwrap();
        a.speaker.repr_norm.running_mean[0] = 0.7;
        let ck = a.to_checkpoint();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let mut b = AgentPair::new(spec, &mut ChaCha8Rng::seed_from_u64(63)).unwrap();
        b.load_checkpoint(&Checkpoint::read_from(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(b.to_checkpoint(), ck);
        let mut tape = Tape::new();
        let x = tape.constant(vec![3, 6], random_input(&mut rng, 3, 6)).unwrap();
        let ra = a.speaker.represent(&mut tape, x, Mode::Eval).unwrap();
        let rb = b.speaker.represent(&mut tape, x, Mode::Eval).unwrap();
        assert_eq!(tape.value(ra), tape.value(rb));
        let ga = a.speaker.generate(&mut tape, ra, Mode::Eval, &mut rng).unwrap();
        let gb = b.speaker.generate(&mut tape, rb, Mode::Eval, &mut rng).unwrap();
        assert_eq!(ga.messages, gb.messages);
    }

    #[test]
    fn checkpoint_with_wrong_spec_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let a = AgentPair::new(spec(), &mut rng).unwrap();
        let mut b = AgentPair::new(AgentSpec { hidden: 6, ..spec() }, &mut rng).unwrap();
        assert!(matches!(
            b.load_checkpoint(&a.to_checkpoint()),
            Err(NnError::Checkpoint(_))
        ));
    }
}
