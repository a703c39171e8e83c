use super::*;
use crate::agents::AgentSpec;
use crate::autodiff::gradcheck;
use crate::datasets::{noise_pairs, synthetic_dataset, SyntheticSpec};
use crate::diffrank::hard_spearman;

fn spec(input_dim: usize) -> AgentSpec {
    AgentSpec {
        input_dim,
        hidden: 16,
        embed_dim: 8,
        vocab: 10,
        max_len: 5,
        temperature: 0.1,
        reembed: false,
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn untrained_agents_are_at_chance() {
    let ds = synthetic_dataset(&SyntheticSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut agents = AgentPair::new(spec(ds.dim()), &mut rng).unwrap();
    let (mut hits, mut rounds) = (0.0, 0);
    while rounds < 1000 {
        for inputs in ds.epoch_batches(Split::Train, 32, 2, &mut rng).unwrap() {
            if inputs.batch_size() < MIN_BATCH {
                continue;
            }
            let mut tape = Tape::new();
            let r = play_round(&mut tape, &inputs, &mut agents, Mode::Train, &mut rng).unwrap();
            hits += metrics::accuracy(tape.value(r.distribution), 2, &r.target_index)
                * r.batch as f64;
            rounds += r.batch;
        }
    }
    let acc = hits / rounds as f64;
    assert!((acc - 0.5).abs() < 0.05, "{acc}");
}

#[test]
fn identical_candidates_give_uniform_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut agents = AgentPair::new(spec(4), &mut rng).unwrap();
    let targets = random_matrix(&mut rng, 5, 4);
    let mut cands = Vec::new();
    for row in targets.chunks(4) {
        cands.extend_from_slice(row);
        cands.extend_from_slice(row);
    }
    let inputs = RoundInputs {
        dim: 4,
        n_candidates: 2,
        target_embeddings: targets,
        candidate_embeddings: cands,
        target_index: vec![0, 1, 0, 1, 0],
        target_items: None,
        candidate_items: None,
    };
    for mode in [Mode::Train, Mode::Eval] {
        let mut tape = Tape::new();
        let r = play_round(&mut tape, &inputs, &mut agents, mode, &mut rng).unwrap();
        for p in tape.value(r.distribution) {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }
}

#[test]
fn eval_round_replays_identically() {
    let ds = synthetic_dataset(&SyntheticSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let mut agents = AgentPair::new(spec(ds.dim()), &mut rng).unwrap();
    let inputs = ds
        .round_inputs(Split::Validation, ds.split(Split::Validation), 2, &mut rng)
        .unwrap();
    let run = |agents: &mut AgentPair, rng: &mut ChaCha8Rng| {
        let mut tape = Tape::new();
        let r = play_round(&mut tape, &inputs, agents, Mode::Eval, rng).unwrap();
        tape.value(r.distribution).to_vec()
    };
    let a = run(&mut agents, &mut rng);
    let b = run(&mut agents, &mut rng);
    assert_eq!(a, b);
}

#[test]
fn ce_loss_examples() {
    let mut tape = Tape::new();
    let sure = tape.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let l = ce_loss(&mut tape, sure, &[0]).unwrap();
    assert_eq!(tape.value(l)[0], 0.0);
    let uniform = tape.constant(vec![1, 2], vec![0.5, 0.5]).unwrap();
    let l = ce_loss(&mut tape, uniform, &[1]).unwrap();
    assert!((tape.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);
    let mix = tape.constant(vec![2, 2], vec![0.0, 1.0, 0.5, 0.5]).unwrap();
    let l = ce_loss(&mut tape, mix, &[1, 0]).unwrap();
    assert!((tape.value(l)[0] - std::f64::consts::LN_2 / 2.0).abs() < 1e-15);
    // A zero target probability is floored, not infinite.
    let zero = tape.constant(vec![1, 2], vec![0.0, 1.0]).unwrap();
    let l = ce_loss(&mut tape, zero, &[0]).unwrap();
    assert!((tape.value(l)[0] + PROB_FLOOR.ln()).abs() < 1e-9);
}

#[test]
fn ce_loss_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    for _ in 0..50 {
        let logits = Tensor::matrix(4, 3, random_matrix(&mut rng, 4, 3)).unwrap();
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let r = gradcheck::check(&[logits], gradcheck::DEFAULT_STEP, |tape, v| {
            let p = tape.softmax(v[0]);
            ce_loss(tape, p, &targets)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
    }
}

fn value_of_penalty(s: &[f64], l: &[f64], i: &[f64], n: usize, d: usize, cfg: &SoftRankConfig) -> f64 {
    let mut tape = Tape::new();
    let s = tape.constant(vec![n, d], s.to_vec()).unwrap();
    let l = tape.constant(vec![n, d], l.to_vec()).unwrap();
    let i = tape.constant(vec![n, d], i.to_vec()).unwrap();
    let p = rsa_penalty(&mut tape, s, l, i, cfg).unwrap();
    tape.value(p)[0]
}

#[test]
fn rsa_penalty_is_near_zero_for_identical_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(74);
    let x = random_matrix(&mut rng, 12, 5);
    let p = value_of_penalty(&x, &x, &x, 12, 5, &SoftRankConfig::default());
    assert!(p.abs() < 5e-2, "{p}");
}

#[test]
fn rsa_penalty_of_reversed_structure() {
    // Angles 0°, 30°, 90° give similarity order (0,1) > (1,2) > (0,2);
    // angles 0°, 90°, 30° give the exact reverse. Three sets cannot all be
    // mutually reversed, so reverse the speaker against listener and input:
    // two terms reach 2, the third stays 0.
    let deg = |a: f64| [a.to_radians().cos(), a.to_radians().sin()];
    let a: Vec<f64> = [0.0, 30.0, 90.0].iter().flat_map(|x| deg(*x)).collect();
    let b: Vec<f64> = [0.0, 90.0, 30.0].iter().flat_map(|x| deg(*x)).collect();
    let cfg = SoftRankConfig::with_strength(1e-4);
    let p = value_of_penalty(&b, &a, &a, 3, 2, &cfg);
    let rows = |v: &[f64]| v.chunks(2).map(|r| r.to_vec()).collect::<Vec<_>>();
    let hard = (1.0 - metrics::rsa(&rows(&b), &rows(&a)).unwrap()) * 2.0
        + (1.0 - metrics::rsa(&rows(&a), &rows(&a)).unwrap());
    assert!((hard - 4.0).abs() < 1e-12);
    assert!((p - hard).abs() < 1e-6, "{p}");
}

#[test]
fn rsa_penalty_matches_hard_oracle_at_small_strength() {
    let mut rng = ChaCha8Rng::seed_from_u64(75);
    let cfg = SoftRankConfig::with_strength(1e-4);
    for _ in 0..30 {
        let n = 10;
        let s = random_matrix(&mut rng, n, 4);
        let l = random_matrix(&mut rng, n, 4);
        let i = random_matrix(&mut rng, n, 4);
        let rows = |v: &[f64]| v.chunks(4).map(|r| r.to_vec()).collect::<Vec<_>>();
        let hard = (1.0 - metrics::rsa(&rows(&s), &rows(&l)).unwrap())
            + (1.0 - metrics::rsa(&rows(&s), &rows(&i)).unwrap())
            + (1.0 - metrics::rsa(&rows(&l), &rows(&i)).unwrap());
        let soft = value_of_penalty(&s, &l, &i, n, 4, &cfg);
        assert!((soft - hard).abs() < 0.03, "{soft} vs {hard}");
    }
}

#[test]
fn rsa_penalty_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(76);
    for _ in 0..50 {
        let n = 6;
        let s = Tensor::matrix(n, 3, random_matrix(&mut rng, n, 3)).unwrap();
        let l = Tensor::matrix(n, 3, random_matrix(&mut rng, n, 3)).unwrap();
        let i = random_matrix(&mut rng, n, 3);
        let r = gradcheck::check(&[s, l], gradcheck::DEFAULT_STEP, |tape, v| {
            let iv = tape.constant(vec![n, 3], i.clone())?;
            rsa_penalty(tape, v[0], v[1], iv, &SoftRankConfig::default())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
    }
}

#[test]
fn rsa_penalty_rejects_tiny_batches() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(rsa_penalty(&mut tape, x, x, x, &SoftRankConfig::default()).is_err());
}

#[test]
fn policy_loss_with_rewards_at_baseline_is_entropy_only() {
    let mut tape = Tape::new();
    let lp = tape.constant(vec![3], vec![-0.5, -1.0, -2.0]).unwrap();
    let ent = tape.constant(vec![3], vec![0.3, 0.6, 0.9]).unwrap();
    let mut b = BaselineState {
        mean: 0.25,
        count: 4,
    };
    let pl = speaker_policy_loss(&mut tape, lp, ent, &[0.25; 3], &mut b, 0.1).unwrap();
    assert_eq!(tape.value(pl.policy)[0], 0.0);
    assert!((tape.value(pl.loss)[0] + 0.1 * 0.6).abs() < 1e-15);
}

#[test]
fn policy_loss_vanishes_once_baseline_has_converged() {
    let mut tape = Tape::new();
    let lp = tape.constant(vec![2], vec![-0.7, -0.1]).unwrap();
    let ent = tape.constant(vec![2], vec![0.4, 0.2]).unwrap();
    let mut b = BaselineState::default();
    speaker_policy_loss(&mut tape, lp, ent, &[-0.3, -0.3], &mut b, 0.0).unwrap();
    let pl = speaker_policy_loss(&mut tape, lp, ent, &[-0.3, -0.3], &mut b, 0.0).unwrap();
    assert_eq!(tape.value(pl.loss)[0], 0.0);
}

#[test]
fn baseline_is_mean_of_batch_means() {
    let mut b = BaselineState::default();
    let means = [0.3, -1.2, 4.0, 0.0, 2.5];
    for m in means {
        b.update(m);
    }
    assert_eq!(b.count, 5);
    assert!((b.mean - means.iter().sum::<f64>() / 5.0).abs() < 1e-15);
}

#[test]
fn two_armed_bandit_converges() {
    // Vocabulary {EOS, a}; one-symbol messages; reward 1 for `a`.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let s = AgentSpec {
        input_dim: 3,
        hidden: 8,
        embed_dim: 4,
        vocab: 2,
        max_len: 1,
        temperature: 0.1,
        reembed: false,
    };
    let mut agents = AgentPair::new(s, &mut rng).unwrap();
    let mut opt = AdamState::new(0.01);
    let mut baseline = BaselineState::default();
    let x = random_matrix(&mut rng, 32, 3);
    let p_a = |agents: &mut AgentPair| {
        let mut tape = Tape::new();
        let xv = tape.constant(vec![32, 3], x.clone()).unwrap();
        let r = agents.speaker.represent(&mut tape, xv, Mode::Eval).unwrap();
        let b = tape.param(&agents.speaker.bos_embedding);
        let b = tape.reshape(b, vec![1, 4]).unwrap();
        let bos = tape.gather_rows(b, &[0; 32]).unwrap();
        let h = agents.speaker.generator.step(&mut tape, bos, r).unwrap();
        let logits = agents.speaker.output_proj.forward(&mut tape, h).unwrap();
        let p = tape.softmax(logits);
        tape.value(p).chunks(2).map(|r| r[1]).sum::<f64>() / 32.0
    };
    let mut converged_at = None;
    for step in 0..300 {
        let mut tape = Tape::new();
        let xv = tape.constant(vec![32, 3], x.clone()).unwrap();
        let r = agents.speaker.represent(&mut tape, xv, Mode::Train).unwrap();
        let g = agents.speaker.generate(&mut tape, r, Mode::Train, &mut rng).unwrap();
        let rewards: Vec<f64> = g.messages.iter().map(|m| f64::from(u8::from(m.symbols == [1]))).collect();
        let pl = speaker_policy_loss(&mut tape, g.log_probs, g.entropies, &rewards, &mut baseline, 0.1)
            .unwrap();
        let grads = tape.backward(pl.loss).unwrap();
        let mut params = agents.speaker.params_mut();
        zero_grads(params.iter_mut().map(|t| &mut **t));
        for t in params.iter_mut() {
            grads.accumulate_into(t).unwrap();
        }
        opt.step(&mut params).unwrap();
        if p_a(&mut agents) > 0.95 {
            converged_at = Some(step);
            break;
        }
    }
    assert!(converged_at.is_some(), "P(a) = {}", p_a(&mut agents));
}

#[test]
fn rewards_do_not_route_gradient_into_listener() {
    let ds = synthetic_dataset(&SyntheticSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let mut agents = AgentPair::new(spec(ds.dim()), &mut rng).unwrap();
    let inputs = ds.round_inputs(Split::Train, &ds.split(Split::Train)[..16], 2, &mut rng).unwrap();
    let mut tape = Tape::new();
    let r = play_round(&mut tape, &inputs, &mut agents, Mode::Train, &mut rng).unwrap();
    let per = per_sample_ce(&mut tape, r.distribution, &r.target_index).unwrap();
    let rewards: Vec<f64> = tape.value(per).iter().map(|c| -c).collect();
    let mut b = BaselineState::default();
    let pl = speaker_policy_loss(&mut tape, r.generation.log_probs, r.generation.entropies, &rewards, &mut b, 0.1)
        .unwrap();
    let grads = tape.backward(pl.loss).unwrap();
    for t in agents.listener.params() {
        assert!(grads.of(t).is_none_or(|g| g.iter().all(|v| *v == 0.0)));
    }
    assert!(grads.of(&agents.speaker.output_proj.weight).is_some());
}

#[test]
fn alignment_penalty_never_reaches_output_projection() {
    let ds = synthetic_dataset(&SyntheticSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(79);
    let mut agents = AgentPair::new(spec(ds.dim()), &mut rng).unwrap();
    let inputs = ds.round_inputs(Split::Train, &ds.split(Split::Train)[..16], 2, &mut rng).unwrap();
    let mut tape = Tape::new();
    let r = play_round(&mut tape, &inputs, &mut agents, Mode::Train, &mut rng).unwrap();
    let p = rsa_penalty(&mut tape, r.r_s, r.r_l_targets, r.inputs, &SoftRankConfig::default()).unwrap();
    let grads = tape.backward(p).unwrap();
    for t in agents.speaker.output_proj.params() {
        assert!(grads.of(t).is_none_or(|g| g.iter().all(|v| *v == 0.0)));
    }
    let nonzero = |t: &Tensor| grads.of(t).is_some_and(|g| g.iter().any(|v| *v != 0.0));
    assert!(nonzero(&agents.speaker.repr_layer.weight));
    assert!(nonzero(&agents.listener.repr_layer.weight));
}

#[test]
fn epoch_on_empty_dataset_is_rejected() {
    let ds = EmbeddingDataset::new(2, vec![], vec![], vec![], None, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let agents = AgentPair::new(spec(2), &mut rng).unwrap();
    let mut t = Trainer::new(agents, TrainConfig::default());
    assert!(matches!(
        t.train_epoch(&ds, 1, &mut rng),
        Err(GameError::Dataset(DatasetError::Empty))
    ));
}

#[test]
fn zero_learning_rates_leave_parameters_bit_identical() {
    let ds = synthetic_dataset(&SyntheticSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let agents = AgentPair::new(spec(ds.dim()), &mut rng).unwrap();
    for loss in [LossKind::Ce, LossKind::CeRsa] {
        let cfg = TrainConfig {
            speaker_lr: 0.0,
            listener_lr: 0.0,
            loss,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(agents.clone(), cfg);
        let before = parameter_snapshot(&t.agents);
        let stats = t.train_epoch(&ds, 1, &mut rng).unwrap();
        assert!(stats.steps > 0);
        let after = parameter_snapshot(&t.agents);
        for (a, b) in before.iter().zip(&after) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }
}

#[test]
fn training_reports_consistent_loss_components() {
    let ds = synthetic_dataset(&SyntheticSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let agents = AgentPair::new(spec(ds.dim()), &mut rng).unwrap();
    let cfg = TrainConfig {
        loss: LossKind::CeRsa,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(agents, cfg);
    let batch = ds.round_inputs(Split::Train, &ds.split(Split::Train)[..32], 2, &mut rng).unwrap();
    let (rep, _, _) = t.train_step(&batch, &mut rng).unwrap();
    let expect = rep.ce + rep.l_rsa + rep.speaker_policy_loss - 0.1 * rep.entropy_bonus;
    assert!((rep.total - expect).abs() < 1e-12);
    assert!(rep.l_rsa > 0.0);
    assert_eq!(t.baseline.count, 1);
}

#[test]
fn evaluate_is_deterministic_and_consistent_with_metrics() {
    let ds = synthetic_dataset(&SyntheticSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(83);
    let mut agents = AgentPair::new(spec(ds.dim()), &mut rng).unwrap();
    let cfg = TrainConfig::default();
    let before = parameter_snapshot(&agents);
    let a = evaluate_split(&mut agents, &ds, Split::Validation, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = evaluate_split(&mut agents, &ds, Split::Validation, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.record(3, "validation"), b.record(3, "validation"));
    let after = parameter_snapshot(&agents);
    assert!(before.iter().zip(&after).all(|(x, y)| x.data() == y.data()));
    // Cross-check RSA_sl against the dumped representations.
    let s: Vec<&[f64]> = a.speaker_repr.chunks(16).collect();
    let l: Vec<&[f64]> = a.listener_repr.chunks(16).collect();
    assert!((metrics::rsa(&s, &l).unwrap() - a.rsa_sl).abs() < 1e-12);
    let n = ds.split(Split::Validation).len();
    assert_eq!(s.len(), n);
    assert!(a.unique_messages <= n);
}

#[test]
fn untrained_agents_on_noise_pairs_are_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(84);
    let pairs = noise_pairs(200, 64, &mut rng);
    let mut accs = Vec::new();
    for seed in 0..5 {
        let mut agents = AgentPair::new(spec(64), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        accs.push(evaluate_pairs(&mut agents, &pairs, &TrainConfig::default(), false).unwrap().accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() < 0.05, "{accs:?}");
}

#[test]
fn rsa_penalty_agrees_with_hard_spearman_on_similarity_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(85);
    let n = 9;
    let s = random_matrix(&mut rng, n, 3);
    let l = random_matrix(&mut rng, n, 3);
    let mut tape = Tape::new();
    let sv = tape.constant(vec![n, 3], s.clone()).unwrap();
    let lv = tape.constant(vec![n, 3], l.clone()).unwrap();
    let ps = pairwise_cosine_var(&mut tape, sv).unwrap();
    let pl = pairwise_cosine_var(&mut tape, lv).unwrap();
    let rows = |v: &[f64]| v.chunks(3).map(|r| r.to_vec()).collect::<Vec<_>>();
    for (a, b) in tape.value(ps).iter().zip(metrics::pairwise_cosine(&rows(&s))) {
        assert!((a - b).abs() < 1e-14);
    }
    let hard = hard_spearman(tape.value(ps), tape.value(pl)).unwrap();
    assert!((hard - metrics::rsa(&rows(&s), &rows(&l)).unwrap()).abs() < 1e-12);
}
