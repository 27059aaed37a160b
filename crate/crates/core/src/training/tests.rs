use super::*;
use crate::data::{AttributeMap, Click, Session};
use crate::eval::{index_samples, split_sessions};
use crate::kg::{build_graph, Catalog};
use crate::numerics::{gradcheck, Tensor};
use crate::time_enc::TimeEncoderKind;

fn session(id: &str, start: i64, items: &[&str]) -> Session {
    Session::new(
        id,
        items
            .iter()
            .enumerate()
            .map(|(i, x)| Click::new(*x, start + 60 * i as i64))
            .collect(),
    )
}

fn three_sessions() -> Vec<Session> {
    vec![
        session("s1", 0, &["a", "b", "c", "d"]),
        session("s2", 1000, &["b", "c", "d", "a"]),
        session("s3", 2000, &["c", "d", "a", "b"]),
    ]
}

fn setup(
    sessions: &[Session],
    attributes: &AttributeMap,
    config: ModelConfig,
    seed: u64,
) -> (Kstt, Vec<IndexedSample>) {
    let catalog = Catalog::from_sessions(sessions);
    let graph = build_graph(&catalog, sessions, attributes).unwrap();
    let (prefixes, _) = split_sessions(sessions);
    let (samples, _) = index_samples(&prefixes, &catalog);
    (Kstt::new(graph, config, seed).unwrap(), samples)
}

fn small_config(dim: usize) -> ModelConfig {
    ModelConfig {
        ffn_dim: 2 * dim,
        ..ModelConfig::new(dim)
    }
}

fn distribution(tape: &mut Tape, s: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let s = tape.constant(Tensor::matrix(1, s.len(), s.to_vec()).unwrap());
    let items = tape.constant(Tensor::from_rows(rows).unwrap());
    let items_t = tape.transpose(items);
    let logits = predict_scores(tape, s, items_t).unwrap();
    let y = tape.softmax(logits).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn orthogonal_session_gives_uniform_prediction() {
    let mut tape = Tape::new();
    let rows = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 2.0, -1.0], vec![0.0, 0.5, 0.5]];
    let y = distribution(&mut tape, &[3.0, 0.0, 0.0], &rows);
    for p in y {
        assert!((p - 0.25).abs() < 1e-15);
    }
}

#[test]
fn self_similarity_is_the_argmax() {
    let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| f64::from(i == j)).collect()).collect();
    for j in 0..4 {
        let mut tape = Tape::new();
        let y = distribution(&mut tape, &rows[j], &rows);
        assert_eq!(crate::eval::rank_items(&y)[0], j);
    }
}

#[test]
fn prediction_matches_scalar_softmax_of_dots() {
    let rows = vec![
        vec![0.3, -1.2, 0.5],
        vec![1.0, 0.0, 0.0],
        vec![-0.7, 0.4, 2.0],
        vec![0.0, 0.0, 0.0],
        vec![0.25, 0.25, -0.5],
    ];
    let s = [0.9, -0.4, 1.1];
    let mut tape = Tape::new();
    let y = distribution(&mut tape, &s, &rows);
    let dots: Vec<f64> = rows.iter().map(|r| r.iter().zip(&s).map(|(a, b)| a * b).sum()).collect();
    let z: f64 = dots.iter().map(|d| d.exp()).sum();
    for (p, d) in y.iter().zip(&dots) {
        assert!((p - d.exp() / z).abs() < 1e-14);
    }
}

fn loss_of(y: Vec<f64>, target: usize, kind: RecLossKind) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(y));
    let l = rec_loss(&mut tape, v, target, kind)?;
    Ok(tape.scalar_value(l))
}

#[test]
fn cross_entropy_examples() {
    let ce = RecLossKind::CrossEntropy;
    assert_eq!(loss_of(vec![0.0, 1.0, 0.0], 1, ce).unwrap(), 0.0);
    let l = loss_of(vec![0.1; 10], 3, ce).unwrap();
    assert!((l - 10f64.ln()).abs() < 1e-12);
    let l = loss_of(vec![0.25, 0.5, 0.25], 2, ce).unwrap();
    assert!((l - 1.3863).abs() < 1e-4);
    // floored rather than infinite
    let l = loss_of(vec![1.0, 0.0], 1, ce).unwrap();
    assert!((l + PROB_FLOOR.ln()).abs() < 1e-9);
}

#[test]
fn out_of_range_target_is_a_contract_error() {
    for kind in [RecLossKind::CrossEntropy, RecLossKind::Binary] {
        let err = loss_of(vec![0.5, 0.5], 2, kind).unwrap_err();
        assert!(matches!(err, KsttError::Contract(_)), "{err}");
    }
}

#[test]
fn binary_loss_matches_its_scalar_form() {
    let y: Vec<f64> = vec![0.1, 0.6, 0.05, 0.25];
    for target in 0..4 {
        let expected: f64 = -y
            .iter()
            .enumerate()
            .map(|(i, &p)| if i == target { p.ln() } else { (1.0 - p).ln() })
            .sum::<f64>();
        let got = loss_of(y.clone(), target, RecLossKind::Binary).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }
}

#[test]
fn loss_kind_round_trips_through_text() {
    for kind in [RecLossKind::CrossEntropy, RecLossKind::Binary] {
        assert_eq!(kind.to_string().parse::<RecLossKind>().unwrap(), kind);
    }
    assert!(matches!("bce".parse::<RecLossKind>(), Err(KsttError::Config(_))));
}

fn joint(rec: f64, kg: f64, params: &[Vec<f64>], lambda: f64) -> f64 {
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::scalar(rec));
    let k = tape.constant(Tensor::scalar(kg));
    let ps: Vec<Var> = params.iter().map(|p| tape.constant(Tensor::vector(p.clone()))).collect();
    let l = joint_loss(&mut tape, r, k, &ps, lambda).unwrap();
    tape.scalar_value(l)
}

#[test]
fn joint_loss_examples() {
    assert_eq!(joint(1.25, 0.5, &[vec![7.0, -2.0]], 0.0), 1.75);
    assert!((joint(0.0, 0.0, &[vec![3.0, 4.0]], 0.1) - 2.5).abs() < 1e-15);
    assert_eq!(joint(0.5, 0.25, &[], 3.0), 0.75);
}

#[test]
fn joint_loss_is_at_least_the_data_terms() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let rec: f64 = rng.gen_range(0.0..5.0);
        let kg: f64 = rng.gen_range(0.0..5.0);
        let p: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lambda: f64 = rng.gen_range(0.0..1.0);
        assert!(joint(rec, kg, &[p], lambda) >= rec + kg);
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { rec_batch_size: 0, ..TrainConfig::default() },
        TrainConfig { kg_batch_size: 0, ..TrainConfig::default() },
        TrainConfig { lambda: -1e-3, ..TrainConfig::default() },
        TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(KsttError::Config(_))));
    }
}

#[test]
fn empty_sample_set_is_a_contract_error() {
    let (mut model, _) = setup(&three_sessions(), &AttributeMap::new(), small_config(8), 1);
    let err = train(&mut model, &[], &TrainConfig::default(), |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, KsttError::Contract(_)));
}

#[test]
fn first_epoch_beats_one_and_a_half_times_uniform() {
    let (mut model, samples) = setup(&three_sessions(), &AttributeMap::new(), small_config(16), 3);
    let config = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let log = train(&mut model, &samples, &config, |_, _| Ok(())).unwrap();
    let r = &log[0];
    assert!(r.kg_loss.unwrap().is_finite());
    assert!(r.rec_loss.is_finite());
    let m = model.num_items() as f64;
    assert!(r.rec_loss < 1.5 * m.ln(), "{r:?}");
}

fn parameter_norm(store: &ParamStore) -> f64 {
    store.iter().map(|(_, t)| t.sum_squares()).sum::<f64>().sqrt()
}

#[test]
fn huge_lambda_shrinks_parameters_every_epoch() {
    let (mut model, samples) = setup(&three_sessions(), &AttributeMap::new(), small_config(8), 4);
    let config = TrainConfig {
        epochs: 6,
        lambda: 1e6,
        ..TrainConfig::default()
    };
    let mut norms = vec![parameter_norm(&model.store)];
    train(&mut model, &samples, &config, |_, m| {
        norms.push(parameter_norm(&m.store));
        Ok(())
    })
    .unwrap();
    for w in norms.windows(2) {
        assert!(w[1] < w[0], "{norms:?}");
    }
}

#[test]
fn fixed_seed_runs_log_identically() {
    let (sessions, attributes) = crate::synth::toy_kg_corpus(2);
    let run = || {
        let (mut model, samples) = setup(&sessions, &attributes, small_config(8), 11);
        let config = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let log = train(&mut model, &samples, &config, |_, _| Ok(())).unwrap();
        let parts: Vec<_> = log.iter().map(EpochRecord::deterministic_part).collect();
        (parts, model.store.checksum())
    };
    assert_eq!(run(), run());
}

#[test]
fn training_set_loss_mostly_decreases_at_the_default_rate() {
    let (sessions, attributes) = crate::synth::toy_kg_corpus(5);
    let (mut model, samples) = setup(&sessions, &attributes, small_config(16), 5);
    let config = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let ce = RecLossKind::CrossEntropy;
    let mut losses = vec![mean_rec_loss(&model, &samples, ce).unwrap()];
    train(&mut model, &samples, &config, |_, m| {
        losses.push(mean_rec_loss(m, &samples, ce)?);
        Ok(())
    })
    .unwrap();
    let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down * 10 >= 9 * (losses.len() - 1), "{losses:?}");
}

#[test]
fn disabling_the_kg_phase_still_trains_the_recommender() {
    let (sessions, attributes) = crate::synth::toy_kg_corpus(6);
    let (mut model, samples) = setup(&sessions, &attributes, small_config(8), 6);
    let kg_before: Vec<Tensor> = model
        .kg_param_ids()
        .iter()
        .skip(1)
        .map(|&id| model.store.get(id).clone())
        .collect();
    let entity_before = model.store.get(model.transr.entity).clone();
    let config = TrainConfig {
        epochs: 2,
        kg_phase: false,
        ..TrainConfig::default()
    };
    let log = train(&mut model, &samples, &config, |_, _| Ok(())).unwrap();
    assert!(log.iter().all(|r| r.kg_loss.is_none() && r.rec_loss.is_finite()));
    assert!(log[0].to_tsv().split('\t').nth(1) == Some("NA"));
    // relation tables untouched, entity table trained
    let kg_after = model.kg_param_ids().into_iter().skip(1).map(|id| model.store.get(id));
    for (a, b) in kg_before.iter().zip(kg_after) {
        assert_eq!(a.data(), b.data());
    }
    assert!(model.store.get(model.transr.entity).max_abs_diff(&entity_before) > 0.0);
    assert!(model.store.iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
}

#[test]
fn epoch_record_formats() {
    let r = EpochRecord {
        epoch: 3,
        kg_loss: Some(0.5),
        rec_loss: 1.25,
        wall_seconds: 0.12345,
    };
    assert_eq!(r.to_tsv(), "3\t0.5\t1.25\t0.123");
    assert_eq!(EpochRecord::TSV_HEADER.split('\t').count(), r.to_tsv().split('\t').count());
}

fn end_to_end_check(kind: TimeEncoderKind, len: usize, seed: u64) -> gradcheck::GradCheckReport {
    let (sessions, attributes) = crate::synth::toy_kg_corpus(seed);
    let config = ModelConfig {
        time_encoder: kind,
        layers: 2,
        ..small_config(4)
    };
    let (model, _) = setup(&sessions, &attributes, config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = model.num_items();
    use rand::Rng;
    let sample = IndexedSample {
        items: (0..len).map(|_| rng.gen_range(0..m)).collect(),
        deltas: (0..len).map(|_| rng.gen_range(1.0..500.0)).collect(),
        target: rng.gen_range(0..m),
    };
    let pairs: Vec<KgPair> = model.graph.triplets()[..6]
        .iter()
        .map(|t| make_pair(t, &model.graph, &mut rng).unwrap())
        .collect();
    let mut store = model.store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    let lambda = 0.01;
    let ce = RecLossKind::CrossEntropy;
    gradcheck::check(
        &mut store,
        &ids,
        gradcheck::DEFAULT_STEP,
        |s| {
            let mut tape = Tape::new();
            let l = joint_objective(&mut tape, &model, s, &sample, &pairs, lambda, ce)?;
            Ok(tape.scalar_value(l))
        },
        |s| {
            let mut tape = Tape::new();
            let l = joint_objective(&mut tape, &model, s, &sample, &pairs, lambda, ce)?;
            tape.backward(l, s)
        },
    )
    .unwrap()
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let kinds = [TimeEncoderKind::Tbe, TimeEncoderKind::T2v, TimeEncoderKind::Mte, TimeEncoderKind::None];
    for seed in 0..8u64 {
        let len = 1 + seed as usize % 5;
        let r = end_to_end_check(kinds[seed as usize % 4], len, seed);
        assert!(r.max_rel_error <= 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn checkpoint_round_trip_restores_predictions() {
    let (mut model, samples) = setup(&three_sessions(), &AttributeMap::new(), small_config(8), 8);
    let config = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    train(&mut model, &samples, &config, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let clicks = [Click::new("a", 0), Click::new("b", 60)];
    let before = model.predict(&clicks, 120).unwrap();
    let (mut fresh, _) = setup(&three_sessions(), &AttributeMap::new(), small_config(8), 99);
    assert_ne!(fresh.predict(&clicks, 120).unwrap(), before);
    fresh.load(&path).unwrap();
    assert_eq!(fresh.predict(&clicks, 120).unwrap(), before);
    let total: f64 = before.iter().map(|(_, p)| p).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn prediction_rejects_unknown_items() {
    let (model, _) = setup(&three_sessions(), &AttributeMap::new(), small_config(8), 8);
    let err = model.predict(&[Click::new("zzz", 0)], 10).unwrap_err();
    assert!(matches!(err, KsttError::Lookup(_)));
    assert!(matches!(model.predict(&[], 10), Err(KsttError::Contract(_))));
}

