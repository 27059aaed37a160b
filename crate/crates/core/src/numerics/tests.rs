use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck;
use super::*;
use crate::error::KsttError;

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_selection() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(2));
    let m = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = tape.matmul(i, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t2(&[&[1.0, 0.0]]));
    let b = tape.constant(t2(&[&[2.0], &[3.0]]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 1]);
    assert_eq!(tape.value(out).item(), 2.0);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, KsttError::Dimension { .. }));
    assert!(
        msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2,
        "{msg}"
    );
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    store
        .register("a", Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng))
        .unwrap();
    store
        .register("b", Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng))
        .unwrap();
    let report = gradcheck::check_scalar(&mut store, &|tape, s, ids| {
        let a = tape.param(s, ids[0]);
        let b = tape.param(s, ids[1]);
        let c = tape.matmul(a, b)?;
        Ok(tape.sum(c))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

fn softmax_values(x: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(x.to_vec()));
    let s = tape.softmax(v).unwrap();
    tape.value(s).data().to_vec()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_values(&[0.0, 0.0]), vec![0.5, 0.5]);
    for v in softmax_values(&[1000.0, 1000.0, 1000.0]) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    // brute force e^x / Σ e^x
    let xs = [1.0f64, 2.0, 3.0];
    let z: f64 = xs.iter().map(|x| x.exp()).sum();
    for (got, x) in softmax_values(&xs).iter().zip(xs) {
        assert!((got - x.exp() / z).abs() < 1e-15);
    }
}

#[test]
fn empty_vector_is_a_dimension_error() {
    assert!(matches!(
        Tensor::new(vec![0], vec![]),
        Err(KsttError::Dimension { .. })
    ));
}

#[test]
fn softmax_rejects_non_finite() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(vec![0.0, f64::NAN]));
    assert!(tape.softmax(v).is_err());
}

#[test]
fn leaky_relu_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = tape.leaky_relu(x, 0.01);
    assert_eq!(tape.value(y).data(), &[-0.01, 0.0, 2.0]);
    let p = tape.constant(Tensor::vector(vec![0.5, 3.0, 7.0]));
    let q = tape.leaky_relu(p, 0.3);
    assert_eq!(tape.value(q).data(), &[0.5, 3.0, 7.0]);
}

#[test]
fn leaky_relu_gradient_on_negative_side() {
    let mut store = ParamStore::new();
    let id = store.register("x", Tensor::vector(vec![-3.0])).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let y = tape.leaky_relu(x, 0.2);
    let l = tape.sum(y);
    tape.backward(l, &mut store).unwrap();
    let analytic = store.get(id).grad.as_ref().unwrap()[0];
    let numeric = gradcheck::numeric_partial(&mut store, id, 0, 1e-5, &mut |s: &ParamStore| {
        let mut t = Tape::new();
        let x = t.param(s, id);
        let y = t.leaky_relu(x, 0.2);
        let l = t.sum(y);
        Ok(t.scalar_value(l))
    })
    .unwrap();
    assert!((analytic - 0.2).abs() < 1e-15);
    assert!((numeric - 0.2).abs() < 1e-9);
}

#[test]
fn row_l2_normalize_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[&[3.0, 4.0], &[0.0, 0.0]]));
    let y = tape.row_l2_normalize(x, NORM_EPS);
    let v = tape.value(y).data();
    assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    assert_eq!(&v[2..], &[0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = tape.constant(Tensor::uniform(&[4, 8], -2.0, 2.0, &mut rng));
    let n = tape.row_l2_normalize(r, NORM_EPS);
    for i in 0..4 {
        let norm: f64 = tape
            .value(n)
            .row(i)
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn backward_basics() {
    let mut store = ParamStore::new();
    let x = store
        .register("x", Tensor::vector(vec![0.3, -1.0, 2.0]))
        .unwrap();
    let mut tape = Tape::new();
    let v = tape.param(&store, x);
    let l = tape.sum(v);
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.get(x).grad.as_deref(), Some(&[1.0, 1.0, 1.0][..]));
    // second call without reset accumulates
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.get(x).grad.as_deref(), Some(&[2.0, 2.0, 2.0][..]));

    let mut store = ParamStore::new();
    let x = store.register("x", Tensor::scalar(3.0)).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(&store, x);
    let sq = tape.mul(v, v).unwrap();
    tape.backward(sq, &mut store).unwrap();
    assert_eq!(store.get(x).grad.as_deref(), Some(&[6.0][..]));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut store = ParamStore::new();
    let x = store.register("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(&store, x);
    assert!(matches!(
        tape.backward(v, &mut store),
        Err(KsttError::Contract(_))
    ));
}

#[test]
fn duplicate_registration_is_rejected() {
    let mut store = ParamStore::new();
    store.register("w", Tensor::scalar(1.0)).unwrap();
    assert!(store.register("w", Tensor::scalar(1.0)).is_err());
}

fn quadratic_step(store: &mut ParamStore, id: ParamId, target: f64) {
    let mut tape = Tape::new();
    let x = tape.param(store, id);
    let d = tape.add_scalar(x, -target);
    let l = tape.sum_squares(d);
    tape.backward(l, store).unwrap();
}

#[test]
fn adam_descends_and_converges() {
    let mut store = ParamStore::new();
    let id = store.register("x", Tensor::scalar(1.0)).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    quadratic_step(&mut store, id, 0.0);
    adam.step(&mut store, &[id]).unwrap();
    assert!(store.get(id).item() < 1.0);
    assert!(store.get(id).grad.is_none());
    assert_eq!(adam.step_count(id), 1);

    let mut store = ParamStore::new();
    let id = store.register("x", Tensor::scalar(0.0)).unwrap();
    let mut adam = Adam::new(AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    });
    for _ in 0..500 {
        quadratic_step(&mut store, id, 2.0);
        adam.step(&mut store, &[id]).unwrap();
    }
    assert!(
        (store.get(id).item() - 2.0).abs() < 1e-2,
        "{}",
        store.get(id).item()
    );
}

#[test]
fn adam_zero_gradient_is_a_fixed_point() {
    let mut store = ParamStore::new();
    let id = store
        .register("x", Tensor::vector(vec![0.7, -0.2]))
        .unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..10 {
        store.get_mut(id).accumulate_grad(&[0.0, 0.0]);
        adam.step(&mut store, &[id]).unwrap();
    }
    assert_eq!(store.get(id).data(), &[0.7, -0.2]);
}

#[test]
fn adam_missing_gradient_names_the_parameter() {
    let mut store = ParamStore::new();
    let a = store.register("alpha", Tensor::scalar(1.0)).unwrap();
    let b = store.register("beta", Tensor::scalar(1.0)).unwrap();
    store.get_mut(a).accumulate_grad(&[1.0]);
    let err = Adam::new(AdamConfig::default())
        .step(&mut store, &[a, b])
        .unwrap_err();
    assert!(err.to_string().contains("beta"), "{err}");
    // nothing was applied
    assert_eq!(store.get(a).item(), 1.0);
}

#[test]
fn clipping_bounds_global_norm() {
    let mut store = ParamStore::new();
    let a = store.register("a", Tensor::vector(vec![0.0, 0.0])).unwrap();
    store.get_mut(a).accumulate_grad(&[30.0, 40.0]);
    let before = clip_grad_norm(&mut store, &[a], 5.0);
    assert!((before - 50.0).abs() < 1e-12);
    let g = store.get(a).grad.clone().unwrap();
    assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
}

#[test]
fn checkpoint_layout_and_errors() {
    let mut store = ParamStore::new();
    store
        .register("w", t2(&[&[1.0, 2.0], &[3.0, 4.0]]))
        .unwrap();
    let bytes = checkpoint::encode(&store);
    assert_eq!(&bytes[..4], b"KSTT");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    assert_eq!(&bytes[12..13], b"w");
    assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 2);
    assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 2);
    assert_eq!(f64::from_le_bytes(bytes[33..41].try_into().unwrap()), 1.0);
    assert_eq!(bytes.len(), 33 + 4 * 8);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::decode(&bad).is_err());
    assert!(checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());

    let mut other = ParamStore::new();
    other.register("w", Tensor::zeros(&[2, 3])).unwrap();
    assert!(other
        .load_values(checkpoint::decode(&bytes).unwrap())
        .is_err());
}

/// Every differentiable tape op, checked against central differences over
/// 20 seeds.
#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..20u64 {
        for (name, report) in gradcheck::op_suite(seed).unwrap() {
            assert!(report.max_rel_error <= 1e-4, "{name} seed {seed}: {report:?}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_permutation_equivariant(
        xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
        seed in any::<u64>(),
    ) {
        let y = softmax_values(&xs);
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(y.iter().all(|&v| v > 0.0));
        let mut perm: Vec<usize> = (0..xs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let px: Vec<f64> = perm.iter().map(|&i| xs[i]).collect();
        let py = softmax_values(&px);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((py[k] - y[i]).abs() <= 1e-15);
        }
    }

    #[test]
    fn row_l2_normalize_is_idempotent(
        rows in 1usize..5, cols in 1usize..6,
        vals in proptest::collection::vec(-10.0f64..10.0, 30),
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(rows, cols, vals[..rows * cols].to_vec()).unwrap());
        let once = tape.row_l2_normalize(x, NORM_EPS);
        let twice = tape.row_l2_normalize(once, NORM_EPS);
        prop_assert!(tape.value(once).max_abs_diff(tape.value(twice)) <= 1e-12);
    }

    #[test]
    fn checkpoint_round_trips(
        shapes in proptest::collection::vec((1usize..4, 1usize..4), 1..4),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, (r, c)) in shapes.iter().enumerate() {
            store.register(format!("t{i}.w"), Tensor::uniform(&[*r, *c], -1e3, 1e3, &mut rng)).unwrap();
        }
        let decoded = checkpoint::decode(&checkpoint::encode(&store)).unwrap();
        let mut copy = store.clone();
        copy.get_mut(ParamId(0)).data_mut()[0] = f64::NAN;
        copy.load_values(decoded).unwrap();
        prop_assert_eq!(copy.checksum(), store.checksum());
    }
}
