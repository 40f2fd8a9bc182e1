mod common;

use mmdg::numerics::{
    adam_step, check_gradients, AdamState, BnMode, BnRunningStats, NumericsError, Tape, Tensor,
};
use proptest::prelude::*;

#[test]
fn every_op_matches_finite_differences_for_five_seeds() {
    for seed in 0..5 {
        for (name, report) in common::op_gradient_suite(seed, 1e-4) {
            assert!(report.passed, "seed {seed} op {name}: {report:?}");
            assert!(report.checked > 0, "seed {seed} op {name} checked nothing");
        }
    }
}

#[test]
fn tensor_shape_must_match_data() {
    assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    assert!(matches!(
        Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
        Err(NumericsError::Shape(_))
    ));
    let mut t = Tensor::<f32>::zeros(&[2, 2]);
    assert!(t.set_grad(vec![0.0; 3]).is_err());
    assert!(t.set_grad(vec![0.0; 4]).is_ok());
}

#[test]
fn fresh_tape_has_no_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 4.0]).unwrap());
    let y = tape.relu(x);
    assert!(tape.grad(x).is_none());
    assert!(tape.grad(y).is_none());
}

#[test]
fn gradients_reach_every_node_feeding_the_loss() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.2, -0.7]).unwrap());
    let b = tape.param(Tensor::matrix(3, 2, vec![1.0, 0.0, -1.0, 2.0, 0.5, 0.5]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    let r = tape.relu(c);
    let loss = tape.softmax_cross_entropy(r, &[0, 1]).unwrap();
    tape.backward(loss).unwrap();
    for v in [a, b, c, r] {
        assert!(tape.grad(v).is_some());
    }
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
    assert!(matches!(tape.backward(x), Err(NumericsError::Shape(_))));
}

#[test]
fn out_of_range_label_is_an_index_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    assert!(matches!(
        tape.softmax_cross_entropy(x, &[3]),
        Err(NumericsError::Index(_))
    ));
}

#[test]
fn saturated_correct_prediction_costs_nothing() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::matrix(1, 3, vec![0.0, 1e4, 0.0]).unwrap());
    let l = tape.softmax_cross_entropy(x, &[1]).unwrap();
    assert!(tape.value(l).item().abs() < 1e-12);
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let l = tape.softmax_cross_entropy(x, &[2]).unwrap();
    let oracle = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
    assert!((tape.value(l).item() - oracle).abs() < 1e-12);
    assert!((oracle - 0.4076).abs() < 1e-4);
}

#[test]
fn batchnorm_gradients_for_an_eight_by_four_batch() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
    let x = common::uniform(&mut rng, 8, 4);
    let g = common::uniform(&mut rng, 1, 4).reshape(vec![4]).unwrap();
    let b = common::uniform(&mut rng, 1, 4).reshape(vec![4]).unwrap();
    let stats = BnRunningStats::new(4);
    let report = check_gradients(
        |t, v| {
            let (y, _) = t.batchnorm(v[0], v[1], v[2], &stats, BnMode::Train)?;
            common::readout(t, y)
        },
        &[x, g, b],
        1e-4,
    );
    assert!(report.passed, "{report:?}");
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(-1.0f32..1.0, rows * cols)
        .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn conforming_triple() -> impl Strategy<Value = (Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    (1usize..7, 1usize..7, 1usize..7, 1usize..7)
        .prop_flat_map(|(n, k, m, p)| (matrix(n, k), matrix(k, m), matrix(m, p)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative((a, b, c) in conforming_triple()) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-4);
    }

    #[test]
    fn batchnorm_train_output_is_standardized(
        rows in 2usize..12,
        data in prop::collection::vec(-1.0f64..1.0, 12 * 3),
    ) {
        let data = data[..rows * 3].to_vec();
        let x = Tensor::matrix(rows, 3, data).unwrap();
        // Columns with almost no spread are dominated by ε and excluded.
        for j in 0..3 {
            let col: Vec<f64> = (0..rows).map(|i| x.at(i, j)).collect();
            let mean = col.iter().sum::<f64>() / rows as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
            prop_assume!(var > 1e-2);
        }
        let mut tape = Tape::new();
        let xv = tape.param(x);
        let g = tape.param(Tensor::vector(vec![1.0; 3]));
        let b = tape.param(Tensor::vector(vec![0.0; 3]));
        let (y, _) = tape.batchnorm(xv, g, b, &BnRunningStats::new(3), BnMode::Train).unwrap();
        let y = tape.value(y);
        for j in 0..3 {
            let col: Vec<f64> = (0..rows).map(|i| y.at(i, j)).collect();
            let mean = col.iter().sum::<f64>() / rows as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn cross_entropy_is_non_negative(
        logits in prop::collection::vec(-50.0f64..50.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
    ) {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(3, 4, logits).unwrap());
        let l = tape.softmax_cross_entropy(x, &labels).unwrap();
        prop_assert!(tape.value(l).item() >= 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_c(c in 2usize..50, v in -10.0f64..10.0, label in 0usize..50) {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(1, c, vec![v; c]).unwrap());
        let l = tape.softmax_cross_entropy(x, &[label % c]).unwrap();
        prop_assert!((tape.value(l).item() - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_scale_invariant(
        u in prop::collection::vec(-1.0f64..1.0, 5),
        v in prop::collection::vec(-1.0f64..1.0, 5),
        alpha in 1e-3f64..1e3,
        beta in 1e-3f64..1e3,
    ) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let cos = |a: Vec<f64>, b: Vec<f64>| {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::vector(a));
            let b = tape.constant(Tensor::vector(b));
            let s = tape.cosine(a, b).unwrap();
            tape.value(s).item()
        };
        let base = cos(u.clone(), v.clone());
        let scaled = cos(u.iter().map(|x| x * alpha).collect(), v.iter().map(|x| x * beta).collect());
        prop_assert!((base - scaled).abs() < 1e-6);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn adam_step_counter_advances_by_one(grads in prop::collection::vec(-1.0f64..1.0, 1..20)) {
        let mut w = Tensor::vector(vec![0.0; grads.len()]);
        let mut state = AdamState::new(&[grads.len()]);
        prop_assert_eq!(state.step(), 0);
        for k in 1..=3u64 {
            w.set_grad(grads.clone()).unwrap();
            adam_step(&mut [("w".to_string(), &mut w)], &mut state, 0.1).unwrap();
            prop_assert_eq!(state.step(), k);
        }
        prop_assert!(w.is_finite());
    }

    #[test]
    fn forward_and_backward_stay_finite(x in prop::collection::vec(-1e3f64..1e3, 8)) {
        let mut tape = Tape::new();
        let xv = tape.param(Tensor::matrix(4, 2, x).unwrap());
        let g = tape.param(Tensor::vector(vec![1.0, 1.0]));
        let b = tape.param(Tensor::vector(vec![0.0, 0.0]));
        let r = tape.relu(xv);
        let (y, _) = tape.batchnorm(r, g, b, &BnRunningStats::new(2), BnMode::Train).unwrap();
        let l = tape.softmax_cross_entropy(y, &[0, 1, 0, 1]).unwrap();
        tape.backward(l).unwrap();
        prop_assert!(tape.value(l).is_finite());
        for v in [xv, g, b] {
            prop_assert!(tape.grad(v).unwrap().iter().all(|g| g.is_finite()));
        }
    }
}
