mod common;

use common::{fd_check, naive_matmul, naive_softmax, rng, rows, uniform};
use gatefuse::tensor::PoolMode;
use gatefuse::{Error, Tape, Tensor, Var};
use proptest::prelude::*;

const TOL: f64 = 1e-5;

/// Reduces `v` to a scalar through fixed pseudo-random weights so every
/// output coordinate carries a distinct upstream gradient.
fn project<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> gatefuse::Result<Var<'t>> {
    let w = uniform(&mut rng(seed), &v.shape(), -1.0, 1.0);
    v.mul(&tape.constant(w))?.sum()
}

fn assert_fd(name: &str, inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> gatefuse::Result<Var<'t>>) {
    let err = fd_check(inputs, f);
    assert!(err < TOL, "{name}: relative error {err:e}");
}

#[test]
fn gradients_of_products() {
    let mut r = rng(1);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[4, 5], -1.0, 1.0);
    assert_fd("matmul", &[a.clone(), b.clone()], |t, x| project(t, x[0].matmul(&x[1])?, 9));

    let a3 = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    assert_fd("matmul rank3", &[a3.clone(), b.clone()], |t, x| project(t, x[0].matmul(&x[1])?, 10));

    let b3 = uniform(&mut r, &[2, 4, 3], -1.0, 1.0);
    assert_fd("bmm", &[a3.clone(), b3], |t, x| project(t, x[0].bmm(&x[1])?, 11));

    let c3 = uniform(&mut r, &[2, 5, 4], -1.0, 1.0);
    assert_fd("bmm_nt", &[a3.clone(), c3], |t, x| project(t, x[0].bmm_nt(&x[1])?, 12));
    assert_fd("transpose", &[a3], |t, x| project(t, x[0].transpose()?, 13));
}

#[test]
fn gradients_of_elementwise_ops() {
    let mut r = rng(2);
    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let bias = uniform(&mut r, &[4], -1.0, 1.0);
    let col = uniform(&mut r, &[3, 1], -1.0, 1.0);
    let s = Tensor::scalar(0.7);
    assert_fd("add", &[a.clone(), b.clone()], |t, x| project(t, x[0].add(&x[1])?, 1));
    assert_fd("sub", &[a.clone(), b.clone()], |t, x| project(t, x[0].sub(&x[1])?, 2));
    assert_fd("mul", &[a.clone(), b.clone()], |t, x| project(t, x[0].mul(&x[1])?, 3));
    assert_fd("add_row", &[a.clone(), bias], |t, x| project(t, x[0].add_row(&x[1])?, 4));
    assert_fd("mul_col", &[a.clone(), col], |t, x| project(t, x[0].mul_col(&x[1])?, 5));
    assert_fd("scale", &[a.clone()], |t, x| project(t, x[0].scale(-1.7)?, 6));
    assert_fd("div_scalar", &[a.clone(), s], |t, x| project(t, x[0].div_scalar(&x[1])?, 7));
    assert_fd("sigmoid", &[a.clone()], |t, x| project(t, x[0].sigmoid()?, 8));
    assert_fd("sum", &[a.clone()], |_, x| x[0].sum());
    assert_fd("mean", &[a], |_, x| x[0].mean());

    // Keep relu inputs away from the kink.
    let away = Tensor::new(vec![2, 3], vec![-1.5, 0.3, 2.0, -0.2, 0.9, -0.7]).unwrap();
    assert_fd("relu", &[away], |t, x| project(t, x[0].relu()?, 9));
}

#[test]
fn gradients_of_normalizations() {
    let mut r = rng(3);
    let a = uniform(&mut r, &[2, 3, 5], -2.0, 2.0);
    assert_fd("softmax_rows", &[a.clone()], |t, x| project(t, x[0].softmax_rows()?, 1));
    assert_fd("layer_norm", &[a.clone()], |t, x| project(t, x[0].layer_norm()?, 2));
    assert_fd("l2_normalize_rows", &[a], |t, x| project(t, x[0].l2_normalize_rows()?, 3));
    let logits = uniform(&mut r, &[4, 3], -3.0, 3.0);
    assert_fd("cross_entropy", &[logits], |_, x| x[0].cross_entropy(&[0, 2, 1, 2]));
}

#[test]
fn gradients_of_structural_ops() {
    let mut r = rng(4);
    let a = uniform(&mut r, &[2, 6, 4], -1.0, 1.0);
    assert_fd("row_pool mean", &[a.clone()], |t, x| {
        project(t, x[0].row_pool(&[(0, 3), (3, 3), (1, 2)], PoolMode::Mean)?, 1)
    });
    assert_fd("row_pool max", &[a.clone()], |t, x| {
        project(t, x[0].row_pool(&[(0, 3), (2, 4)], PoolMode::Max)?, 2)
    });
    let b = uniform(&mut r, &[2, 6, 3], -1.0, 1.0);
    assert_fd("concat_cols", &[a.clone(), b], |t, x| project(t, Var::concat_cols(&[x[0], x[1]])?, 3));
    assert_fd("slice_cols", &[a.clone()], |t, x| project(t, x[0].slice_cols(1, 2)?, 4));
    assert_fd("reshape", &[a], |t, x| project(t, x[0].reshape(&[12, 4])?, 5));

    let m = uniform(&mut r, &[3, 4], -1.0, 1.0);
    assert_fd("broadcast_batch", &[m.clone()], |t, x| project(t, x[0].broadcast_batch(3)?, 6));
    assert_fd("gather_cols", &[m.clone()], |t, x| project(t, x[0].gather_cols(&[3, 0, 1, 1, 2, 3], 2)?, 7));
    assert_fd("gather_rows", &[m.clone()], |t, x| project(t, x[0].gather_rows(&[2, 0, 2])?, 8));
    assert_fd("scatter_rows", &[m.clone()], |t, x| project(t, x[0].scatter_rows(&[4, 1, 4], 5)?, 9));
    assert_fd("gather_entries", &[m], |t, x| project(t, x[0].gather_entries(&[(0, 1), (2, 3), (0, 1)])?, 10));
}

#[test]
fn reused_values_accumulate_gradients() {
    let mut r = rng(5);
    let a = uniform(&mut r, &[3, 3], -1.0, 1.0);
    assert_fd("x·x + x", &[a], |t, x| project(t, x[0].matmul(&x[0])?.add(&x[0])?, 1));
}

#[test]
fn forward_values_match_naive_loops() {
    let mut r = rng(6);
    for _ in 0..20 {
        let a = uniform(&mut r, &[4, 6], -3.0, 3.0);
        let b = uniform(&mut r, &[6, 5], -3.0, 3.0);
        let tape = Tape::new();
        let out = tape.constant(a.clone()).matmul(&tape.constant(b.clone())).unwrap().value();
        let expect: Vec<f64> = naive_matmul(&rows(&a), &rows(&b)).concat();
        assert!(common::max_abs(out.data(), &expect) <= 1e-12);

        let sm = tape.constant(a.clone()).softmax_rows().unwrap().value();
        let expect: Vec<f64> = rows(&a).iter().flat_map(|row| naive_softmax(row)).collect();
        assert!(common::max_abs(sm.data(), &expect) <= 1e-15);
    }
}

#[test]
fn backward_needs_a_scalar() {
    let tape = Tape::new();
    let v = tape.input(Tensor::zeros(&[2, 2]));
    assert!(matches!(v.backward(), Err(Error::Contract(_))));
}

#[test]
fn shape_mismatch_is_reported() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    assert!(matches!(a.add(&tape.constant(Tensor::zeros(&[3, 2]))), Err(Error::Dimension { .. })));
}

#[test]
fn non_finite_forward_values_are_errors() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::full(&[1, 2], 1.0));
    let zero = tape.constant(Tensor::scalar(0.0));
    assert!(matches!(a.div_scalar(&zero), Err(Error::NonFinite { .. })));
}

fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 2..9)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in row_strategy()) {
        let tape = Tape::new();
        let t = Tensor::new(vec![1, row.len()], row).unwrap();
        let s = tape.constant(t).softmax_rows().unwrap().value();
        prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn softmax_is_shift_invariant(row in row_strategy(), c in -100.0f64..100.0) {
        let tape = Tape::new();
        let n = row.len();
        let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
        let a = tape.constant(Tensor::new(vec![1, n], row).unwrap()).softmax_rows().unwrap().value();
        let b = tape.constant(Tensor::new(vec![1, n], shifted).unwrap()).softmax_rows().unwrap().value();
        prop_assert!(common::max_abs(a.data(), b.data()) < 1e-12);
    }

    #[test]
    fn softmax_is_permutation_equivariant(row in row_strategy(), rot in 0usize..8) {
        let tape = Tape::new();
        let n = row.len();
        let mut perm = row.clone();
        perm.rotate_left(rot % n);
        let a = tape.constant(Tensor::new(vec![1, n], row).unwrap()).softmax_rows().unwrap().value();
        let b = tape.constant(Tensor::new(vec![1, n], perm).unwrap()).softmax_rows().unwrap().value();
        let mut a_rot = a.data().to_vec();
        a_rot.rotate_left(rot % n);
        prop_assert!(common::max_abs(&a_rot, b.data()) < 1e-15);
    }

    #[test]
    fn sigmoid_stays_in_open_interval(x in -700.0f64..700.0) {
        let tape = Tape::new();
        let s = tape.constant(Tensor::scalar(x)).sigmoid().unwrap().item();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!(s.is_finite());
    }

    #[test]
    fn l2_rows_have_unit_norm(row in prop::collection::vec(-10.0f64..10.0, 1..8)) {
        prop_assume!(row.iter().any(|v| v.abs() > 1e-3));
        let tape = Tape::new();
        let n = row.len();
        let u = tape.constant(Tensor::new(vec![1, n], row).unwrap()).l2_normalize_rows().unwrap().value();
        let norm: f64 = u.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_non_negative(row in row_strategy(), pick in 0usize..8) {
        let tape = Tape::new();
        let n = row.len();
        let ce = tape.constant(Tensor::new(vec![1, n], row).unwrap()).cross_entropy(&[pick % n]).unwrap().item();
        prop_assert!(ce >= 0.0);
    }
}
