//! Unit tests for the reverse-mode tape: hand-computed values and
//! gradients, error paths, and the accumulation contract.

mod common;

use common::{rand_tensor, rng};

use gbn_core::error::Error;
use gbn_core::tape::{Tape, Tensor};

#[test]
fn matmul_matches_hand_computation() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
    let b = tape.leaf(&Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]), false);
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 2]);
    assert_eq!(tape.data(c), &[4.0, 5.0, 10.0, 11.0]);
}

#[test]
fn matmul_shape_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(vec![2, 3]), false);
    let b = tape.leaf(&Tensor::zeros(vec![2, 2]), false);
    assert!(matches!(tape.matmul(a, b), Err(Error::DimMismatch { .. })));
}

#[test]
fn backward_on_non_scalar_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(vec![2, 2]), true);
    let b = tape.relu(a);
    assert!(matches!(tape.backward(b), Err(Error::NonScalarLoss { .. })));
}

#[test]
fn repeated_backward_accumulates_leaf_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![2], vec![3.0, -1.0]), true);
    let s = tape.square(x);
    let loss = tape.sum_all(s);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0, -2.0]);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[12.0, -4.0]);
    tape.clear_grads();
    assert!(tape.grad(x).is_none());
}

#[test]
fn no_grad_leaf_receives_nothing() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]), false);
    let y = tape.leaf(&Tensor::new(vec![2], vec![3.0, 4.0]), true);
    let p = tape.mul(x, y).unwrap();
    let loss = tape.sum_all(p);
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).is_none());
    assert_eq!(tape.grad(y).unwrap(), &[1.0, 2.0]);
}

#[test]
fn relu_kills_negative_values_and_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![3], vec![-2.0, 0.0, 5.0]), true);
    let h = tape.relu(x);
    assert_eq!(tape.data(h), &[0.0, 0.0, 5.0]);
    let loss = tape.sum_all(h);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn maxpool_picks_the_max_and_routes_the_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(
        &Tensor::new(
            vec![1, 1, 2, 4],
            vec![1.0, 2.0, 3.0, 4.0, 8.0, 7.0, 6.0, 5.0],
        ),
        true,
    );
    let p = tape.maxpool2(x).unwrap();
    assert_eq!(tape.shape(p), &[1, 1, 1, 2]);
    assert_eq!(tape.data(p), &[8.0, 6.0]);
    let loss = tape.sum_all(p);
    tape.backward(loss).unwrap();
    assert_eq!(
        tape.grad(x).unwrap(),
        &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]
    );
}

#[test]
fn reshape_is_a_view_with_identity_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
    let r = tape.reshape(x, vec![3, 2]).unwrap();
    assert_eq!(tape.data(r), tape.value(x).data());
    assert!(tape.reshape(x, vec![4, 2]).is_err());
    let s = tape.square(r);
    let loss = tape.sum_all(s);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
}

#[test]
fn softmax_rows_lie_on_the_simplex() {
    let mut r = rng(0);
    let mut tape = Tape::new();
    let x = rand_tensor(&mut r, vec![4, 7], -30.0, 30.0);
    let xv = tape.leaf(&x, false);
    let s = tape.softmax_rows(xv).unwrap();
    let d = tape.data(s);
    for row in d.chunks(7) {
        assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_matches_log_probabilities() {
    let mut tape = Tape::new();
    let logits = tape.leaf(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]), false);
    let labels = [2usize, 0];
    let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
    let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
    let expected = (-((3.0f64).exp() / z).ln() + -(1.0f64 / 3.0).ln()) / 2.0;
    assert!((tape.data(loss)[0] - expected).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_bad_labels() {
    let mut tape = Tape::new();
    let logits = tape.leaf(&Tensor::zeros(vec![2, 3]), false);
    assert!(matches!(
        tape.softmax_cross_entropy(logits, &[0, 3]),
        Err(Error::LabelOutOfRange { label: 3, classes: 3 })
    ));
    assert!(tape.softmax_cross_entropy(logits, &[0]).is_err());
}

#[test]
fn detach_blocks_the_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![2], vec![2.0, 3.0]), true);
    let d = tape.detach(x);
    assert_eq!(tape.data(d), &[2.0, 3.0]);
    let s = tape.square(d);
    let loss = tape.sum_all(s);
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).is_none());
}

#[test]
fn gather_rows_selects_per_sample_options() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
    let b = tape.leaf(&Tensor::new(vec![2, 2], vec![10.0, 20.0, 30.0, 40.0]), true);
    let g = tape.gather_rows(&[a, b], &[1, 0]).unwrap();
    assert_eq!(tape.data(g), &[10.0, 20.0, 3.0, 4.0]);
    let loss = tape.sum_all(g);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
    assert!(tape.gather_rows(&[a, b], &[2, 0]).is_err());
}

#[test]
fn select_col_and_mul_rows_compose() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
    let w = tape.select_col(x, 1).unwrap();
    assert_eq!(tape.data(w), &[2.0, 5.0]);
    let y = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]), false);
    let scaled = tape.mul_rows(y, w).unwrap();
    assert_eq!(tape.data(scaled), &[2.0, 2.0, 5.0, 5.0]);
    let loss = tape.sum_all(scaled);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 2.0, 0.0, 0.0, 2.0, 0.0]);
}

#[test]
fn conv2d_matches_a_hand_example() {
    let mut tape = Tape::new();
    // 3x3 input, 2x2 kernel of ones: each output is the patch sum
    let x = tape.leaf(
        &Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()),
        false,
    );
    let k = tape.leaf(&Tensor::filled(vec![1, 1, 2, 2], 1.0), false);
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert_eq!(tape.data(y), &[12.0, 16.0, 24.0, 28.0]);

    let y = tape.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert_eq!(tape.data(y), &[1.0, 5.0, 11.0, 28.0]);
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(vec![1, 2, 4, 4]), false);
    let k = tape.leaf(&Tensor::zeros(vec![1, 3, 3, 3]), false);
    assert!(matches!(tape.conv2d(x, k, 1, 0), Err(Error::DimMismatch { .. })));
}

#[test]
fn scale_add_sub_chain() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]), true);
    let b = tape.leaf(&Tensor::new(vec![2], vec![5.0, 7.0]), true);
    let s = tape.scale(a, 3.0);
    let t = tape.sub(b, s).unwrap();
    assert_eq!(tape.data(t), &[2.0, 1.0]);
    let u = tape.add(t, a).unwrap();
    let loss = tape.sum_all(u);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[-2.0, -2.0]);
    assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);
}

#[test]
fn mean_all_and_sum_all_agree() {
    let mut r = rng(5);
    let x = rand_tensor(&mut r, vec![3, 4], -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x, false);
    let s = tape.sum_all(xv);
    let m = tape.mean_all(xv);
    assert!((tape.data(s)[0] / 12.0 - tape.data(m)[0]).abs() < 1e-15);
}
