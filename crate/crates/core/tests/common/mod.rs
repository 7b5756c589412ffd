//! Shared test oracles: central finite differences and seeded random data.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gbn_core::tape::Tensor;

/// Evaluate a scalar function of a flat parameter vector; when `want_grad`
/// is set, also return the analytic gradient.
pub type LossFn<'a> = dyn FnMut(&[f64], bool) -> (f64, Option<Vec<f64>>) + 'a;

/// Central finite-difference check of the analytic gradient at `params`.
/// Panics with the offending coordinate on failure; returns the worst
/// relative error.
pub fn gradcheck(params: &[f64], tol: f64, f: &mut LossFn) -> f64 {
    let (_, grad) = f(params, true);
    let grad = grad.expect("analytic gradient");
    assert_eq!(grad.len(), params.len());
    let mut probe = params.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..params.len() {
        let h = 1e-6 * params[i].abs().max(1.0);
        probe[i] = params[i] + h;
        let (fp, _) = f(&probe, false);
        probe[i] = params[i] - h;
        let (fm, _) = f(&probe, false);
        probe[i] = params[i];
        let fd = (fp - fm) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / grad[i].abs().max(fd.abs()).max(1.0);
        assert!(
            rel <= tol,
            "gradient mismatch at coordinate {i}: analytic {} vs finite-difference {fd} (rel {rel:.3e})",
            grad[i]
        );
        worst = worst.max(rel);
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [lo, hi).
pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(rng, n, lo, hi))
}

pub fn rand_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

pub mod battery;
