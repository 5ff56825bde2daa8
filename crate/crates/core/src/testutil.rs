//! Shared helpers for unit tests: seeded data and finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::tensor::{no_grad, Buffer, Tensor};

pub(crate) fn assert_close(a: f64, b: f64, tol: f64) {
    assert!(
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs())),
        "{a} vs {b} (tol {tol})"
    );
}

pub(crate) fn seeded_vec_f32(seed: u64, len: usize) -> Vec<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

pub(crate) fn seeded_vec_f64(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0f64..1.0)).collect()
}

/// Central finite differences of a scalar-valued function at the current
/// value of `x` (float64 leaf). Perturbs the tensor in place and restores it.
pub(crate) fn numerical_grad(x: &Tensor, f: &impl Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let h = 1e-5;
    let n = x.numel();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let orig = read_f64(x, i);
        write_f64(x, i, orig + h);
        let plus = no_grad(|| f(x).item_f64().unwrap());
        write_f64(x, i, orig - h);
        let minus = no_grad(|| f(x).item_f64().unwrap());
        write_f64(x, i, orig);
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

fn read_f64(t: &Tensor, i: usize) -> f64 {
    t.with_data(|b| match b {
        Buffer::F64(v) => v[i],
        Buffer::F32(_) => panic!("numerical_grad requires float64 tensors"),
    })
}

fn write_f64(t: &Tensor, i: usize, value: f64) {
    t.with_data_mut(|b| match b {
        Buffer::F64(v) => v[i] = value,
        Buffer::F32(_) => panic!("numerical_grad requires float64 tensors"),
    });
}
