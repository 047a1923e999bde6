//! Central finite-difference oracles for verifying analytic gradients.
//!
//! These helpers live in the library (not behind `cfg(test)`) so that
//! integration tests and the acceptance suite can reuse them; nothing in the
//! forward or backward paths depends on them.

use crate::tensor::Parameter;

/// Central finite differences of a scalar function at `x`.
pub fn finite_diff(x: &[f32], step: f32, mut f: impl FnMut(&[f32]) -> f32) -> Vec<f32> {
    let mut grad = vec![0.0f32; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Central finite differences w.r.t. a parameter's elements. The closure is
/// evaluated with the parameter temporarily perturbed in place; the original
/// value is restored before returning.
pub fn finite_diff_param(param: &Parameter, step: f32, mut f: impl FnMut() -> f32) -> Vec<f32> {
    let original = param.value();
    let shape = original.shape().to_vec();
    let base = original.data().to_vec();
    let mut grad = vec![0.0f32; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + step;
        param.set_value(crate::tensor::Tensor::from_vec(&shape, probe.clone()).unwrap());
        let up = f();
        probe[i] = base[i] - step;
        param.set_value(crate::tensor::Tensor::from_vec(&shape, probe.clone()).unwrap());
        let down = f();
        probe[i] = base[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    param.set_value(original);
    grad
}

/// Largest elementwise relative error between two gradient vectors.
///
/// The denominator is floored at 1 so that near-zero entries are compared
/// absolutely; finite differences in f32 carry about 1e-4 of absolute noise,
/// which would otherwise swamp the ratio.
pub fn max_rel_err(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f32;
    for (&x, &y) in a.iter().zip(b) {
        let denom = x.abs().max(y.abs()).max(1.0);
        let rel = (x - y).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
