//! Benchmark helpers: seeded tensors and model inputs shared by the
//! criterion targets.

use kwm_core::rng::{rng_from_seed, uniform_in};
use kwm_core::ssm::SelectiveInputs;
use kwm_core::tensor::Tensor;

pub fn seeded_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| uniform_in(&mut rng, -1.0, 1.0)).collect(),
    )
    .unwrap()
}

/// Scan inputs at the shapes the keyword models use (positive step sizes,
/// contractive state matrix).
pub fn scan_inputs(bsz: usize, l: usize, e: usize, n: usize, seed: u64) -> (SelectiveInputs, Tensor) {
    let mut rng = rng_from_seed(seed);
    let mut fill = |count: usize, lo: f32, hi: f32| -> Vec<f32> {
        (0..count).map(|_| uniform_in(&mut rng, lo, hi)).collect()
    };
    let inputs = SelectiveInputs {
        delta: Tensor::from_vec(&[bsz, l, e], fill(bsz * l * e, 0.01, 0.3)).unwrap(),
        b_in: Tensor::from_vec(&[bsz, l, n], fill(bsz * l * n, -1.0, 1.0)).unwrap(),
        c_in: Tensor::from_vec(&[bsz, l, n], fill(bsz * l * n, -1.0, 1.0)).unwrap(),
        x: Tensor::from_vec(&[bsz, l, e], fill(bsz * l * e, -1.0, 1.0)).unwrap(),
        d_skip: Tensor::from_vec(&[e], fill(e, -1.0, 1.0)).unwrap(),
    };
    let a = Tensor::from_vec(&[e, n], fill(e * n, -2.0, -0.1)).unwrap();
    (inputs, a)
}
