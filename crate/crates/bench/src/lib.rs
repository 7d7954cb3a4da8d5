//! Shared inputs for the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use audiomamba::scan::{ScanParams, ScanTerms};
use audiomamba::Tensor;

/// Scan terms for a random `[len, dim]` input with `state` states.
pub fn scan_terms(len: usize, dim: usize, state: usize, seed: u64) -> ScanTerms<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ScanParams::<f32>::init(dim, state, dim.div_ceil(16), &mut rng);
    let x = Tensor::uniform(&[len, dim], -1.0, 1.0, &mut rng);
    params.terms(&x).expect("matching widths")
}

/// Input and four `[dim, dim]` projections for the attention baseline.
pub fn attention_inputs(len: usize, dim: usize, seed: u64) -> (Tensor<f32>, Vec<Tensor<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(&[len, dim], -1.0, 1.0, &mut rng);
    let w = (0..4).map(|_| Tensor::randn(&[dim, dim], 1.0 / (dim as f64).sqrt(), &mut rng)).collect();
    (x, w)
}
