//! Shared fixtures for the criterion benchmarks.

use cellscale_core::corpus::{split, synthesize, ExpressionMatrix, SyntheticSpec};
use cellscale_core::fit::ScalingPoint;
use cellscale_core::Tensor;

/// Deterministic pseudo-random tensor without pulling an RNG into the benches.
pub fn filled(shape: &[usize], salt: u64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f32 / (1u64 << 24) as f32 - 0.5
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub fn small_corpus(cells: usize, genes: usize) -> ExpressionMatrix {
    let m = synthesize(&SyntheticSpec {
        n_cells: cells,
        n_genes: genes,
        latent_rank: 8,
        noise_sigma: 0.6,
        seed: 1,
    })
    .expect("valid spec");
    let s = split(&m, 42);
    m.with_split(s).expect("split matches")
}

/// Points on `2 P^-0.3 + 0.4` over the seven preset sizes.
pub fn scaling_points() -> Vec<ScalingPoint> {
    [
        85.0,
        1_553.0,
        104_321.0,
        793_601.0,
        18_916_353.0,
        100_040_000.0,
        340_000_000.0,
    ]
    .into_iter()
    .map(|p: f64| ScalingPoint::new(p, 2.0 * p.powf(-0.3) + 0.4))
    .collect()
}
