#![allow(dead_code)]

use flextsf::series::{BatchRow, Segment};
use flextsf::{FlexTsf, ModelConfig};
use flextsf_tensor::rng::{self, Rng, RngState};

/// Classic preset shrunk to an 8-dimensional latent and model width.
pub fn tiny_config() -> ModelConfig {
    ModelConfig { latent_dim: 8, heads: 2, head_dim: 4, solver_hidden: 8, infer_hidden: 8, ..ModelConfig::classic() }
}

pub fn tiny_model(seed: u64) -> FlexTsf {
    FlexTsf::new(tiny_config(), seed).unwrap()
}

/// Irregular normalized segment of `n` points starting at `t0`, with the
/// listed positions unobserved.
pub fn segment(n: usize, t0: f64, seed: u64, missing: &[usize]) -> Segment {
    let mut r = RngState::new(seed).stream(&[rng::tag("segment")]);
    let mut t = t0;
    let mut times = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            t += 1.0 + (r.random_range(0..3u32) as f64) * 0.5;
        }
        times.push(t);
    }
    let observed: Vec<bool> = (0..n).map(|i| !missing.contains(&i)).collect();
    let values = times
        .iter()
        .zip(&observed)
        .map(|(t, &o)| if o { (0.7 * t).sin() + 0.1 * rng::standard_normal(&mut r) } else { 0.0 })
        .collect();
    Segment { times, values, observed }
}

/// One context patch and one horizon patch at patch length 8.
pub fn two_patch_row(seed: u64) -> BatchRow {
    let context = segment(8, 0.0, seed, &[3]);
    let start = context.times.last().unwrap() + 1.0;
    let horizon = segment(8, start, seed + 1, &[5]);
    BatchRow { context, horizon, features: [0.3, -0.2, 0.5, 0.1, -0.4, 0.2] }
}

/// Longer row: `k` context patches and `j` horizon patches.
pub fn row(k: usize, j: usize, seed: u64) -> BatchRow {
    let context = segment(8 * k, 0.0, seed, &[2, 9]);
    let start = context.times.last().unwrap() + 1.0;
    let horizon = segment(8 * j, start, seed + 1, &[1]);
    BatchRow { context, horizon, features: [0.1, 0.2, -0.3, 0.0, 0.4, -0.1] }
}
