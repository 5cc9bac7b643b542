//! Deterministic random streams. Every consumer draws from a ChaCha8 stream
//! keyed by `(seed, stream)` so that adding a new consumer never perturbs the
//! draws of an existing one.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Tensor;

pub type DetRng = ChaCha8Rng;

/// Stream identifiers used across the crate.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const ALIGN_HEAD: u64 = 3;
    pub const CORR_HEAD: u64 = 4;
    pub const SUP_HEAD: u64 = 5;
    pub const SUBSAMPLE: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const DATA: u64 = 8;
    pub const PROBE: u64 = 9;
    pub const ENTROPY: u64 = 10;
}

pub fn seeded(seed: u64, stream: u64) -> DetRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut DetRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(rng: &mut DetRng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * normal(rng)).collect()
}

pub fn normal_tensor(rng: &mut DetRng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), normal_vec(rng, n, std))
}

/// Uniform in `[-bound, bound)`.
pub fn uniform_vec(rng: &mut DetRng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Unit-norm rows drawn isotropically.
pub fn unit_rows(rng: &mut DetRng, rows: usize, cols: usize) -> Tensor {
    loop {
        let t = normal_tensor(rng, &[rows, cols], 1.0);
        if let Ok(n) = t.normalize_rows("unit_rows") {
            return n;
        }
    }
}
