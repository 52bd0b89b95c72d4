//! Seeded random streams.
//!
//! All randomness flows through ChaCha8 so results are identical across
//! platforms and library versions. Independent streams (per trajectory,
//! per stage) are selected with ChaCha's stream counter instead of
//! re-seeding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream ids used to keep stages from sharing random sequences.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const CALIB: u64 = 4;
    pub const DISTILL: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const HELDOUT: u64 = 7;
    /// Per-trajectory sampling streams start here.
    pub const TRAJECTORY_BASE: u64 = 1 << 32;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
