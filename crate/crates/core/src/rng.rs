//! Seeding discipline for reproducible ensembles.
//!
//! Trajectory `i` of an ensemble with base seed `s` draws its Brownian
//! increments from a ChaCha stream keyed by `s + i`, so the `m`-th increment is
//! a pure function of `(s, i, m)` regardless of how trajectories are spread
//! over worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type TrajectoryRng = ChaCha8Rng;

pub fn trajectory_seed(seed_base: u64, index: u64) -> u64 {
    seed_base.wrapping_add(index)
}

pub fn trajectory_rng(seed: u64) -> TrajectoryRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[inline]
pub fn standard_normal(rng: &mut TrajectoryRng) -> f64 {
    StandardNormal.sample(rng)
}
