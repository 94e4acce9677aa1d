//! Shared inputs for the benchmarks.

use levelline_core::dgff::{FarBoundary, LatticeSpec};
use levelline_core::{BoundaryConfig, DrivingPath};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Two marked points with the free arc to the left of the first: `(0, (1, 4), 1)`.
pub fn two_point() -> BoundaryConfig {
    BoundaryConfig::new(0.0, vec![1.0, 4.0], 1).expect("valid configuration")
}

/// A configuration with `n` equally spaced marked points, starting from the middle one.
pub fn equally_spaced(n: usize) -> BoundaryConfig {
    let b = (1..=n).map(|i| i as f64).collect();
    BoundaryConfig::new(0.0, b, n.div_ceil(2)).expect("valid configuration")
}

/// A Brownian driving path with `kappa = 4` on `[0, 1]`.
pub fn brownian_path(steps: usize, seed: u64) -> DrivingPath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / steps as f64;
    let mut times = vec![0.0];
    let mut values = vec![0.0];
    for i in 1..=steps {
        let z: f64 = StandardNormal.sample(&mut rng);
        times.push(i as f64 * dt);
        values.push(values[i - 1] + 2.0 * dt.sqrt() * z);
    }
    DrivingPath::new(times, values).expect("valid path")
}

pub fn lattice(cells: usize) -> LatticeSpec {
    LatticeSpec::unfolded(&two_point(), cells, 4.0, FarBoundary::Matched).expect("valid lattice")
}
