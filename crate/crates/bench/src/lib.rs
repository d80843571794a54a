//! Shared inputs for the kernel benchmarks.

use rand::Rng as _;
use ssos_core::geometry::FeatureMap;
use ssos_core::rng::seeded;

pub fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
    let mut rng = seeded(seed);
    let data = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureMap::new(h, w, c, data).expect("consistent shape")
}

pub fn random_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
}
