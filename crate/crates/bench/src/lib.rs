//! Fixtures shared by the benchmarks.

use cmad_core::eval::{synth::sample_shape, Shape};
use cmad_core::pointcloud::{self, PointCloud};
use cmad_core::{ConsistencyModel, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A normalized sphere of `n` points.
pub fn sphere(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pc = PointCloud::new(sample_shape(Shape::Sphere, n, 0.01, &mut rng)).expect("non-empty");
    pointcloud::normalize(&pc).expect("non-empty")
}

/// Freshly initialized model at the default widths.
pub fn model(seed: u64) -> ConsistencyModel {
    ConsistencyModel::new(ModelConfig::default(), seed).expect("default config is valid")
}
