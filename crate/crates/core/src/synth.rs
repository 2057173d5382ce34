//! Seeded synthetic datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{MetricKind, VectorDataset};

/// Side length of the cube that mixture centers are drawn from.
pub const CENTER_RANGE: f32 = 10.0;

/// `n` points uniform in `[0, 1)^dim`.
pub fn uniform(n: usize, dim: usize, seed: u64) -> VectorDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| rng.random::<f32>()).collect();
    VectorDataset::new(data, dim, MetricKind::SquaredL2).expect("n, dim >= 1")
}

/// Mixture centers, `modes × dim`, uniform in `[0, CENTER_RANGE)^dim`.
pub fn mixture_centers(modes: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..modes * dim)
        .map(|_| rng.random::<f32>() * CENTER_RANGE)
        .collect()
}

/// `n` points from an equal-weight isotropic gaussian mixture with
/// `modes` components of standard deviation `spread`.
///
/// Point `i` belongs to component `i % modes`.
pub fn gaussian_mixture(n: usize, dim: usize, modes: usize, spread: f32, seed: u64) -> VectorDataset {
    let modes = modes.max(1);
    let centers = mixture_centers(modes, dim, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let normal = Normal::new(0.0f32, spread.max(0.0)).expect("finite spread");
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        let c = &centers[(i % modes) * dim..(i % modes + 1) * dim];
        data.extend(c.iter().map(|&x| x + normal.sample(&mut rng)));
    }
    VectorDataset::new(data, dim, MetricKind::SquaredL2).expect("n, dim >= 1")
}

/// Base points and queries drawn from the same mixture: the first `n`
/// points of a `n + nq` sample, then the remaining `nq`.
pub fn mixture_with_queries(
    n: usize,
    nq: usize,
    dim: usize,
    modes: usize,
    spread: f32,
    seed: u64,
) -> (VectorDataset, VectorDataset) {
    let all = gaussian_mixture(n + nq, dim, modes, spread, seed);
    let (base, queries) = all.as_slice().split_at(n * dim);
    (
        VectorDataset::new(base.to_vec(), dim, MetricKind::SquaredL2).expect("n >= 1"),
        VectorDataset::new(queries.to_vec(), dim, MetricKind::SquaredL2).expect("nq >= 1"),
    )
}
