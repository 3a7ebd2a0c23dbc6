//! Seeded inputs shared by the criterion benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use terrafuse_core::geo::{sample_clustered, sample_sphere_uniform, LonLat};
use terrafuse_core::nn::{Tensor, TensorSpec};

pub fn random_tensor(spec: TensorSpec, seed: u64) -> Tensor {
    Tensor::randn(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_matrix(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Half clustered, half uniform, so the neighbour graph has edges.
pub fn mixed_points(n: usize, seed: u64) -> Vec<LonLat> {
    let clustered = n / 2;
    let mut points = sample_clustered(seed, clustered, (clustered / 20).max(1), 1.5).expect("valid cluster parameters");
    points.extend(sample_sphere_uniform(seed + 1, n - clustered));
    points
}

/// Prediction and truth masks over codes 1..=5; truth also holds no-data zeros.
pub fn random_masks(pixels: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = (0..pixels).map(|_| rng.random_range(1..=5u8)).collect();
    let truth = (0..pixels).map(|_| rng.random_range(0..=5u8)).collect();
    (pred, truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_seeded_and_shaped() {
        assert_eq!(random_matrix(10, 1), random_matrix(10, 1));
        assert_eq!(mixed_points(100, 2).len(), 100);
        let (p, t) = random_masks(64, 3);
        assert!(p.iter().all(|&c| (1..=5).contains(&c)) && t.len() == 64);
        assert_eq!(random_tensor(TensorSpec::new(1, 2, 3, 3), 4).len(), 18);
    }
}
