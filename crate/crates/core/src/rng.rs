//! Per-particle random streams.
//!
//! Each particle gets its own ChaCha8 stream: the 256-bit key is expanded
//! from the master seed (`SeedableRng::seed_from_u64`, a fixed PCG32
//! expansion) and the particle index selects the 64-bit stream id. Streams
//! are therefore independent of how particles are scheduled across workers
//! and of the total particle count. Normal variates use the ziggurat sampler
//! of `rand_distr::StandardNormal`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct ParticleRng {
    inner: ChaCha8Rng,
}

impl ParticleRng {
    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[lo, hi)`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    #[inline]
    pub fn normals<const D: usize>(&mut self) -> [f64; D] {
        std::array::from_fn(|_| self.normal())
    }
}

pub fn derive_particle_rng(master_seed: u64, particle_index: u64) -> ParticleRng {
    let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
    inner.set_stream(particle_index);
    ParticleRng { inner }
}

/// SplitMix64 finalizer. Used to derive child seeds (per sweep value, per
/// time step in a convergence study) from a parent seed.
pub fn mix_seed(parent: u64, index: u64) -> u64 {
    let mut z = parent ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(seed: u64, idx: u64, n: usize) -> Vec<f64> {
        let mut r = derive_particle_rng(seed, idx);
        (0..n).map(|_| r.normal()).collect()
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn same_key_same_stream() {
        assert_eq!(draws(1, 0, 1000), draws(1, 0, 1000));
    }

    #[test]
    fn neighbouring_particles_are_uncorrelated() {
        let r = correlation(&draws(1, 0, 1000), &draws(1, 1, 1000));
        assert!(r.abs() < 0.1, "r = {r}");
    }

    #[test]
    fn seeds_give_different_streams() {
        assert_ne!(draws(1, 0, 16), draws(2, 0, 16));
    }

    #[test]
    fn normal_moments() {
        let v = draws(7, 3, 200_000);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 5.0 / n.sqrt());
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn mixed_seeds_differ() {
        let s: Vec<u64> = (0..100).map(|i| mix_seed(42, i)).collect();
        let mut sorted = s.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), s.len());
        assert_ne!(mix_seed(1, 0), mix_seed(2, 0));
    }
}
