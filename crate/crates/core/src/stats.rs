//! Streaming first and second moments of displacement vectors.

use serde::{Deserialize, Serialize};

/// Welford accumulator for the mean vector and the centred co-moment matrix
/// (upper triangle, row-major) of `d`-dimensional samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentAccumulator {
    count: u64,
    mean: Vec<f64>,
    comoment: Vec<f64>,
}

/// Index of entry `(i, j)`, `i <= j`, in a packed upper triangle.
#[inline]
pub fn upper_index(dim: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * dim - i * (i + 1) / 2 + j
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim());
        let d = self.dim();
        self.count += 1;
        let n = self.count as f64;
        // (x_i - old_mean_i)(x_j - new_mean_j) = δ_i δ_j (n-1)/n
        let w = (n - 1.0) / n;
        let mut k = 0;
        for i in 0..d {
            let di = x[i] - self.mean[i];
            for j in i..d {
                self.comoment[k] += di * (x[j] - self.mean[j]) * w;
                k += 1;
            }
        }
        for i in 0..d {
            self.mean[i] += (x[i] - self.mean[i]) / n;
        }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &Self) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let d = self.dim();
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = (0..d).map(|i| other.mean[i] - self.mean[i]).collect();
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                self.comoment[k] += other.comoment[k] + delta[i] * delta[j] * na * nb / n;
                k += 1;
            }
        }
        for i in 0..d {
            self.mean[i] += delta[i] * nb / n;
        }
        self.count += other.count;
    }

    /// Population covariance `C_ij`.
    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        self.comoment[upper_index(self.dim(), i, j)] / self.count as f64
    }

    /// Raw second moment `E[x_i x_j]`.
    pub fn second_moment(&self, i: usize, j: usize) -> f64 {
        self.covariance(i, j) + self.mean[i] * self.mean[j]
    }
}
