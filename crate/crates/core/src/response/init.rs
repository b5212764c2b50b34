use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Truncated-normal draws are rejected outside this many standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 2.0;

/// Initialization recipe shared by the trainable models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    /// Standard deviation of the truncated normal for non-recurrent weights.
    pub stddev: f64,
    /// Multiplicative gain on orthogonal recurrent matrices.
    pub orthogonal_gain: f64,
    pub seed: u64,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            stddev: 0.1,
            orthogonal_gain: 1.0,
            seed: 0,
        }
    }
}

impl InitSpec {
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Fills `out` with `N(0, stddev²)` draws resampled until within ±2σ.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, stddev: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= TRUNCATION_SIGMAS {
                break z * stddev;
            }
        };
    }
}

/// A random `n×n` orthogonal matrix (row-major) scaled by `gain`.
///
/// Gaussian columns are orthonormalized with two passes of modified
/// Gram-Schmidt, which keeps `QᵀQ - I` at rounding level.
pub fn orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize, gain: f64) -> Vec<f64> {
    // columns stored contiguously while orthogonalizing
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for q in &cols {
                let d = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        cols.push(v);
    }
    let mut m = vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m[i * n + j] = gain * v;
        }
    }
    m
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
