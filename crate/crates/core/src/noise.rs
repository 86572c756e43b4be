//! Seeded Gaussian measurement noise applied to observed load latencies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Default sigma for the noisy ("browser-like") mode, in cycles.
pub const DEFAULT_SIGMA: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct GaussianNoise {
    sigma: f64,
    normal: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

impl GaussianNoise {
    /// `sigma <= 0` yields a noise source that leaves values untouched.
    pub fn new(sigma: f64, seed: u64) -> Self {
        let normal = if sigma > 0.0 { Normal::new(0.0, sigma).ok() } else { None };
        GaussianNoise { sigma: sigma.max(0.0), normal, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn is_silent(&self) -> bool {
        self.normal.is_none()
    }

    pub fn perturb(&mut self, cycles: u64) -> u64 {
        match &self.normal {
            None => cycles,
            Some(n) => (cycles as f64 + n.sample(&mut self.rng)).round().max(0.0) as u64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let mut n = GaussianNoise::new(0.0, 1);
        assert!(n.is_silent());
        assert_eq!(n.perturb(200), 200);
    }

    #[test]
    fn seeded_and_centred() {
        let mut a = GaussianNoise::new(10.0, 4);
        let mut b = GaussianNoise::new(10.0, 4);
        let xs: Vec<u64> = (0..10_000).map(|_| a.perturb(1000)).collect();
        let ys: Vec<u64> = (0..10_000).map(|_| b.perturb(1000)).collect();
        assert_eq!(xs, ys);
        let mean = xs.iter().sum::<u64>() as f64 / xs.len() as f64;
        assert!((mean - 1000.0).abs() < 0.5);
        let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((var.sqrt() - 10.0).abs() < 0.5);
    }
}
