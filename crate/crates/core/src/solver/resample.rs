use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ResampleResult {
    /// Record indices drawn with probability proportional to `rho`.
    pub indices: Vec<usize>,
    pub rho: Vec<f64>,
    /// Mean of `rho` over the full dataset.
    pub rho_bar: f64,
}

impl ResampleResult {
    /// How often each record was drawn.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.rho.len()];
        for &i in &self.indices {
            c[i] += 1;
        }
        c
    }

    /// `ρ̄ · mean_{D_ρ}[f]`, an unbiased estimate of `mean_D[ρ f]`.
    pub fn corrected_mean(&self, f: &[f64]) -> f64 {
        let m: f64 = self.indices.iter().map(|&i| f[i]).sum::<f64>() / self.indices.len() as f64;
        self.rho_bar * m
    }
}

pub fn resample(rho: &[f64], k: usize, seed: u64) -> Result<ResampleResult> {
    if k == 0 {
        return Err(Error::invalid("resample size must be at least 1"));
    }
    if rho.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
        return Err(Error::invalid("importance weights must be finite and non-negative"));
    }
    let total: f64 = rho.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("current π_-i has no dataset support (all importance weights are zero)"));
    }
    let dist = WeightedIndex::new(rho).map_err(|e| Error::invalid(format!("importance weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = (0..k).map(|_| dist.sample(&mut rng)).collect();
    Ok(ResampleResult {
        indices,
        rho: rho.to_vec(),
        rho_bar: total / rho.len() as f64,
    })
}
