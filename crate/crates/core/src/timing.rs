//! Synthetic latency laws for the simulated serving node.
//!
//! Prefill cost follows the quadratic law `c0 + c1 * (n - k) * n`: total
//! prompt length times the uncached remainder. Decode charges a flat
//! per-token rate. Compute terms carry multiplicative noise (scaled up for
//! occasional heavy-tail outliers); network latency is additive and
//! length-independent. Zeroing all noise fields makes every function exact.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TimingError {
    #[error("hit tokens {k} exceed prompt tokens {n}")]
    HitExceedsPrompt { n: usize, k: usize },
}

/// Coefficients of the latency law. All times are seconds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingParams {
    /// Base service overhead per request.
    pub c0: f64,
    /// Prefill coefficient, seconds per token^2.
    pub c1: f64,
    /// Seconds per generated token.
    pub tpot: f64,
    /// Network latency mean.
    pub net_mu: f64,
    /// Network latency standard deviation.
    pub net_sigma: f64,
    /// Multiplicative compute-noise standard deviation (dimensionless).
    pub noise_rel: f64,
    /// Probability that a draw's compute noise is outlier-inflated.
    pub outlier_p: f64,
    /// Noise scale multiplier for outlier draws.
    pub outlier_scale: f64,
}

impl Default for TimingParams {
    fn default() -> Self {
        TimingParams {
            c0: 0.05,
            c1: 1e-6,
            tpot: 0.02,
            net_mu: 0.05,
            net_sigma: 0.0035,
            noise_rel: 0.003,
            outlier_p: 0.02,
            outlier_scale: 5.0,
        }
    }
}

impl TimingParams {
    /// Copy with every stochastic term zeroed; all draws become exact.
    pub fn noise_free(mut self) -> Self {
        self.net_sigma = 0.0;
        self.noise_rel = 0.0;
        self.outlier_p = 0.0;
        self
    }

    /// Timing gap between consecutive block-hit levels for an `n`-token
    /// prompt: `c1 * block_size * n`.
    pub fn block_gap(&self, n: usize, block_size: usize) -> f64 {
        self.c1 * block_size as f64 * n as f64
    }

    fn compute_noise(&self, rng: &mut ChaCha12Rng) -> f64 {
        if self.noise_rel == 0.0 {
            return 0.0;
        }
        let mut sigma = self.noise_rel;
        if self.outlier_p > 0.0 && rng.random::<f64>() < self.outlier_p {
            sigma *= self.outlier_scale;
        }
        Normal::new(0.0, sigma).unwrap().sample(rng)
    }

    fn net_latency(&self, rng: &mut ChaCha12Rng) -> f64 {
        if self.net_sigma == 0.0 {
            return self.net_mu;
        }
        // Truncated at zero.
        Normal::new(self.net_mu, self.net_sigma)
            .unwrap()
            .sample(rng)
            .max(0.0)
    }
}

/// Time to first token for an `n`-token prompt with `k` cached tokens.
pub fn prefill_time(
    n: usize,
    k: usize,
    rng: &mut ChaCha12Rng,
    params: &TimingParams,
) -> Result<f64, TimingError> {
    if k > n {
        return Err(TimingError::HitExceedsPrompt { n, k });
    }
    let base = params.c0 + params.c1 * (n - k) as f64 * n as f64;
    let eps = params.compute_noise(rng);
    Ok(base * (1.0 + eps) + params.net_latency(rng))
}

/// Noise-free prefill: `c0 + c1 * (n - k) * n + net_mu`, exactly.
pub fn prefill_time_exact(n: usize, k: usize, params: &TimingParams) -> f64 {
    params.c0 + params.c1 * (n - k) as f64 * n as f64 + params.net_mu
}

/// Total decode time for `num_tokens` generated tokens.
pub fn decode_time(num_tokens: usize, rng: &mut ChaCha12Rng, params: &TimingParams) -> f64 {
    if num_tokens == 0 {
        return 0.0;
    }
    let base = params.tpot * num_tokens as f64;
    let eps = params.compute_noise(rng);
    (base * (1.0 + eps)).max(0.0)
}

/// Latency of a semantic-cache hit: network only, no compute or decode term
/// (the stored response is returned whole).
pub fn semantic_hit_time(rng: &mut ChaCha12Rng, params: &TimingParams) -> f64 {
    params.net_latency(rng)
}
