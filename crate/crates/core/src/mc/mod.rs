//! Finite-width networks: prior sampling of the scaled output
//! `H_n = h / sqrt(n)` with empirical tail rates, and Langevin posterior
//! sampling.
//!
//! Weights are LeCun-initialized (variance `1 / fan_in`), hidden biases have
//! variance `bias_variance` and the output layer has no bias.

mod mala;
mod network;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LdpError, Result};
use crate::nngp::NetworkSpec;

pub use mala::{mala_posterior_samples, ChainDiagnostics, ChainTrace, MalaConfig, OutputScaling, Tempering, TraceRow};
pub use network::Network;

/// Prior sampling budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub width: usize,
    pub n_samples: u64,
    pub seed: u64,
    /// Samples per independently seeded batch.
    #[serde(default = "default_batch")]
    pub batch: u64,
}

fn default_batch() -> u64 {
    100_000
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(LdpError::InvalidArgument("width must be >= 1".into()));
        }
        if self.n_samples == 0 {
            return Err(LdpError::InvalidArgument("n_samples must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(LdpError::InvalidArgument("batch must be >= 1".into()));
        }
        Ok(())
    }

    fn batches(&self) -> Vec<(u64, u64)> {
        let count = self.n_samples.div_ceil(self.batch);
        (0..count)
            .map(|b| (b, self.batch.min(self.n_samples - b * self.batch)))
            .collect()
    }
}

/// Generator for batch `index` of a run seeded with `seed`.
pub(crate) fn batch_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn check_input(spec: &NetworkSpec, x: &[f64]) -> Result<()> {
    spec.validate()?;
    if x.len() != spec.d_in {
        return Err(LdpError::DimensionMismatch(format!(
            "input has dimension {} but network expects {}",
            x.len(),
            spec.d_in
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LdpError::NonFiniteInput("x_test"));
    }
    Ok(())
}

/// Draws `H_n(x_test)` for `cfg.n_samples` independent prior networks.
pub fn sample_prior_outputs(cfg: &SamplerConfig, spec: &NetworkSpec, x_test: &[f64]) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_input(spec, x_test)?;
    let parts: Vec<Vec<f64>> = cfg
        .batches()
        .into_par_iter()
        .map(|(b, len)| {
            let mut rng = batch_rng(cfg.seed, b);
            let mut net = Network::zeros(spec, cfg.width);
            let mut out = Vec::with_capacity(len as usize);
            for _ in 0..len {
                net.sample_prior(&mut rng);
                out.push(net.scaled_output(x_test));
            }
            out
        })
        .collect();
    Ok(parts.concat())
}

/// Exceedance counts on a fixed threshold grid: `#{H >= y}` for `y > 0`
/// and `#{H <= y}` for `y < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TailCounts {
    pub grid: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl TailCounts {
    pub fn new(grid: &[f64]) -> Result<Self> {
        if grid.iter().any(|y| !y.is_finite()) {
            return Err(LdpError::NonFiniteInput("tail grid"));
        }
        Ok(Self {
            grid: grid.to_vec(),
            counts: vec![0; grid.len()],
            total: 0,
        })
    }

    pub fn push(&mut self, h: f64) {
        self.total += 1;
        for (c, &y) in self.counts.iter_mut().zip(&self.grid) {
            if (y > 0.0 && h >= y) || (y < 0.0 && h <= y) {
                *c += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &TailCounts) {
        self.total += other.total;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `-(1/n) log(count / total)` at grid point `k`; `None` without
    /// exceedances or at `y = 0`.
    pub fn rate(&self, k: usize, width: usize) -> Option<f64> {
        rate_from_counts(self.counts[k], self.total, width, self.grid[k])
    }
}

fn rate_from_counts(count: u64, total: u64, width: usize, y: f64) -> Option<f64> {
    if y == 0.0 || count == 0 || total == 0 {
        return None;
    }
    let p = count as f64 / total as f64;
    Some((-p.ln() / width as f64).max(0.0))
}

/// Streams prior samples into exceedance counts without storing them.
pub fn prior_tail_counts(
    cfg: &SamplerConfig,
    spec: &NetworkSpec,
    x_test: &[f64],
    grid: &[f64],
) -> Result<TailCounts> {
    cfg.validate()?;
    check_input(spec, x_test)?;
    let empty = TailCounts::new(grid)?;
    // Thresholds sorted once so each sample is placed by binary search.
    let mut pos: Vec<(f64, usize)> = grid.iter().enumerate().filter(|p| *p.1 > 0.0).map(|(i, &y)| (y, i)).collect();
    let mut neg: Vec<(f64, usize)> = grid.iter().enumerate().filter(|p| *p.1 < 0.0).map(|(i, &y)| (y, i)).collect();
    pos.sort_by(|a, b| a.0.total_cmp(&b.0));
    neg.sort_by(|a, b| b.0.total_cmp(&a.0));
    let parts: Vec<TailCounts> = cfg
        .batches()
        .into_par_iter()
        .map(|(b, len)| {
            let mut rng = batch_rng(cfg.seed, b);
            let mut net = Network::zeros(spec, cfg.width);
            // Histogram over sorted thresholds, cumulated afterwards.
            let mut pos_hist = vec![0u64; pos.len() + 1];
            let mut neg_hist = vec![0u64; neg.len() + 1];
            for _ in 0..len {
                net.sample_prior(&mut rng);
                let h = net.scaled_output(x_test);
                pos_hist[pos.partition_point(|p| p.0 <= h)] += 1;
                neg_hist[neg.partition_point(|p| p.0 >= h)] += 1;
            }
            let mut part = empty.clone();
            part.total = len;
            // Bin j + 1 holds samples in [pos[j], pos[j + 1]).
            let mut above = 0;
            for j in (0..pos.len()).rev() {
                above += pos_hist[j + 1];
                part.counts[pos[j].1] = above;
            }
            let mut below = 0;
            for j in (0..neg.len()).rev() {
                below += neg_hist[j + 1];
                part.counts[neg[j].1] = below;
            }
            part
        })
        .collect();
    let mut total = empty;
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Empirical tail rate `-(1/n) log p_hat(y)` from stored samples.
pub fn tail_rate_estimate(samples: &[f64], width: usize, y: f64) -> Option<f64> {
    let count = if y > 0.0 {
        samples.iter().filter(|&&h| h >= y).count()
    } else {
        samples.iter().filter(|&&h| h <= y).count()
    };
    rate_from_counts(count as u64, samples.len() as u64, width, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nngp::ActivationKind;

    fn relu_spec() -> NetworkSpec {
        NetworkSpec::new(2, ActivationKind::Relu, 1, 1.0).unwrap()
    }

    #[test]
    fn streaming_counts_match_stored_samples() {
        let cfg = SamplerConfig {
            width: 8,
            n_samples: 20_000,
            seed: 3,
            batch: 3_000,
        };
        let grid = [-1.5, -0.4, 0.0, 0.3, 0.9, 2.0];
        let samples = sample_prior_outputs(&cfg, &relu_spec(), &[3.0]).unwrap();
        let counts = prior_tail_counts(&cfg, &relu_spec(), &[3.0], &grid).unwrap();
        assert_eq!(counts.total, 20_000);
        for (k, &y) in grid.iter().enumerate() {
            assert_eq!(counts.rate(k, 8), tail_rate_estimate(&samples, 8, y), "y={y}");
        }
    }

    #[test]
    fn tail_rate_edge_cases() {
        let s = [0.1, 0.2, 0.3];
        assert_eq!(tail_rate_estimate(&s, 4, 1.0), None);
        assert_eq!(tail_rate_estimate(&s, 4, 0.05), Some(0.0));
        assert_eq!(tail_rate_estimate(&s, 4, 0.0), None);
    }

    #[test]
    fn tail_rates_are_monotone() {
        let cfg = SamplerConfig {
            width: 16,
            n_samples: 50_000,
            seed: 11,
            batch: 10_000,
        };
        let grid: Vec<f64> = (1..=30).map(|k| k as f64 * 0.05).collect();
        let counts = prior_tail_counts(&cfg, &relu_spec(), &[3.0], &grid).unwrap();
        let rates: Vec<f64> = (0..grid.len()).filter_map(|k| counts.rate(k, 16)).collect();
        assert!(rates.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn prior_moments_match_infinite_width() {
        // Unscaled output variance tends to kappa(x, x) = (x^2 + 1)/2 for ReLU.
        let width = 256;
        let cfg = SamplerConfig {
            width,
            n_samples: 40_000,
            seed: 5,
            batch: 10_000,
        };
        let s = sample_prior_outputs(&cfg, &relu_spec(), &[3.0]).unwrap();
        let n = s.len() as f64;
        let unscaled: Vec<f64> = s.iter().map(|h| h * (width as f64).sqrt()).collect();
        let mean = unscaled.iter().sum::<f64>() / n;
        let var = unscaled.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let fourth = unscaled.iter().map(|h| (h - mean).powi(4)).sum::<f64>() / n;
        let se_var = ((fourth - var * var) / n).sqrt();
        assert!((var - 5.0).abs() < 3.0 * se_var, "var {var} se {se_var}");
        assert!(mean.abs() < 3.0 * (var / n).sqrt());
    }

    #[test]
    fn sampling_is_reproducible() {
        let cfg = SamplerConfig {
            width: 4,
            n_samples: 1000,
            seed: 9,
            batch: 128,
        };
        let a = sample_prior_outputs(&cfg, &relu_spec(), &[1.0]).unwrap();
        let b = sample_prior_outputs(&cfg, &relu_spec(), &[1.0]).unwrap();
        assert_eq!(a, b);
    }
}
