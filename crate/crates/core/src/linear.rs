//! Closed forms for the linear activation `sigma(x) = sqrt(a) x` on a single
//! input without biases.
//!
//! Depth here counts hidden layers: `layers = 1` is a network with one
//! hidden layer, whose output variance is `a kappa0`.

use crate::error::{LdpError, Result};

/// Parameters of the scalar linear chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearConfig {
    pub a: f64,
    /// Input kernel `x^2 / d_in` of the single input.
    pub kappa0: f64,
    pub layers: usize,
}

impl LinearConfig {
    pub fn new(a: f64, kappa0: f64, layers: usize) -> Result<Self> {
        let cfg = Self { a, kappa0, layers };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(LdpError::InvalidArgument("a must be positive".into()));
        }
        if !(self.kappa0 > 0.0 && self.kappa0.is_finite()) {
            return Err(LdpError::InvalidArgument("kappa0 must be positive".into()));
        }
        if self.layers == 0 {
            return Err(LdpError::InvalidArgument("layers must be >= 1".into()));
        }
        Ok(())
    }

    /// Infinite-width output variance `a^L kappa0`.
    pub fn nngp_variance(&self) -> f64 {
        self.a.powi(self.layers as i32) * self.kappa0
    }
}

fn gaussian_divergence(r: f64) -> f64 {
    0.5 * (r - r.ln() - 1.0)
}

/// `J(kappa | kappa0) = 1/2 [r - log r - 1]` with `r = kappa / (a kappa0)`.
pub fn layer_cost_linear(kappa: f64, kappa0: f64, a: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(LdpError::NonPositiveKernel(kappa));
    }
    if !(kappa0 > 0.0 && a > 0.0) {
        return Err(LdpError::InvalidArgument("kappa0 and a must be positive".into()));
    }
    Ok(gaussian_divergence(kappa / (a * kappa0)))
}

/// Kernel rate after `cfg.layers` layers: `(L/2)[r^{1/L} - log r^{1/L} - 1]`
/// with `r = kappa / (a^L kappa0)`.
pub fn kernel_rate_linear(kappa: f64, cfg: &LinearConfig) -> Result<f64> {
    cfg.validate()?;
    if !(kappa > 0.0) {
        return Err(LdpError::NonPositiveKernel(kappa));
    }
    let l = cfg.layers as f64;
    let root = (kappa / cfg.nngp_variance()).powf(1.0 / l);
    Ok(l * gaussian_divergence(root))
}

/// Output rate of the one-hidden-layer chain,
/// `(1+s)/4 - log((1+s)/2)/2 - 1/2 + y^2 / (a kappa0 (1+s))` with
/// `s = sqrt(1 + 4 y^2 / (a kappa0))`.
pub fn output_rate_linear_shallow(y: f64, a: f64, kappa0: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(LdpError::NonFiniteInput("y"));
    }
    if !(kappa0 > 0.0 && a > 0.0) {
        return Err(LdpError::InvalidArgument("kappa0 and a must be positive".into()));
    }
    let v = a * kappa0;
    let s = (1.0 + 4.0 * y * y / v).sqrt();
    let value = 0.25 * (1.0 + s) - 0.5 * (0.5 * (1.0 + s)).ln() - 0.5 + y * y / (v * (1.0 + s));
    Ok(value.max(0.0))
}

/// Stationarity residual of `I(kappa) + y^2 / (2 kappa)`:
/// `kappa^{(L+1)/L} / (a^L kappa0)^{1/L} - kappa - y^2`.
pub fn kappa_star_residual(kappa: f64, y: f64, cfg: &LinearConfig) -> f64 {
    let l = cfg.layers as f64;
    kappa.powf((l + 1.0) / l) / cfg.nngp_variance().powf(1.0 / l) - kappa - y * y
}

fn residual_derivative(kappa: f64, cfg: &LinearConfig) -> f64 {
    let l = cfg.layers as f64;
    (l + 1.0) / l * kappa.powf(1.0 / l) / cfg.nngp_variance().powf(1.0 / l) - 1.0
}

/// Root of [`kappa_star_residual`]: the minimizing output variance at `y`.
pub fn kappa_star(y: f64, cfg: &LinearConfig) -> Result<f64> {
    cfg.validate()?;
    if !y.is_finite() {
        return Err(LdpError::NonFiniteInput("y"));
    }
    let v = cfg.nngp_variance();
    if y == 0.0 {
        return Ok(v);
    }
    // The residual is negative below a^L kappa0 and increasing above it.
    let (mut lo, mut hi) = (v.max(1e-8), (10.0 * v).max(10.0 * y * y));
    while kappa_star_residual(hi, y, cfg) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kappa_star_residual(mid, y, cfg) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-10 * hi {
            break;
        }
    }
    let mut k = 0.5 * (lo + hi);
    for _ in 0..5 {
        let d = residual_derivative(k, cfg);
        if d <= 0.0 {
            break;
        }
        let next = k - kappa_star_residual(k, y, cfg) / d;
        if !(next > lo && next < hi) {
            break;
        }
        k = next;
    }
    Ok(k)
}

/// Output rate `min_kappa I(kappa) + y^2 / (2 kappa)` of the `L`-layer chain.
pub fn output_rate_linear(y: f64, cfg: &LinearConfig) -> Result<f64> {
    let k = kappa_star(y, cfg)?;
    Ok((kernel_rate_linear(k, cfg)? + 0.5 * y * y / k).max(0.0))
}

/// Growth exponent `2 / (L + 1)` of the output rate in `|y|`.
pub fn tail_exponent_linear(layers: usize) -> Result<f64> {
    if layers == 0 {
        return Err(LdpError::InvalidArgument("layers must be >= 1".into()));
    }
    Ok(2.0 / (layers as f64 + 1.0))
}
