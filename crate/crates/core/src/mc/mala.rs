use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{Network, Tape};
use super::{batch_rng, check_input};
use crate::error::{LdpError, Result};
use crate::gp::Dataset;
use crate::nngp::NetworkSpec;

/// Inverse temperature of the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tempering {
    /// `beta = n`.
    #[serde(rename = "n")]
    Width,
    /// `beta = 1`.
    #[serde(rename = "1")]
    One,
}

/// Scale applied to the network output before the loss and in the recorded
/// samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputScaling {
    #[serde(rename = "1/sqrt(n)")]
    InvSqrtWidth,
    #[serde(rename = "1")]
    One,
}

fn default_chains() -> usize {
    10
}
fn default_steps() -> usize {
    50_000
}
fn default_warmup() -> usize {
    2_000
}
fn default_target() -> f64 {
    0.7
}

/// Langevin sampler settings. `step_size` and `burn_in` default to a tuned
/// step (acceptance `target_acceptance` over `warmup_steps`) and 20% of
/// `n_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MalaConfig {
    pub width: usize,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_chains")]
    pub n_chains: usize,
    #[serde(default)]
    pub burn_in: Option<usize>,
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    pub temper_exponent: Tempering,
    pub output_scaling: OutputScaling,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_target")]
    pub target_acceptance: f64,
}

impl MalaConfig {
    /// n-tempered likelihood on `H_n = h / sqrt(n)`.
    pub fn tempered(width: usize, seed: u64) -> Self {
        Self {
            width,
            step_size: None,
            n_chains: default_chains(),
            burn_in: None,
            n_steps: default_steps(),
            temper_exponent: Tempering::Width,
            output_scaling: OutputScaling::InvSqrtWidth,
            seed,
            warmup_steps: default_warmup(),
            target_acceptance: default_target(),
        }
    }

    /// Unit-temperature likelihood on the unscaled output.
    pub fn standard(width: usize, seed: u64) -> Self {
        Self {
            temper_exponent: Tempering::One,
            output_scaling: OutputScaling::One,
            ..Self::tempered(width, seed)
        }
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.n_steps / 5)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LdpError::InvalidArgument(m));
        if self.width == 0 {
            return bad("width must be >= 1".into());
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("step_size must be > 0, got {s}"));
            }
        }
        if self.n_chains == 0 {
            return bad("n_chains must be >= 1".into());
        }
        if self.n_steps <= self.burn_in() {
            return bad(format!("n_steps ({}) must exceed burn_in ({})", self.n_steps, self.burn_in()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return bad("target_acceptance must lie in (0, 1)".into());
        }
        Ok(())
    }

    fn beta(&self) -> f64 {
        match self.temper_exponent {
            Tempering::Width => self.width as f64,
            Tempering::One => 1.0,
        }
    }

    fn scale(&self) -> f64 {
        match self.output_scaling {
            OutputScaling::InvSqrtWidth => 1.0 / (self.width as f64).sqrt(),
            OutputScaling::One => 1.0,
        }
    }
}

/// One recorded transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub output_sample: f64,
    pub accepted: bool,
    pub log_density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub step_size: f64,
    pub acceptance_rate: f64,
    /// Every post-warmup step, burn-in included.
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDiagnostics {
    pub chains: Vec<ChainTrace>,
    pub burn_in: usize,
    /// Average of the per-chain post-burn-in acceptance rates.
    pub acceptance_rate: f64,
    pub mean: f64,
    pub std: f64,
}

impl ChainDiagnostics {
    /// Post-burn-in output samples of all chains.
    pub fn samples(&self) -> impl Iterator<Item = f64> + '_ {
        self.chains
            .iter()
            .flat_map(move |c| c.rows[self.burn_in..].iter().map(|r| r.output_sample))
    }
}

/// Differentiable log-density with an observable recorded per step.
pub(crate) trait Target {
    fn dim(&self) -> usize;
    /// Writes the gradient and returns `log pi(u)`.
    fn log_density(&mut self, u: &[f64], grad: &mut [f64]) -> f64;
    fn observe(&mut self, u: &[f64]) -> f64;
}

struct State {
    u: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

impl State {
    fn new<T: Target>(target: &mut T, u: Vec<f64>) -> Self {
        let mut grad = vec![0.0; u.len()];
        let logp = target.log_density(&u, &mut grad);
        Self { u, grad, logp }
    }

    fn finite(&self) -> bool {
        self.logp.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

/// `log q(to | from)` up to a constant shared by both directions.
fn log_proposal(to: &[f64], from: &State, eps: f64) -> f64 {
    let ss: f64 = to
        .iter()
        .zip(&from.u)
        .zip(&from.grad)
        .map(|((t, f), g)| (t - f - 0.5 * eps * g).powi(2))
        .sum();
    -ss / (2.0 * eps)
}

/// One Metropolis-adjusted Langevin transition. `Err(())` on a non-finite
/// proposal gradient.
fn mala_step<T: Target, R: Rng>(
    target: &mut T,
    state: &mut State,
    proposal: &mut State,
    eps: f64,
    rng: &mut R,
) -> std::result::Result<bool, ()> {
    let sd = eps.sqrt();
    for ((p, &u), &g) in proposal.u.iter_mut().zip(&state.u).zip(&state.grad) {
        let xi: f64 = rng.sample(StandardNormal);
        *p = u + 0.5 * eps * g + sd * xi;
    }
    proposal.logp = target.log_density(&proposal.u, &mut proposal.grad);
    if !proposal.finite() {
        return Err(());
    }
    let log_alpha = proposal.logp - state.logp + log_proposal(&state.u, proposal, eps)
        - log_proposal(&proposal.u, state, eps);
    let accept = log_alpha >= 0.0 || rng.gen::<f64>().ln() < log_alpha;
    if accept {
        std::mem::swap(state, proposal);
    }
    Ok(accept)
}

/// Bisection on `log eps` in rounds of equal length; each round moves the
/// chain, so warmup also serves as an initial transient.
fn tune_step<T: Target, R: Rng>(
    target: &mut T,
    state: &mut State,
    proposal: &mut State,
    warmup: usize,
    accept_target: f64,
    rng: &mut R,
) -> std::result::Result<f64, usize> {
    const ROUNDS: usize = 10;
    let mut eps = 0.1 / (target.dim() as f64).powf(1.0 / 3.0);
    let (mut lo, mut hi): (Option<f64>, Option<f64>) = (None, None);
    let per_round = (warmup / ROUNDS).max(1);
    let mut step: usize = 0;
    for _ in 0..ROUNDS {
        let mut acc = 0;
        for _ in 0..per_round {
            if mala_step(target, state, proposal, eps, rng).map_err(|_| step)? {
                acc += 1;
            }
            step += 1;
        }
        let rate = acc as f64 / per_round as f64;
        if rate > accept_target {
            lo = Some(eps);
            eps = match hi {
                Some(h) => (eps * h).sqrt(),
                None => eps * 4.0,
            };
        } else {
            hi = Some(eps);
            eps = match lo {
                Some(l) => (eps * l).sqrt(),
                None => eps / 4.0,
            };
        }
    }
    Ok(eps)
}

/// Runs one chain from `u0`: optional tuning, then `n_steps` recorded steps.
/// Errors carry the failing step index within warmup or sampling.
pub(crate) fn run_chain<T: Target, R: Rng>(
    target: &mut T,
    u0: Vec<f64>,
    cfg: &MalaConfig,
    rng: &mut R,
) -> std::result::Result<ChainTrace, usize> {
    let mut state = State::new(target, u0);
    if !state.finite() {
        return Err(0);
    }
    let mut proposal = State {
        u: vec![0.0; state.u.len()],
        grad: vec![0.0; state.u.len()],
        logp: 0.0,
    };
    let eps = match cfg.step_size {
        Some(e) => e,
        None => tune_step(target, &mut state, &mut proposal, cfg.warmup_steps, cfg.target_acceptance, rng)?,
    };
    let mut rows = Vec::with_capacity(cfg.n_steps);
    let mut accepted_after_burn = 0;
    for step in 0..cfg.n_steps {
        let accepted = mala_step(target, &mut state, &mut proposal, eps, rng).map_err(|_| step)?;
        if accepted && step >= cfg.burn_in() {
            accepted_after_burn += 1;
        }
        rows.push(TraceRow {
            step,
            output_sample: target.observe(&state.u),
            accepted,
            log_density: state.logp,
        });
    }
    Ok(ChainTrace {
        step_size: eps,
        acceptance_rate: accepted_after_burn as f64 / (cfg.n_steps - cfg.burn_in()) as f64,
        rows,
    })
}

/// Whitened-parameter posterior `-|u|^2/2 - beta L(c h_theta)`.
struct NetworkPosterior<'a> {
    net: Network,
    tape: Tape,
    train: Vec<(&'a [f64], f64)>,
    x_test: &'a [f64],
    beta: f64,
    scale: f64,
}

impl Target for NetworkPosterior<'_> {
    fn dim(&self) -> usize {
        self.net.n_params()
    }

    fn log_density(&mut self, u: &[f64], grad: &mut [f64]) -> f64 {
        self.net.set_params(u);
        let mut logp = 0.0;
        for (g, &v) in grad.iter_mut().zip(u) {
            *g = -v;
            logp -= 0.5 * v * v;
        }
        for &(x, y) in &self.train {
            let h = self.net.forward(x, &mut self.tape);
            let r = self.scale * h - y;
            logp -= 0.5 * self.beta * r * r;
            self.net.backward(x, &self.tape, -self.beta * r * self.scale, grad);
        }
        logp
    }

    fn observe(&mut self, u: &[f64]) -> f64 {
        self.net.set_params(u);
        self.scale * self.net.output(self.x_test)
    }
}

/// Langevin sampling of the network posterior; chains run independently
/// from prior draws with generators derived from `(seed, chain)`.
pub fn mala_posterior_samples(
    cfg: &MalaConfig,
    data: &Dataset,
    spec: &NetworkSpec,
    x_test: &[f64],
) -> Result<ChainDiagnostics> {
    cfg.validate()?;
    check_input(spec, x_test)?;
    if data.x().d_in() != spec.d_in {
        return Err(LdpError::DimensionMismatch(format!(
            "dataset inputs have dimension {} but network expects {}",
            data.x().d_in(),
            spec.d_in
        )));
    }
    data.index_of(x_test)?;
    let points = data.x().points();
    let train: Vec<(&[f64], f64)> = data
        .train_indices()
        .iter()
        .zip(data.y_train())
        .map(|(&i, &y)| (points[i].as_slice(), y))
        .collect();
    let results: Vec<Result<ChainTrace>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|chain| {
            let mut rng = batch_rng(cfg.seed, chain as u64);
            let mut net = Network::zeros(spec, cfg.width);
            net.sample_prior(&mut rng);
            let u0 = net.params().to_vec();
            let mut target = NetworkPosterior {
                net,
                tape: Tape::default(),
                train: train.clone(),
                x_test,
                beta: cfg.beta(),
                scale: cfg.scale(),
            };
            run_chain(&mut target, u0, cfg, &mut rng).map_err(|step| LdpError::NonFiniteGradient { chain, step })
        })
        .collect();
    let chains = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(summarize(chains, cfg.burn_in()))
}

fn summarize(chains: Vec<ChainTrace>, burn_in: usize) -> ChainDiagnostics {
    let mut diag = ChainDiagnostics {
        acceptance_rate: chains.iter().map(|c| c.acceptance_rate).sum::<f64>() / chains.len() as f64,
        chains,
        burn_in,
        mean: 0.0,
        std: 0.0,
    };
    let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
    for v in diag.samples() {
        n += 1.0;
        s += v;
    }
    let mean = s / n;
    for v in diag.samples() {
        s2 += (v - mean).powi(2);
    }
    diag.mean = mean;
    diag.std = (s2 / (n - 1.0).max(1.0)).sqrt();
    diag
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nngp::ActivationKind;

    struct Gaussian2;

    impl Target for Gaussian2 {
        fn dim(&self) -> usize {
            2
        }
        fn log_density(&mut self, u: &[f64], grad: &mut [f64]) -> f64 {
            grad[0] = -u[0];
            grad[1] = -u[1];
            -0.5 * (u[0] * u[0] + u[1] * u[1])
        }
        fn observe(&mut self, u: &[f64]) -> f64 {
            u[0]
        }
    }

    #[test]
    fn bivariate_normal_moments() {
        let cfg = MalaConfig {
            n_steps: 60_000,
            ..MalaConfig::standard(1, 0)
        };
        let mut rng = batch_rng(4, 0);
        let trace = run_chain(&mut Gaussian2, vec![2.0, -2.0], &cfg, &mut rng).unwrap();
        let xs: Vec<f64> = trace.rows[cfg.burn_in()..].iter().map(|r| r.output_sample).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        // Integrated autocorrelation inflates the error; batch means estimate it.
        let batches: Vec<f64> = xs.chunks(1000).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        let nb = batches.len() as f64;
        let bvar = batches.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (nb - 1.0);
        let se = (bvar / nb).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
        assert!(trace.acceptance_rate > 0.5 && trace.acceptance_rate < 0.9);
    }

    fn small_run(seed: u64) -> ChainDiagnostics {
        let spec = NetworkSpec::new(2, ActivationKind::Relu, 1, 1.0).unwrap();
        let data = Dataset::heaviside6(&[5.0]).unwrap();
        let cfg = MalaConfig {
            n_chains: 2,
            n_steps: 500,
            warmup_steps: 200,
            ..MalaConfig::tempered(16, seed)
        };
        mala_posterior_samples(&cfg, &data, &spec, &[5.0]).unwrap()
    }

    #[test]
    fn chains_are_reproducible() {
        assert_eq!(small_run(3), small_run(3));
        assert_ne!(small_run(3).mean, small_run(4).mean);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = MalaConfig::tempered(8, 0);
        cfg.burn_in = Some(cfg.n_steps);
        assert!(cfg.validate().is_err());
        cfg = MalaConfig::tempered(8, 0);
        cfg.step_size = Some(0.0);
        assert!(cfg.validate().is_err());
        let spec = NetworkSpec::new(2, ActivationKind::Relu, 1, 1.0).unwrap();
        let data = Dataset::heaviside6(&[5.0]).unwrap();
        assert!(mala_posterior_samples(&MalaConfig::tempered(8, 0), &data, &spec, &[7.0]).is_err());
    }

    #[test]
    fn zero_targets_concentrate_with_width() {
        let spec = NetworkSpec::new(2, ActivationKind::Relu, 1, 1.0).unwrap();
        let data = Dataset::heaviside6(&[5.0]).unwrap().with_targets(vec![0.0; 6]).unwrap();
        let std_at = |width| {
            let cfg = MalaConfig {
                n_chains: 2,
                n_steps: 4_000,
                ..MalaConfig::tempered(width, 1)
            };
            mala_posterior_samples(&cfg, &data, &spec, &[5.0]).unwrap().std
        };
        let (s32, s128) = (std_at(32), std_at(128));
        assert!(s128 < s32, "{s32} {s128}");
    }
}
