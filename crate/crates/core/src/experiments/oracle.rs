use nalgebra::{dmatrix, DVector};
use serde_json::json;

use super::{Experiment, ExperimentConfig, RunError, Sink};
use crate::kernel::{InputSet, KernelMatrix};
use crate::linear::{
    kappa_star, kernel_rate_linear, layer_cost_linear, output_rate_linear, output_rate_linear_shallow,
    tail_exponent_linear, LinearConfig,
};
use crate::nngp::{ActivationKind, NetworkSpec};
use crate::rate::{layer_cost, RateSolver};

pub const LAYER_COST_TOL: f64 = 1e-4;
pub const KERNEL_RATE_TOL: f64 = 1e-3;
pub const SHALLOW_RATE_TOL: f64 = 1e-3;
pub const SLOPE_TOL: f64 = 0.1;
/// Relative tolerance on the deep rates along the tail sweep.
pub const TAIL_RATE_RTOL: f64 = 1e-3;

fn geometric(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Least-squares slope of `log v` against `log y`.
pub fn log_log_slope(ys: &[f64], vs: &[f64]) -> f64 {
    let xs: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let ls: Vec<f64> = vs.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let ml = ls.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ls).map(|(x, l)| (x - mx) * (l - ml)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

struct Checks {
    failures: Vec<String>,
}

impl Checks {
    fn record(&mut self, what: String, err: f64, tol: f64) -> bool {
        let pass = err.is_finite() && err <= tol;
        if !pass {
            self.failures.push(format!("{what}: error {err:e} exceeds {tol:e}"));
        }
        pass
    }
}

/// Linear-activation closed forms against the general optimizer stack.
pub(super) fn run(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Vec<String>, RunError> {
    let exp = Experiment::Oracle;
    let a = match cfg.network.activation {
        ActivationKind::Linear { a } => a,
        _ => unreachable!("validated"),
    };
    let x = cfg.x_test_for(exp);
    let k0 = x * x / cfg.network.d_in as f64;
    if !(k0 > 0.0) {
        return Err(RunError::Config("oracle needs x_test != 0".into()));
    }
    let input = InputSet::from_scalars(&[x])?;
    let opt = &cfg.optimizer;
    let spec_for = |layers: usize| NetworkSpec::new(layers + 1, ActivationKind::Linear { a }, 1, 0.0);
    let mut checks = Checks { failures: Vec::new() };
    let mut summary = serde_json::Map::new();

    // Single layer cost on 20 targets around the mean.
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for kappa in geometric(0.2 * a * k0, 5.0 * a * k0, 20) {
        let exact = layer_cost_linear(kappa, k0, a)?;
        let ev = layer_cost(
            &KernelMatrix::new(dmatrix![kappa])?,
            &KernelMatrix::new(dmatrix![k0])?,
            &ActivationKind::Linear { a },
            opt,
        );
        let got = ev.ok().and_then(|e| e.value.finite());
        let err = got.map_or(f64::INFINITY, |g| (g - exact).abs());
        worst = worst.max(err);
        let pass = checks.record(format!("layer cost at kappa={kappa}"), err, LAYER_COST_TOL);
        rows.push(vec![kappa.into(), exact.into(), got.into(), err.into(), pass.into()]);
    }
    sink.csv("layer_cost.csv", &["kappa", "closed_form", "optimizer", "abs_error", "pass"], &rows)?;
    summary.insert("layer_cost_max_error".into(), json!(worst));

    // Kernel rates of one to three layers.
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for layers in 1..=3 {
        let lc = LinearConfig::new(a, k0, layers)?;
        let mut solver = RateSolver::new(&input, &spec_for(layers)?, opt)?;
        let v = lc.nngp_variance();
        for kappa in geometric(0.3 * v, 3.0 * v, 10) {
            let exact = kernel_rate_linear(kappa, &lc)?;
            let got = solver
                .kernel_rate(&KernelMatrix::new(dmatrix![kappa])?, layers)
                .ok()
                .filter(|e| e.converged)
                .and_then(|e| e.value.finite());
            let err = got.map_or(f64::INFINITY, |g| (g - exact).abs());
            worst = worst.max(err);
            let pass = checks.record(format!("{layers}-layer kernel rate at kappa={kappa}"), err, KERNEL_RATE_TOL);
            rows.push(vec![layers.into(), kappa.into(), exact.into(), got.into(), err.into(), pass.into()]);
        }
    }
    sink.csv(
        "kernel_rate.csv",
        &["layers", "kappa", "closed_form", "optimizer", "abs_error", "pass"],
        &rows,
    )?;
    summary.insert("kernel_rate_max_error".into(), json!(worst));

    // Output rate of one hidden layer on 31 points of [-3, 3].
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    let mut solver = RateSolver::new(&input, &spec_for(1)?, opt)?;
    for k in 0..31 {
        let y = -3.0 + 0.2 * k as f64;
        let exact = output_rate_linear_shallow(y, a, k0)?;
        let got = solver
            .prior_rate(&DVector::from_element(1, y))
            .ok()
            .filter(|e| e.converged)
            .and_then(|e| e.value.finite());
        let err = got.map_or(f64::INFINITY, |g| (g - exact).abs());
        worst = worst.max(err);
        let pass = checks.record(format!("shallow output rate at y={y}"), err, SHALLOW_RATE_TOL);
        rows.push(vec![y.into(), exact.into(), got.into(), err.into(), pass.into()]);
    }
    sink.csv("shallow_rate.csv", &["y", "closed_form", "optimizer", "abs_error", "pass"], &rows)?;
    summary.insert("shallow_rate_max_error".into(), json!(worst));

    // Sublinear tails: rates and minimizing output variances over [1e2, 1e4].
    let ys = geometric(1e2, 1e4, 9);
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for layers in 1..=3 {
        let lc = LinearConfig::new(a, k0, layers)?;
        let mut solver = RateSolver::new(&input, &spec_for(layers)?, opt)?;
        let mut got_rates = Vec::new();
        let mut exact_rates = Vec::new();
        for &y in &ys {
            let exact = output_rate_linear(y, &lc)?;
            let ks = kappa_star(y, &lc)?;
            let ev = solver.prior_rate(&DVector::from_element(1, y)).ok().filter(|e| e.converged);
            let got = ev.as_ref().and_then(|e| e.value.finite());
            let got_k = ev.as_ref().map(|e| e.argmin_kernel.get(0, 0));
            let rel = got.map_or(f64::INFINITY, |g| (g - exact).abs() / exact);
            let pass = checks.record(format!("{layers}-layer output rate at y={y}"), rel, TAIL_RATE_RTOL);
            rows.push(vec![
                layers.into(),
                y.into(),
                exact.into(),
                got.into(),
                ks.into(),
                got_k.into(),
                rel.into(),
                pass.into(),
            ]);
            exact_rates.push(exact);
            if let Some(g) = got {
                got_rates.push((y, g));
            }
        }
        let expected = tail_exponent_linear(layers)?;
        let exact_slope = log_log_slope(&ys, &exact_rates);
        let fitted = if got_rates.len() == ys.len() {
            let (yy, vv): (Vec<f64>, Vec<f64>) = got_rates.into_iter().unzip();
            Some(log_log_slope(&yy, &vv))
        } else {
            None
        };
        checks.record(
            format!("{layers}-layer tail slope"),
            fitted.map_or(f64::INFINITY, |s| (s - expected).abs()),
            SLOPE_TOL,
        );
        slopes.push(vec![
            layers.into(),
            expected.into(),
            exact_slope.into(),
            fitted.into(),
            fitted.is_some_and(|s| (s - expected).abs() <= SLOPE_TOL).into(),
        ]);
    }
    sink.csv(
        "tail_rates.csv",
        &[
            "layers",
            "y",
            "closed_form",
            "optimizer",
            "kappa_star_closed_form",
            "kappa_star_optimizer",
            "rel_error",
            "pass",
        ],
        &rows,
    )?;
    sink.csv(
        "tail_slopes.csv",
        &["layers", "exponent", "closed_form_slope", "optimizer_slope", "pass"],
        &slopes,
    )?;
    summary.insert("a".into(), json!(a));
    summary.insert("kappa0".into(), json!(k0));
    summary.insert("all_passed".into(), json!(checks.failures.is_empty()));
    summary.insert("failures".into(), json!(checks.failures));
    sink.json("summary.json", &serde_json::Value::Object(summary))?;
    Ok(checks.failures)
}
