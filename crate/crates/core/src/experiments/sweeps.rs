use nalgebra::DVector;
use rayon::prelude::*;
use serde_json::json;

use super::{Cell, Experiment, ExperimentConfig, RunError, Sink};
use crate::gp::{gp_posterior_mean_var, gp_posterior_rate, Dataset};
use crate::kernel::{ExtReal, InputSet};
use crate::nngp::{nngp_kernels, ActivationKind, NetworkSpec};
use crate::rate::{map_predict_many, RateEvaluation, RateSolver};

/// Grid points per independently warm-started solver. Fixed, so results do
/// not depend on the thread count.
const SWEEP_CHUNK: usize = 16;

fn ext(v: ExtReal) -> Cell {
    match v {
        ExtReal::Finite(x) => Cell::Num(x),
        ExtReal::Infinite => Cell::Num(f64::INFINITY),
    }
}

/// Runs `solve` over contiguous chunks of `grid`, each chunk with its own
/// state from `init`, and concatenates in grid order.
fn chunked<S, T, I, F>(grid: &[f64], chunk: usize, init: I, solve: F) -> Result<Vec<T>, RunError>
where
    T: Send,
    I: Fn() -> Result<S, RunError> + Sync,
    F: Fn(&mut S, f64) -> T + Sync,
{
    let parts: Vec<Result<Vec<T>, RunError>> = grid
        .par_chunks(chunk)
        .map(|c| {
            let mut state = init()?;
            Ok(c.iter().map(|&v| solve(&mut state, v)).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(grid.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Outcome of one solve; solver errors become a failed, valueless point.
struct Point {
    eval: Option<RateEvaluation>,
    error: Option<String>,
}

impl Point {
    fn from(r: crate::Result<RateEvaluation>) -> Self {
        match r {
            Ok(ev) => Point { eval: Some(ev), error: None },
            Err(e) => Point {
                eval: None,
                error: Some(e.to_string()),
            },
        }
    }

    fn ok(&self) -> bool {
        self.eval.as_ref().is_some_and(|e| e.converged)
    }

    fn value(&self) -> Cell {
        self.eval.as_ref().map_or(Cell::Absent, |e| ext(e.value))
    }

    fn field(&self, f: impl Fn(&RateEvaluation) -> f64) -> Cell {
        self.eval.as_ref().map_or(Cell::Absent, |e| Cell::Num(f(e)))
    }

    fn failure(&self, what: &str) -> Option<String> {
        if self.ok() {
            return None;
        }
        Some(match (&self.error, &self.eval) {
            (Some(e), _) => format!("{what}: {e}"),
            (None, Some(ev)) => format!("{what}: not converged (outer gradient {:e})", ev.outer_grad_norm_final),
            (None, None) => format!("{what}: no result"),
        })
    }
}

fn single_input(x: f64) -> Result<InputSet, RunError> {
    Ok(InputSet::from_scalars(&[x])?)
}

fn prior_sweep(spec: &NetworkSpec, cfg: &ExperimentConfig, x: f64, ys: &[f64]) -> Result<Vec<Point>, RunError> {
    let input = single_input(x)?;
    chunked(
        ys,
        SWEEP_CHUNK,
        || Ok(RateSolver::new(&input, spec, &cfg.optimizer)?),
        |s, y| Point::from(s.prior_rate(&DVector::from_element(1, y))),
    )
}

/// Prior rates at `x` over `ys` (`None` where the solve failed) and the
/// failure reports.
pub(super) fn prior_rates(
    spec: &NetworkSpec,
    cfg: &ExperimentConfig,
    x: f64,
    ys: &[f64],
) -> Result<(Vec<Option<f64>>, Vec<String>), RunError> {
    let points = prior_sweep(spec, cfg, x, ys)?;
    let failures = points
        .iter()
        .zip(ys)
        .filter_map(|(p, &y)| p.failure(&format!("prior {}", label(&spec.activation, y))))
        .collect();
    let rates = points
        .iter()
        .map(|p| p.eval.as_ref().filter(|e| e.converged).and_then(|e| e.value.finite()))
        .collect();
    Ok((rates, failures))
}

fn posterior_sweep(
    spec: &NetworkSpec,
    cfg: &ExperimentConfig,
    data: &Dataset,
    x: f64,
    ys: &[f64],
) -> Result<Vec<Point>, RunError> {
    chunked(
        ys,
        SWEEP_CHUNK,
        || Ok(RateSolver::new(data.x(), spec, &cfg.optimizer)?),
        |s, y| Point::from(s.posterior_rate_at(data, y, &[x])),
    )
}

fn diagnostics(cfg: &ExperimentConfig, exp: Experiment, failures: &[String]) -> serde_json::Value {
    json!({
        "experiment": exp.name(),
        "network": cfg.network,
        "activations": cfg.activations(),
        "grid": cfg.grid_for(exp),
        "x_test": cfg.x_test_for(exp),
        "optimizer": cfg.optimizer,
        "all_converged": failures.is_empty(),
        "failures": failures,
    })
}

fn label(act: &ActivationKind, v: f64) -> String {
    format!("{} at {v}", act.name())
}

/// 01a, 01b and `rate`: prior rate at `x_test`, plus the posterior rate
/// when a dataset is configured.
pub(super) fn rate_curves(exp: Experiment, cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Vec<String>, RunError> {
    let ys = cfg.grid_for(exp).points();
    let x = cfg.x_test_for(exp);
    let data = match (&cfg.dataset, exp) {
        (_, Experiment::PriorRate) | (None, _) => None,
        (Some(d), _) => Some(d.build(&[vec![x]])?),
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for act in cfg.activations() {
        let spec = cfg.spec_for(act);
        let prior = prior_sweep(&spec, cfg, x, &ys)?;
        let post = match &data {
            Some(d) => Some(posterior_sweep(&spec, cfg, d, x, &ys)?),
            None => None,
        };
        for (k, &y) in ys.iter().enumerate() {
            let p = &prior[k];
            failures.extend(p.failure(&format!("prior {}", label(&act, y))));
            let mut row: Vec<Cell> = vec![act.name().into(), y.into(), p.value()];
            match &post {
                None => {
                    row.extend([
                        p.field(|e| e.inner_grad_norm_final),
                        p.field(|e| e.outer_grad_norm_final),
                        p.field(|e| e.min_kernel_diag),
                        p.field(|e| e.kernel_gap_vs_nngp),
                        p.ok().into(),
                    ]);
                }
                Some(post) => {
                    let q = &post[k];
                    failures.extend(q.failure(&format!("posterior {}", label(&act, y))));
                    row.extend([
                        q.value(),
                        q.field(|e| e.inner_grad_norm_final),
                        q.field(|e| e.outer_grad_norm_final),
                        q.field(|e| e.min_kernel_diag),
                        q.field(|e| e.kernel_gap_vs_nngp),
                        (p.ok() && q.ok()).into(),
                    ]);
                }
            }
            rows.push(row);
        }
    }
    if data.is_some() {
        sink.csv(
            "posterior_rate.csv",
            &[
                "activation",
                "y",
                "prior_rate",
                "posterior_rate",
                "inner_grad_norm",
                "outer_grad_norm",
                "min_kernel_diag",
                "kernel_gap",
                "converged",
            ],
            &rows,
        )?;
    } else {
        sink.csv(
            "prior_rate.csv",
            &[
                "activation",
                "y",
                "rate",
                "inner_grad_norm",
                "outer_grad_norm",
                "min_kernel_diag",
                "kernel_gap",
                "converged",
            ],
            &rows,
        )?;
    }
    sink.json("diagnostics.json", &diagnostics(cfg, exp, &failures))?;
    Ok(failures)
}

/// 02a: prior LDP rate against the quadratic rate of the infinite-width kernel.
pub(super) fn prior_vs_nngp(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Vec<String>, RunError> {
    let exp = Experiment::PriorVsNngp;
    let ys = cfg.grid_for(exp).points();
    let x = cfg.x_test_for(exp);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for act in cfg.activations() {
        let spec = cfg.spec_for(act);
        let solver = RateSolver::new(&single_input(x)?, &spec, &cfg.optimizer)?;
        let k0 = solver.nngp()[spec.hidden_layers()].get(0, 0);
        let prior = prior_sweep(&spec, cfg, x, &ys)?;
        for (p, &y) in prior.iter().zip(&ys) {
            failures.extend(p.failure(&format!("prior {}", label(&act, y))));
            rows.push(vec![
                act.name().into(),
                y.into(),
                p.value(),
                (0.5 * y * y / k0).into(),
                p.field(|e| e.kernel_gap_vs_nngp),
                p.ok().into(),
            ]);
        }
    }
    sink.csv(
        "prior_vs_nngp.csv",
        &["activation", "y", "ldp_rate", "nngp_rate", "kernel_gap", "converged"],
        &rows,
    )?;
    sink.json("diagnostics.json", &diagnostics(cfg, exp, &failures))?;
    Ok(failures)
}

/// 02b: posterior LDP rate against fixed-kernel regression.
pub(super) fn posterior_vs_nngp(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Vec<String>, RunError> {
    let exp = Experiment::PosteriorVsNngp;
    let ys = cfg.grid_for(exp).points();
    let x = cfg.x_test_for(exp);
    let data = cfg.dataset.as_ref().expect("validated").build(&[vec![x]])?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for act in cfg.activations() {
        let spec = cfg.spec_for(act);
        let solver = RateSolver::new(data.x(), &spec, &cfg.optimizer)?;
        let k0 = &solver.nngp()[spec.hidden_layers()];
        let post = posterior_sweep(&spec, cfg, &data, x, &ys)?;
        for (q, &y) in post.iter().zip(&ys) {
            failures.extend(q.failure(&format!("posterior {}", label(&act, y))));
            rows.push(vec![
                act.name().into(),
                y.into(),
                q.value(),
                gp_posterior_rate(y, k0, &data, &[x])?.into(),
                q.field(|e| e.kernel_gap_vs_nngp),
                q.ok().into(),
            ]);
        }
    }
    sink.csv(
        "posterior_vs_nngp.csv",
        &["activation", "y", "ldp_rate", "nngp_rate", "kernel_gap", "converged"],
        &rows,
    )?;
    sink.json("diagnostics.json", &diagnostics(cfg, exp, &failures))?;
    Ok(failures)
}

/// 01c and 02c: MAP prediction over a grid of test inputs.
pub(super) fn map_curve(exp: Experiment, cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Vec<String>, RunError> {
    let xs = cfg.grid_for(exp).points();
    let with_nngp = exp == Experiment::MapVsNngp;
    let dataset = cfg.dataset.as_ref().expect("validated");
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for act in cfg.activations() {
        let spec = cfg.spec_for(act);
        // One minimization over the training inputs serves every test input.
        let queries: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let (p, ys) = match map_predict_many(&queries, &dataset.build(&[])?, &spec, &cfg.optimizer) {
            Ok((ev, ys)) => (Point::from(Ok(ev)), ys),
            Err(e) => (Point::from(Err(e)), vec![f64::NAN; xs.len()]),
        };
        failures.extend(p.failure(&format!("map {}", act.name())));
        let means: Vec<f64> = if with_nngp {
            xs.par_iter()
                .map(|&x| {
                    let data = dataset.build(&[vec![x]])?;
                    let k = nngp_kernels(data.x(), &spec, &cfg.optimizer.quadrature)?;
                    Ok(gp_posterior_mean_var(&k[spec.hidden_layers()], &data, &[x])?.0)
                })
                .collect::<Result<_, RunError>>()?
        } else {
            Vec::new()
        };
        for (i, (&x, &y)) in xs.iter().zip(&ys).enumerate() {
            let y_cell = if y.is_finite() { Cell::Num(y) } else { Cell::Absent };
            let mut row: Vec<Cell> = vec![act.name().into(), x.into(), y_cell];
            if with_nngp {
                row.push(means[i].into());
            }
            row.push(p.field(|e| e.kernel_gap_vs_nngp));
            row.push(p.ok().into());
            rows.push(row);
        }
    }
    if with_nngp {
        sink.csv(
            "map_vs_nngp.csv",
            &["activation", "x_test", "y_map", "nngp_mean", "kernel_gap", "converged"],
            &rows,
        )?;
    } else {
        sink.csv(
            "map_curve.csv",
            &["activation", "x_test", "y_map", "kernel_gap", "converged"],
            &rows,
        )?;
    }
    sink.json("diagnostics.json", &diagnostics(cfg, exp, &failures))?;
    Ok(failures)
}
