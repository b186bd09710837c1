use serde_json::json;

use super::sweeps::prior_rates;
use super::{Cell, Experiment, ExperimentConfig, RunError, Sink};
use crate::gp::gp_posterior_mean_var;
use crate::mc::{mala_posterior_samples, prior_tail_counts, MalaConfig, SamplerConfig};
use crate::rate::RateSolver;

/// 03a: empirical tail rates of finite-width priors against the LDP rate.
pub(super) fn prior_tails(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Vec<String>, RunError> {
    let exp = Experiment::PriorTails;
    let ys = cfg.grid_for(exp).points();
    let x = cfg.x_test_for(exp);
    let sampling = cfg.sampler.clone().unwrap_or_default();
    let spec = cfg.network.clone();
    let (ldp, failures) = prior_rates(&spec, cfg, x, &ys)?;
    let mut rows = Vec::new();
    let mut empirical = Vec::new();
    for (k, &width) in sampling.widths.iter().enumerate() {
        let sc = SamplerConfig {
            width,
            n_samples: sampling.n_samples,
            seed: cfg.seed.wrapping_add(k as u64),
            batch: sampling.batch,
        };
        let counts = prior_tail_counts(&sc, &spec, &[x], &ys)?;
        let rates: Vec<Option<f64>> = (0..ys.len()).map(|j| counts.rate(j, width)).collect();
        for (j, &y) in ys.iter().enumerate() {
            rows.push(vec![width.into(), y.into(), rates[j].into(), ldp[j].into()]);
        }
        empirical.push(rates);
    }
    sink.csv("prior_tails.csv", &["width", "y", "empirical_rate", "ldp_rate"], &rows)?;
    // Mean deviation over grid points where every width has an estimate.
    let common: Vec<usize> = (0..ys.len())
        .filter(|&j| ys[j] > 0.0 && ldp[j].is_some() && empirical.iter().all(|r| r[j].is_some()))
        .collect();
    let deviation: Vec<Option<f64>> = empirical
        .iter()
        .map(|r| {
            if common.is_empty() {
                return None;
            }
            let s: f64 = common.iter().map(|&j| (r[j].unwrap() - ldp[j].unwrap()).abs()).sum();
            Some(s / common.len() as f64)
        })
        .collect();
    let mut dev_rows = Vec::new();
    for (w, d) in sampling.widths.iter().zip(&deviation) {
        dev_rows.push(vec![Cell::from(*w), (*d).into()]);
    }
    sink.csv("tail_deviation.csv", &["width", "mean_abs_deviation"], &dev_rows)?;
    let summary = json!({
        "experiment": exp.name(),
        "network": spec,
        "x_test": x,
        "widths": sampling.widths,
        "n_samples": sampling.n_samples,
        "batch": sampling.batch,
        "common_positive_grid_points": common.len(),
        "mean_abs_deviation": deviation,
        "ldp_failures": failures,
    });
    sink.json("summary.json", &summary)?;
    Ok(failures)
}

fn histogram(samples: &[f64], bins: usize) -> Vec<(f64, u64)> {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Vec::new();
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0u64; bins];
    for &s in samples {
        let b = (((s - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (lo + (b as f64 + 0.5) * width, c))
        .collect()
}

/// 03b: Langevin posterior samples per regime with LDP and fixed-kernel
/// reference values.
pub(super) fn posterior_sampling(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Vec<String>, RunError> {
    let exp = Experiment::PosteriorSampling;
    let x = cfg.x_test_for(exp);
    let spec = cfg.network.clone();
    let data = cfg.dataset.as_ref().expect("validated").build(&[vec![x]])?;
    let sampling = cfg.mala.clone().unwrap_or_default();
    let mut failures = Vec::new();

    let mut solver = RateSolver::new(data.x(), &spec, &cfg.optimizer)?;
    let (nngp_mean, nngp_var) = gp_posterior_mean_var(&solver.nngp()[spec.hidden_layers()], &data, &[x])?;
    let t = data.index_of(&[x])?;
    let ldp_map = match solver.map(&data) {
        Ok(ev) => {
            if !ev.converged {
                failures.push(format!("ldp map at {x}: not converged"));
            }
            ev.h.map(|h| h[t])
        }
        Err(e) => {
            failures.push(format!("ldp map at {x}: {e}"));
            None
        }
    };

    let mut regimes = Vec::new();
    for r in &sampling.regimes {
        let mc = MalaConfig {
            seed: cfg.seed.wrapping_add(r.config.seed),
            ..r.config.clone()
        };
        let diag = mala_posterior_samples(&mc, &data, &spec, &[x])
            .map_err(|e| RunError::Sampler(format!("regime `{}`: {e}", r.name)))?;
        for (k, chain) in diag.chains.iter().enumerate() {
            let rows: Vec<Vec<Cell>> = chain
                .rows
                .iter()
                .map(|row| {
                    vec![
                        row.step.into(),
                        row.output_sample.into(),
                        row.accepted.into(),
                        row.log_density.into(),
                    ]
                })
                .collect();
            sink.csv(
                &format!("trace_{}_chain{k}.csv", r.name),
                &["step", "output_sample", "accepted", "log_density"],
                &rows,
            )?;
        }
        let samples: Vec<f64> = diag.samples().collect();
        let hist: Vec<Vec<Cell>> = histogram(&samples, sampling.histogram_bins)
            .into_iter()
            .map(|(c, n)| vec![c.into(), Cell::Int(n as i64)])
            .collect();
        sink.csv(&format!("histogram_{}.csv", r.name), &["bin_center", "count"], &hist)?;
        regimes.push(json!({
            "name": r.name,
            "config": mc,
            "burn_in": diag.burn_in,
            "mean": diag.mean,
            "std": diag.std,
            "acceptance_rate": diag.acceptance_rate,
            "chain_acceptance_rates": diag.chains.iter().map(|c| c.acceptance_rate).collect::<Vec<_>>(),
            "chain_step_sizes": diag.chains.iter().map(|c| c.step_size).collect::<Vec<_>>(),
        }));
    }
    let summary = json!({
        "experiment": exp.name(),
        "network": spec,
        "x_test": x,
        "regimes": regimes,
        "ldp_map": ldp_map,
        "nngp_mean": nngp_mean,
        "nngp_std": nngp_var.max(0.0).sqrt(),
        "failures": failures,
    });
    sink.json("summary.json", &summary)?;
    Ok(failures)
}
