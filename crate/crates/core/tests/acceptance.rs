//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ldpnn::gp::{gp_posterior_mean_var, gp_posterior_rate, Dataset};
use ldpnn::kernel::{op_norm_gap, ExtReal, InputSet, KernelMatrix};
use ldpnn::mc::{mala_posterior_samples, prior_tail_counts, MalaConfig, SamplerConfig};
use ldpnn::mgf::{cond_log_mgf, grad_cond_log_mgf, QuadratureSpec, TiltMatrix};
use ldpnn::nngp::{ActivationKind, NetworkSpec};
use ldpnn::rate::{layer_cost, map_predict_fixed_kernel, OptimizerSettings, RateSolver};
use nalgebra::{dmatrix, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

// Reference formulas for the bias-free linear chain, derived from Gaussian
// relative entropy independently of the library.

fn gauss_cost(r: f64) -> f64 {
    0.5 * (r - r.ln() - 1.0)
}

fn ref_kernel_rate(kappa: f64, layers: usize, a: f64, k0: f64) -> f64 {
    let l = layers as f64;
    let r = (kappa / (a.powi(layers as i32) * k0)).powf(1.0 / l);
    l * gauss_cost(r)
}

fn ref_shallow_rate(y: f64, a: f64, k0: f64) -> f64 {
    // Minimize gauss_cost(k / v) + y^2 / (2k) over k: k = v (1 + s) / 2.
    let v = a * k0;
    let s = (1.0 + 4.0 * y * y / v).sqrt();
    let k = 0.5 * v * (1.0 + s);
    gauss_cost(k / v) + 0.5 * y * y / k
}

fn geometric(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

fn uniform(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

fn slope(ys: &[f64], vs: &[f64]) -> f64 {
    let xs: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let ls: Vec<f64> = vs.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let (mx, ml) = (xs.iter().sum::<f64>() / n, ls.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ls).map(|(x, l)| (x - mx) * (l - ml)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn finite(ev: ldpnn::Result<ldpnn::rate::RateEvaluation>, what: &str) -> Result<ldpnn::rate::RateEvaluation, String> {
    let ev = ev.map_err(|e| format!("{what}: {e}"))?;
    if !ev.converged {
        return Err(format!("{what}: not converged"));
    }
    if !ev.value.is_finite() {
        return Err(format!("{what}: infinite"));
    }
    Ok(ev)
}

fn relu_spec() -> NetworkSpec {
    NetworkSpec::new(2, ActivationKind::Relu, 1, 1.0).unwrap()
}

fn linear_oracle() -> Outcome {
    let start = Instant::now();
    let opt = OptimizerSettings::default();
    let (a, x) = (1.5, 1.0);
    let k0 = x * x;
    let act = ActivationKind::Linear { a };
    let input = InputSet::from_scalars(&[x]).unwrap();

    let mut cost_err: f64 = 0.0;
    for kappa in geometric(0.2 * a * k0, 5.0 * a * k0, 20) {
        let ev = layer_cost(&KernelMatrix::new(dmatrix![kappa]).unwrap(), &KernelMatrix::new(dmatrix![k0]).unwrap(), &act, &opt)
            .map_err(|e| e.to_string())?;
        cost_err = cost_err.max((ev.value.to_f64() - gauss_cost(kappa / (a * k0))).abs());
    }

    let spec = NetworkSpec::new(2, act.clone(), 1, 0.0).unwrap();
    let mut solver = RateSolver::new(&input, &spec, &opt).unwrap();
    let mut shallow_err: f64 = 0.0;
    for y in uniform(-3.0, 3.0, 31) {
        let ev = finite(solver.prior_rate(&DVector::from_element(1, y)), &format!("shallow rate at {y}"))?;
        shallow_err = shallow_err.max((ev.value.to_f64() - ref_shallow_rate(y, a, k0)).abs());
    }

    let spec = NetworkSpec::new(3, act, 1, 0.0).unwrap();
    let mut solver = RateSolver::new(&input, &spec, &opt).unwrap();
    let v = a * a * k0;
    let mut kernel_err: f64 = 0.0;
    for kappa in geometric(0.3 * v, 3.0 * v, 10) {
        let ev = finite(solver.kernel_rate(&KernelMatrix::new(dmatrix![kappa]).unwrap(), 2), "kernel rate")?;
        kernel_err = kernel_err.max((ev.value.to_f64() - ref_kernel_rate(kappa, 2, a, k0)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let msg = format!(
        "layer cost err {cost_err:.2e}, shallow rate err {shallow_err:.2e}, kernel rate err {kernel_err:.2e}, {secs:.1}s"
    );
    if cost_err <= 1e-4 && shallow_err <= 1e-3 && kernel_err <= 1e-3 && secs < 300.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn deep_linear_tail() -> Outcome {
    let opt = OptimizerSettings::default();
    let spec = NetworkSpec::new(3, ActivationKind::Linear { a: 1.0 }, 1, 0.0).unwrap();
    let mut solver = RateSolver::new(&InputSet::from_scalars(&[1.0]).unwrap(), &spec, &opt).unwrap();
    let ys = geometric(1e2, 1e4, 9);
    let mut vs = Vec::new();
    for &y in &ys {
        vs.push(finite(solver.prior_rate(&DVector::from_element(1, y)), &format!("rate at {y}"))?.value.to_f64());
    }
    let s = slope(&ys, &vs);
    let msg = format!("fitted slope {s:.4} (expected 0.6667)");
    if (s - 2.0 / 3.0).abs() <= 0.1 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random_kernel(rng: &mut ChaCha8Rng, m: usize) -> KernelMatrix {
    let a = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
    KernelMatrix::new(&a * a.transpose() + DMatrix::identity(m, m) * 0.1).unwrap()
}

/// Minimizes `1/2 h^T K^{-1} h + 1/2 |h_D - y_D|^2` with `h_t` fixed (when
/// given) by solving the stationarity equations of the free coordinates.
fn brute_force_objective(k: &DMatrix<f64>, data: &Dataset, fixed: Option<(usize, f64)>) -> f64 {
    let m = k.nrows();
    let p = k.clone().try_inverse().unwrap();
    let mask = data.train_mask();
    let yf = data.y_full();
    let obj = |h: &DVector<f64>| {
        0.5 * h.dot(&(&p * h)) + 0.5 * (0..m).map(|i| mask[i] * (h[i] - yf[i]).powi(2)).sum::<f64>()
    };
    let a = &p + DMatrix::from_diagonal(&mask);
    let b = mask.component_mul(&yf);
    let free: Vec<usize> = (0..m).filter(|&i| fixed.map_or(true, |(t, _)| i != t)).collect();
    let mut h = DVector::zeros(m);
    if let Some((t, y)) = fixed {
        h[t] = y;
    }
    let af = DMatrix::from_fn(free.len(), free.len(), |i, j| a[(free[i], free[j])]);
    let rhs = DVector::from_fn(free.len(), |i, _| {
        b[free[i]] - fixed.map_or(0.0, |(t, y)| a[(free[i], t)] * y)
    });
    let sol = af.lu().solve(&rhs).unwrap();
    for (i, &f) in free.iter().enumerate() {
        h[f] = sol[i];
    }
    obj(&h)
}

fn fixed_kernel_gp() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut mean_err, mut rate_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let m = rng.gen_range(2..=5);
        let xs: Vec<Vec<f64>> = (0..m).map(|i| vec![i as f64 + rng.gen_range(0.0..0.5)]).collect();
        let ys: Vec<f64> = (0..m - 1).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let data = Dataset::from_points(&xs[..m - 1], &ys, &xs[m - 1..]).unwrap();
        let k = random_kernel(&mut rng, m);
        let x = &xs[m - 1];
        let (mean, _) = gp_posterior_mean_var(&k, &data, x).unwrap();
        let map = map_predict_fixed_kernel(x, &data, &k).unwrap();
        mean_err = mean_err.max((map - mean).abs());
        let y = rng.gen_range(-3.0..3.0);
        let rate = gp_posterior_rate(y, &k, &data, x).unwrap();
        let brute = brute_force_objective(k.matrix(), &data, Some((m - 1, y)))
            - brute_force_objective(k.matrix(), &data, None);
        rate_err = rate_err.max((rate - brute).abs());
    }
    let msg = format!("map vs mean err {mean_err:.2e}, rate vs brute force err {rate_err:.2e}");
    if mean_err <= 1e-6 && rate_err <= 1e-8 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn normalization_and_tangency() -> Outcome {
    let opt = OptimizerSettings::default();
    let ys = uniform(-1.0, 4.0, 101);
    let input = InputSet::from_scalars(&[3.0]).unwrap();
    let spec = relu_spec();
    let mut solver = RateSolver::new(&input, &spec, &opt).unwrap();
    let k0 = solver.nngp()[spec.hidden_layers()].get(0, 0);
    let mut rates = Vec::new();
    let mut gap0 = f64::NAN;
    let mut rel_err: f64 = 0.0;
    for &y in &ys {
        let ev = finite(solver.prior_rate(&DVector::from_element(1, y)), &format!("prior rate at {y}"))?;
        let r = ev.value.to_f64();
        if y.abs() < 1e-12 {
            gap0 = ev.kernel_gap_vs_nngp;
        } else if y.abs() <= 0.25 + 1e-12 {
            let q = 0.5 * y * y / k0;
            rel_err = rel_err.max((r - q).abs() / q);
        }
        rates.push(r);
    }
    let (imin, rmin) = rates
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &r)| if r < acc.1 { (i, r) } else { acc });
    let msg = format!(
        "min {rmin:.2e} at y={:.2}, gap at 0 {gap0:.2e}, max rel diff to NNGP for |y|<=0.25 {rel_err:.3}",
        ys[imin]
    );
    if rmin <= 1e-3 && ys[imin].abs() < 1e-12 && gap0 < 0.02 && rel_err <= 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn kernel_separation() -> Outcome {
    let opt = OptimizerSettings::default();
    let spec = relu_spec();
    let data = Dataset::heaviside6(&[3.0]).unwrap();
    let mut solver = RateSolver::new(data.x(), &spec, &opt).unwrap();
    let mut min_gap = f64::INFINITY;
    for y in uniform(0.0, 2.0, 101) {
        let ev = finite(solver.posterior_rate_at(&data, y, &[3.0]), &format!("posterior at {y}"))?;
        min_gap = min_gap.min(ev.kernel_gap_vs_nngp);
    }
    let zero = data.with_targets(vec![0.0; 6]).unwrap();
    let ev = finite(solver.map(&zero), "zero-data minimizer")?;
    let gap = op_norm_gap(&ev.argmin_kernel, &solver.nngp()[spec.hidden_layers()]).unwrap();
    let msg = format!("min gap with Heaviside data {min_gap:.3}, gap with zero data {gap:.2e}");
    if min_gap > 0.01 && gap < 0.02 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn change_of_measure() -> Outcome {
    let opt = OptimizerSettings::default();
    let spec = relu_spec();
    let data = Dataset::heaviside6(&[3.0]).unwrap();
    let mut post = RateSolver::new(data.x(), &spec, &opt).unwrap();
    let mut prior = RateSolver::new(data.x(), &spec, &opt).unwrap();
    let mut joint = RateSolver::new(data.x(), &spec, &opt).unwrap();
    let constant = finite(joint.joint_map(&data), "joint minimum")?.value.to_f64();
    let mut worst: f64 = 0.0;
    let mut worst_y = f64::NAN;
    for y in uniform(-1.0, 4.0, 101) {
        let i_post = finite(post.posterior_rate_at(&data, y, &[3.0]), &format!("posterior at {y}"))?;
        let h = i_post.h.clone().ok_or("posterior evaluation lacks outputs")?;
        let i_prior = finite(prior.prior_rate(&h), &format!("prior at h*({y})"))?;
        let d = (i_post.value.to_f64() - (data.loss(&h) + i_prior.value.to_f64()) + constant).abs();
        if d > worst {
            worst = d;
            worst_y = y;
        }
    }
    let msg = format!("max residual {worst:.2e} at y={worst_y:.2}");
    if worst < 2e-3 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn min_min_exchange() -> Outcome {
    let opt = OptimizerSettings::default();
    let spec = relu_spec();
    let data = Dataset::heaviside6(&[3.0]).unwrap();
    let kernel_level = finite(RateSolver::new(data.x(), &spec, &opt).unwrap().map(&data), "kernel-level minimum")?;
    let output_level = finite(RateSolver::new(data.x(), &spec, &opt).unwrap().joint_map(&data), "output-level minimum")?;
    let (a, b) = (kernel_level.value.to_f64(), output_level.value.to_f64());
    let msg = format!("kernel-level {a:.6}, output-level {b:.6}, diff {:.2e}", (a - b).abs());
    if (a - b).abs() < 2e-3 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn mgf_gradients() -> Outcome {
    let quad = QuadratureSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut summary = Vec::new();
    let mut ok = true;
    for act in [ActivationKind::Relu, ActivationKind::Tanh, ActivationKind::Linear { a: 1.0 }] {
        let mut worst: f64 = 0.0;
        let mut found = 0;
        while found < 20 {
            let m = rng.gen_range(1..=2);
            let k = random_kernel(&mut rng, m);
            let scale = rng.gen_range(0.05..0.4) / k.op_norm();
            let l = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
            let lam = (&l + l.transpose()) * (0.5 * scale);
            let tilt = TiltMatrix::new(lam.clone()).unwrap();
            let Ok(ExtReal::Finite(_)) = cond_log_mgf(&tilt, &k, &act, &quad) else { continue };
            let g = grad_cond_log_mgf(&tilt, &k, &act, &quad).map_err(|e| e.to_string())?;
            let h = 1e-5 * scale.max(1e-3);
            let mut fd = DMatrix::zeros(m, m);
            for i in 0..m {
                for j in i..m {
                    let mut e = DMatrix::zeros(m, m);
                    e[(i, j)] = 1.0;
                    e[(j, i)] = 1.0;
                    let f = |s: f64| {
                        cond_log_mgf(&TiltMatrix::new(&lam + &e * s).unwrap(), &k, &act, &quad)
                            .unwrap()
                            .to_f64()
                    };
                    let d = (f(h) - f(-h)) / (2.0 * h);
                    fd[(i, j)] = d;
                    fd[(j, i)] = d;
                }
            }
            // Moving both symmetric entries picks up G_ij + G_ji.
            let analytic = DMatrix::from_fn(m, m, |i, j| if i == j { g[(i, i)] } else { g[(i, j)] + g[(j, i)] });
            let rel = (&fd - &analytic).norm() / analytic.norm().max(1e-12);
            worst = worst.max(rel);
            found += 1;
        }
        ok &= worst < 1e-4;
        summary.push(format!("{} {worst:.2e}", act.name()));
    }
    let msg = format!("max rel err: {}", summary.join(", "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn prior_tail_scaling() -> Outcome {
    let start = Instant::now();
    let opt = OptimizerSettings::default();
    let spec = relu_spec();
    let x = 3.0;
    let grid: Vec<f64> = uniform(-1.5, 1.5, 101).into_iter().filter(|&y| y > 0.0).collect();
    let mut solver = RateSolver::new(&InputSet::from_scalars(&[x]).unwrap(), &spec, &opt).unwrap();
    let mut ldp = Vec::new();
    for &y in &grid {
        ldp.push(finite(solver.prior_rate(&DVector::from_element(1, y)), &format!("prior at {y}"))?.value.to_f64());
    }
    let widths = [32usize, 64, 128];
    let mut rates = Vec::new();
    for (k, &w) in widths.iter().enumerate() {
        let cfg = SamplerConfig {
            width: w,
            n_samples: 1_000_000,
            seed: k as u64,
            batch: 100_000,
        };
        let counts = prior_tail_counts(&cfg, &spec, &[x], &grid).map_err(|e| e.to_string())?;
        rates.push((0..grid.len()).map(|j| counts.rate(j, w)).collect::<Vec<_>>());
    }
    let common: Vec<usize> = (0..grid.len()).filter(|&j| rates.iter().all(|r| r[j].is_some())).collect();
    if common.is_empty() {
        return Err("no common grid points".into());
    }
    let dev: Vec<f64> = rates
        .iter()
        .map(|r| common.iter().map(|&j| (r[j].unwrap() - ldp[j]).abs()).sum::<f64>() / common.len() as f64)
        .collect();
    let msg = format!(
        "mean |emp - ldp| over {} points: {:.4} / {:.4} / {:.4} at widths 32/64/128, {:.1}s",
        common.len(),
        dev[0],
        dev[1],
        dev[2],
        start.elapsed().as_secs_f64()
    );
    if dev[0] >= dev[1] && dev[1] >= dev[2] {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn mala_moments() -> Outcome {
    let start = Instant::now();
    let spec = relu_spec();
    let data = Dataset::heaviside6(&[5.0]).unwrap();
    let t = mala_posterior_samples(&MalaConfig::tempered(128, 0), &data, &spec, &[5.0]).map_err(|e| e.to_string())?;
    let s = mala_posterior_samples(&MalaConfig::standard(128, 1), &data, &spec, &[5.0]).map_err(|e| e.to_string())?;
    let msg = format!(
        "tempered mean {:.3} std {:.3} acc {:.3}; standard mean {:.3} std {:.3} acc {:.3}; {:.1}s",
        t.mean,
        t.std,
        t.acceptance_rate,
        s.mean,
        s.std,
        s.acceptance_rate,
        start.elapsed().as_secs_f64()
    );
    let acc = |a: f64| (0.5..=0.9).contains(&a);
    let pass = (1.886..=1.986).contains(&t.mean)
        && (0.14..=0.24).contains(&t.std)
        && (1.68..=2.08).contains(&s.mean)
        && (1.7..=2.3).contains(&s.std)
        && acc(t.acceptance_rate)
        && acc(s.acceptance_rate);
    if pass {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn run_cli(exp: &str, config: &Path, out: &Path, threads: &str) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_ldpnn"))
        .args([exp, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--threads", threads])
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("{exp} failed: {}", String::from_utf8_lossy(&status.stderr)));
    }
    Ok(())
}

fn compare_dirs(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut other: Vec<_> = fs::read_dir(b).unwrap().map(|e| e.unwrap().file_name()).collect();
    other.sort();
    if names != other {
        return Err(format!("file sets differ in {}", a.display()));
    }
    for n in &names {
        if fs::read(a.join(n)).unwrap() != fs::read(b.join(n)).unwrap() {
            return Err(format!("{} differs", n.to_string_lossy()));
        }
    }
    Ok(names.len())
}

fn determinism() -> Outcome {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let tmp = tempfile::tempdir().unwrap();
    let short_mala = tmp.path().join("03b_short.json");
    fs::write(
        &short_mala,
        r#"{"network": {"depth": 2, "activation": {"kind": "relu"}, "d_in": 1, "bias_variance": 1.0},
            "dataset": "heaviside6", "x_test": 5.0, "seed": 3,
            "mala": {"regimes": [{"name": "tempered", "config": {"width": 32, "n_chains": 2, "n_steps": 3000, "warmup_steps": 500, "temper_exponent": "n", "output_scaling": "1/sqrt(n)", "seed": 0}}]}}"#,
    )
    .unwrap();
    let runs = [
        ("oracle", configs.join("oracle.json")),
        ("01a", configs.join("01a.json")),
        ("02b", configs.join("02b.json")),
        ("03a", configs.join("03a_smoke.json")),
        ("03b", short_mala),
    ];
    let mut files = 0;
    for (exp, cfg) in &runs {
        let a = tmp.path().join(format!("{exp}_a"));
        let b = tmp.path().join(format!("{exp}_b"));
        run_cli(exp, cfg, &a, "1")?;
        run_cli(exp, cfg, &b, "3")?;
        files += compare_dirs(&a, &b).map_err(|e| format!("{exp}: {e}"))?;
    }
    Ok(format!("{files} files identical across reruns with 1 and 3 threads"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("linear oracle", linear_oracle),
        ("deep linear tail exponent", deep_linear_tail),
        ("fixed-kernel equivalence", fixed_kernel_gp),
        ("normalization and tangency", normalization_and_tangency),
        ("kernel separation", kernel_separation),
        ("change of measure", change_of_measure),
        ("min-min exchange", min_min_exchange),
        ("mgf gradients", mgf_gradients),
        ("prior tail scaling", prior_tail_scaling),
        ("posterior sampler moments", mala_moments),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(msg) => println!("PASS {:>2} {name}: {msg}", k + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {msg}", k + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
