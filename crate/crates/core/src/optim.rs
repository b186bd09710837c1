//! Small dense minimizers: Adam and L-BFGS with rejection of points where
//! the objective is infinite or undefined.

use crate::error::Result;

/// Objective callback: `Ok(None)` marks a point outside the domain.
pub type EvalResult = Result<Option<(f64, Vec<f64>)>>;

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
}

impl Minimum {
    pub fn grad_norm(&self) -> f64 {
        norm(&self.grad)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy)]
pub struct AdamSettings {
    pub steps: usize,
    pub lr: f64,
    /// Stop once the gradient norm drops below this.
    pub grad_tol: f64,
}

/// Adam from `x0`, which must be inside the domain. Steps landing outside
/// are halved up to 30 times and the run stops if none is accepted.
/// Returns the best point seen.
pub fn adam<F>(mut f: F, x0: &[f64], settings: AdamSettings) -> Result<Option<Minimum>>
where
    F: FnMut(&[f64]) -> EvalResult,
{
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let Some((mut fx, mut g)) = f(x0)? else {
        return Ok(None);
    };
    let mut evaluations = 1;
    let mut x = x0.to_vec();
    let n = x.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut best = Minimum {
        x: x.clone(),
        value: fx,
        grad: g.clone(),
        iterations: 0,
        evaluations,
    };
    for t in 1..=settings.steps {
        if norm(&g) < settings.grad_tol {
            break;
        }
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        }
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let dir: Vec<f64> = (0..n)
            .map(|i| (m[i] / c1) / ((v[i] / c2).sqrt() + eps))
            .collect();
        let mut lr = settings.lr;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = (0..n).map(|i| x[i] - lr * dir[i]).collect();
            evaluations += 1;
            if let Some((ft, gt)) = f(&trial)? {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            lr *= 0.5;
        }
        let Some((xt, ft, gt)) = accepted else {
            break;
        };
        x = xt;
        fx = ft;
        g = gt;
        best.iterations = t;
        if fx < best.value {
            best.x = x.clone();
            best.value = fx;
            best.grad = g.clone();
        }
    }
    best.evaluations = evaluations;
    Ok(Some(best))
}

#[derive(Debug, Clone, Copy)]
pub struct LbfgsSettings {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub history: usize,
}

/// L-BFGS with Armijo backtracking from a point inside the domain.
pub fn lbfgs<F>(mut f: F, x0: &[f64], settings: LbfgsSettings) -> Result<Option<Minimum>>
where
    F: FnMut(&[f64]) -> EvalResult,
{
    let Some((mut fx, mut g)) = f(x0)? else {
        return Ok(None);
    };
    let mut evaluations = 1;
    let mut x = x0.to_vec();
    let n = x.len();
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0;
    let mut restarted = false;
    while iterations < settings.max_iter && norm(&g) >= settings.grad_tol {
        // Two-loop recursion.
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &q);
            for j in 0..n {
                q[j] -= alpha[i] * y_hist[i][j];
            }
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0 / norm(&g).max(1.0)
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..k {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            for j in 0..n {
                q[j] += s_hist[i][j] * (alpha[i] - beta);
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            d = g.iter().map(|v| -v / norm(&g).max(1.0)).collect();
            slope = dot(&g, &d);
            s_hist.clear();
            y_hist.clear();
        }
        let mut step = 1.0;
        let mut found = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = (0..n).map(|i| x[i] + step * d[i]).collect();
            evaluations += 1;
            if let Some((ft, gt)) = f(&trial)? {
                if ft.is_finite()
                    && gt.iter().all(|v| v.is_finite())
                    && ft <= fx + 1e-4 * step * slope
                {
                    found = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xt, ft, gt)) = found else {
            if restarted || s_hist.is_empty() {
                break;
            }
            // Retry once from steepest descent.
            s_hist.clear();
            y_hist.clear();
            restarted = true;
            continue;
        };
        restarted = false;
        let s: Vec<f64> = (0..n).map(|i| xt[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| gt[i] - g[i]).collect();
        if dot(&s, &y) > 1e-12 * norm(&s) * norm(&y) {
            if s_hist.len() == settings.history {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        x = xt;
        fx = ft;
        g = gt;
        iterations += 1;
    }
    Ok(Some(Minimum {
        x,
        value: fx,
        grad: g,
        iterations,
        evaluations,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> EvalResult {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        Ok(Some((f, g)))
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let r = lbfgs(
            rosenbrock,
            &[-1.2, 1.0],
            LbfgsSettings {
                max_iter: 500,
                grad_tol: 1e-10,
                history: 10,
            },
        )
        .unwrap()
        .unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-8 && (r.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn lbfgs_respects_domain() {
        // -log(x) + x on x > 0, minimum at 1; the first full step overshoots.
        let f = |x: &[f64]| -> EvalResult {
            if x[0] <= 0.0 {
                return Ok(None);
            }
            Ok(Some((-x[0].ln() + x[0], vec![-1.0 / x[0] + 1.0])))
        };
        let r = lbfgs(
            f,
            &[0.01],
            LbfgsSettings {
                max_iter: 100,
                grad_tol: 1e-12,
                history: 5,
            },
        )
        .unwrap()
        .unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn adam_never_accepts_outside_domain() {
        let mut visited_outside = false;
        let f = |x: &[f64]| -> EvalResult {
            if x[0] <= 0.0 {
                visited_outside = true;
                return Ok(None);
            }
            Ok(Some((x[0], vec![1.0])))
        };
        let r = adam(
            f,
            &[0.5],
            AdamSettings {
                steps: 200,
                lr: 0.1,
                grad_tol: 0.0,
            },
        )
        .unwrap()
        .unwrap();
        assert!(r.x[0] > 0.0 && r.x[0] < 0.01);
        assert!(visited_outside);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let f = |x: &[f64]| -> EvalResult {
            Ok(Some((
                (x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2),
                vec![2.0 * (x[0] - 3.0), 4.0 * (x[1] + 1.0)],
            )))
        };
        let r = adam(
            f,
            &[0.0, 0.0],
            AdamSettings {
                steps: 3000,
                lr: 0.05,
                grad_tol: 1e-6,
            },
        )
        .unwrap()
        .unwrap();
        assert!((r.x[0] - 3.0).abs() < 1e-3 && (r.x[1] + 1.0).abs() < 1e-3);
    }
}
