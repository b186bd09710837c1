//! Layer cost `J(kappa' | base) = sup_Lambda <Lambda, kappa'> - log M(Lambda)`.
//!
//! The tilt is restricted to the span of the increment support (directions
//! orthogonal to it leave `log M` unchanged) and written in coordinates
//! scaled by the untilted mean diagonal, `Lambda = W (sum_j l_j B_j) W`
//! with `W = diag(E[Xi])^{-1/2}`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::Result;
use crate::kernel::frobenius_inner;
use crate::mgf::{self, QuadratureSpec};
use crate::nngp::ActivationKind;
use crate::optim::{adam, lbfgs, norm, AdamSettings, EvalResult, LbfgsSettings};

use super::OptimizerSettings;

/// Adam hands over to L-BFGS once the dual gradient is below this.
const INNER_ADAM_EXIT: f64 = 1e-3;

/// Iteration cap of the Newton path before falling back to Adam/L-BFGS.
const NEWTON_MAX_ITER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum InnerStatus {
    Converged,
    Infinite,
    NotConverged,
}

#[derive(Debug, Clone)]
pub(crate) struct InnerOutcome {
    pub status: InnerStatus,
    pub value: f64,
    /// Maximizing tilt in original coordinates (the gradient of `J` in `kappa'`).
    pub lambda: DMatrix<f64>,
    pub grad_norm: f64,
}

impl InnerOutcome {
    fn infinite(m: usize) -> Self {
        Self {
            status: InnerStatus::Infinite,
            value: f64::INFINITY,
            lambda: DMatrix::zeros(m, m),
            grad_norm: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerProblem {
    act: ActivationKind,
    s: DMatrix<f64>,
    /// `s` is a square lower-triangular Cholesky factor of the base.
    triangular: bool,
    w: Vec<f64>,
    basis: Vec<DMatrix<f64>>,
    /// Search directions of the dual, `dirs_k = sum_j T_jk basis_j`.
    dirs: Vec<DMatrix<f64>>,
    /// `T^{-1}`, mapping orthonormal coordinates to search coordinates.
    to_dirs: DMatrix<f64>,
    /// `V e^{1/2}` from the dual Hessian `V e V^T` at zero tilt, if computed.
    hessian_sqrt: Option<DMatrix<f64>>,
    mean_pd: bool,
    mean: DMatrix<f64>,
    quad: QuadratureSpec,
}

impl LayerProblem {
    /// Base covariance given through any factor `S S^T`.
    pub fn from_factor(s: DMatrix<f64>, act: ActivationKind, quad: &QuadratureSpec) -> Result<Self> {
        let s = mgf::reduce_factor(&s);
        Self::build(s, false, act, quad)
    }

    /// As [`Self::from_factor`], with search directions whitened by the dual
    /// Hessian at zero tilt. Worth its one-off cost when the problem is
    /// solved many times.
    pub fn from_factor_preconditioned(
        s: DMatrix<f64>,
        act: ActivationKind,
        quad: &QuadratureSpec,
    ) -> Result<Self> {
        let mut p = Self::from_factor(s, act, quad)?;
        p.precondition()?;
        Ok(p)
    }

    fn precondition(&mut self) -> Result<()> {
        let n = self.basis.len();
        if n < 2 {
            return Ok(());
        }
        let m = self.dim();
        let zero = DMatrix::zeros(m, m);
        let eps = 1e-5;
        let mut h = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut col = [vec![0.0; n], vec![0.0; n]];
            col[0][k] = eps;
            col[1][k] = -eps;
            let (Some((_, ga)), Some((_, gb))) = (self.neg_dual(&col[0], &zero)?, self.neg_dual(&col[1], &zero)?)
            else {
                return Ok(());
            };
            for j in 0..n {
                h[(j, k)] = (ga[j] - gb[j]) / (2.0 * eps);
            }
        }
        let eig = SymmetricEigen::new((&h + h.transpose()) * 0.5);
        let emax = eig.eigenvalues.amax();
        if !(emax > 0.0) || eig.eigenvalues.iter().any(|&e| e <= 1e-14 * emax) {
            return Ok(());
        }
        let v = &eig.eigenvectors;
        let sq = eig.eigenvalues.map(f64::sqrt);
        let t = DMatrix::from_fn(n, n, |j, k| v[(j, k)] / sq[k]);
        self.to_dirs = DMatrix::from_fn(n, n, |k, j| v[(j, k)] * sq[k]);
        self.dirs = (0..n)
            .map(|k| (0..n).fold(DMatrix::zeros(m, m), |acc, j| acc + &self.basis[j] * t[(j, k)]))
            .collect();
        self.hessian_sqrt = Some(DMatrix::from_fn(n, n, |j, k| v[(j, k)] * sq[k]));
        Ok(())
    }

    /// `V e^{1/2}` with `V e V^T` the dual Hessian at zero tilt in the
    /// orthonormal basis; available after preconditioning.
    pub fn hessian_sqrt(&self) -> Option<&DMatrix<f64>> {
        self.hessian_sqrt.as_ref()
    }

    pub fn from_covariance(base: &DMatrix<f64>, act: ActivationKind, quad: &QuadratureSpec) -> Result<Self> {
        Self::build(mgf::covariance_factor(base), false, act, quad)
    }

    /// Positive definite base; enables [`Self::base_gradient`]. `None` if
    /// the base is not positive definite.
    pub fn from_pd_covariance(
        base: &DMatrix<f64>,
        act: ActivationKind,
        quad: &QuadratureSpec,
    ) -> Result<Option<Self>> {
        match nalgebra::Cholesky::new(base.clone()) {
            Some(c) => Self::build(c.l(), true, act, quad).map(Some),
            None => Ok(None),
        }
    }

    fn build(s: DMatrix<f64>, triangular: bool, act: ActivationKind, quad: &QuadratureSpec) -> Result<Self> {
        let m = s.nrows();
        let mean = mgf::evaluate(&s, &DMatrix::zeros(m, m), &act, quad, false)?
            .map(|e| e.grad_lambda)
            .unwrap_or_else(|| DMatrix::zeros(m, m));
        let w: Vec<f64> = (0..m)
            .map(|i| if mean[(i, i)] > 0.0 { 1.0 / mean[(i, i)].sqrt() } else { 1.0 })
            .collect();
        let basis = if triangular && !matches!(act, ActivationKind::Tanh) {
            // Full-rank base: the support spans every symmetric matrix.
            mgf::support_basis(&DMatrix::identity(m, m), &ActivationKind::Linear { a: 1.0 }, &vec![1.0; m])
        } else {
            mgf::support_basis(&s, &act, &w)
        };
        let mean = crate::kernel::symmetrize(&mean);
        let eig = SymmetricEigen::new(mean.clone()).eigenvalues;
        let lmax = eig.iter().copied().fold(0.0_f64, f64::max);
        let mean_pd = lmax > 0.0 && eig.iter().all(|&v| v > 1e-12 * lmax);
        let n = basis.len();
        Ok(Self {
            act,
            s,
            triangular,
            w,
            dirs: basis.clone(),
            to_dirs: DMatrix::identity(n, n),
            hessian_sqrt: None,
            basis,
            mean_pd,
            mean,
            quad: quad.clone(),
        })
    }

    /// Untilted mean `E[Xi]`, where the cost vanishes.
    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    pub fn dim(&self) -> usize {
        self.s.nrows()
    }

    /// Basis of the support span in scaled coordinates.
    pub fn basis(&self) -> &[DMatrix<f64>] {
        &self.basis
    }

    pub fn scale(&self) -> &[f64] {
        &self.w
    }

    fn scaled(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| self.w[i] * a[(i, j)] * self.w[j])
    }

    fn unscaled(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] / (self.w[i] * self.w[j]))
    }

    fn tilt(&self, l: &[f64]) -> DMatrix<f64> {
        let m = self.dim();
        let mut t = DMatrix::zeros(m, m);
        for (c, b) in l.iter().zip(&self.dirs) {
            t += b * *c;
        }
        self.scaled(&t)
    }

    /// Negative dual objective `log M - <Lambda, target>` and its gradient.
    fn neg_dual(&self, l: &[f64], target_scaled: &DMatrix<f64>) -> EvalResult {
        let lambda = self.tilt(l);
        let Some(e) = mgf::evaluate(&self.s, &lambda, &self.act, &self.quad, false)? else {
            return Ok(None);
        };
        let diff = self.scaled(&e.grad_lambda) - target_scaled;
        let lam_scaled: f64 = l
            .iter()
            .zip(&self.dirs)
            .map(|(c, b)| c * frobenius_inner(b, target_scaled))
            .sum();
        let grad = self.dirs.iter().map(|b| frobenius_inner(b, &diff)).collect();
        Ok(Some((e.log_m - lam_scaled, grad)))
    }

    /// Damped Newton ascent on the dual using the tilted covariance of the
    /// projections as Hessian. `None` when it fails to converge, in which
    /// case the first-order path takes over.
    fn newton(&self, start: &[f64], target_scaled: &DMatrix<f64>, opt: &OptimizerSettings) -> Result<Option<InnerOutcome>> {
        let n = self.dirs.len();
        let target_proj: Vec<f64> = self.dirs.iter().map(|b| frobenius_inner(b, target_scaled)).collect();
        let f = |l: &[f64]| self.neg_dual(l, target_scaled);
        let mut x = start.to_vec();
        for _ in 0..NEWTON_MAX_ITER {
            let lambda = self.tilt(&x);
            let Some(mom) = mgf::projected_moments(&self.s, &lambda, &self.act, &self.quad, &self.dirs, &self.w)? else {
                return Ok(None);
            };
            let grad: Vec<f64> = mom.mean.iter().zip(&target_proj).map(|(a, t)| a - t).collect();
            let value = mom.log_m - x.iter().zip(&target_proj).map(|(a, t)| a * t).sum::<f64>();
            let gn = norm(&grad);
            if gn <= opt.inner_lbfgs_tol {
                if norm(&x) > 1e6 {
                    return Ok(None);
                }
                return Ok(Some(InnerOutcome {
                    status: InnerStatus::Converged,
                    value: (-value).max(0.0),
                    lambda,
                    grad_norm: gn,
                }));
            }
            let mut h = mom.cov;
            let ridge = 1e-12 * h.diagonal().amax().max(1e-300);
            for i in 0..n {
                h[(i, i)] += ridge;
            }
            let Some(chol) = h.cholesky() else {
                return Ok(None);
            };
            let step = chol.solve(&DVector::from_column_slice(&grad));
            let slope: f64 = -grad.iter().zip(step.iter()).map(|(g, d)| g * d).sum::<f64>();
            if !(slope < 0.0) {
                return Ok(None);
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a - t * d).collect();
                if let Some((fc, _)) = f(&cand)? {
                    if fc <= value + 1e-4 * t * slope {
                        x = cand;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                return Ok(None);
            }
        }
        Ok(None)
    }

    /// Checks that rule out a finite cost before optimizing.
    fn obviously_infinite(&self, target: &DMatrix<f64>, target_scaled: &DMatrix<f64>) -> bool {
        let m = self.dim();
        let scale = target.amax().max(1e-300);
        let proj = self
            .basis
            .iter()
            .fold(DMatrix::zeros(m, m), |acc, b| acc + b * frobenius_inner(b, target_scaled));
        if (target_scaled - proj).norm() > 1e-9 * (1.0 + target_scaled.norm()) {
            return true;
        }
        let eig = SymmetricEigen::new(target_scaled.clone()).eigenvalues;
        let emin = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let emax = eig.iter().copied().fold(0.0_f64, f64::max);
        if emin < -1e-10 * emax.max(1e-300) {
            return true;
        }
        if self.mean_pd && emin <= 1e-13 * emax {
            return true;
        }
        match self.act {
            ActivationKind::Relu => target.iter().any(|&v| v < -1e-12 * scale),
            ActivationKind::Tanh => (0..m).any(|i| target[(i, i)] >= 1.0),
            ActivationKind::Linear { .. } => false,
        }
    }

    /// Solves the inner problem; `warm` is a previous maximizing tilt.
    pub fn solve(
        &self,
        target: &DMatrix<f64>,
        warm: Option<&DMatrix<f64>>,
        opt: &OptimizerSettings,
    ) -> Result<InnerOutcome> {
        let m = self.dim();
        if target.iter().any(|v| !v.is_finite()) {
            return Ok(InnerOutcome::infinite(m));
        }
        let target_scaled = self.scaled(target);
        if self.obviously_infinite(target, &target_scaled) {
            return Ok(InnerOutcome::infinite(m));
        }
        let f = |l: &[f64]| self.neg_dual(l, &target_scaled);
        let zero = vec![0.0; self.basis.len()];
        let mut start = zero.clone();
        if let Some(wl) = warm {
            if wl.nrows() == m {
                let ws = self.unscaled(wl);
                let o = nalgebra::DVector::from_iterator(
                    self.basis.len(),
                    self.basis.iter().map(|b| frobenius_inner(b, &ws)),
                );
                let cand: Vec<f64> = (&self.to_dirs * o).iter().copied().collect();
                if f(&cand)?.is_some() {
                    start = cand;
                }
            }
        }
        if !matches!(self.act, ActivationKind::Linear { .. }) {
            if let Some(out) = self.newton(&start, &target_scaled, opt)? {
                return Ok(out);
            }
        }
        let Some(a) = adam(
            &f,
            &start,
            AdamSettings {
                steps: opt.inner_adam_steps,
                lr: opt.inner_adam_lr,
                grad_tol: INNER_ADAM_EXIT,
            },
        )?
        else {
            return Ok(InnerOutcome::infinite(m));
        };
        let Some(res) = lbfgs(
            &f,
            &a.x,
            LbfgsSettings {
                max_iter: opt.inner_lbfgs_max_iter,
                grad_tol: opt.inner_lbfgs_tol,
                history: 10,
            },
        )?
        else {
            return Ok(InnerOutcome::infinite(m));
        };
        let grad_norm = res.grad_norm();
        let lambda = self.tilt(&res.x);
        if grad_norm <= 10.0 * opt.inner_lbfgs_tol && norm(&res.x) <= 1e6 {
            return Ok(InnerOutcome {
                status: InnerStatus::Converged,
                value: (-res.value).max(0.0),
                lambda,
                grad_norm,
            });
        }
        // Unbounded growth along the final ray marks an unattainable target.
        let mut dual = Vec::with_capacity(4);
        for k in 0..4 {
            let t = f64::powi(2.0, k);
            let pt: Vec<f64> = res.x.iter().map(|v| v * t).collect();
            match f(&pt)? {
                Some((v, _)) => dual.push(-v),
                None => break,
            }
        }
        if dual.len() == 4 {
            let d: Vec<f64> = dual.windows(2).map(|p| p[1] - p[0]).collect();
            if d[0] > 0.0 && d[1] >= 1.9 * d[0] && d[2] >= 1.9 * d[1] {
                return Ok(InnerOutcome::infinite(m));
            }
        }
        Ok(InnerOutcome {
            status: InnerStatus::NotConverged,
            value: -res.value,
            lambda,
            grad_norm,
        })
    }

    /// `dJ / d base` at the maximizing tilt (requires a triangular factor).
    pub fn base_gradient(&self, lambda: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>> {
        assert!(self.triangular, "base gradient needs a Cholesky factor");
        let Some(e) = mgf::evaluate(&self.s, lambda, &self.act, &self.quad, true)? else {
            return Ok(None);
        };
        let gs = e.grad_s.expect("requested factor gradient");
        // d log M / d base = sym(1/2 G_S S^{-1}); solve S^T X^T = G_S^T.
        let Some(xt) = self.s.transpose().solve_upper_triangular(&gs.transpose()) else {
            return Ok(None);
        };
        let half = xt.transpose() * 0.5;
        Ok(Some(-(&half + half.transpose()) * 0.5))
    }
}


