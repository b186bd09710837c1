//! Rate functions built from the layer cost: kernel rates, prior and
//! posterior output rates, MAP prediction and the kernel-level posterior
//! objective.

mod inner;
mod outer;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LdpError, Result};
use crate::gp::Dataset;
use crate::kernel::{op_norm_gap, symmetrize, ExtReal, InputSet, KernelMatrix};
use crate::mgf::{self, QuadratureSpec};
use crate::nngp::{nngp_kernels, nngp_layer_map, with_bias, ActivationKind, NetworkSpec};

use inner::{InnerStatus, LayerProblem};
pub use outer::RateSolver;

/// Budgets and tolerances of the nested optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub inner_adam_steps: usize,
    pub inner_adam_lr: f64,
    pub inner_lbfgs_tol: f64,
    pub inner_lbfgs_max_iter: usize,
    pub outer_adam_steps: usize,
    pub outer_adam_lr: f64,
    /// Adam hands over to the L-BFGS polish below this gradient norm.
    pub outer_switch_tol: f64,
    pub outer_lbfgs_max_iter: usize,
    pub grad_tol: f64,
    pub warm_start: bool,
    pub seed: u64,
    pub quadrature: QuadratureSpec,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            inner_adam_steps: 200,
            inner_adam_lr: 0.05,
            inner_lbfgs_tol: 1e-8,
            inner_lbfgs_max_iter: 200,
            outer_adam_steps: 1500,
            outer_adam_lr: 0.01,
            outer_switch_tol: 1e-3,
            outer_lbfgs_max_iter: 500,
            grad_tol: 1e-5,
            warm_start: true,
            seed: 0,
            quadrature: QuadratureSpec::default(),
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("inner_adam_steps", self.inner_adam_steps),
            ("inner_lbfgs_max_iter", self.inner_lbfgs_max_iter),
            ("outer_adam_steps", self.outer_adam_steps),
            ("outer_lbfgs_max_iter", self.outer_lbfgs_max_iter),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(LdpError::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        let positive = [
            ("inner_adam_lr", self.inner_adam_lr),
            ("inner_lbfgs_tol", self.inner_lbfgs_tol),
            ("outer_adam_lr", self.outer_adam_lr),
            ("outer_switch_tol", self.outer_switch_tol),
            ("grad_tol", self.grad_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LdpError::InvalidArgument(format!("{name} must be > 0")));
            }
        }
        self.quadrature.validate()
    }
}

/// A rate value with its minimizing kernels and optimizer diagnostics.
#[derive(Debug, Clone)]
pub struct RateEvaluation {
    pub value: ExtReal,
    /// Minimizing last-hidden-layer kernel (the target kernel for a layer cost).
    pub argmin_kernel: KernelMatrix,
    /// Minimizing kernels of every optimized hidden layer, first layer first.
    pub layer_kernels: Vec<KernelMatrix>,
    /// Minimizing outputs on the input set, where outputs are optimized.
    pub h: Option<DVector<f64>>,
    pub inner_grad_norm_final: f64,
    pub outer_grad_norm_final: f64,
    pub min_kernel_diag: f64,
    pub kernel_gap_vs_nngp: f64,
    pub converged: bool,
}

/// LDP-MAP prediction at one test input.
#[derive(Debug, Clone)]
pub struct MapPrediction {
    pub y_star: f64,
    /// Minimum of the unnormalized posterior objective.
    pub objective: f64,
    pub evaluation: RateEvaluation,
}

/// Layer cost `J(target | base)` where `base` is the covariance of the
/// pre-activations.
pub fn layer_cost(
    target: &KernelMatrix,
    base: &KernelMatrix,
    act: &ActivationKind,
    opt: &OptimizerSettings,
) -> Result<RateEvaluation> {
    act.validate()?;
    opt.validate()?;
    if target.dim() != base.dim() {
        return Err(LdpError::DimensionMismatch("target and base kernels differ in size".into()));
    }
    let problem = LayerProblem::from_covariance(base.matrix(), *act, &opt.quadrature)?;
    let out = problem.solve(target.matrix(), None, opt)?;
    let image = nngp_layer_map(base, act, 0.0, &opt.quadrature)?;
    let (value, converged) = match out.status {
        InnerStatus::Converged => (ExtReal::Finite(out.value), true),
        InnerStatus::Infinite => (ExtReal::Infinite, true),
        InnerStatus::NotConverged => return Err(LdpError::InnerNotConverged(out.grad_norm)),
    };
    Ok(RateEvaluation {
        value,
        argmin_kernel: target.clone(),
        layer_kernels: vec![target.clone()],
        h: None,
        inner_grad_norm_final: out.grad_norm,
        outer_grad_norm_final: 0.0,
        min_kernel_diag: target.min_diagonal(),
        kernel_gap_vs_nngp: op_norm_gap(target, &image).unwrap_or(0.0),
        converged,
    })
}

/// Kernel rate `I^(layer)(kappa)` of hidden layer `layer` (1-based).
pub fn kernel_rate(
    kappa: &KernelMatrix,
    layer: usize,
    x: &InputSet,
    spec: &NetworkSpec,
    opt: &OptimizerSettings,
) -> Result<RateEvaluation> {
    RateSolver::new(x, spec, opt)?.kernel_rate(kappa, layer)
}

/// Prior output rate of the output vector `h` on `x`.
pub fn prior_output_rate(
    h: &DVector<f64>,
    x: &InputSet,
    spec: &NetworkSpec,
    opt: &OptimizerSettings,
) -> Result<RateEvaluation> {
    RateSolver::new(x, spec, opt)?.prior_rate(h)
}

/// Posterior output rate of the output vector `h` on the dataset inputs,
/// normalized by the MAP objective.
pub fn posterior_output_rate(
    h: &DVector<f64>,
    data: &Dataset,
    spec: &NetworkSpec,
    opt: &OptimizerSettings,
) -> Result<RateEvaluation> {
    let mut solver = RateSolver::new(data.x(), spec, opt)?;
    let constant = solver.normalization(data)?;
    let mut ev = solver.prior_rate(h)?;
    ev.value = (ev.value + ExtReal::Finite(data.loss(h) - constant)).max_zero();
    Ok(ev)
}

/// LDP-MAP prediction at `x_test`.
pub fn map_predict(
    x_test: &[f64],
    data: &Dataset,
    spec: &NetworkSpec,
    opt: &OptimizerSettings,
) -> Result<MapPrediction> {
    let t = data.index_of(x_test)?;
    let mut solver = RateSolver::new(data.x(), spec, opt)?;
    let ev = solver.map(data)?;
    let h = ev.h.clone().expect("map evaluation records outputs");
    Ok(MapPrediction {
        y_star: h[t],
        objective: ev.value.to_f64(),
        evaluation: ev,
    })
}

/// LDP-MAP predictions at several test inputs from a single minimization
/// over the training inputs.
///
/// A test input does not enter the data fit, so the optimal tilts vanish on
/// it at every layer and its kernel entries are tilted expectations under
/// the training-set tilts. This avoids re-solving on every augmented input
/// set, which is ill-conditioned when a test input nearly coincides with a
/// training input.
pub fn map_predict_many(
    xs: &[Vec<f64>],
    data: &Dataset,
    spec: &NetworkSpec,
    opt: &OptimizerSettings,
) -> Result<(RateEvaluation, Vec<f64>)> {
    let d = data.train_indices();
    if d.is_empty() {
        return Err(LdpError::InvalidArgument("MAP prediction needs training data".into()));
    }
    let points = data.x().points();
    let train_x: Vec<Vec<f64>> = d.iter().map(|&i| points[i].clone()).collect();
    let train = Dataset::from_points(&train_x, data.y_train(), &[])?;
    let mut solver = RateSolver::new(train.x(), spec, opt)?;
    let ev = solver.map(&train)?;
    let layers = spec.hidden_layers();
    let act = spec.activation;
    let quad = &opt.quadrature;

    // Maximizing tilt of every layer at the training-set minimizer.
    let mut tilts = Vec::with_capacity(layers);
    for l in 0..layers {
        let problem = if l == 0 {
            LayerProblem::from_factor(first_layer_factor(train.x(), spec), act, quad)?
        } else {
            let base = with_bias(ev.layer_kernels[l - 1].matrix(), spec.bias_variance);
            LayerProblem::from_covariance(&base, act, quad)?
        };
        let out = problem.solve(ev.layer_kernels[l].matrix(), None, opt)?;
        match out.status {
            InnerStatus::Converged => tilts.push(out.lambda),
            InnerStatus::Infinite => return Err(LdpError::InvalidArgument("minimizer has infinite layer cost".into())),
            InnerStatus::NotConverged => return Err(LdpError::InnerNotConverged(out.grad_norm)),
        }
    }

    let n = d.len();
    let y = DVector::from_column_slice(train.y_train());
    let h_train = ev.h.clone().expect("map evaluation records outputs");
    let preds: Result<Vec<f64>> = xs
        .par_iter()
        .map(|x| {
            if let Some(i) = train_x.iter().position(|p| p == x) {
                return Ok(h_train[i]);
            }
            let mut pts = train_x.clone();
            pts.push(x.clone());
            let input = InputSet::new(pts, (0..n).collect(), vec![n])?;
            let mut factor = first_layer_factor(&input, spec);
            let mut kappa = DMatrix::zeros(n + 1, n + 1);
            for lam in &tilts {
                let padded = DMatrix::from_fn(n + 1, n + 1, |i, j| if i < n && j < n { lam[(i, j)] } else { 0.0 });
                let e = mgf::evaluate(&factor, &padded, &act, quad, false)?.ok_or(LdpError::Diverged)?;
                kappa = symmetrize(&e.grad_lambda);
                factor = mgf::covariance_factor(&with_bias(&kappa, spec.bias_variance));
            }
            let k_dd = DMatrix::from_fn(n, n, |i, j| kappa[(i, j)] + if i == j { 1.0 } else { 0.0 });
            let beta = k_dd.cholesky().ok_or(LdpError::NotPsd(f64::NAN))?.solve(&y);
            Ok((0..n).map(|i| kappa[(n, i)] * beta[i]).sum())
        })
        .collect();
    Ok((ev, preds?))
}

/// MAP prediction with the kernel clamped to `kappa`: minimizes
/// `1/2 h^T kappa^+ h + loss(h)` over `h` in the range of `kappa`.
pub fn map_predict_fixed_kernel(x_test: &[f64], data: &Dataset, kappa: &KernelMatrix) -> Result<f64> {
    let t = data.index_of(x_test)?;
    if kappa.dim() != data.x().len() {
        return Err(LdpError::DimensionMismatch("kernel and dataset differ in size".into()));
    }
    let eig = SymmetricEigen::new(kappa.matrix().clone());
    let lmax = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..kappa.dim())
        .filter(|&k| eig.eigenvalues[k] > 1e-12 * lmax && eig.eigenvalues[k] > 0.0)
        .collect();
    if keep.is_empty() {
        return Ok(0.0);
    }
    let u = DMatrix::from_fn(kappa.dim(), keep.len(), |i, c| eig.eigenvectors[(i, keep[c])]);
    let e = DMatrix::from_diagonal(&data.train_mask());
    let mut a = u.transpose() * &e * &u;
    for (c, &k) in keep.iter().enumerate() {
        a[(c, c)] += 1.0 / eig.eigenvalues[k];
    }
    let rhs = u.transpose() * (&e * data.y_full());
    let coef = a
        .cholesky()
        .ok_or(LdpError::NotPsd(kappa.min_eigenvalue()))?
        .solve(&rhs);
    Ok((u * coef)[t])
}

/// `I^(L-1)(kappa) + 1/2 y_D^T (kappa_DD + I)^{-1} y_D`.
pub fn kernel_posterior_objective(
    kappa: &KernelMatrix,
    data: &Dataset,
    spec: &NetworkSpec,
    opt: &OptimizerSettings,
) -> Result<ExtReal> {
    let rate = kernel_rate(kappa, spec.hidden_layers(), data.x(), spec, opt)?;
    Ok(rate.value + ExtReal::Finite(data_fit(kappa.matrix(), data)?))
}

/// `1/2 y_D^T (kappa_DD + I)^{-1} y_D`.
pub fn data_fit(kappa: &DMatrix<f64>, data: &Dataset) -> Result<f64> {
    let d = data.train_indices();
    if d.is_empty() {
        return Ok(0.0);
    }
    let n = d.len();
    let b = DMatrix::from_fn(n, n, |a, c| kappa[(d[a], d[c])] + if a == c { 1.0 } else { 0.0 });
    let y = DVector::from_column_slice(data.y_train());
    let chol = b.cholesky().ok_or(LdpError::NotPsd(f64::NAN))?;
    Ok(0.5 * y.dot(&chol.solve(&y)))
}

impl ExtReal {
    fn max_zero(self) -> ExtReal {
        match self {
            ExtReal::Finite(v) => ExtReal::Finite(v.max(0.0)),
            ExtReal::Infinite => ExtReal::Infinite,
        }
    }
}

/// Factor `[X / sqrt(d_in), sqrt(b) 1]` of the first pre-activation covariance.
pub(crate) fn first_layer_factor(x: &InputSet, spec: &NetworkSpec) -> DMatrix<f64> {
    let m = x.len();
    let d = spec.d_in;
    let inv = 1.0 / (d as f64).sqrt();
    let b = spec.bias_variance.sqrt();
    DMatrix::from_fn(m, d + 1, |i, k| if k < d { x.points()[i][k] * inv } else { b })
}

/// Kernels of the infinite-width chain and the first-layer problem, shared
/// by all solves on one input set.
pub(crate) fn chain_setup(
    x: &InputSet,
    spec: &NetworkSpec,
    opt: &OptimizerSettings,
) -> Result<(Vec<KernelMatrix>, LayerProblem)> {
    spec.validate()?;
    opt.validate()?;
    let nngp = nngp_kernels(x, spec, &opt.quadrature)?;
    let s1 = first_layer_factor(x, spec);
    let layer1 = LayerProblem::from_factor_preconditioned(s1, spec.activation, &opt.quadrature)?;
    Ok((nngp, layer1))
}
