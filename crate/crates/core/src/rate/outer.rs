//! Minimization over the hidden-layer kernels.
//!
//! The free variables are the kernels `kappa^(1..K)`. Each layer adds its
//! layer cost and a terminal term acts on `kappa^(K)`. Gradients come from
//! the envelope theorem: `dJ/dtarget` is the maximizing tilt and
//! `dJ/dbase` is the factor derivative of `log M` at that tilt.

use std::cell::RefCell;
use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{LdpError, Result};
use crate::gp::Dataset;
use crate::kernel::{frobenius_inner, op_norm_gap, symmetrize, CholeskyParam, ExtReal, InputSet, KernelMatrix};
use crate::nngp::{with_bias, ActivationKind, NetworkSpec};
use crate::optim::{adam, lbfgs, AdamSettings, EvalResult, LbfgsSettings, Minimum};

use super::inner::{InnerStatus, LayerProblem};
use super::{chain_setup, OptimizerSettings, RateEvaluation};

/// Coordinates of one free kernel.
#[derive(Debug, Clone)]
enum Param {
    /// `kappa = origin + sum_k c_k E_k` over a basis of the reachable span.
    Affine {
        origin: DMatrix<f64>,
        basis: Vec<DMatrix<f64>>,
    },
    /// `kappa = D^{1/2} L L^T D^{1/2}` with `D` fixed per solve.
    Chol { d_half: Vec<f64> },
}

impl Param {
    fn len(&self, m: usize) -> usize {
        match self {
            Param::Affine { basis, .. } => basis.len(),
            Param::Chol { .. } => m * (m + 1) / 2,
        }
    }

    fn chol(kappa: &DMatrix<f64>) -> Self {
        let d_half = (0..kappa.nrows())
            .map(|i| kappa[(i, i)].max(1e-12).sqrt())
            .collect();
        Param::Chol { d_half }
    }

    fn encode(&self, kappa: &DMatrix<f64>) -> Option<Vec<f64>> {
        match self {
            Param::Affine { origin, basis } => Some(basis_coords(basis, &(kappa - origin))),
            Param::Chol { d_half } => {
                let m = kappa.nrows();
                let mut k = DMatrix::from_fn(m, m, |i, j| kappa[(i, j)] / (d_half[i] * d_half[j]));
                let top = k.diagonal().amax();
                for i in 0..m {
                    k[(i, i)] += 1e-12 * top;
                }
                let l = Cholesky::new(symmetrize(&k))?.l();
                CholeskyParam::from_lower(&l).ok().map(|p| p.to_vec())
            }
        }
    }

    fn decode(&self, theta: &[f64], m: usize) -> Result<DMatrix<f64>> {
        match self {
            Param::Affine { origin, basis } => {
                let mut k = origin.clone();
                for (c, b) in theta.iter().zip(basis) {
                    k += b * *c;
                }
                Ok(symmetrize(&k))
            }
            Param::Chol { d_half } => {
                let l = CholeskyParam::from_vec(m, theta)?.lower();
                let k = &l * l.transpose();
                Ok(DMatrix::from_fn(m, m, |i, j| d_half[i] * k[(i, j)] * d_half[j]))
            }
        }
    }

    fn pullback(&self, theta: &[f64], g: &DMatrix<f64>, m: usize) -> Result<Vec<f64>> {
        match self {
            Param::Affine { basis, .. } => Ok(basis.iter().map(|b| frobenius_inner(b, g)).collect()),
            Param::Chol { d_half } => {
                let gs = DMatrix::from_fn(m, m, |i, j| d_half[i] * g[(i, j)] * d_half[j]);
                Ok(CholeskyParam::from_vec(m, theta)?.pullback(&gs))
            }
        }
    }
}

/// Least-squares coordinates in a (not necessarily orthonormal) basis.
fn basis_coords(basis: &[DMatrix<f64>], kappa: &DMatrix<f64>) -> Vec<f64> {
    let n = basis.len();
    let gram = DMatrix::from_fn(n, n, |a, b| frobenius_inner(&basis[a], &basis[b]));
    let rhs = DVector::from_fn(n, |a, _| frobenius_inner(&basis[a], kappa));
    match Cholesky::new(gram) {
        Some(c) => c.solve(&rhs).iter().copied().collect(),
        None => rhs.iter().copied().collect(),
    }
}

/// Term acting on the last free kernel.
#[derive(Debug, Clone)]
enum Terminal<'a> {
    /// `1/2 h^T kappa^{-1} h`.
    Rkhs(&'a DVector<f64>),
    /// `min_h 1/2 h^T kappa^{-1} h + loss(h)` in closed form.
    DataFit(&'a Dataset),
    /// Same minimum with the output at `t` clamped to `y`.
    Contracted { data: &'a Dataset, t: usize, y: f64 },
    /// `1/2 h^T kappa^{-1} h + loss(h)` with `h` appended to the variables.
    Joint(&'a Dataset),
    /// Layer cost of a fixed target on top of the last free kernel.
    Target(&'a DMatrix<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Mode {
    Prior,
    DataFit,
    Contracted,
    Joint,
    Target(usize),
}

#[derive(Debug, Clone, Default)]
struct Warm {
    kernels: Option<Vec<DMatrix<f64>>>,
    h: Option<DVector<f64>>,
    lambdas: Vec<Option<DMatrix<f64>>>,
}

/// Objective value and gradient with the quantities needed for reporting.
#[derive(Debug, Clone)]
struct Point {
    value: f64,
    grad: Vec<f64>,
    kernels: Vec<DMatrix<f64>>,
    h: Option<DVector<f64>>,
    inner_grad: f64,
}

struct Objective<'a> {
    m: usize,
    spec: &'a NetworkSpec,
    opt: &'a OptimizerSettings,
    layer1: &'a LayerProblem,
    params: Vec<Param>,
    terminal: Terminal<'a>,
    lambdas: RefCell<Vec<Option<DMatrix<f64>>>>,
    /// Lowest successful evaluation, with its parameters.
    best: RefCell<Option<(Vec<f64>, Point)>>,
}

impl Objective<'_> {
    /// Evaluates and remembers the lowest point seen, so the reported
    /// minimizer never needs a second (warm-start dependent) inner solve.
    fn eval_tracked(&self, theta: &[f64]) -> Result<Option<Point>> {
        let p = self.eval(theta)?;
        if let Some(pt) = &p {
            let mut best = self.best.borrow_mut();
            if best.as_ref().map_or(true, |(_, b)| pt.value < b.value) {
                *best = Some((theta.to_vec(), pt.clone()));
            }
        }
        Ok(p)
    }

    fn n_kernel_params(&self) -> usize {
        self.params.iter().map(|p| p.len(self.m)).sum()
    }

    fn encode(&self, kernels: &[DMatrix<f64>], h: Option<&DVector<f64>>) -> Option<Vec<f64>> {
        let mut theta = Vec::new();
        for (p, k) in self.params.iter().zip(kernels) {
            theta.extend(p.encode(k)?);
        }
        if let Terminal::Joint(_) = self.terminal {
            theta.extend(h?.iter().copied());
        }
        Some(theta)
    }

    fn solve_layer(
        &self,
        problem: &LayerProblem,
        target: &DMatrix<f64>,
        slot: usize,
    ) -> Result<Option<(f64, DMatrix<f64>, f64)>> {
        let warm = self.lambdas.borrow()[slot].clone();
        let out = problem.solve(target, warm.as_ref(), self.opt)?;
        if out.status != InnerStatus::Converged {
            return Ok(None);
        }
        self.lambdas.borrow_mut()[slot] = Some(out.lambda.clone());
        Ok(Some((out.value, out.lambda, out.grad_norm)))
    }

    fn deeper_problem(&self, below: &DMatrix<f64>) -> Result<Option<LayerProblem>> {
        let base = with_bias(below, self.spec.bias_variance);
        LayerProblem::from_pd_covariance(&base, self.spec.activation, &self.opt.quadrature)
    }

    fn eval(&self, theta: &[f64]) -> Result<Option<Point>> {
        let m = self.m;
        let k = self.params.len();
        let mut kernels = Vec::with_capacity(k);
        let mut off = 0;
        for p in &self.params {
            let n = p.len(m);
            kernels.push(p.decode(&theta[off..off + n], m)?);
            off += n;
        }
        let mut grads = vec![DMatrix::<f64>::zeros(m, m); k];
        let mut value = 0.0;
        let mut inner_grad = 0.0_f64;
        for l in 0..k {
            if l == 0 {
                let Some((v, lam, gn)) = self.solve_layer(self.layer1, &kernels[0], 0)? else {
                    return Ok(None);
                };
                value += v;
                grads[0] += lam;
                inner_grad = inner_grad.max(gn);
            } else {
                let Some(problem) = self.deeper_problem(&kernels[l - 1])? else {
                    return Ok(None);
                };
                let Some((v, lam, gn)) = self.solve_layer(&problem, &kernels[l], l)? else {
                    return Ok(None);
                };
                let Some(bg) = problem.base_gradient(&lam)? else {
                    return Ok(None);
                };
                value += v;
                grads[l] += lam;
                grads[l - 1] += bg;
                inner_grad = inner_grad.max(gn);
            }
        }
        let last = &kernels[k - 1];
        let mut h_out = None;
        let mut h_grad = Vec::new();
        match &self.terminal {
            Terminal::Rkhs(h) => {
                if h.iter().any(|v| *v != 0.0) {
                    let Some(c) = Cholesky::new(last.clone()) else {
                        return Ok(None);
                    };
                    let alpha = c.solve(*h);
                    value += 0.5 * h.dot(&alpha);
                    grads[k - 1] -= &alpha * alpha.transpose() * 0.5;
                }
                h_out = Some((*h).clone());
            }
            Terminal::DataFit(data) => {
                let d = data.train_indices();
                if !d.is_empty() {
                    let n = d.len();
                    let b = DMatrix::from_fn(n, n, |a, c| last[(d[a], d[c])] + if a == c { 1.0 } else { 0.0 });
                    let Some(c) = Cholesky::new(b) else {
                        return Ok(None);
                    };
                    let y = DVector::from_column_slice(data.y_train());
                    let beta = c.solve(&y);
                    value += 0.5 * y.dot(&beta);
                    for a in 0..n {
                        for cc in 0..n {
                            grads[k - 1][(d[a], d[cc])] -= 0.5 * beta[a] * beta[cc];
                        }
                    }
                    let h = DVector::from_fn(m, |i, _| (0..n).map(|a| last[(i, d[a])] * beta[a]).sum());
                    h_out = Some(h);
                } else {
                    h_out = Some(DVector::zeros(m));
                }
            }
            Terminal::Contracted { data, t, y } => {
                let Some(c) = Cholesky::new(last.clone()) else {
                    return Ok(None);
                };
                let p = c.inverse();
                let e = data.train_mask();
                let yf = data.y_full();
                let free: Vec<usize> = (0..m).filter(|i| i != t).collect();
                let nf = free.len();
                let a = DMatrix::from_fn(nf, nf, |i, j| p[(free[i], free[j])] + if i == j { e[free[i]] } else { 0.0 });
                let rhs = DVector::from_fn(nf, |i, _| e[free[i]] * yf[free[i]] - p[(free[i], *t)] * y);
                let Some(ca) = Cholesky::new(a) else {
                    return Ok(None);
                };
                let hf = ca.solve(&rhs);
                let mut h = DVector::zeros(m);
                h[*t] = *y;
                for (i, &fi) in free.iter().enumerate() {
                    h[fi] = hf[i];
                }
                let ph = &p * &h;
                value += 0.5 * h.dot(&ph) + data.loss(&h);
                grads[k - 1] -= &ph * ph.transpose() * 0.5;
                h_out = Some(h);
            }
            Terminal::Joint(data) => {
                let h = DVector::from_column_slice(&theta[off..]);
                let Some(c) = Cholesky::new(last.clone()) else {
                    return Ok(None);
                };
                let alpha = c.solve(&h);
                value += 0.5 * h.dot(&alpha) + data.loss(&h);
                grads[k - 1] -= &alpha * alpha.transpose() * 0.5;
                let e = data.train_mask();
                let yf = data.y_full();
                h_grad = (0..m).map(|i| alpha[i] + e[i] * (h[i] - yf[i])).collect();
                h_out = Some(h);
            }
            Terminal::Target(target) => {
                let Some(problem) = self.deeper_problem(last)? else {
                    return Ok(None);
                };
                let Some((v, lam, gn)) = self.solve_layer(&problem, target, k)? else {
                    return Ok(None);
                };
                let Some(bg) = problem.base_gradient(&lam)? else {
                    return Ok(None);
                };
                value += v;
                grads[k - 1] += bg;
                inner_grad = inner_grad.max(gn);
            }
        }
        let mut grad = Vec::with_capacity(theta.len());
        let mut off = 0;
        for (p, g) in self.params.iter().zip(&grads) {
            let n = p.len(m);
            grad.extend(p.pullback(&theta[off..off + n], &symmetrize(g), m)?);
            off += n;
        }
        grad.extend(h_grad);
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Ok(None);
        }
        Ok(Some(Point {
            value,
            grad,
            kernels,
            h: h_out,
            inner_grad,
        }))
    }
}

/// Warm-started rate computations on one input set.
///
/// Successive calls of the same kind start from the previous minimizer, so
/// sweeping a grid in order is much cheaper than independent calls. Results
/// depend only on the sequence of calls.
#[derive(Debug)]
pub struct RateSolver {
    x: InputSet,
    spec: NetworkSpec,
    opt: OptimizerSettings,
    nngp: Vec<KernelMatrix>,
    /// Untilted means of the layer problems along the chain: the infinite-width
    /// kernels evaluated with the same quadrature as the layer costs.
    start: Vec<DMatrix<f64>>,
    layer1: LayerProblem,
    warm: HashMap<Mode, Warm>,
    normalization: Option<(Dataset, f64)>,
}

impl RateSolver {
    pub fn new(x: &InputSet, spec: &NetworkSpec, opt: &OptimizerSettings) -> Result<Self> {
        let (nngp, layer1) = chain_setup(x, spec, opt)?;
        let mut start = vec![layer1.mean().clone()];
        for _ in 1..spec.hidden_layers() {
            let base = with_bias(start.last().expect("nonempty"), spec.bias_variance);
            let next = match LayerProblem::from_pd_covariance(&base, spec.activation, &opt.quadrature)? {
                Some(p) => p.mean().clone(),
                None => nngp[start.len() + 1].matrix().clone(),
            };
            start.push(next);
        }
        Ok(Self {
            x: x.clone(),
            spec: spec.clone(),
            opt: opt.clone(),
            nngp,
            start,
            layer1,
            warm: HashMap::new(),
            normalization: None,
        })
    }

    /// Infinite-width kernels `[kappa^(0), ..., kappa^(L)]`.
    pub fn nngp(&self) -> &[KernelMatrix] {
        &self.nngp
    }

    pub fn input_set(&self) -> &InputSet {
        &self.x
    }

    /// Forgets all warm starts.
    pub fn reset(&mut self) {
        self.warm.clear();
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.x().points() != self.x.points() {
            return Err(LdpError::InvalidArgument(
                "dataset inputs differ from the solver's input set".into(),
            ));
        }
        Ok(())
    }

    /// Kernel rate of hidden layer `layer` (1-based).
    pub fn kernel_rate(&mut self, kappa: &KernelMatrix, layer: usize) -> Result<RateEvaluation> {
        let depth = self.spec.hidden_layers();
        if layer == 0 || layer > depth {
            return Err(LdpError::InvalidArgument(format!(
                "layer must be in 1..={depth}, got {layer}"
            )));
        }
        if kappa.dim() != self.x.len() {
            return Err(LdpError::DimensionMismatch("kernel and input set differ in size".into()));
        }
        let gap = op_norm_gap(kappa, &self.nngp[layer]).unwrap_or(0.0);
        if layer == 1 {
            let mut warm = self.warm.remove(&Mode::Target(1)).unwrap_or_default();
            let lam = warm.lambdas.first().cloned().flatten();
            let out = self.layer1.solve(kappa.matrix(), lam.as_ref(), &self.opt)?;
            let value = match out.status {
                InnerStatus::Converged => ExtReal::Finite(out.value),
                InnerStatus::Infinite => ExtReal::Infinite,
                InnerStatus::NotConverged => return Err(LdpError::InnerNotConverged(out.grad_norm)),
            };
            if out.status == InnerStatus::Converged && self.opt.warm_start {
                warm.lambdas = vec![Some(out.lambda.clone())];
                self.warm.insert(Mode::Target(1), warm);
            }
            return Ok(RateEvaluation {
                value,
                argmin_kernel: kappa.clone(),
                layer_kernels: vec![kappa.clone()],
                h: None,
                inner_grad_norm_final: out.grad_norm,
                outer_grad_norm_final: 0.0,
                min_kernel_diag: kappa.min_diagonal(),
                kernel_gap_vs_nngp: gap,
                converged: true,
            });
        }
        if structurally_infinite(kappa.matrix(), &self.spec.activation) {
            return Ok(self.infinite(kappa.clone(), gap));
        }
        let target = kappa.matrix().clone();
        let mut ev = self.run(Mode::Target(layer), Terminal::Target(&target), layer - 1)?;
        ev.argmin_kernel = kappa.clone();
        ev.min_kernel_diag = kappa.min_diagonal();
        ev.kernel_gap_vs_nngp = gap;
        Ok(ev)
    }

    /// Prior output rate `inf_kappa I(kappa) + 1/2 h^T kappa^{-1} h`.
    pub fn prior_rate(&mut self, h: &DVector<f64>) -> Result<RateEvaluation> {
        if h.len() != self.x.len() {
            return Err(LdpError::DimensionMismatch(format!(
                "h has length {} but input set has {} points",
                h.len(),
                self.x.len()
            )));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(LdpError::NonFiniteInput("h"));
        }
        let depth = self.spec.hidden_layers();
        self.run(Mode::Prior, Terminal::Rkhs(h), depth)
    }

    /// Unnormalized posterior objective with the output at `x_test`
    /// clamped to `y`, minimized over the other outputs and the kernels.
    pub fn posterior_objective_at(&mut self, data: &Dataset, y: f64, x_test: &[f64]) -> Result<RateEvaluation> {
        self.check_data(data)?;
        if !y.is_finite() {
            return Err(LdpError::NonFiniteInput("y"));
        }
        let t = data.index_of(x_test)?;
        let depth = self.spec.hidden_layers();
        self.run(Mode::Contracted, Terminal::Contracted { data, t, y }, depth)
    }

    /// Posterior output rate at `x_test`, normalized so that its minimum is 0.
    pub fn posterior_rate_at(&mut self, data: &Dataset, y: f64, x_test: &[f64]) -> Result<RateEvaluation> {
        let constant = self.normalization(data)?;
        let mut ev = self.posterior_objective_at(data, y, x_test)?;
        if let ExtReal::Finite(v) = ev.value {
            ev.value = ExtReal::Finite((v - constant).max(0.0));
        }
        Ok(ev)
    }

    /// Minimizes `I(kappa) + 1/2 y_D^T (kappa_DD + I)^{-1} y_D`; the recorded
    /// outputs are the MAP outputs under the minimizing kernel.
    pub fn map(&mut self, data: &Dataset) -> Result<RateEvaluation> {
        self.check_data(data)?;
        let depth = self.spec.hidden_layers();
        self.run(Mode::DataFit, Terminal::DataFit(data), depth)
    }

    /// Minimizes the unnormalized posterior jointly over outputs and kernels.
    pub fn joint_map(&mut self, data: &Dataset) -> Result<RateEvaluation> {
        self.check_data(data)?;
        let depth = self.spec.hidden_layers();
        self.run(Mode::Joint, Terminal::Joint(data), depth)
    }

    /// Minimum of the unnormalized posterior objective (cached per dataset).
    pub fn normalization(&mut self, data: &Dataset) -> Result<f64> {
        if let Some((d, c)) = &self.normalization {
            if d == data {
                return Ok(*c);
            }
        }
        let ev = self.map(data)?;
        let c = ev.value.finite().ok_or(LdpError::InvalidArgument(
            "posterior objective is infinite everywhere".into(),
        ))?;
        self.normalization = Some((data.clone(), c));
        Ok(c)
    }

    fn infinite(&self, kappa: KernelMatrix, gap: f64) -> RateEvaluation {
        RateEvaluation {
            value: ExtReal::Infinite,
            min_kernel_diag: kappa.min_diagonal(),
            argmin_kernel: kappa.clone(),
            layer_kernels: vec![kappa],
            h: None,
            inner_grad_norm_final: 0.0,
            outer_grad_norm_final: 0.0,
            kernel_gap_vs_nngp: gap,
            converged: true,
        }
    }

    /// Layer 1 uses affine coordinates on its reachable span, whitened by the
    /// dual Hessian so the cost is close to `|c|^2 / 2` near the mean.
    fn params_for(&self, start: &[DMatrix<f64>]) -> Vec<Param> {
        let m = self.x.len();
        start
            .iter()
            .enumerate()
            .map(|(l, k)| {
                if l == 0 {
                    let w = self.layer1.scale();
                    let ortho = self.layer1.basis();
                    let n = ortho.len();
                    let mix = self.layer1.hessian_sqrt().cloned().unwrap_or_else(|| DMatrix::identity(n, n));
                    let basis = (0..n)
                        .map(|k| {
                            let b = (0..n).fold(DMatrix::zeros(m, m), |acc, j| acc + &ortho[j] * mix[(j, k)]);
                            DMatrix::from_fn(m, m, |i, j| b[(i, j)] / (w[i] * w[j]))
                        })
                        .collect();
                    Param::Affine {
                        origin: self.start[0].clone(),
                        basis,
                    }
                } else {
                    Param::chol(k)
                }
            })
            .collect()
    }

    fn run(&mut self, mode: Mode, terminal: Terminal<'_>, k: usize) -> Result<RateEvaluation> {
        let m = self.x.len();
        let cold: Vec<DMatrix<f64>> = self.start[..k].to_vec();
        let warm = if self.opt.warm_start {
            self.warm.get(&mode).cloned().unwrap_or_default()
        } else {
            Warm::default()
        };
        let cold_h = match &terminal {
            Terminal::Joint(data) => Some(gp_mean(&cold[k - 1], data)?),
            _ => None,
        };
        let mut starts = Vec::new();
        if let Some(kernels) = &warm.kernels {
            starts.push((kernels.clone(), warm.h.clone().or_else(|| cold_h.clone()), warm.lambdas.clone()));
        }
        starts.push((cold.clone(), cold_h.clone(), vec![None; k + 1]));

        for (kernels, h, lambdas) in starts {
            let mut lambdas = lambdas;
            lambdas.resize(k + 1, None);
            let obj = Objective {
                m,
                spec: &self.spec,
                opt: &self.opt,
                layer1: &self.layer1,
                params: self.params_for(&kernels),
                terminal: terminal.clone(),
                lambdas: RefCell::new(lambdas),
                best: RefCell::new(None),
            };
            let Some(theta0) = obj.encode(&kernels, h.as_ref()) else {
                continue;
            };
            if obj.eval_tracked(&theta0)?.is_none() {
                continue;
            }
            let Some(best) = minimize(&obj, &theta0, &self.opt)? else {
                continue;
            };
            let (theta, point) = obj.best.borrow().clone().expect("start point was feasible");
            let best = if theta == best.x {
                best
            } else {
                Minimum {
                    value: point.value,
                    grad: point.grad.clone(),
                    x: theta,
                    ..best
                }
            };
            let converged = best.grad_norm() <= self.opt.grad_tol * point.value.abs().max(1.0);
            if self.opt.warm_start {
                self.warm.insert(
                    mode,
                    Warm {
                        kernels: Some(point.kernels.clone()),
                        h: if obj.n_kernel_params() < best.x.len() { point.h.clone() } else { None },
                        lambdas: obj.lambdas.borrow().clone(),
                    },
                );
            }
            let last = KernelMatrix::from_psd_unchecked(point.kernels[k - 1].clone());
            let (argmin, reference) = (last, &self.nngp[k]);
            return Ok(RateEvaluation {
                value: ExtReal::Finite(point.value.max(0.0)),
                min_kernel_diag: argmin.min_diagonal(),
                kernel_gap_vs_nngp: op_norm_gap(&argmin, reference).unwrap_or(0.0),
                argmin_kernel: argmin,
                layer_kernels: point
                    .kernels
                    .into_iter()
                    .map(KernelMatrix::from_psd_unchecked)
                    .collect(),
                h: point.h,
                inner_grad_norm_final: point.inner_grad,
                outer_grad_norm_final: best.grad_norm(),
                converged,
            });
        }
        // No feasible starting point: the terminal cannot be met by any
        // kernel near the infinite-width chain.
        let last = self.nngp[k].clone();
        let mut ev = self.infinite(last, 0.0);
        ev.layer_kernels = self.nngp[1..=k].to_vec();
        Ok(ev)
    }
}

/// L-BFGS from the start; if that stalls above tolerance, Adam from the best
/// point followed by another L-BFGS polish.
fn minimize(obj: &Objective<'_>, theta0: &[f64], opt: &OptimizerSettings) -> Result<Option<Minimum>> {
    let mut f = |t: &[f64]| -> EvalResult { Ok(obj.eval_tracked(t)?.map(|p| (p.value, p.grad))) };
    let polish = LbfgsSettings {
        max_iter: opt.outer_lbfgs_max_iter,
        grad_tol: opt.grad_tol,
        history: 20,
    };
    let Some(first) = lbfgs(&mut f, theta0, polish)? else {
        return Ok(None);
    };
    if first.grad_norm() <= opt.grad_tol * first.value.abs().max(1.0) {
        return Ok(Some(first));
    }
    let Some(a) = adam(
        &mut f,
        &first.x,
        AdamSettings {
            steps: opt.outer_adam_steps,
            lr: opt.outer_adam_lr,
            grad_tol: opt.outer_switch_tol,
        },
    )?
    else {
        return Ok(Some(first));
    };
    let second = lbfgs(&mut f, &a.x, polish)?.unwrap_or(a);
    Ok(Some(if second.value <= first.value { second } else { first }))
}

/// Targets that no kernel of a ReLU/tanh/linear layer can produce.
fn structurally_infinite(target: &DMatrix<f64>, act: &ActivationKind) -> bool {
    let m = target.nrows();
    let scale = target.amax().max(1e-300);
    if crate::kernel::min_eigenvalue(target) < -1e-10 * scale {
        return true;
    }
    match act {
        ActivationKind::Relu => target.iter().any(|&v| v < -1e-12 * scale),
        ActivationKind::Tanh => (0..m).any(|i| target[(i, i)] >= 1.0),
        ActivationKind::Linear { .. } => false,
    }
}

/// `kappa_{.D} (kappa_DD + I)^{-1} y_D`.
fn gp_mean(kappa: &DMatrix<f64>, data: &Dataset) -> Result<DVector<f64>> {
    let m = kappa.nrows();
    let d = data.train_indices();
    if d.is_empty() {
        return Ok(DVector::zeros(m));
    }
    let n = d.len();
    let b = DMatrix::from_fn(n, n, |a, c| kappa[(d[a], d[c])] + if a == c { 1.0 } else { 0.0 });
    let beta = Cholesky::new(b)
        .ok_or(LdpError::NotPsd(f64::NAN))?
        .solve(&DVector::from_column_slice(data.y_train()));
    Ok(DVector::from_fn(m, |i, _| (0..n).map(|a| kappa[(i, d[a])] * beta[a]).sum()))
}
