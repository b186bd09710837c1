//! Conditional log-moment-generating function of the kernel increment
//! `Xi = sigma(g) sigma(g)^T`, `g ~ N(0, kappa)`:
//!
//! `log M(Lambda) = log E[exp(sigma(g)^T Lambda sigma(g))]`.
//!
//! The Gaussian is represented through a factor `S` with `S S^T = kappa`
//! (`g = S z`, `z ~ N(0, I_r)`). Evaluation paths:
//!
//! * linear: closed form `-1/2 log det(I - 2a S^T Lambda S)`;
//! * ReLU: radial integration in closed form using positive homogeneity,
//!   `M = E_u[(1 - 2 q(u))^{-r/2}]` over unit directions `u`, with
//!   `q(u) = relu(S u)^T Lambda relu(S u)`. Exact for `r = 1`, adaptive
//!   angular quadrature split at the activation kinks for `r = 2`, and a
//!   fixed set of sampled directions for `r >= 3`;
//! * tanh: tensor Gauss–Hermite, or fixed-seed Monte Carlo when the tensor
//!   grid would exceed the node budget.
//!
//! A value of [`ExtReal::Infinite`] means the expectation diverges.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LdpError, Result};
use crate::kernel::{ExtReal, KernelMatrix};
use crate::nngp::ActivationKind;
use crate::quadrature::{gauss_hermite, integrate_gk15, GkSettings};

/// Largest tensor grid evaluated before switching to Monte Carlo.
pub const TENSOR_NODE_BUDGET: usize = 1 << 18;

/// Exponents above this are treated as numerical divergence.
const EXP_LIMIT: f64 = 700.0;

/// Margin on `1 - 2q` below which a ReLU tilt counts as divergent.
const DOMAIN_MARGIN: f64 = 1e-12;

/// Numerical integration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureSpec {
    pub nodes_per_dim: usize,
    pub mc_fallback_samples: usize,
    pub mc_seed: u64,
    pub mc_fallback: bool,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            nodes_per_dim: 64,
            mc_fallback_samples: 100_000,
            mc_seed: 0x6d67_665f_7365_6564,
            mc_fallback: true,
        }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nodes_per_dim < 8 {
            return Err(LdpError::InvalidArgument("nodes_per_dim must be >= 8".into()));
        }
        if self.mc_fallback_samples < 100_000 {
            return Err(LdpError::InvalidArgument(
                "mc_fallback_samples must be >= 100000".into(),
            ));
        }
        Ok(())
    }
}

/// Symmetric tilt `Lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltMatrix {
    lambda: DMatrix<f64>,
}

impl TiltMatrix {
    pub fn new(lambda: DMatrix<f64>) -> Result<Self> {
        if !lambda.is_square() {
            return Err(LdpError::DimensionMismatch("tilt must be square".into()));
        }
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(LdpError::NonFiniteInput("tilt"));
        }
        let m = lambda.nrows();
        for i in 0..m {
            for j in 0..i {
                if (lambda[(i, j)] - lambda[(j, i)]).abs() > 1e-12 {
                    return Err(LdpError::InvalidArgument("tilt not symmetric".into()));
                }
            }
        }
        Ok(Self {
            lambda: (&lambda + lambda.transpose()) * 0.5,
        })
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            lambda: DMatrix::zeros(m, m),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.lambda
    }
}

/// `log M`, its gradient in `Lambda` (the tilted mean of `Xi`) and
/// optionally its gradient in the factor `S`.
#[derive(Debug, Clone)]
pub(crate) struct MgfEval {
    pub log_m: f64,
    pub grad_lambda: DMatrix<f64>,
    pub grad_s: Option<DMatrix<f64>>,
}

/// Factor `S` (m x r, r = numerical rank) with `S S^T = kappa`.
pub fn covariance_factor(kappa: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(kappa.clone());
    let lmax = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..kappa.nrows())
        .filter(|&k| eig.eigenvalues[k] > 1e-12 * lmax && eig.eigenvalues[k] > 0.0)
        .collect();
    let mut s = DMatrix::zeros(kappa.nrows(), keep.len());
    for (c, &k) in keep.iter().enumerate() {
        let scale = eig.eigenvalues[k].sqrt();
        for i in 0..kappa.nrows() {
            s[(i, c)] = eig.eigenvectors[(i, k)] * scale;
        }
    }
    s
}

/// Drops numerically null columns of a factor: returns `U Sigma` from the
/// thin SVD, which generates the same Gaussian as `S`.
pub fn reduce_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    if s.ncols() == 0 {
        return s.clone();
    }
    let svd = s.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.iter().copied().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > 1e-12 * smax && svd.singular_values[k] > 0.0)
        .collect();
    let mut out = DMatrix::zeros(s.nrows(), keep.len());
    for (c, &k) in keep.iter().enumerate() {
        for i in 0..s.nrows() {
            out[(i, c)] = u[(i, k)] * svd.singular_values[k];
        }
    }
    out
}

fn zero_eval(m: usize, r: usize, want_grad_s: bool) -> MgfEval {
    MgfEval {
        log_m: 0.0,
        grad_lambda: DMatrix::zeros(m, m),
        grad_s: want_grad_s.then(|| DMatrix::zeros(m, r)),
    }
}

/// Evaluates `log M` at `lambda` for `g = S z`; `Ok(None)` means divergence.
pub(crate) fn evaluate(
    s: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    act: &ActivationKind,
    quad: &QuadratureSpec,
    want_grad_s: bool,
) -> Result<Option<MgfEval>> {
    let m = s.nrows();
    let r = s.ncols();
    if lambda.nrows() != m || lambda.ncols() != m {
        return Err(LdpError::DimensionMismatch(format!(
            "tilt is {}x{} but kernel has {} rows",
            lambda.nrows(),
            lambda.ncols(),
            m
        )));
    }
    if r == 0 {
        // sigma(0) = 0 for every supported activation.
        return Ok(Some(zero_eval(m, r, want_grad_s)));
    }
    let mut out = match *act {
        ActivationKind::Linear { a } => linear_eval(s, lambda, a, want_grad_s),
        ActivationKind::Relu => match r {
            1 => relu_rank_one(s, lambda, want_grad_s),
            2 => relu_rank_two(s, lambda, want_grad_s),
            _ => relu_directions(s, lambda, quad, want_grad_s),
        },
        ActivationKind::Tanh => smooth_nodes(s, lambda, act, quad, want_grad_s)?,
    };
    if let Some(e) = out.as_mut() {
        if lambda.iter().all(|&v| v == 0.0) {
            e.log_m = 0.0;
        }
        if !e.log_m.is_finite() || e.grad_lambda.iter().any(|v| !v.is_finite()) {
            return Ok(None);
        }
    }
    Ok(out)
}

fn linear_eval(s: &DMatrix<f64>, lambda: &DMatrix<f64>, a: f64, want_grad_s: bool) -> Option<MgfEval> {
    let r = s.ncols();
    let st_l = s.transpose() * lambda;
    let mut amat = DMatrix::<f64>::identity(r, r) - (&st_l * s) * (2.0 * a);
    amat = (&amat + amat.transpose()) * 0.5;
    let chol = Cholesky::new(amat)?;
    let l = chol.l();
    let log_det: f64 = (0..r).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    let a_inv = chol.inverse();
    let grad_lambda = s * &a_inv * s.transpose() * a;
    let grad_s = want_grad_s.then(|| lambda * s * &a_inv * (2.0 * a));
    Some(MgfEval {
        log_m: -0.5 * log_det,
        grad_lambda: (&grad_lambda + grad_lambda.transpose()) * 0.5,
        grad_s,
    })
}

/// Accumulates `(1-2q)^{-r/2}` and its derivatives for one direction `u`.
/// Returns `false` when `1 - 2q` is not safely positive.
#[allow(clippy::too_many_arguments)]
fn relu_direction_terms(
    s: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    u: &[f64],
    weight: f64,
    value: &mut f64,
    grad_l: &mut DMatrix<f64>,
    grad_s: Option<&mut DMatrix<f64>>,
) -> bool {
    const STACK: usize = 32;
    let m = s.nrows();
    let r = s.ncols();
    let mut pre_buf = [0.0; STACK];
    let mut v_buf = [0.0; STACK];
    let mut heap_pre;
    let mut heap_v;
    let (pre, v): (&mut [f64], &mut [f64]) = if m <= STACK {
        (&mut pre_buf[..m], &mut v_buf[..m])
    } else {
        heap_pre = vec![0.0; m];
        heap_v = vec![0.0; m];
        (&mut heap_pre[..], &mut heap_v[..])
    };
    for i in 0..m {
        let mut acc = 0.0;
        for k in 0..r {
            acc += s[(i, k)] * u[k];
        }
        pre[i] = acc;
        v[i] = acc.max(0.0);
    }
    let q = quad_form(lambda, v);
    let d = 1.0 - 2.0 * q;
    if d <= DOMAIN_MARGIN {
        return false;
    }
    let rf = r as f64;
    let f = d.powf(-0.5 * rf);
    let df = rf * f / d;
    *value += weight * f;
    let c = weight * df;
    for j in 0..m {
        if v[j] == 0.0 {
            continue;
        }
        let cv = c * v[j];
        for i in 0..m {
            grad_l[(i, j)] += cv * v[i];
        }
    }
    if let Some(gs) = grad_s {
        for i in 0..m {
            if pre[i] > 0.0 {
                let lv: f64 = (0..m).map(|j| lambda[(i, j)] * v[j]).sum();
                let c = weight * df * 2.0 * lv;
                for k in 0..r {
                    gs[(i, k)] += c * u[k];
                }
            }
        }
    }
    true
}

fn finish_ratio(m_val: f64, grad_l: DMatrix<f64>, grad_s: Option<DMatrix<f64>>) -> Option<MgfEval> {
    if !(m_val > 0.0) || !m_val.is_finite() {
        return None;
    }
    let grad_lambda = grad_l / m_val;
    Some(MgfEval {
        log_m: m_val.ln(),
        grad_lambda: (&grad_lambda + grad_lambda.transpose()) * 0.5,
        grad_s: grad_s.map(|g| g / m_val),
    })
}

fn relu_rank_one(s: &DMatrix<f64>, lambda: &DMatrix<f64>, want_grad_s: bool) -> Option<MgfEval> {
    let m = s.nrows();
    let mut value = 0.0;
    let mut gl = DMatrix::zeros(m, m);
    let mut gs = want_grad_s.then(|| DMatrix::zeros(m, 1));
    for u in [1.0, -1.0] {
        if !relu_direction_terms(s, lambda, &[u], 0.5, &mut value, &mut gl, gs.as_mut()) {
            return None;
        }
    }
    finish_ratio(value, gl, gs)
}

/// Activation kinks of `relu(S e(theta))` on `[0, 2 pi]`, sorted, with both ends.
fn angular_cuts(s: &DMatrix<f64>) -> Vec<f64> {
    let mut cuts = vec![0.0, 2.0 * PI];
    for i in 0..s.nrows() {
        let (x, y) = (s[(i, 0)], s[(i, 1)]);
        if x != 0.0 || y != 0.0 {
            let t = (-x).atan2(y).rem_euclid(PI);
            cuts.push(t);
            cuts.push(t + PI);
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts
}

/// Smallest value of `e^T P e` over the arc `[t0, t1]` for a 2x2 symmetric `P`.
fn arc_min_quadratic(p: &[[f64; 2]; 2], t0: f64, t1: f64) -> f64 {
    let form = |t: f64| {
        let (c, s) = (t.cos(), t.sin());
        p[0][0] * c * c + 2.0 * p[0][1] * c * s + p[1][1] * s * s
    };
    let mut best = form(t0).min(form(t1));
    // Stationary directions are the eigenvectors: tan(2 phi) = 2 p01 / (p00 - p11).
    let phi = 0.5 * (2.0 * p[0][1]).atan2(p[0][0] - p[1][1]);
    for k in -4..=8 {
        let t = phi + k as f64 * 0.5 * PI;
        if t > t0 && t < t1 {
            best = best.min(form(t));
        }
    }
    best
}

fn relu_rank_two(s: &DMatrix<f64>, lambda: &DMatrix<f64>, want_grad_s: bool) -> Option<MgfEval> {
    let m = s.nrows();
    let cuts = angular_cuts(s);
    let dim = 1 + m * m + if want_grad_s { 2 * m } else { 0 };
    let mut total = vec![0.0; dim];
    for w in cuts.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 - t0 <= 1e-15 {
            continue;
        }
        let tm = 0.5 * (t0 + t1);
        let (cm, sm) = (tm.cos(), tm.sin());
        let active: Vec<bool> = (0..m).map(|i| s[(i, 0)] * cm + s[(i, 1)] * sm > 0.0).collect();
        let mut a = s.clone();
        for i in 0..m {
            if !active[i] {
                a[(i, 0)] = 0.0;
                a[(i, 1)] = 0.0;
            }
        }
        let q = a.transpose() * lambda * &a;
        let p = [
            [1.0 - 2.0 * q[(0, 0)], -(q[(0, 1)] + q[(1, 0)])],
            [-(q[(0, 1)] + q[(1, 0)]), 1.0 - 2.0 * q[(1, 1)]],
        ];
        if arc_min_quadratic(&p, t0, t1) <= DOMAIN_MARGIN {
            return None;
        }
        let res = integrate_gk15(
            |t, out| {
                out.iter_mut().for_each(|v| *v = 0.0);
                let (c, sn) = (t.cos(), t.sin());
                let v: Vec<f64> = (0..m)
                    .map(|i| if active[i] { a[(i, 0)] * c + a[(i, 1)] * sn } else { 0.0 })
                    .collect();
                let mut q = 0.0;
                let mut lv = vec![0.0; m];
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += lambda[(i, j)] * v[j];
                    }
                    lv[i] = acc;
                    q += v[i] * acc;
                }
                let d = 1.0 - 2.0 * q;
                let f = 1.0 / d;
                let df = 2.0 * f * f;
                out[0] = f;
                for i in 0..m {
                    for j in 0..m {
                        out[1 + i * m + j] = df * v[i] * v[j];
                    }
                }
                if want_grad_s {
                    for i in 0..m {
                        if active[i] {
                            let g = df * 2.0 * lv[i];
                            out[1 + m * m + 2 * i] = g * c;
                            out[1 + m * m + 2 * i + 1] = g * sn;
                        }
                    }
                }
            },
            t0,
            t1,
            dim,
            GkSettings::default(),
        );
        for (acc, v) in total.iter_mut().zip(&res.values) {
            *acc += v;
        }
    }
    let norm = 1.0 / (2.0 * PI);
    let value = total[0] * norm;
    let gl = DMatrix::from_fn(m, m, |i, j| total[1 + i * m + j] * norm);
    let gs = want_grad_s.then(|| DMatrix::from_fn(m, 2, |i, k| total[1 + m * m + 2 * i + k] * norm));
    finish_ratio(value, gl, gs)
}

/// Fixed node set: points `z_k` (row-major `n x r`) with log weights.
struct NodeSet {
    r: usize,
    points: Vec<f64>,
    log_w: Vec<f64>,
}

impl NodeSet {
    fn len(&self) -> usize {
        self.log_w.len()
    }

    fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.r..(k + 1) * self.r]
    }
}

#[derive(Hash, PartialEq, Eq, Clone, Copy)]
enum NodeKey {
    Tensor { n: usize, r: usize },
    Sampled { count: usize, r: usize, seed: u64, unit: bool },
}

fn node_set(key: NodeKey) -> Arc<NodeSet> {
    static CACHE: OnceLock<Mutex<HashMap<NodeKey, Arc<NodeSet>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().expect("node cache poisoned").get(&key) {
        return v.clone();
    }
    let built = Arc::new(build_nodes(key));
    cache
        .lock()
        .expect("node cache poisoned")
        .entry(key)
        .or_insert(built)
        .clone()
}

fn build_nodes(key: NodeKey) -> NodeSet {
    match key {
        NodeKey::Tensor { n, r } => {
            let rule = gauss_hermite(n);
            let log_w1: Vec<f64> = rule.weights.iter().map(|w| w.ln()).collect();
            let total = n.pow(r as u32);
            let mut points = Vec::with_capacity(total * r);
            let mut log_w = Vec::with_capacity(total);
            let mut idx = vec![0usize; r];
            for _ in 0..total {
                let mut lw = 0.0;
                for &i in &idx {
                    points.push(rule.nodes[i]);
                    lw += log_w1[i];
                }
                log_w.push(lw);
                for d in (0..r).rev() {
                    idx[d] += 1;
                    if idx[d] < n {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            NodeSet { r, points, log_w }
        }
        NodeKey::Sampled { count, r, seed, unit } => {
            let half = count.div_ceil(2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut points = Vec::with_capacity(2 * half * r);
            let mut z = vec![0.0; r];
            for _ in 0..half {
                for v in z.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                if unit {
                    let nrm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    z.iter_mut().for_each(|v| *v /= nrm);
                }
                points.extend_from_slice(&z);
                points.extend(z.iter().map(|v| -v));
            }
            let n = 2 * half;
            NodeSet {
                r,
                points,
                log_w: vec![-(n as f64).ln(); n],
            }
        }
    }
}

/// Nodes per parallel work unit; partial sums are combined in chunk order,
/// so results do not depend on the number of threads.
const NODE_CHUNK: usize = 4096;

/// Partial sums over one chunk of nodes.
struct Partial {
    value: f64,
    grad_l: DMatrix<f64>,
    grad_s: Option<DMatrix<f64>>,
}

fn combine(parts: Vec<Partial>) -> Partial {
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("at least one chunk");
    for p in it {
        acc.value += p.value;
        acc.grad_l += p.grad_l;
        if let (Some(a), Some(b)) = (acc.grad_s.as_mut(), p.grad_s) {
            *a += b;
        }
    }
    acc
}

fn chunks(count: usize) -> Vec<std::ops::Range<usize>> {
    (0..count.div_ceil(NODE_CHUNK))
        .map(|c| c * NODE_CHUNK..((c + 1) * NODE_CHUNK).min(count))
        .collect()
}

fn relu_directions(
    s: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    quad: &QuadratureSpec,
    want_grad_s: bool,
) -> Option<MgfEval> {
    let m = s.nrows();
    let r = s.ncols();
    let nodes = node_set(NodeKey::Sampled {
        count: quad.mc_fallback_samples,
        r,
        seed: quad.mc_seed,
        unit: true,
    });
    let w = 1.0 / nodes.len() as f64;
    let parts: Option<Vec<Partial>> = chunks(nodes.len())
        .into_par_iter()
        .map(|range| {
            let mut part = Partial {
                value: 0.0,
                grad_l: DMatrix::zeros(m, m),
                grad_s: want_grad_s.then(|| DMatrix::zeros(m, r)),
            };
            for k in range {
                if !relu_direction_terms(s, lambda, nodes.point(k), w, &mut part.value, &mut part.grad_l, part.grad_s.as_mut()) {
                    return None;
                }
            }
            Some(part)
        })
        .collect();
    let total = combine(parts?);
    finish_ratio(total.value, total.grad_l, total.grad_s)
}

/// Gaussian nodes for `z ~ N(0, I_r)`: a tensor Gauss-Hermite rule when it
/// fits the node budget, otherwise the sampled fallback.
fn smooth_node_set(r: usize, quad: &QuadratureSpec) -> Result<Arc<NodeSet>> {
    let mut n = quad.nodes_per_dim;
    while n > 8 && (n as f64).powi(r as i32) > TENSOR_NODE_BUDGET as f64 {
        n -= 1;
    }
    let tensor_fits = (n as f64).powi(r as i32) <= TENSOR_NODE_BUDGET as f64;
    let key = if tensor_fits {
        NodeKey::Tensor { n, r }
    } else if quad.mc_fallback {
        NodeKey::Sampled {
            count: quad.mc_fallback_samples,
            r,
            seed: quad.mc_seed,
            unit: false,
        }
    } else if r <= 8 {
        NodeKey::Tensor { n: 8, r }
    } else {
        return Err(LdpError::DimensionTooLarge(r));
    };
    Ok(node_set(key))
}

/// Tilted moments of the projections `a_k = u^T D_k u`, `u = W sigma(S z)`,
/// `W = diag(w)`, for a bounded smooth activation.
#[derive(Debug, Clone)]
pub(crate) struct ProjectedMoments {
    pub log_m: f64,
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

/// `log M(lambda)` with the tilted mean and covariance of the projections
/// onto `dirs`; `Ok(None)` means divergence. Not available for the linear
/// activation.
pub(crate) fn projected_moments(
    s: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    act: &ActivationKind,
    quad: &QuadratureSpec,
    dirs: &[DMatrix<f64>],
    w: &[f64],
) -> Result<Option<ProjectedMoments>> {
    match act {
        ActivationKind::Tanh => smooth_projected_moments(s, lambda, act, quad, dirs, w),
        ActivationKind::Relu => Ok(relu_projected_moments(s, lambda, quad, dirs, w)),
        ActivationKind::Linear { .. } => Err(LdpError::InvalidArgument(
            "projected moments are not implemented for the linear activation".into(),
        )),
    }
}

/// Direction tables `D_k` as doubled upper triangles, matching the packing
/// of [`pack_outer`].
fn pack_dirs(dirs: &[DMatrix<f64>], m: usize) -> Vec<f64> {
    let mut tri = Vec::with_capacity(dirs.len() * m * (m + 1) / 2);
    for d in dirs {
        for j in 0..m {
            for i in 0..=j {
                tri.push(if i == j { d[(i, j)] } else { d[(i, j)] + d[(j, i)] });
            }
        }
    }
    tri
}

/// Upper triangle of `u u^T` with `u = W v`.
fn pack_outer(v: &[f64], w: &[f64], out: &mut [f64]) {
    let mut c = 0;
    for j in 0..v.len() {
        for i in 0..=j {
            out[c] = w[i] * v[i] * w[j] * v[j];
            c += 1;
        }
    }
}

fn project(tri: &[f64], uu: &[f64], a: &mut [f64]) {
    let pairs = uu.len();
    for (k, ak) in a.iter_mut().enumerate() {
        *ak = tri[k * pairs..(k + 1) * pairs].iter().zip(uu).map(|(d, x)| d * x).sum();
    }
}

/// Running sums `sum p`, `sum p1 a`, `sum p2 a a^T` (upper triangle).
struct MomentSums {
    total: f64,
    first: Vec<f64>,
    second: DMatrix<f64>,
}

impl MomentSums {
    fn new(n: usize) -> Self {
        Self {
            total: 0.0,
            first: vec![0.0; n],
            second: DMatrix::zeros(n, n),
        }
    }

    fn add(&mut self, p0: f64, p1: f64, p2: f64, a: &[f64]) {
        self.total += p0;
        for k in 0..a.len() {
            self.first[k] += p1 * a[k];
            let pa = p2 * a[k];
            for l in 0..=k {
                self.second[(l, k)] += pa * a[l];
            }
        }
    }

    fn merge(&mut self, other: MomentSums) {
        self.total += other.total;
        self.first.iter_mut().zip(&other.first).for_each(|(a, b)| *a += b);
        self.second += other.second;
    }

    fn finish(self, log_scale: f64) -> Option<ProjectedMoments> {
        if !(self.total > 0.0) || !self.total.is_finite() {
            return None;
        }
        let n = self.first.len();
        let mean: Vec<f64> = self.first.iter().map(|f| f / self.total).collect();
        let cov = DMatrix::from_fn(n, n, |i, j| {
            let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
            self.second[(lo, hi)] / self.total - mean[i] * mean[j]
        });
        if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(ProjectedMoments {
            log_m: log_scale + self.total.ln(),
            mean,
            cov,
        })
    }
}

/// Radial factors `E[rho^{2j} exp(rho^2 q)]` for `rho ~ chi_r`, relative to
/// `d^{-r/2}` with `d = 1 - 2q`: `1`, `r / d`, `r (r + 2) / d^2`.
fn radial_factors(d: f64, r: usize) -> (f64, f64, f64) {
    let rf = r as f64;
    let f0 = d.powf(-0.5 * rf);
    (f0, f0 * rf / d, f0 * rf * (rf + 2.0) / (d * d))
}

/// ReLU is positively homogeneous, so `g = rho S u` with `u` on the unit
/// sphere reduces the radial part to closed form.
fn relu_projected_moments(
    s: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    quad: &QuadratureSpec,
    dirs: &[DMatrix<f64>],
    w: &[f64],
) -> Option<ProjectedMoments> {
    let m = s.nrows();
    let r = s.ncols();
    let n = dirs.len();
    let tri = pack_dirs(dirs, m);
    let pairs = m * (m + 1) / 2;
    if r == 0 {
        return MomentSums {
            total: 1.0,
            ..MomentSums::new(n)
        }
        .finish(0.0);
    }
    // Adds one direction with quadrature weight `wt`; false on divergence.
    let direction = |u: &[f64], wt: f64, sums: &mut MomentSums, v: &mut [f64], uu: &mut [f64], a: &mut [f64]| {
        for i in 0..m {
            v[i] = (0..r).map(|k| s[(i, k)] * u[k]).sum::<f64>().max(0.0);
        }
        let d = 1.0 - 2.0 * quad_form(lambda, v);
        if d <= DOMAIN_MARGIN {
            return false;
        }
        let (f0, f1, f2) = radial_factors(d, r);
        pack_outer(v, w, uu);
        project(&tri, uu, a);
        sums.add(wt * f0, wt * f1, wt * f2, a);
        true
    };
    match r {
        1 => {
            let mut sums = MomentSums::new(n);
            let (mut v, mut uu, mut a) = (vec![0.0; m], vec![0.0; pairs], vec![0.0; n]);
            for u in [1.0, -1.0] {
                if !direction(&[u], 0.5, &mut sums, &mut v, &mut uu, &mut a) {
                    return None;
                }
            }
            sums.finish(0.0)
        }
        2 => {
            // The integrand is smooth between activation kinks; integrate each
            // arc adaptively over the packed sums.
            let cuts = angular_cuts(s);
            let tri_len = n * (n + 1) / 2;
            let dim = 1 + n + tri_len;
            let mut total = vec![0.0; dim];
            for win in cuts.windows(2) {
                let (t0, t1) = (win[0], win[1]);
                if t1 - t0 <= 1e-15 {
                    continue;
                }
                let tm = 0.5 * (t0 + t1);
                let (cm, sm) = (tm.cos(), tm.sin());
                let active: Vec<bool> = (0..m).map(|i| s[(i, 0)] * cm + s[(i, 1)] * sm > 0.0).collect();
                let mut act_s = s.clone();
                for i in 0..m {
                    if !active[i] {
                        act_s[(i, 0)] = 0.0;
                        act_s[(i, 1)] = 0.0;
                    }
                }
                let q = act_s.transpose() * lambda * &act_s;
                let p = [
                    [1.0 - 2.0 * q[(0, 0)], -(q[(0, 1)] + q[(1, 0)])],
                    [-(q[(0, 1)] + q[(1, 0)]), 1.0 - 2.0 * q[(1, 1)]],
                ];
                if arc_min_quadratic(&p, t0, t1) <= DOMAIN_MARGIN {
                    return None;
                }
                let (mut v, mut uu, mut a) = (vec![0.0; m], vec![0.0; pairs], vec![0.0; n]);
                let res = integrate_gk15(
                    |t, out| {
                        let (c, sn) = (t.cos(), t.sin());
                        for i in 0..m {
                            v[i] = if active[i] { act_s[(i, 0)] * c + act_s[(i, 1)] * sn } else { 0.0 };
                        }
                        let d = 1.0 - 2.0 * quad_form(lambda, &v);
                        let (f0, f1, f2) = radial_factors(d, 2);
                        pack_outer(&v, w, &mut uu);
                        project(&tri, &uu, &mut a);
                        out[0] = f0;
                        for k in 0..n {
                            out[1 + k] = f1 * a[k];
                        }
                        let mut c2 = 1 + n;
                        for k in 0..n {
                            for l in 0..=k {
                                out[c2] = f2 * a[k] * a[l];
                                c2 += 1;
                            }
                        }
                    },
                    t0,
                    t1,
                    dim,
                    GkSettings::default(),
                );
                for (acc, v) in total.iter_mut().zip(&res.values) {
                    *acc += v;
                }
            }
            let norm = 1.0 / (2.0 * PI);
            let mut sums = MomentSums::new(n);
            sums.total = total[0] * norm;
            for k in 0..n {
                sums.first[k] = total[1 + k] * norm;
            }
            let mut c2 = 1 + n;
            for k in 0..n {
                for l in 0..=k {
                    sums.second[(l, k)] = total[c2] * norm;
                    c2 += 1;
                }
            }
            sums.finish(0.0)
        }
        _ => {
            let nodes = node_set(NodeKey::Sampled {
                count: quad.mc_fallback_samples,
                r,
                seed: quad.mc_seed,
                unit: true,
            });
            let wt = 1.0 / nodes.len() as f64;
            let parts: Option<Vec<MomentSums>> = chunks(nodes.len())
                .into_par_iter()
                .map(|range| {
                    let mut sums = MomentSums::new(n);
                    let (mut v, mut uu, mut a) = (vec![0.0; m], vec![0.0; pairs], vec![0.0; n]);
                    for k in range {
                        if !direction(nodes.point(k), wt, &mut sums, &mut v, &mut uu, &mut a) {
                            return None;
                        }
                    }
                    Some(sums)
                })
                .collect();
            let mut it = parts?.into_iter();
            let mut acc = it.next()?;
            for p in it {
                acc.merge(p);
            }
            acc.finish(0.0)
        }
    }
}

fn smooth_projected_moments(
    s: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    act: &ActivationKind,
    quad: &QuadratureSpec,
    dirs: &[DMatrix<f64>],
    w: &[f64],
) -> Result<Option<ProjectedMoments>> {
    let m = s.nrows();
    let r = s.ncols();
    let n = dirs.len();
    let nodes = smooth_node_set(r, quad)?;
    let ranges = chunks(nodes.len());
    let sigma_at = |k: usize, v: &mut [f64]| {
        let z = nodes.point(k);
        for i in 0..m {
            let g: f64 = (0..r).map(|c| s[(i, c)] * z[c]).sum();
            v[i] = act.eval(g);
        }
    };
    let expo: Option<Vec<Vec<f64>>> = ranges
        .par_iter()
        .map(|range| {
            let mut v = vec![0.0; m];
            let mut out = Vec::with_capacity(range.len());
            for k in range.clone() {
                sigma_at(k, &mut v);
                let e = quad_form(lambda, &v);
                if e > EXP_LIMIT {
                    return None;
                }
                out.push(e + nodes.log_w[k]);
            }
            Some(out)
        })
        .collect();
    let Some(expo) = expo else {
        return Ok(None);
    };
    let max_e = expo
        .iter()
        .flat_map(|c| c.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let tri = pack_dirs(dirs, m);
    let pairs = m * (m + 1) / 2;
    let parts: Vec<MomentSums> = ranges
        .par_iter()
        .zip(expo.par_iter())
        .map(|(range, ex)| {
            let mut sums = MomentSums::new(n);
            let (mut v, mut uu, mut a) = (vec![0.0; m], vec![0.0; pairs], vec![0.0; n]);
            for (k, &e) in range.clone().zip(ex) {
                let p = (e - max_e).exp();
                sigma_at(k, &mut v);
                pack_outer(&v, w, &mut uu);
                project(&tri, &uu, &mut a);
                sums.add(p, p, p, &a);
            }
            sums
        })
        .collect();
    let mut it = parts.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(None);
    };
    for p in it {
        acc.merge(p);
    }
    Ok(acc.finish(max_e))
}

fn smooth_nodes(
    s: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    act: &ActivationKind,
    quad: &QuadratureSpec,
    want_grad_s: bool,
) -> Result<Option<MgfEval>> {
    let m = s.nrows();
    let r = s.ncols();
    let nodes = smooth_node_set(r, quad)?;
    let count = nodes.len();
    let ranges = chunks(count);
    // First pass: exponents, to stabilize the weights.
    let expo: Option<Vec<Vec<f64>>> = ranges
        .par_iter()
        .map(|range| {
            let mut v = vec![0.0; m];
            let mut out = Vec::with_capacity(range.len());
            for k in range.clone() {
                let z = nodes.point(k);
                for i in 0..m {
                    let g: f64 = (0..r).map(|c| s[(i, c)] * z[c]).sum();
                    v[i] = act.eval(g);
                }
                let e = quad_form(lambda, &v);
                if e > EXP_LIMIT {
                    return None;
                }
                out.push(e + nodes.log_w[k]);
            }
            Some(out)
        })
        .collect();
    let Some(expo) = expo else {
        return Ok(None);
    };
    let max_e = expo
        .iter()
        .flat_map(|c| c.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let parts: Vec<Partial> = ranges
        .par_iter()
        .zip(expo.par_iter())
        .map(|(range, ex)| {
            let mut part = Partial {
                value: 0.0,
                grad_l: DMatrix::zeros(m, m),
                grad_s: want_grad_s.then(|| DMatrix::zeros(m, r)),
            };
            let mut v = vec![0.0; m];
            let mut pre = vec![0.0; m];
            for (k, &e) in range.clone().zip(ex) {
                let p = (e - max_e).exp();
                let z = nodes.point(k);
                for i in 0..m {
                    pre[i] = (0..r).map(|c| s[(i, c)] * z[c]).sum();
                    v[i] = act.eval(pre[i]);
                }
                part.value += p;
                for j in 0..m {
                    let pv = p * v[j];
                    for i in 0..=j {
                        part.grad_l[(i, j)] += pv * v[i];
                    }
                }
                if let Some(g) = part.grad_s.as_mut() {
                    for i in 0..m {
                        let lv: f64 = (0..m).map(|j| lambda[(i, j)] * v[j]).sum();
                        let c = p * 2.0 * act.deriv(pre[i]) * lv;
                        for d in 0..r {
                            g[(i, d)] += c * z[d];
                        }
                    }
                }
            }
            part
        })
        .collect();
    let total = combine(parts);
    let mut gl = total.grad_l;
    for j in 0..m {
        for i in 0..j {
            gl[(j, i)] = gl[(i, j)];
        }
    }
    Ok(Some(MgfEval {
        log_m: max_e + total.value.ln(),
        grad_lambda: gl / total.value,
        grad_s: total.grad_s.map(|g| g / total.value),
    }))
}

fn quad_form(a: &DMatrix<f64>, v: &[f64]) -> f64 {
    let m = v.len();
    let mut acc = 0.0;
    for j in 0..m {
        if v[j] == 0.0 {
            continue;
        }
        let col: f64 = (0..m).map(|i| a[(i, j)] * v[i]).sum();
        acc += col * v[j];
    }
    acc
}

/// `log E[exp(sigma(g)^T Lambda sigma(g))]` for `g ~ N(0, kappa)`;
/// `Infinite` when the expectation diverges.
pub fn cond_log_mgf(
    tilt: &TiltMatrix,
    kappa: &KernelMatrix,
    act: &ActivationKind,
    quad: &QuadratureSpec,
) -> Result<ExtReal> {
    act.validate()?;
    let s = covariance_factor(kappa.matrix());
    Ok(match evaluate(&s, tilt.matrix(), act, quad, false)? {
        Some(e) => ExtReal::Finite(e.log_m),
        None => ExtReal::Infinite,
    })
}

/// Tilted mean `E_Lambda[Xi]`, the gradient of [`cond_log_mgf`] in `Lambda`.
pub fn grad_cond_log_mgf(
    tilt: &TiltMatrix,
    kappa: &KernelMatrix,
    act: &ActivationKind,
    quad: &QuadratureSpec,
) -> Result<DMatrix<f64>> {
    act.validate()?;
    let s = covariance_factor(kappa.matrix());
    evaluate(&s, tilt.matrix(), act, quad, false)?
        .map(|e| e.grad_lambda)
        .ok_or(LdpError::Diverged)
}

/// Orthonormal coordinates on symmetric matrices: diagonal entries, then
/// `sqrt(2) A_ij` for `i < j`.
pub(crate) fn sym_to_vec(a: &DMatrix<f64>) -> Vec<f64> {
    let m = a.nrows();
    let mut out = Vec::with_capacity(m * (m + 1) / 2);
    for i in 0..m {
        out.push(a[(i, i)]);
    }
    for i in 0..m {
        for j in (i + 1)..m {
            out.push(std::f64::consts::SQRT_2 * 0.5 * (a[(i, j)] + a[(j, i)]));
        }
    }
    out
}

pub(crate) fn vec_to_sym(v: &[f64], m: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(m, m);
    for i in 0..m {
        a[(i, i)] = v[i];
    }
    let mut k = m;
    for i in 0..m {
        for j in (i + 1)..m {
            let x = v[k] / std::f64::consts::SQRT_2;
            a[(i, j)] = x;
            a[(j, i)] = x;
            k += 1;
        }
    }
    a
}

/// Frobenius-orthonormal basis of the linear span of the scaled increments
/// `W Xi W` (`W = diag(scale)`), i.e. of the subspace of symmetric matrices
/// that supports the increment law. Outside this subspace the layer cost
/// is infinite.
pub(crate) fn support_basis(s: &DMatrix<f64>, act: &ActivationKind, scale: &[f64]) -> Vec<DMatrix<f64>> {
    let m = s.nrows();
    let r = s.ncols();
    let full = || {
        (0..m * (m + 1) / 2)
            .map(|k| {
                let mut e = vec![0.0; m * (m + 1) / 2];
                e[k] = 1.0;
                vec_to_sym(&e, m)
            })
            .collect::<Vec<_>>()
    };
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(scale));
    // Generators A E A^T over a basis E of Sym_r, for every linear piece A.
    let pieces: Vec<DMatrix<f64>> = match act {
        ActivationKind::Tanh => return full(),
        _ if r == 0 => Vec::new(),
        ActivationKind::Linear { .. } => vec![s.clone()],
        ActivationKind::Relu => {
            let mut masks: Vec<Vec<bool>> = Vec::new();
            let mut record = |u: &[f64]| {
                let mask: Vec<bool> = (0..m)
                    .map(|i| (0..r).map(|k| s[(i, k)] * u[k]).sum::<f64>() > 0.0)
                    .collect();
                if !masks.contains(&mask) {
                    masks.push(mask);
                }
            };
            match r {
                1 => {
                    record(&[1.0]);
                    record(&[-1.0]);
                }
                2 => {
                    let cuts = angular_cuts(s);
                    for w in cuts.windows(2) {
                        if w[1] - w[0] > 1e-15 {
                            let t = 0.5 * (w[0] + w[1]);
                            record(&[t.cos(), t.sin()]);
                        }
                    }
                }
                _ => {
                    let nodes = node_set(NodeKey::Sampled {
                        count: 20_000,
                        r,
                        seed: 17,
                        unit: true,
                    });
                    for k in 0..nodes.len() {
                        record(nodes.point(k));
                    }
                }
            }
            masks
                .into_iter()
                .map(|mask| {
                    let mut a = s.clone();
                    for i in 0..m {
                        if !mask[i] {
                            a.row_mut(i).fill(0.0);
                        }
                    }
                    a
                })
                .collect()
        }
    };
    let mut gens: Vec<Vec<f64>> = Vec::new();
    for a in &pieces {
        let wa = &w * a;
        for p in 0..r {
            for q in p..r {
                let mut e = DMatrix::zeros(r, r);
                e[(p, q)] = 1.0;
                e[(q, p)] = 1.0;
                gens.push(sym_to_vec(&(&wa * e * wa.transpose())));
            }
        }
    }
    if gens.is_empty() {
        return Vec::new();
    }
    let dim = m * (m + 1) / 2;
    let g = DMatrix::from_fn(dim, gens.len(), |i, j| gens[j][i]);
    let svd = g.svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.iter().copied().fold(0.0_f64, f64::max);
    let mut order: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > 1e-10 * smax)
        .collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    if order.len() == dim {
        return full();
    }
    order
        .into_iter()
        .map(|k| vec_to_sym(u.column(k).as_slice(), m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn q() -> QuadratureSpec {
        QuadratureSpec::default()
    }

    fn k1(v: f64) -> KernelMatrix {
        KernelMatrix::new(DMatrix::from_element(1, 1, v)).unwrap()
    }

    fn tilt1(v: f64) -> TiltMatrix {
        TiltMatrix::new(DMatrix::from_element(1, 1, v)).unwrap()
    }

    const ACTS: [ActivationKind; 3] = [
        ActivationKind::Relu,
        ActivationKind::Tanh,
        ActivationKind::Linear { a: 1.0 },
    ];

    #[test]
    fn zero_tilt_is_exactly_zero() {
        let k = KernelMatrix::new(dmatrix![2.0, 0.5, 0.1; 0.5, 1.0, 0.2; 0.1, 0.2, 0.7]).unwrap();
        for act in ACTS {
            let v = cond_log_mgf(&TiltMatrix::zeros(3), &k, &act, &q()).unwrap();
            assert_eq!(v, ExtReal::Finite(0.0), "{act:?}");
        }
    }

    #[test]
    fn linear_scalar_closed_form_and_boundary() {
        let lin = ActivationKind::Linear { a: 1.0 };
        for lam in [-3.0, -0.5, 0.1, 0.3, 0.45, 0.49] {
            let v = cond_log_mgf(&tilt1(lam), &k1(1.0), &lin, &q()).unwrap().to_f64();
            assert!((v + 0.5 * (1.0 - 2.0 * lam).ln()).abs() < 1e-9);
            let g = grad_cond_log_mgf(&tilt1(lam), &k1(1.0), &lin, &q()).unwrap();
            assert_relative_eq!(g[(0, 0)], 1.0 / (1.0 - 2.0 * lam), max_relative = 1e-12);
        }
        assert_eq!(
            cond_log_mgf(&tilt1(0.6), &k1(1.0), &lin, &q()).unwrap(),
            ExtReal::Infinite
        );
        assert_eq!(
            grad_cond_log_mgf(&tilt1(0.6), &k1(1.0), &lin, &q()),
            Err(LdpError::Diverged)
        );
    }

    #[test]
    fn untilted_means() {
        let k = KernelMatrix::new(dmatrix![2.0, 0.5; 0.5, 1.0]).unwrap();
        let g = grad_cond_log_mgf(&TiltMatrix::zeros(2), &k, &ActivationKind::Linear { a: 1.5 }, &q()).unwrap();
        assert!((g - k.matrix() * 1.5).amax() < 1e-12);
        let g = grad_cond_log_mgf(&TiltMatrix::zeros(1), &k1(1.0), &ActivationKind::Relu, &q()).unwrap();
        assert_relative_eq!(g[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn relu_untilted_mean_matches_sampling() {
        // E[relu(g)^2] for g ~ N(0, 1) by direct sampling.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            acc += z.max(0.0).powi(2);
        }
        assert!((acc / n as f64 - 0.5).abs() < 1e-3);
    }

    #[test]
    fn relu_scalar_matches_half_normal_formula() {
        // For m = 1: M = 1/2 + 1/2 (1 - 2 lam c)^{-1/2}.
        for (lam, c) in [(0.2, 1.0), (-1.0, 2.0), (0.04, 10.0)] {
            let v = cond_log_mgf(&tilt1(lam), &k1(c), &ActivationKind::Relu, &q()).unwrap().to_f64();
            let expect = (0.5 + 0.5 / (1.0 - 2.0 * lam * c).sqrt()).ln();
            assert_relative_eq!(v, expect, max_relative = 1e-12);
        }
        assert_eq!(
            cond_log_mgf(&tilt1(0.5), &k1(1.0), &ActivationKind::Relu, &q()).unwrap(),
            ExtReal::Infinite
        );
    }

    #[test]
    fn relu_rank_two_matches_sampling() {
        let s = dmatrix![1.0, 0.3; -0.5, 0.8; 0.2, -1.0];
        let lam = dmatrix![0.1, -0.05, 0.02; -0.05, 0.08, 0.0; 0.02, 0.0, -0.2];
        let e = evaluate(&s, &lam, &ActivationKind::Relu, &q(), false).unwrap().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 2_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            let v = (&s * z).map(|x: f64| x.max(0.0));
            acc += (lam.clone() * &v).dot(&v).exp();
        }
        assert!(((acc / n as f64).ln() - e.log_m).abs() < 5e-3);
    }

    #[test]
    fn relu_direction_path_agrees_with_angular_path() {
        let s = dmatrix![1.0, 0.3; -0.5, 0.8; 0.2, -1.0];
        let lam = dmatrix![0.1, -0.05, 0.02; -0.05, 0.08, 0.0; 0.02, 0.0, -0.2];
        let exact = relu_rank_two(&s, &lam, false).unwrap();
        let sampled = relu_directions(&s, &lam, &q(), false).unwrap();
        assert!((exact.log_m - sampled.log_m).abs() < 5e-3);
    }

    #[test]
    fn tanh_is_bounded_everywhere() {
        let v = cond_log_mgf(&tilt1(50.0), &k1(4.0), &ActivationKind::Tanh, &q()).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn relu_support_is_rank_deficient_on_a_line() {
        let xs = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
        let s = DMatrix::from_fn(7, 2, |i, k| if k == 0 { xs[i] } else { 1.0 });
        let basis = support_basis(&s, &ActivationKind::Relu, &[1.0; 7]);
        assert_eq!(basis.len(), 22);
        for (i, a) in basis.iter().enumerate() {
            for (j, b) in basis.iter().enumerate() {
                let ip = crate::kernel::frobenius_inner(a, b);
                assert!((ip - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
        let tanh = support_basis(&s, &ActivationKind::Tanh, &[1.0; 7]);
        assert_eq!(tanh.len(), 28);
    }

    fn random_case(m: usize, seed: &[f64], lam_scale: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let a = DMatrix::from_fn(m, m, |i, j| seed[(i * m + j) % seed.len()]);
        let kappa = &a * a.transpose() + DMatrix::identity(m, m) * 0.2;
        let b = DMatrix::from_fn(m, m, |i, j| seed[(i + 3 * j + 1) % seed.len()]);
        let lam = (&b + b.transpose()) * (0.5 * lam_scale);
        (kappa, lam)
    }

    fn fd_check(act: ActivationKind, kappa: &DMatrix<f64>, lam: &DMatrix<f64>) -> std::result::Result<(), String> {
        let k = KernelMatrix::new(kappa.clone()).unwrap();
        let t = TiltMatrix::new(lam.clone()).unwrap();
        let m = kappa.nrows();
        let f = |l: &DMatrix<f64>| cond_log_mgf(&TiltMatrix::new(l.clone()).unwrap(), &k, &act, &q()).unwrap();
        if !f(lam).is_finite() {
            return Ok(());
        }
        let g = grad_cond_log_mgf(&t, &k, &act, &q()).unwrap();
        let h = 1e-5;
        for i in 0..m {
            for j in 0..=i {
                let mut e = DMatrix::zeros(m, m);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                let (up, dn) = (f(&(lam + &e * h)), f(&(lam - &e * h)));
                if !up.is_finite() || !dn.is_finite() {
                    continue;
                }
                let fd = (up.to_f64() - dn.to_f64()) / (2.0 * h);
                let an = if i == j { g[(i, i)] } else { 2.0 * g[(i, j)] };
                let err = (fd - an).abs() / an.abs().max(1e-3);
                if err > 1e-4 {
                    return Err(format!("{act:?} ({i},{j}): fd {fd} analytic {an}"));
                }
            }
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gradient_matches_finite_differences(
            seed in proptest::collection::vec(-1.0f64..1.0, 9),
            act in prop_oneof![Just(ActivationKind::Relu), Just(ActivationKind::Tanh), Just(ActivationKind::Linear { a: 0.7 })],
            m in 1usize..3,
        ) {
            let (kappa, lam) = random_case(m, &seed, 0.15);
            prop_assert!(fd_check(act, &kappa, &lam).is_ok(), "{:?}", fd_check(act, &kappa, &lam));
        }

        #[test]
        fn midpoint_convex_in_tilt(
            seed in proptest::collection::vec(-1.0f64..1.0, 9),
            seed2 in proptest::collection::vec(-1.0f64..1.0, 9),
            act in prop_oneof![Just(ActivationKind::Relu), Just(ActivationKind::Tanh), Just(ActivationKind::Linear { a: 1.0 })],
        ) {
            let (kappa, l1) = random_case(2, &seed, 0.15);
            let (_, l2) = random_case(2, &seed2, 0.15);
            let k = KernelMatrix::new(kappa).unwrap();
            let f = |l: &DMatrix<f64>| cond_log_mgf(&TiltMatrix::new(l.clone()).unwrap(), &k, &act, &q()).unwrap();
            let (a, b, c) = (f(&l1), f(&l2), f(&((&l1 + &l2) * 0.5)));
            if let (ExtReal::Finite(a), ExtReal::Finite(b)) = (a, b) {
                prop_assert!(c.to_f64() <= 0.5 * (a + b) + 1e-8);
            }
        }

        #[test]
        fn linear_matches_scalar_closed_form(lam in -5.0f64..0.49, a in 0.3f64..2.0, c in 0.2f64..2.0) {
            let lam = lam / (a * c);
            let v = cond_log_mgf(&tilt1(lam), &k1(c), &ActivationKind::Linear { a }, &q()).unwrap().to_f64();
            prop_assert!((v + 0.5 * (1.0 - 2.0 * lam * a * c).ln()).abs() < 1e-9);
        }

        #[test]
        fn factor_gradient_matches_finite_differences(
            seed in proptest::collection::vec(-1.0f64..1.0, 6),
            act in prop_oneof![Just(ActivationKind::Relu), Just(ActivationKind::Tanh), Just(ActivationKind::Linear { a: 1.0 })],
        ) {
            let s = DMatrix::from_fn(3, 2, |i, k| seed[i * 2 + k] + if i == k { 1.0 } else { 0.0 });
            let lam = dmatrix![0.05, -0.02, 0.01; -0.02, 0.04, 0.0; 0.01, 0.0, -0.1];
            let base = evaluate(&s, &lam, &act, &q(), true).unwrap().unwrap();
            let gs = base.grad_s.unwrap();
            for i in 0..3 {
                for k in 0..2 {
                    let mut up = s.clone();
                    let mut dn = s.clone();
                    up[(i, k)] += 1e-6;
                    dn[(i, k)] -= 1e-6;
                    let fu = evaluate(&up, &lam, &act, &q(), false).unwrap().unwrap().log_m;
                    let fd = evaluate(&dn, &lam, &act, &q(), false).unwrap().unwrap().log_m;
                    let num = (fu - fd) / 2e-6;
                    prop_assert!((num - gs[(i, k)]).abs() <= 1e-5 * (1.0 + num.abs()), "{} vs {}", num, gs[(i, k)]);
                }
            }
        }
    }
}
