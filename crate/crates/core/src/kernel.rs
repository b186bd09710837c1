//! Kernels on a finite input set.
//!
//! Every kernel in this crate is an `m x m` symmetric positive semidefinite
//! matrix indexed by an ordered [`InputSet`]. The module also holds the
//! extended-real type used for rates that may be infinite, the RKHS
//! seminorm with a pseudoinverse rank cutoff, and the Cholesky
//! parametrization used by the outer optimizers.

use std::fmt;
use std::ops::Add;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{LdpError, Result};

/// Default relative eigenvalue cutoff for pseudoinverses.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Symmetry tolerance accepted by [`KernelMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Smallest eigenvalue accepted by [`KernelMatrix::new`].
pub const PSD_TOL: f64 = 1e-10;

/// Lower clamp of the Cholesky diagonal positivity map.
pub const DIAG_FLOOR: f64 = 1e-8;

/// A real number or `+inf`, kept distinct from IEEE infinity so that
/// optimizers can reject infinite objective values explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ExtReal {
    Finite(f64),
    Infinite,
}

impl ExtReal {
    pub fn is_finite(self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    /// The finite value, or `None` for `Infinite`.
    pub fn finite(self) -> Option<f64> {
        match self {
            ExtReal::Finite(v) => Some(v),
            ExtReal::Infinite => None,
        }
    }

    /// Lossy conversion to `f64` (`Infinite` maps to `f64::INFINITY`).
    pub fn to_f64(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }

    pub fn scale(self, c: f64) -> ExtReal {
        match self {
            ExtReal::Finite(v) => ExtReal::Finite(c * v),
            ExtReal::Infinite => ExtReal::Infinite,
        }
    }
}

impl Add for ExtReal {
    type Output = ExtReal;

    fn add(self, rhs: ExtReal) -> ExtReal {
        match (self, rhs) {
            (ExtReal::Finite(a), ExtReal::Finite(b)) => ExtReal::Finite(a + b),
            _ => ExtReal::Infinite,
        }
    }
}

impl fmt::Display for ExtReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtReal::Finite(v) => write!(f, "{v}"),
            ExtReal::Infinite => write!(f, "inf"),
        }
    }
}

/// An ordered finite input set with training and test index subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSet {
    points: Vec<Vec<f64>>,
    train_indices: Vec<usize>,
    test_indices: Vec<usize>,
}

impl InputSet {
    pub fn new(
        points: Vec<Vec<f64>>,
        train_indices: Vec<usize>,
        test_indices: Vec<usize>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(LdpError::InvalidArgument("input set must be nonempty".into()));
        }
        let d_in = points[0].len();
        if d_in == 0 {
            return Err(LdpError::InvalidArgument("input dimension must be >= 1".into()));
        }
        for p in &points {
            if p.len() != d_in {
                return Err(LdpError::DimensionMismatch(format!(
                    "input points have dimensions {} and {}",
                    d_in,
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(LdpError::NonFiniteInput("input point"));
            }
        }
        for i in 0..points.len() {
            for j in 0..i {
                if points[i] == points[j] {
                    return Err(LdpError::InvalidArgument(format!(
                        "input points {j} and {i} coincide"
                    )));
                }
            }
        }
        let m = points.len();
        if train_indices.iter().chain(&test_indices).any(|&i| i >= m) {
            return Err(LdpError::InvalidArgument("index outside the input set".into()));
        }
        Ok(Self {
            points,
            train_indices,
            test_indices,
        })
    }

    /// Scalar inputs (`d_in = 1`), all of them test points.
    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        let idx = (0..xs.len()).collect();
        Self::new(xs.iter().map(|&x| vec![x]).collect(), Vec::new(), idx)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_indices
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test_indices
    }

    /// Index of `x` in the set, if present.
    pub fn index_of(&self, x: &[f64]) -> Option<usize> {
        self.points.iter().position(|p| p.as_slice() == x)
    }
}

/// A symmetric positive semidefinite matrix on the input set.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    entries: DMatrix<f64>,
}

impl KernelMatrix {
    /// Validates symmetry, finiteness and PSD (within [`PSD_TOL`]); the
    /// stored matrix is exactly symmetrized.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(LdpError::DimensionMismatch(format!(
                "kernel must be square and nonempty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(LdpError::NonFiniteInput("kernel"));
        }
        let m = entries.nrows();
        for i in 0..m {
            for j in 0..i {
                if (entries[(i, j)] - entries[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(LdpError::InvalidArgument(format!(
                        "kernel not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let entries = symmetrize(&entries);
        let min_eig = min_eigenvalue(&entries);
        if min_eig < -PSD_TOL {
            return Err(LdpError::NotPsd(min_eig));
        }
        Ok(Self { entries })
    }

    /// Builds a kernel from a matrix the caller guarantees to be PSD
    /// (e.g. a product `L L^T`); only symmetrizes.
    pub(crate) fn from_psd_unchecked(entries: DMatrix<f64>) -> Self {
        Self {
            entries: symmetrize(&entries),
        }
    }

    pub fn identity(m: usize) -> Self {
        Self {
            entries: DMatrix::identity(m, m),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.entries[(i, i)]).collect()
    }

    pub fn min_diagonal(&self) -> f64 {
        self.diagonal().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Largest absolute eigenvalue.
    pub fn op_norm(&self) -> f64 {
        spectral_norm(&self.entries)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.entries)
    }

    /// Principal submatrix on `idx`.
    pub fn submatrix(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.entries[(idx[a], idx[b])])
    }
}

/// `(A + A^T) / 2`.
pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Frobenius inner product `tr(A^T B)`.
pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub(crate) fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub(crate) fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// `h^T kappa^+ h` with eigenvalues below `rank_tol * lambda_max` treated as
/// zero. Returns `Infinite` when the part of `h` outside the numerical range
/// of `kappa` exceeds `sqrt(rank_tol) * |h|`.
pub fn rkhs_seminorm_sq(h: &DVector<f64>, kappa: &KernelMatrix, rank_tol: f64) -> Result<ExtReal> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(LdpError::NonFiniteInput("h"));
    }
    if !(rank_tol > 0.0) {
        return Err(LdpError::InvalidArgument("rank_tol must be positive".into()));
    }
    if h.len() != kappa.dim() {
        return Err(LdpError::DimensionMismatch(format!(
            "h has length {} but kernel is {}x{}",
            h.len(),
            kappa.dim(),
            kappa.dim()
        )));
    }
    let eig = SymmetricEigen::new(kappa.matrix().clone());
    let lambda_max = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let cutoff = rank_tol * lambda_max;
    let mut in_range = 0.0;
    let mut off_range_sq = 0.0;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let c = eig.eigenvectors.column(k).dot(h);
        if lambda_max > 0.0 && lam > cutoff {
            in_range += c * c / lam;
        } else {
            off_range_sq += c * c;
        }
    }
    if off_range_sq.sqrt() > rank_tol.sqrt() * h.norm() {
        Ok(ExtReal::Infinite)
    } else {
        Ok(ExtReal::Finite(in_range))
    }
}

/// Relative operator-norm gap `|k1 - k0|_op / |k0|_op`.
pub fn op_norm_gap(k1: &KernelMatrix, k0: &KernelMatrix) -> Result<f64> {
    if k1.dim() != k0.dim() {
        return Err(LdpError::DimensionMismatch(format!(
            "kernels of sizes {} and {}",
            k1.dim(),
            k0.dim()
        )));
    }
    let denom = k0.op_norm();
    if denom == 0.0 {
        return Err(LdpError::ZeroReference);
    }
    Ok(spectral_norm(&(k1.matrix() - k0.matrix())) / denom)
}

/// `kappa + eps * I`.
pub fn jitter(kappa: &KernelMatrix, eps: f64) -> KernelMatrix {
    let m = kappa.dim();
    KernelMatrix::from_psd_unchecked(kappa.matrix() + DMatrix::identity(m, m) * eps)
}

/// Strictly positive diagonal map: `max(softplus(x), DIAG_FLOOR)`.
pub fn diag_positive(raw: f64) -> f64 {
    softplus(raw).max(DIAG_FLOOR)
}

/// Derivative of [`diag_positive`]; zero on the clamped region.
pub fn diag_positive_deriv(raw: f64) -> f64 {
    if softplus(raw) <= DIAG_FLOOR {
        0.0
    } else {
        sigmoid(raw)
    }
}

/// Inverse of softplus on `(0, inf)`.
pub fn diag_positive_inverse(value: f64) -> f64 {
    let v = value.max(DIAG_FLOOR);
    if v > 30.0 {
        v + (-(-v).exp()).ln_1p()
    } else {
        v.exp_m1().ln()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Lower-triangular factor with free off-diagonal entries and a diagonal
/// stored as unconstrained values passed through [`diag_positive`].
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyParam {
    raw: DMatrix<f64>,
}

impl CholeskyParam {
    /// From raw storage; entries above the diagonal are ignored.
    pub fn from_raw(raw: DMatrix<f64>) -> Result<Self> {
        if !raw.is_square() {
            return Err(LdpError::DimensionMismatch("Cholesky parameter must be square".into()));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(LdpError::NonFiniteInput("Cholesky parameter"));
        }
        Ok(Self {
            raw: raw.lower_triangle(),
        })
    }

    /// The parameter whose materialized factor is `lower` (diagonal must be positive).
    pub fn from_lower(lower: &DMatrix<f64>) -> Result<Self> {
        let m = lower.nrows();
        let mut raw = lower.lower_triangle();
        for i in 0..m {
            if !(lower[(i, i)] > 0.0) {
                return Err(LdpError::InvalidArgument(
                    "Cholesky diagonal must be positive".into(),
                ));
            }
            raw[(i, i)] = diag_positive_inverse(lower[(i, i)]);
        }
        Self::from_raw(raw)
    }

    /// Parameter reproducing a positive definite kernel.
    pub fn cholesky_of(kappa: &KernelMatrix) -> Result<Self> {
        let chol = nalgebra::Cholesky::new(kappa.matrix().clone())
            .ok_or_else(|| LdpError::NotPsd(kappa.min_eigenvalue()))?;
        Self::from_lower(&chol.l())
    }

    pub fn dim(&self) -> usize {
        self.raw.nrows()
    }

    pub fn raw(&self) -> &DMatrix<f64> {
        &self.raw
    }

    /// The lower-triangular factor with mapped diagonal.
    pub fn lower(&self) -> DMatrix<f64> {
        let mut l = self.raw.clone();
        for i in 0..l.nrows() {
            l[(i, i)] = diag_positive(self.raw[(i, i)]);
        }
        l
    }

    /// Number of free parameters, `m (m + 1) / 2`.
    pub fn n_params(&self) -> usize {
        let m = self.dim();
        m * (m + 1) / 2
    }

    /// Free parameters in row-major lower-triangular order.
    pub fn to_vec(&self) -> Vec<f64> {
        let m = self.dim();
        let mut out = Vec::with_capacity(self.n_params());
        for i in 0..m {
            for j in 0..=i {
                out.push(self.raw[(i, j)]);
            }
        }
        out
    }

    pub fn from_vec(m: usize, values: &[f64]) -> Result<Self> {
        if values.len() != m * (m + 1) / 2 {
            return Err(LdpError::DimensionMismatch(format!(
                "expected {} Cholesky parameters, got {}",
                m * (m + 1) / 2,
                values.len()
            )));
        }
        let mut raw = DMatrix::zeros(m, m);
        let mut k = 0;
        for i in 0..m {
            for j in 0..=i {
                raw[(i, j)] = values[k];
                k += 1;
            }
        }
        Self::from_raw(raw)
    }

    /// Pulls a symmetric gradient `G = df/dkappa` back to the free parameters
    /// of `kappa = L L^T`, in [`Self::to_vec`] order.
    pub fn pullback(&self, grad_kappa: &DMatrix<f64>) -> Vec<f64> {
        let l = self.lower();
        let g_sym = symmetrize(grad_kappa);
        let g_l = &g_sym * &l * 2.0;
        let m = self.dim();
        let mut out = Vec::with_capacity(self.n_params());
        for i in 0..m {
            for j in 0..=i {
                if i == j {
                    out.push(g_l[(i, i)] * diag_positive_deriv(self.raw[(i, i)]));
                } else {
                    out.push(g_l[(i, j)]);
                }
            }
        }
        out
    }
}

/// `L L^T` for the factor of `p`; exactly symmetric PSD.
pub fn materialize(p: &CholeskyParam) -> KernelMatrix {
    let l = p.lower();
    KernelMatrix::from_psd_unchecked(&l * l.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn kernel(m: DMatrix<f64>) -> KernelMatrix {
        KernelMatrix::new(m).unwrap()
    }

    #[test]
    fn seminorm_zero_vector_is_zero() {
        let k = kernel(dmatrix![2.0, 1.0; 1.0, 3.0]);
        let v = rkhs_seminorm_sq(&DVector::zeros(2), &k, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(v, ExtReal::Finite(0.0));
        let zero = kernel(DMatrix::zeros(2, 2));
        let v = rkhs_seminorm_sq(&DVector::zeros(2), &zero, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(v, ExtReal::Finite(0.0));
    }

    #[test]
    fn seminorm_identity_is_euclidean() {
        let v = rkhs_seminorm_sq(
            &DVector::from_vec(vec![3.0, 4.0]),
            &KernelMatrix::identity(2),
            DEFAULT_RANK_TOL,
        )
        .unwrap();
        assert_relative_eq!(v.to_f64(), 25.0, epsilon = 1e-12);
    }

    #[test]
    fn seminorm_off_range_is_infinite() {
        let k = kernel(dmatrix![2.0, 0.0; 0.0, 0.0]);
        let v = rkhs_seminorm_sq(&DVector::from_vec(vec![2.0, 1.0]), &k, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(v, ExtReal::Infinite);
        // in range of a singular kernel: pseudoinverse applies
        let v = rkhs_seminorm_sq(&DVector::from_vec(vec![2.0, 0.0]), &k, DEFAULT_RANK_TOL).unwrap();
        assert_relative_eq!(v.to_f64(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn seminorm_rejects_non_finite() {
        let h = DVector::from_vec(vec![f64::NAN, 1.0]);
        assert_eq!(
            rkhs_seminorm_sq(&h, &KernelMatrix::identity(2), DEFAULT_RANK_TOL),
            Err(LdpError::NonFiniteInput("h"))
        );
        assert!(KernelMatrix::new(dmatrix![f64::INFINITY]).is_err());
    }

    #[test]
    fn gap_examples() {
        let i2 = KernelMatrix::identity(2);
        assert_eq!(op_norm_gap(&i2, &i2).unwrap(), 0.0);
        let two = kernel(DMatrix::identity(2, 2) * 2.0);
        assert_relative_eq!(op_norm_gap(&two, &i2).unwrap(), 1.0, epsilon = 1e-14);
        let d = KernelMatrix::from_diagonal(&[1.0, 1.5]).unwrap();
        assert_relative_eq!(op_norm_gap(&d, &i2).unwrap(), 0.5, epsilon = 1e-14);
        let zero = kernel(DMatrix::zeros(2, 2));
        assert_eq!(op_norm_gap(&i2, &zero), Err(LdpError::ZeroReference));
    }

    #[test]
    fn materialize_examples() {
        let p = CholeskyParam::from_lower(&DMatrix::identity(2, 2)).unwrap();
        let k = materialize(&p);
        assert!((k.matrix() - DMatrix::<f64>::identity(2, 2)).amax() < 1e-14);

        let p = CholeskyParam::from_lower(&dmatrix![1.0, 0.0; 1.0, 1.0]).unwrap();
        let k = materialize(&p);
        assert!((k.matrix() - dmatrix![1.0, 1.0; 1.0, 2.0]).amax() < 1e-14);

        let p = CholeskyParam::from_raw(DMatrix::zeros(1, 1)).unwrap();
        assert_relative_eq!(p.lower()[(0, 0)], 2f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(materialize(&p).get(0, 0), 2f64.ln().powi(2), epsilon = 1e-15);
    }

    #[test]
    fn positivity_map_clamps() {
        assert_eq!(diag_positive(-1e3), DIAG_FLOOR);
        assert_eq!(diag_positive_deriv(-1e3), 0.0);
        for v in [1e-6, 0.3, 1.0, 7.0, 45.0] {
            assert_relative_eq!(diag_positive(diag_positive_inverse(v)), v, max_relative = 1e-12);
        }
    }

    #[test]
    fn jitter_examples() {
        let z = kernel(DMatrix::zeros(1, 1));
        assert_eq!(jitter(&z, 1e-8).get(0, 0), 1e-8);
        let j = jitter(&KernelMatrix::identity(2), 0.5);
        assert!((j.matrix() - DMatrix::<f64>::identity(2, 2) * 1.5).amax() < 1e-15);
        let k = kernel(dmatrix![2.0, 1.0; 1.0, 2.0]);
        let shifted = jitter(&k, 0.25);
        assert_relative_eq!(shifted.min_eigenvalue(), 1.25, epsilon = 1e-12);
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let p = CholeskyParam::from_vec(3, &[0.3, -0.4, 1.1, 0.2, 0.5, -0.7]).unwrap();
        let g = dmatrix![1.0, 0.2, -0.3; 0.2, 2.0, 0.4; -0.3, 0.4, 0.5];
        let f = |p: &CholeskyParam| frobenius_inner(&g, materialize(p).matrix());
        let analytic = p.pullback(&g);
        let base = p.to_vec();
        for k in 0..base.len() {
            let mut up = base.clone();
            let mut dn = base.clone();
            up[k] += 1e-6;
            dn[k] -= 1e-6;
            let fd = (f(&CholeskyParam::from_vec(3, &up).unwrap())
                - f(&CholeskyParam::from_vec(3, &dn).unwrap()))
                / 2e-6;
            assert_relative_eq!(analytic[k], fd, epsilon = 1e-7, max_relative = 1e-6);
        }
    }

    #[test]
    fn input_set_validation() {
        assert!(InputSet::from_scalars(&[1.0, 1.0]).is_err());
        assert!(InputSet::new(vec![vec![1.0]], vec![3], vec![]).is_err());
        let x = InputSet::from_scalars(&[-1.0, 2.0]).unwrap();
        assert_eq!(x.index_of(&[2.0]), Some(1));
    }

    fn random_psd(m: usize, seed: &[f64]) -> KernelMatrix {
        let a = DMatrix::from_fn(m, m, |i, j| seed[(i * m + j) % seed.len()] + 0.1 * (i as f64));
        KernelMatrix::new(&a * a.transpose() + DMatrix::identity(m, m) * 0.05).unwrap()
    }

    proptest! {
        #[test]
        fn seminorm_scales_inversely(
            seed in proptest::collection::vec(-2.0f64..2.0, 9),
            h in proptest::collection::vec(-3.0f64..3.0, 3),
            c in 0.1f64..10.0,
        ) {
            let k = random_psd(3, &seed);
            let h = DVector::from_vec(h);
            let base = rkhs_seminorm_sq(&h, &k, DEFAULT_RANK_TOL).unwrap().to_f64();
            let scaled = KernelMatrix::new(k.matrix() * c).unwrap();
            let v = rkhs_seminorm_sq(&h, &scaled, DEFAULT_RANK_TOL).unwrap().to_f64();
            prop_assert!((v - base / c).abs() <= 1e-10 * (1.0 + base / c));
        }

        #[test]
        fn seminorm_is_midpoint_convex(
            seed in proptest::collection::vec(-2.0f64..2.0, 9),
            a in proptest::collection::vec(-3.0f64..3.0, 3),
            b in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let k = random_psd(3, &seed);
            let a = DVector::from_vec(a);
            let b = DVector::from_vec(b);
            let mid = (&a + &b) * 0.5;
            let f = |h: &DVector<f64>| rkhs_seminorm_sq(h, &k, DEFAULT_RANK_TOL).unwrap().to_f64();
            prop_assert!(f(&mid) <= 0.5 * (f(&a) + f(&b)) + 1e-10 * (1.0 + f(&a) + f(&b)));
        }

        #[test]
        fn materialize_is_psd_and_round_trips(values in proptest::collection::vec(-3.0f64..3.0, 6)) {
            let p = CholeskyParam::from_vec(3, &values).unwrap();
            let k = materialize(&p);
            prop_assert!(k.min_eigenvalue() >= -1e-12);
            prop_assert!(k.diagonal().iter().all(|&d| d > 0.0));
            let back = CholeskyParam::cholesky_of(&k).unwrap();
            let k2 = materialize(&back);
            prop_assert!((k.matrix() - k2.matrix()).amax() <= 1e-12 * (1.0 + k.matrix().amax()));
        }
    }
}
