//! Fixed-kernel Gaussian-process regression with unit observation noise.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{LdpError, Result};
use crate::kernel::{ExtReal, InputSet, KernelMatrix};

/// Training targets on an input set; the loss is `1/2 sum_D (h_i - y_i)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: InputSet,
    y_train: Vec<f64>,
}

/// Inputs of the built-in Heaviside training set.
pub const HEAVISIDE6_INPUTS: [f64; 6] = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0];

impl Dataset {
    pub fn new(x: InputSet, y_train: Vec<f64>) -> Result<Self> {
        if y_train.len() != x.train_indices().len() {
            return Err(LdpError::DimensionMismatch(format!(
                "{} targets for {} training inputs",
                y_train.len(),
                x.train_indices().len()
            )));
        }
        if y_train.iter().any(|v| !v.is_finite()) {
            return Err(LdpError::NonFiniteInput("training targets"));
        }
        Ok(Self { x, y_train })
    }

    /// Training pairs followed by test inputs; a test input equal to a
    /// training input reuses that index.
    pub fn from_points(
        train_x: &[Vec<f64>],
        train_y: &[f64],
        test_x: &[Vec<f64>],
    ) -> Result<Self> {
        let mut points: Vec<Vec<f64>> = train_x.to_vec();
        let train_indices: Vec<usize> = (0..train_x.len()).collect();
        let mut test_indices = Vec::with_capacity(test_x.len());
        for t in test_x {
            match points.iter().position(|p| p == t) {
                Some(i) => test_indices.push(i),
                None => {
                    points.push(t.clone());
                    test_indices.push(points.len() - 1);
                }
            }
        }
        if points.is_empty() {
            return Err(LdpError::InvalidArgument("dataset has no inputs".into()));
        }
        Self::new(InputSet::new(points, train_indices, test_indices)?, train_y.to_vec())
    }

    /// Scalar Heaviside data `1{x >= 0}` on `{-3, ..., 2}` plus test inputs.
    pub fn heaviside6(test_x: &[f64]) -> Result<Self> {
        let train: Vec<Vec<f64>> = HEAVISIDE6_INPUTS.iter().map(|&v| vec![v]).collect();
        let y: Vec<f64> = HEAVISIDE6_INPUTS.iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect();
        let tests: Vec<Vec<f64>> = test_x.iter().map(|&v| vec![v]).collect();
        Self::from_points(&train, &y, &tests)
    }

    pub fn x(&self) -> &InputSet {
        &self.x
    }

    pub fn y_train(&self) -> &[f64] {
        &self.y_train
    }

    pub fn train_indices(&self) -> &[usize] {
        self.x.train_indices()
    }

    pub fn is_empty(&self) -> bool {
        self.y_train.is_empty()
    }

    /// Same inputs with different targets.
    pub fn with_targets(&self, y_train: Vec<f64>) -> Result<Self> {
        Self::new(self.x.clone(), y_train)
    }

    /// Targets scattered to the full input set (zero off the training set).
    pub fn y_full(&self) -> DVector<f64> {
        let mut y = DVector::zeros(self.x.len());
        for (&i, &v) in self.train_indices().iter().zip(&self.y_train) {
            y[i] = v;
        }
        y
    }

    /// Indicator of the training set on the full input set.
    pub fn train_mask(&self) -> DVector<f64> {
        let mut e = DVector::zeros(self.x.len());
        for &i in self.train_indices() {
            e[i] = 1.0;
        }
        e
    }

    /// `1/2 sum_D (h_i - y_i)^2` for `h` on the full input set.
    pub fn loss(&self, h: &DVector<f64>) -> f64 {
        self.train_indices()
            .iter()
            .zip(&self.y_train)
            .map(|(&i, &y)| 0.5 * (h[i] - y).powi(2))
            .sum()
    }

    pub fn index_of(&self, x: &[f64]) -> Result<usize> {
        self.x.index_of(x).ok_or_else(|| {
            LdpError::InvalidArgument(format!("point {x:?} is not in the input set"))
        })
    }
}

fn check_dims(kappa: &KernelMatrix, data: &Dataset) -> Result<()> {
    if kappa.dim() != data.x().len() {
        return Err(LdpError::DimensionMismatch(format!(
            "kernel is {}x{} but input set has {} points",
            kappa.dim(),
            kappa.dim(),
            data.x().len()
        )));
    }
    Ok(())
}

/// Posterior mean and variance at `x`:
/// `m = k_xD (K_DD + I)^{-1} y_D`, `s2 = k_xx - k_xD (K_DD + I)^{-1} k_Dx`.
pub fn gp_posterior_mean_var(kappa: &KernelMatrix, data: &Dataset, x: &[f64]) -> Result<(f64, f64)> {
    check_dims(kappa, data)?;
    let t = data.index_of(x)?;
    let d = data.train_indices();
    let k_xx = kappa.get(t, t);
    if d.is_empty() {
        return Ok((0.0, k_xx));
    }
    let n = d.len();
    let b = kappa.submatrix(d) + DMatrix::identity(n, n);
    let chol = Cholesky::new(b).ok_or(LdpError::NotPsd(kappa.min_eigenvalue()))?;
    let k_xd = DVector::from_fn(n, |a, _| kappa.get(t, d[a]));
    let y = DVector::from_column_slice(data.y_train());
    let mean = k_xd.dot(&chol.solve(&y));
    let var = k_xx - k_xd.dot(&chol.solve(&k_xd));
    Ok((mean, var.max(0.0)))
}

/// Marginal fixed-kernel prior rate `y^2 / (2 kappa(x, x))`.
pub fn gp_prior_rate(y: f64, kappa: &KernelMatrix, x_test: &InputSet, x: &[f64]) -> Result<ExtReal> {
    if !y.is_finite() {
        return Err(LdpError::NonFiniteInput("y"));
    }
    let t = x_test
        .index_of(x)
        .ok_or_else(|| LdpError::InvalidArgument(format!("point {x:?} is not in the input set")))?;
    let v = kappa.get(t, t);
    if y == 0.0 {
        return Ok(ExtReal::Finite(0.0));
    }
    if v <= 0.0 {
        return Ok(ExtReal::Infinite);
    }
    Ok(ExtReal::Finite(0.5 * y * y / v))
}

/// Contracted fixed-kernel posterior rate `(y - m)^2 / (2 s2)`.
pub fn gp_posterior_rate(y: f64, kappa: &KernelMatrix, data: &Dataset, x_test: &[f64]) -> Result<f64> {
    let (m, v) = gp_posterior_mean_var(kappa, data, x_test)?;
    if v <= 1e-12 {
        return Err(LdpError::DegenerateVariance(v));
    }
    Ok(0.5 * (y - m).powi(2) / v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    #[test]
    fn two_point_hand_example() {
        let data = Dataset::from_points(&[vec![0.0]], &[1.0], &[vec![1.0]]).unwrap();
        let k = KernelMatrix::new(dmatrix![1.0, 1.0; 1.0, 1.0]).unwrap();
        let (m, v) = gp_posterior_mean_var(&k, &data, &[1.0]).unwrap();
        assert_relative_eq!(m, 0.5, epsilon = 1e-15);
        assert_relative_eq!(v, 0.5, epsilon = 1e-15);
        assert_relative_eq!(gp_posterior_rate(1.0, &k, &data, &[1.0]).unwrap(), 0.25, epsilon = 1e-15);
        assert_eq!(gp_posterior_rate(m, &k, &data, &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn zero_targets_and_zero_kernel() {
        let data = Dataset::heaviside6(&[3.0]).unwrap().with_targets(vec![0.0; 6]).unwrap();
        let k = KernelMatrix::new(DMatrix::from_fn(7, 7, |i, j| 1.0 + (i == j) as u8 as f64)).unwrap();
        let (m, v) = gp_posterior_mean_var(&k, &data, &[3.0]).unwrap();
        assert_eq!(m, 0.0);
        assert!(v <= k.get(6, 6) && v >= 0.0);
        let z = KernelMatrix::new(DMatrix::zeros(7, 7)).unwrap();
        let data = Dataset::heaviside6(&[3.0]).unwrap();
        assert_eq!(gp_posterior_mean_var(&z, &data, &[3.0]).unwrap(), (0.0, 0.0));
        assert!(matches!(
            gp_posterior_rate(1.0, &z, &data, &[3.0]),
            Err(LdpError::DegenerateVariance(_))
        ));
    }

    #[test]
    fn prior_rate_examples() {
        let x = InputSet::from_scalars(&[3.0]).unwrap();
        let k = KernelMatrix::identity(1);
        assert_eq!(gp_prior_rate(0.0, &k, &x, &[3.0]).unwrap(), ExtReal::Finite(0.0));
        assert_eq!(gp_prior_rate(2.0, &k, &x, &[3.0]).unwrap(), ExtReal::Finite(2.0));
        let z = KernelMatrix::new(DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(gp_prior_rate(1.0, &z, &x, &[3.0]).unwrap(), ExtReal::Infinite);
    }

    #[test]
    fn heaviside_reuses_training_index() {
        let d = Dataset::heaviside6(&[0.0, 3.0]).unwrap();
        assert_eq!(d.x().len(), 7);
        assert_eq!(d.x().test_indices(), &[3, 6]);
        assert_eq!(d.y_train(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
