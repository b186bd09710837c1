//! Infinite-width kernel recursion.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{LdpError, Result};
use crate::kernel::{InputSet, KernelMatrix};
use crate::mgf::QuadratureSpec;
use crate::quadrature::{gauss_hermite, integrate_gk15, GkSettings};

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", try_from = "ActivationRepr")]
pub enum ActivationKind {
    Relu,
    Tanh,
    /// `sigma(x) = sqrt(a) x`.
    Linear { a: f64 },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ActivationRepr {
    kind: String,
    a: Option<f64>,
}

impl TryFrom<ActivationRepr> for ActivationKind {
    type Error = String;

    fn try_from(r: ActivationRepr) -> std::result::Result<Self, String> {
        let act = match (r.kind.as_str(), r.a) {
            ("relu", None) => ActivationKind::Relu,
            ("tanh", None) => ActivationKind::Tanh,
            ("linear", Some(a)) => ActivationKind::Linear { a },
            ("linear", None) => return Err("linear activation requires field `a`".into()),
            ("relu" | "tanh", Some(_)) => return Err(format!("unknown field `a` for activation {}", r.kind)),
            (other, _) => return Err(format!("unknown activation kind `{other}`")),
        };
        act.validate().map_err(|e| e.to_string())?;
        Ok(act)
    }
}

impl ActivationKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationKind::Linear { a } if !(a > 0.0 && a.is_finite()) => Err(
                LdpError::InvalidArgument(format!("linear activation scale must be > 0, got {a}")),
            ),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Linear { a } => a.sqrt() * x,
        }
    }

    /// Derivative; the ReLU derivative at 0 is taken as 0.
    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Linear { a } => a.sqrt(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Linear { .. } => "linear",
        }
    }
}

fn default_bias_variance() -> f64 {
    1.0
}

/// Fully connected scalar-output network with LeCun weight variance
/// `1 / fan_in`, hidden-layer biases of variance `bias_variance` and no
/// output bias. `depth` counts weight layers, so `depth - 1` hidden layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub depth: usize,
    pub activation: ActivationKind,
    #[serde(default = "default_d_in")]
    pub d_in: usize,
    #[serde(default = "default_bias_variance")]
    pub bias_variance: f64,
}

fn default_d_in() -> usize {
    1
}

impl NetworkSpec {
    pub fn new(depth: usize, activation: ActivationKind, d_in: usize, bias_variance: f64) -> Result<Self> {
        let spec = Self {
            depth,
            activation,
            d_in,
            bias_variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(LdpError::InvalidArgument(format!(
                "depth must be >= 2, got {}",
                self.depth
            )));
        }
        if self.d_in == 0 {
            return Err(LdpError::InvalidArgument("d_in must be >= 1".into()));
        }
        if !(self.bias_variance >= 0.0 && self.bias_variance.is_finite()) {
            return Err(LdpError::InvalidArgument("bias_variance must be >= 0".into()));
        }
        self.activation.validate()
    }

    pub fn hidden_layers(&self) -> usize {
        self.depth - 1
    }
}

/// `X X^T / d_in`.
pub fn input_kernel(x: &InputSet) -> KernelMatrix {
    let m = x.len();
    let d = x.d_in() as f64;
    let pts = x.points();
    let k = DMatrix::from_fn(m, m, |i, j| {
        pts[i].iter().zip(&pts[j]).map(|(a, b)| a * b).sum::<f64>() / d
    });
    KernelMatrix::from_psd_unchecked(k)
}

/// `kappa + b 11^T`.
pub fn with_bias(kappa: &DMatrix<f64>, bias_variance: f64) -> DMatrix<f64> {
    kappa.add_scalar(bias_variance)
}

/// `E[relu(u) relu(v)]` for centered Gaussians with the given covariance.
pub fn relu_pair_expectation(c11: f64, c12: f64, c22: f64) -> f64 {
    let s = (c11 * c22).sqrt();
    if !(s > 0.0) {
        return 0.0;
    }
    let cos = (c12 / s).clamp(-1.0, 1.0);
    let theta = cos.acos();
    s * (theta.sin() + (PI - theta) * cos) / (2.0 * PI)
}

fn lower_2x2(c11: f64, c12: f64, c22: f64) -> (f64, f64, f64) {
    let l11 = c11.max(0.0).sqrt();
    let l21 = if l11 > 0.0 { c12 / l11 } else { 0.0 };
    let l22 = (c22 - l21 * l21).max(0.0).sqrt();
    (l11, l21, l22)
}

/// `E[sigma(u) sigma(v)]` by quadrature: bivariate Gauss–Hermite for smooth
/// activations, an angular integral split at the kinks for ReLU.
pub fn pair_expectation_quadrature(
    act: &ActivationKind,
    c11: f64,
    c12: f64,
    c22: f64,
    quad: &QuadratureSpec,
) -> f64 {
    let (l11, l21, l22) = lower_2x2(c11, c12, c22);
    match act {
        ActivationKind::Relu => {
            // Positive homogeneity: E = E[R^2] / (2 pi) * int relu(a.e) relu(b.e) dtheta, E[R^2] = 2.
            let mut cuts = vec![0.0, 2.0 * PI];
            for (x, y) in [(l11, 0.0), (l21, l22)] {
                if x != 0.0 || y != 0.0 {
                    let t = (-x).atan2(y).rem_euclid(PI);
                    cuts.push(t);
                    cuts.push(t + PI);
                }
            }
            cuts.sort_by(f64::total_cmp);
            let mut total = 0.0;
            for w in cuts.windows(2) {
                if w[1] > w[0] {
                    total += integrate_gk15(
                        |t, out| {
                            let (c, s) = (t.cos(), t.sin());
                            out[0] = (l11 * c).max(0.0) * (l21 * c + l22 * s).max(0.0);
                        },
                        w[0],
                        w[1],
                        1,
                        GkSettings::default(),
                    )
                    .values[0];
                }
            }
            total / PI
        }
        _ => {
            let rule = gauss_hermite(quad.nodes_per_dim);
            let mut total = 0.0;
            for (z1, w1) in rule.nodes.iter().zip(&rule.weights) {
                let a = act.eval(l11 * z1);
                if a == 0.0 {
                    continue;
                }
                let mut inner = 0.0;
                for (z2, w2) in rule.nodes.iter().zip(&rule.weights) {
                    inner += w2 * act.eval(l21 * z1 + l22 * z2);
                }
                total += w1 * a * inner;
            }
            total
        }
    }
}

fn one_dim_second_moment(act: &ActivationKind, c: f64, quad: &QuadratureSpec) -> f64 {
    let sd = c.max(0.0).sqrt();
    let rule = gauss_hermite(quad.nodes_per_dim);
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(z, w)| w * act.eval(sd * z).powi(2))
        .sum()
}

/// Clips small negative eigenvalues; larger violations are errors.
fn repair_psd(k: DMatrix<f64>) -> Result<KernelMatrix> {
    let eig = SymmetricEigen::new(k.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return Ok(KernelMatrix::from_psd_unchecked(k));
    }
    if min < -1e-8 {
        return Err(LdpError::QuadratureUnstable(min));
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    Ok(KernelMatrix::from_psd_unchecked(rebuilt))
}

/// One step of the kernel recursion: `E[sigma(g) sigma(g)^T]` with
/// `g ~ N(0, kappa_pre + b 11^T)`.
pub fn nngp_layer_map(
    kappa_pre: &KernelMatrix,
    act: &ActivationKind,
    bias_variance: f64,
    quad: &QuadratureSpec,
) -> Result<KernelMatrix> {
    act.validate()?;
    let c = with_bias(kappa_pre.matrix(), bias_variance);
    let m = c.nrows();
    let out = match *act {
        ActivationKind::Linear { a } => c * a,
        ActivationKind::Relu => DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                0.5 * c[(i, i)].max(0.0)
            } else {
                relu_pair_expectation(c[(i, i)], c[(i, j)], c[(j, j)])
            }
        }),
        ActivationKind::Tanh => {
            let mut k = DMatrix::zeros(m, m);
            for i in 0..m {
                k[(i, i)] = one_dim_second_moment(act, c[(i, i)], quad);
                for j in 0..i {
                    let v = pair_expectation_quadrature(act, c[(i, i)], c[(i, j)], c[(j, j)], quad);
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            k
        }
    };
    repair_psd(out)
}

/// `[kappa^(0), ..., kappa^(depth-1)]` on `x`.
pub fn nngp_kernels(x: &InputSet, spec: &NetworkSpec, quad: &QuadratureSpec) -> Result<Vec<KernelMatrix>> {
    spec.validate()?;
    if x.d_in() != spec.d_in {
        return Err(LdpError::DimensionMismatch(format!(
            "inputs have dimension {} but network expects {}",
            x.d_in(),
            spec.d_in
        )));
    }
    let mut out = vec![input_kernel(x)];
    for _ in 1..spec.depth {
        let next = nngp_layer_map(out.last().expect("nonempty"), &spec.activation, spec.bias_variance, quad)?;
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn quad() -> QuadratureSpec {
        QuadratureSpec::default()
    }

    #[test]
    fn input_kernel_examples() {
        let k = input_kernel(&InputSet::from_scalars(&[3.0]).unwrap());
        assert_eq!(k.get(0, 0), 9.0);
        let k = input_kernel(&InputSet::from_scalars(&[0.0]).unwrap());
        assert_eq!(k.get(0, 0), 0.0);
        let xs = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0];
        let k = input_kernel(&InputSet::from_scalars(&xs).unwrap());
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(k.get(i, j), xs[i] * xs[j]);
            }
        }
    }

    #[test]
    fn layer_map_examples() {
        let k = KernelMatrix::new(DMatrix::from_element(1, 1, 2.5)).unwrap();
        let lin = nngp_layer_map(&k, &ActivationKind::Linear { a: 1.0 }, 0.0, &quad()).unwrap();
        assert_eq!(lin.get(0, 0), 2.5);
        let relu = nngp_layer_map(&k, &ActivationKind::Relu, 0.0, &quad()).unwrap();
        assert_eq!(relu.get(0, 0), 1.25);
        let z = KernelMatrix::new(DMatrix::zeros(1, 1)).unwrap();
        let t = nngp_layer_map(&z, &ActivationKind::Tanh, 0.0, &quad()).unwrap();
        assert_eq!(t.get(0, 0), 0.0);
    }

    #[test]
    fn relu_second_moment_matches_sampling() {
        // Independent sampling oracle for E[relu(g)^2] with g ~ N(0, c).
        let c: f64 = 9.0 + 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            acc += (c.sqrt() * z).max(0.0).powi(2);
        }
        let mc = acc / n as f64;
        assert!((mc - 5.0).abs() < 5e-3, "mc = {mc}");
        let x = InputSet::from_scalars(&[3.0]).unwrap();
        let spec = NetworkSpec::new(2, ActivationKind::Relu, 1, 1.0).unwrap();
        let ks = nngp_kernels(&x, &spec, &quad()).unwrap();
        assert_eq!(ks.len(), 2);
        assert_relative_eq!(ks[1].get(0, 0), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn linear_chains() {
        let x = InputSet::from_scalars(&[1.7]).unwrap();
        let spec = NetworkSpec::new(2, ActivationKind::Linear { a: 1.0 }, 1, 0.0).unwrap();
        let ks = nngp_kernels(&x, &spec, &quad()).unwrap();
        assert_eq!(ks[0].get(0, 0), 1.7 * 1.7);
        assert_eq!(ks[1].get(0, 0), 1.7 * 1.7);

        let x = InputSet::from_scalars(&[1.0]).unwrap();
        let spec = NetworkSpec::new(3, ActivationKind::Linear { a: 2.0 }, 1, 0.0).unwrap();
        let ks = nngp_kernels(&x, &spec, &quad()).unwrap();
        assert_relative_eq!(ks[2].get(0, 0), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn tanh_kernel_is_bounded_and_psd() {
        let x = InputSet::from_scalars(&[-3.0, -1.0, 0.5, 2.0]).unwrap();
        let spec = NetworkSpec::new(3, ActivationKind::Tanh, 1, 1.0).unwrap();
        let ks = nngp_kernels(&x, &spec, &quad()).unwrap();
        for k in &ks[1..] {
            assert!(k.min_eigenvalue() >= -1e-12);
            assert!(k.diagonal().iter().all(|&d| d > 0.0 && d < 1.0));
        }
    }

    #[test]
    fn tanh_pair_matches_sampling() {
        let (c11, c12, c22) = (2.0, 0.8, 1.5);
        let q = pair_expectation_quadrature(&ActivationKind::Tanh, c11, c12, c22, &quad());
        let (l11, l21, l22) = lower_2x2(c11, c12, c22);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 2_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            acc += (l11 * z1).tanh() * (l21 * z1 + l22 * z2).tanh();
        }
        assert!((acc / n as f64 - q).abs() < 2e-3);
    }

    #[test]
    fn deserializes_activation() {
        let a: ActivationKind = serde_json::from_str(r#"{"kind":"linear","a":2.0}"#).unwrap();
        assert_eq!(a, ActivationKind::Linear { a: 2.0 });
        let r: ActivationKind = serde_json::from_str(r#"{"kind":"relu"}"#).unwrap();
        assert_eq!(r, ActivationKind::Relu);
        assert!(serde_json::from_str::<ActivationKind>(r#"{"kind":"relu","a":1}"#).is_err());
    }

    proptest! {
        #[test]
        fn relu_closed_form_matches_quadrature(
            a in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            let c11 = a[0] * a[0] + a[1] * a[1] + 0.01;
            let c22 = a[2] * a[2] + a[3] * a[3] + 0.01;
            let c12 = a[0] * a[2] + a[1] * a[3];
            let exact = relu_pair_expectation(c11, c12, c22);
            let q = pair_expectation_quadrature(&ActivationKind::Relu, c11, c12, c22, &quad());
            prop_assert!((exact - q).abs() <= 1e-6 * exact.abs().max(1e-3));
        }

        #[test]
        fn relu_diagonal_halves(
            xs in proptest::collection::btree_set(-40i32..40, 1..5),
            depth in 2usize..5,
            b in prop_oneof![Just(0.0), Just(1.0)],
        ) {
            let pts: Vec<f64> = xs.iter().map(|&v| v as f64 / 10.0).collect();
            let x = InputSet::from_scalars(&pts).unwrap();
            let spec = NetworkSpec::new(depth, ActivationKind::Relu, 1, b).unwrap();
            let ks = nngp_kernels(&x, &spec, &quad()).unwrap();
            for l in 1..depth {
                for i in 0..pts.len() {
                    let pre = ks[l - 1].get(i, i) + b;
                    prop_assert!((ks[l].get(i, i) - pre / 2.0).abs() <= 1e-10 * (1.0 + pre));
                }
            }
        }

        #[test]
        fn linear_without_bias_scales(a in 0.2f64..3.0, x in -3.0f64..3.0, depth in 2usize..5) {
            let xs = InputSet::from_scalars(&[x]).unwrap();
            let spec = NetworkSpec::new(depth, ActivationKind::Linear { a }, 1, 0.0).unwrap();
            let ks = nngp_kernels(&xs, &spec, &quad()).unwrap();
            for (l, k) in ks.iter().enumerate() {
                let expect = a.powi(l as i32) * x * x;
                prop_assert!((k.get(0, 0) - expect).abs() <= 1e-12 * (1.0 + expect));
            }
        }
    }
}
