//! One-dimensional quadrature rules.
//!
//! Gauss–Hermite rules are normalized to integrate against the standard
//! normal density, so `sum_k w_k f(x_k) ~ E[f(Z)]`. The Gauss–Kronrod rule
//! integrates vector-valued integrands adaptively on a finite interval.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of a probabilists' Gauss–Hermite rule.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Cached rule with `n` nodes (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> Arc<GaussHermite> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| Arc::new(golub_welsch(n)))
        .clone()
}

fn golub_welsch(n: usize) -> GaussHermite {
    assert!(n >= 1);
    // Jacobi matrix of the monic probabilists' Hermite recurrence.
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrize to remove eigen-solver noise.
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for k in 0..n {
        let (x, w) = pairs[k];
        let (xr, wr) = pairs[n - 1 - k];
        nodes[k] = 0.5 * (x - xr);
        weights[k] = 0.5 * (w + wr);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GaussHermite { nodes, weights }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Tolerances for [`integrate_gk15`].
#[derive(Debug, Clone, Copy)]
pub struct GkSettings {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for GkSettings {
    fn default() -> Self {
        Self {
            abs_tol: 1e-13,
            rel_tol: 1e-12,
            max_intervals: 200,
        }
    }
}

/// Result of [`integrate_gk15`]; `error` is the estimate for component 0.
#[derive(Debug, Clone)]
pub struct GkResult {
    pub values: Vec<f64>,
    pub error: f64,
}

struct Panel {
    a: f64,
    b: f64,
    values: Vec<f64>,
    error: f64,
}

fn gk15_panel<F>(f: &mut F, a: f64, b: f64, dim: usize, buf: &mut [f64]) -> Panel
where
    F: FnMut(f64, &mut [f64]),
{
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut kron = vec![0.0; dim];
    let mut gauss = vec![0.0; dim];
    for (k, (&x, &wk)) in XGK.iter().zip(WGK.iter()).enumerate() {
        let wg = if k % 2 == 1 { WG[k / 2] } else { 0.0 };
        let pts: &[f64] = if x == 0.0 { &[0.0] } else { &[-1.0, 1.0] };
        for &s in pts {
            f(c + s * h * x, buf);
            for d in 0..dim {
                kron[d] += wk * buf[d];
                gauss[d] += wg * buf[d];
            }
        }
    }
    for d in 0..dim {
        kron[d] *= h;
        gauss[d] *= h;
    }
    let error = (kron[0] - gauss[0]).abs();
    Panel {
        a,
        b,
        values: kron,
        error,
    }
}

/// Globally adaptive G7–K15 integration of a vector integrand on `[a, b]`.
///
/// `f(x, out)` writes `dim` values into `out`. Bisection is driven by the
/// error in component 0; all components share the same panels.
pub fn integrate_gk15<F>(mut f: F, a: f64, b: f64, dim: usize, settings: GkSettings) -> GkResult
where
    F: FnMut(f64, &mut [f64]),
{
    let mut buf = vec![0.0; dim];
    if a == b {
        return GkResult {
            values: vec![0.0; dim],
            error: 0.0,
        };
    }
    let mut panels = vec![gk15_panel(&mut f, a, b, dim, &mut buf)];
    loop {
        let total: f64 = panels.iter().map(|p| p.values[0]).sum();
        let err: f64 = panels.iter().map(|p| p.error).sum();
        let target = settings.abs_tol.max(settings.rel_tol * total.abs());
        if err <= target || panels.len() >= settings.max_intervals {
            break;
        }
        let (worst, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .expect("nonempty");
        let p = panels.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        if mid <= p.a || mid >= p.b {
            panels.push(p);
            break;
        }
        panels.push(gk15_panel(&mut f, p.a, mid, dim, &mut buf));
        panels.push(gk15_panel(&mut f, mid, p.b, dim, &mut buf));
    }
    // Sum in position order so the result does not depend on the refinement path's
    // storage order.
    panels.sort_by(|x, y| x.a.total_cmp(&y.a));
    let mut values = vec![0.0; dim];
    let mut error = 0.0;
    for p in &panels {
        for d in 0..dim {
            values[d] += p.values[d];
        }
        error += p.error;
    }
    GkResult { values, error }
}
