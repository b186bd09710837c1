use rand::Rng;
use rand_distr::StandardNormal;

use crate::nngp::{ActivationKind, NetworkSpec};

/// One affine layer: `z = W a + b`, weights stored row-major.
#[derive(Debug, Clone)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    /// Offset of the weights in the parameter vector; biases follow.
    offset: usize,
    weight_std: f64,
    bias_std: f64,
    has_bias: bool,
}

impl Layer {
    fn len(&self) -> usize {
        self.fan_in * self.fan_out + if self.has_bias { self.fan_out } else { 0 }
    }
}

/// Finite-width network in prior-whitened coordinates: every parameter is
/// `std * u` with `u ~ N(0, 1)` under the prior.
#[derive(Debug, Clone)]
pub struct Network {
    act: ActivationKind,
    width: usize,
    layers: Vec<Layer>,
    u: Vec<f64>,
}

/// Activations kept from a forward pass for reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub(crate) struct Tape {
    /// Pre-activations per hidden layer.
    z: Vec<Vec<f64>>,
    /// Post-activations per hidden layer.
    a: Vec<Vec<f64>>,
}

impl Network {
    /// All parameters zero; call [`Network::sample_prior`] to draw a network.
    pub fn zeros(spec: &NetworkSpec, width: usize) -> Self {
        let mut layers = Vec::with_capacity(spec.depth);
        let mut offset = 0;
        let bias_std = spec.bias_variance.sqrt();
        for l in 0..spec.depth {
            let fan_in = if l == 0 { spec.d_in } else { width };
            let last = l + 1 == spec.depth;
            let layer = Layer {
                fan_in,
                fan_out: if last { 1 } else { width },
                offset,
                weight_std: (1.0 / fan_in as f64).sqrt(),
                bias_std,
                has_bias: !last,
            };
            offset += layer.len();
            layers.push(layer);
        }
        Self {
            act: spec.activation,
            width,
            layers,
            u: vec![0.0; offset],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_params(&self) -> usize {
        self.u.len()
    }

    /// Whitened parameters.
    pub fn params(&self) -> &[f64] {
        &self.u
    }

    pub fn set_params(&mut self, u: &[f64]) {
        self.u.copy_from_slice(u);
    }

    pub fn sample_prior<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for v in self.u.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }

    /// Unscaled output `h(x)`.
    pub fn output(&self, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        let mut next = Vec::with_capacity(self.width);
        for (l, layer) in self.layers.iter().enumerate() {
            self.affine(layer, &cur, &mut next);
            if l + 1 < self.layers.len() {
                for v in next.iter_mut() {
                    *v = self.act.eval(*v);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    /// `h(x) / sqrt(n)`.
    pub fn scaled_output(&self, x: &[f64]) -> f64 {
        self.output(x) / (self.width as f64).sqrt()
    }

    fn affine(&self, layer: &Layer, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let w = &self.u[layer.offset..layer.offset + layer.fan_in * layer.fan_out];
        let b = &self.u[layer.offset + layer.fan_in * layer.fan_out..layer.offset + layer.len()];
        for r in 0..layer.fan_out {
            let row = &w[r * layer.fan_in..(r + 1) * layer.fan_in];
            let dot: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum();
            let bias = if layer.has_bias { layer.bias_std * b[r] } else { 0.0 };
            out.push(layer.weight_std * dot + bias);
        }
    }

    /// Forward pass recording the hidden activations.
    pub(crate) fn forward(&self, x: &[f64], tape: &mut Tape) -> f64 {
        let hidden = self.layers.len() - 1;
        tape.z.resize(hidden, Vec::new());
        tape.a.resize(hidden, Vec::new());
        let mut out = Vec::with_capacity(1);
        for l in 0..self.layers.len() {
            let input: &[f64] = if l == 0 { x } else { &tape.a[l - 1] };
            if l < hidden {
                let mut z = std::mem::take(&mut tape.z[l]);
                self.affine(&self.layers[l], input, &mut z);
                let a = &mut tape.a[l];
                a.clear();
                a.extend(z.iter().map(|&v| self.act.eval(v)));
                tape.z[l] = z;
            } else {
                self.affine(&self.layers[l], input, &mut out);
            }
        }
        out[0]
    }

    /// Adds `scale * dh/du` at the input of `tape` to `grad`.
    pub(crate) fn backward(&self, x: &[f64], tape: &Tape, scale: f64, grad: &mut [f64]) {
        let hidden = self.layers.len() - 1;
        // Gradient with respect to the current layer's output.
        let mut delta = vec![scale];
        let mut below = Vec::with_capacity(self.width);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input: &[f64] = if l == 0 { x } else { &tape.a[l - 1] };
            let nw = layer.fan_in * layer.fan_out;
            let w = &self.u[layer.offset..layer.offset + nw];
            for r in 0..layer.fan_out {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[layer.offset + r * layer.fan_in..layer.offset + (r + 1) * layer.fan_in];
                let dw = layer.weight_std * d;
                for (gi, &ai) in g.iter_mut().zip(input) {
                    *gi += dw * ai;
                }
                if layer.has_bias {
                    grad[layer.offset + nw + r] += layer.bias_std * d;
                }
            }
            if l == 0 {
                break;
            }
            below.clear();
            below.resize(layer.fan_in, 0.0);
            for r in 0..layer.fan_out {
                let dw = layer.weight_std * delta[r];
                if dw == 0.0 {
                    continue;
                }
                let row = &w[r * layer.fan_in..(r + 1) * layer.fan_in];
                for (bi, &wi) in below.iter_mut().zip(row) {
                    *bi += dw * wi;
                }
            }
            debug_assert!(l - 1 < hidden);
            for (bi, &zi) in below.iter_mut().zip(&tape.z[l - 1]) {
                *bi *= self.act.deriv(zi);
            }
            std::mem::swap(&mut delta, &mut below);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        for (act, depth) in [(ActivationKind::Tanh, 3), (ActivationKind::Relu, 2)] {
            let spec = NetworkSpec::new(depth, act, 2, 0.7).unwrap();
            let mut net = Network::zeros(&spec, 5);
            net.sample_prior(&mut ChaCha8Rng::seed_from_u64(1));
            let x = [0.4, -1.3];
            let mut tape = Tape::default();
            let h = net.forward(&x, &mut tape);
            assert!((h - net.output(&x)).abs() < 1e-14);
            let mut grad = vec![0.0; net.n_params()];
            net.backward(&x, &tape, 1.0, &mut grad);
            let u0 = net.params().to_vec();
            for i in 0..u0.len() {
                let mut u = u0.clone();
                u[i] += 1e-6;
                net.set_params(&u);
                let hp = net.output(&x);
                u[i] -= 2e-6;
                net.set_params(&u);
                let hm = net.output(&x);
                let fd = (hp - hm) / 2e-6;
                assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{act:?} param {i}: {fd} vs {}", grad[i]);
            }
            net.set_params(&u0);
        }
    }

    #[test]
    fn parameter_count() {
        let spec = NetworkSpec::new(3, ActivationKind::Relu, 2, 1.0).unwrap();
        let net = Network::zeros(&spec, 4);
        assert_eq!(net.n_params(), (2 * 4 + 4) + (4 * 4 + 4) + 4);
    }
}
