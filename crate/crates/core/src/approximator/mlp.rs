use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CapsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(CapsError::InvalidSpec(format!(
                "all layer widths must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }
}

/// Fully connected network. Hidden layers use `spec.activation`; the output
/// layer is linear unless `activate_output` is set.
///
/// Parameters are one flat vector, layer by layer: the weight matrix
/// (`out x in`, row major) followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub activate_output: bool,
    params: Vec<f64>,
}

/// Per-layer inputs and pre-activations from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has an output")
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, activate_output: bool, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let mut params = Vec::new();
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-limit..limit));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            spec,
            activate_output,
            params,
        })
    }

    pub fn zeros(spec: MlpSpec, activate_output: bool) -> Result<Self> {
        spec.validate()?;
        let n: usize = spec.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            spec,
            activate_output,
            params: vec![0.0; n],
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(CapsError::DimensionMismatch {
                context: "set_params",
                expected: self.params.len(),
                found: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    /// `self <- (1 - rate) * self + rate * source`.
    pub fn soft_update_from(&mut self, source: &Mlp, rate: f64) {
        for (p, s) in self.params.iter_mut().zip(&source.params) {
            *p += rate * (s - *p);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.acts.pop().expect("output layer"))
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.spec.input_dim {
            return Err(CapsError::DimensionMismatch {
                context: "mlp input",
                expected: self.spec.input_dim,
                found: x.len(),
            });
        }
        let widths = self.spec.widths();
        let n_layers = widths.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        let mut pre = Vec::with_capacity(n_layers);
        acts.push(x.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let input = &acts[l];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let activate = l + 1 < n_layers || self.activate_output;
            let y = if activate {
                z.iter().map(|&v| self.spec.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(y);
        }
        Ok(Trace { acts, pre })
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/d(output)`
    /// and returns `d(loss)/d(input)`.
    pub fn backward(&self, trace: &Trace, upstream: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.spec.output_dim {
            return Err(CapsError::DimensionMismatch {
                context: "mlp upstream gradient",
                expected: self.spec.output_dim,
                found: upstream.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(CapsError::DimensionMismatch {
                context: "mlp gradient buffer",
                expected: self.params.len(),
                found: grad.len(),
            });
        }
        let widths = self.spec.widths();
        let n_layers = widths.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for l in 0..n_layers {
            offsets.push(offset);
            offset += widths[l] * widths[l + 1] + widths[l + 1];
        }
        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let activate = l + 1 < n_layers || self.activate_output;
            if activate {
                for o in 0..n_out {
                    delta[o] *= self
                        .spec
                        .activation
                        .derivative(trace.pre[l][o], trace.acts[l + 1][o]);
                }
            }
            let off = offsets[l];
            let input = &trace.acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g_row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, x) in g_row.iter_mut().zip(input) {
                    *g += d * x;
                }
                grad[off + n_in * n_out + o] += d;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (n, wv) in next.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *n += d * wv;
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Smallest |pre-activation| over activated units; used by gradient
    /// checks to stay away from ReLU kinks.
    pub fn min_abs_preactivation(&self, trace: &Trace) -> f64 {
        let n_layers = trace.pre.len();
        trace
            .pre
            .iter()
            .enumerate()
            .filter(|(l, _)| l + 1 < n_layers || self.activate_output)
            .flat_map(|(_, z)| z.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngSeed;

    fn spec(input: usize, hidden: Vec<usize>, output: usize, act: Activation) -> MlpSpec {
        MlpSpec {
            input_dim: input,
            hidden,
            output_dim: output,
            activation: act,
        }
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(spec(3, vec![4, 4], 2, Activation::Relu), false).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_net() {
        let mut net = Mlp::zeros(spec(3, vec![], 3, Activation::Tanh), false).unwrap();
        for i in 0..3 {
            net.params_mut()[i * 3 + i] = 1.0;
        }
        let x = [0.3, -1.2, 4.0];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn dimension_mismatch() {
        let net = Mlp::zeros(spec(3, vec![2], 1, Activation::Relu), false).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(Mlp::zeros(spec(3, vec![0], 1, Activation::Relu), false).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngSeed::new(5).rng();
        for act in [Activation::Tanh, Activation::Relu] {
            let net = Mlp::new(spec(4, vec![5, 3], 2, act), false, &mut rng).unwrap();
            let x = [0.1, -0.4, 0.9, 0.3];
            let up = [0.7, -1.3];
            let trace = net.forward_trace(&x).unwrap();
            if net.min_abs_preactivation(&trace) < 1e-3 {
                continue;
            }
            let mut grad = vec![0.0; net.n_params()];
            let dx = net.backward(&trace, &up, &mut grad).unwrap();
            let loss = |n: &Mlp, x: &[f64]| {
                let y = n.forward(x).unwrap();
                y[0] * up[0] + y[1] * up[1]
            };
            let h = 1e-5;
            for i in 0..net.n_params() {
                let mut a = net.clone();
                a.params_mut()[i] += h;
                let mut b = net.clone();
                b.params_mut()[i] -= h;
                let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
                assert!((fd - grad[i]).abs() <= 1e-4 * grad[i].abs().max(1e-4), "{act:?} param {i}");
            }
            for i in 0..4 {
                let mut a = x;
                a[i] += h;
                let mut b = x;
                b[i] -= h;
                let fd = (loss(&net, &a) - loss(&net, &b)) / (2.0 * h);
                assert!((fd - dx[i]).abs() <= 1e-4 * dx[i].abs().max(1e-4));
            }
        }
    }
}
