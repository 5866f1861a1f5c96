use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp, MlpSpec, Trace};
use crate::error::{CapsError, Result};

/// Shared body `f` with `K` linear heads `g_k`; head `k` produces action
/// logits `g_k(f(x))`.
///
/// Head order is `[reward, intermediates..., cost]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadPolicyNet {
    pub body: Mlp,
    pub heads: Vec<Mlp>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct MultiHeadTrace {
    body: Trace,
    heads: Vec<Trace>,
}

impl MultiHeadTrace {
    pub fn logits(&self, k: usize) -> &[f64] {
        self.heads[k].output()
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadGrad {
    pub body: Vec<f64>,
    pub heads: Vec<Vec<f64>>,
}

impl MultiHeadGrad {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.body.clone();
        for h in &self.heads {
            v.extend_from_slice(h);
        }
        v
    }
}

impl MultiHeadPolicyNet {
    /// `hidden` must be nonempty; its last width is the representation size.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        n_actions: usize,
        n_heads: usize,
        activation: Activation,
        seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let (&repr, body_hidden) = hidden.split_last().ok_or_else(|| {
            CapsError::InvalidSpec("multi-head network needs at least one hidden layer".into())
        })?;
        if n_heads == 0 {
            return Err(CapsError::InvalidSpec("multi-head network needs >= 1 head".into()));
        }
        let body = Mlp::new(
            MlpSpec {
                input_dim,
                hidden: body_hidden.to_vec(),
                output_dim: repr,
                activation,
            },
            true,
            rng,
        )?;
        let heads = (0..n_heads)
            .map(|_| {
                Mlp::new(
                    MlpSpec {
                        input_dim: repr,
                        hidden: Vec::new(),
                        output_dim: n_actions,
                        activation,
                    },
                    false,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { body, heads, seed })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn n_actions(&self) -> usize {
        self.heads[0].spec.output_dim
    }

    pub fn input_dim(&self) -> usize {
        self.body.spec.input_dim
    }

    pub fn n_params(&self) -> usize {
        self.body.n_params() + self.heads.iter().map(Mlp::n_params).sum::<usize>()
    }

    pub fn zero_grad(&self) -> MultiHeadGrad {
        MultiHeadGrad {
            body: vec![0.0; self.body.n_params()],
            heads: self.heads.iter().map(|h| vec![0.0; h.n_params()]).collect(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let z = self.body.forward(x)?;
        self.heads.iter().map(|h| h.forward(&z)).collect()
    }

    pub fn forward_head(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        let head = self.heads.get(k).ok_or(CapsError::IndexOutOfRange {
            what: "head",
            index: k,
            limit: self.heads.len(),
        })?;
        head.forward(&self.body.forward(x)?)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<MultiHeadTrace> {
        let body = self.body.forward_trace(x)?;
        let heads = self
            .heads
            .iter()
            .map(|h| h.forward_trace(body.output()))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiHeadTrace { body, heads })
    }

    /// Accumulates gradients for the heads with `Some` upstream logits
    /// gradient; the body receives the sum of their input gradients.
    pub fn backward(
        &self,
        trace: &MultiHeadTrace,
        upstream: &[Option<Vec<f64>>],
        grad: &mut MultiHeadGrad,
    ) -> Result<()> {
        if upstream.len() != self.heads.len() {
            return Err(CapsError::DimensionMismatch {
                context: "multi-head upstream",
                expected: self.heads.len(),
                found: upstream.len(),
            });
        }
        let mut body_up = vec![0.0; self.body.spec.output_dim];
        let mut any = false;
        for (k, up) in upstream.iter().enumerate() {
            let Some(up) = up else { continue };
            let dz = self.heads[k].backward(&trace.heads[k], up, &mut grad.heads[k])?;
            for (b, d) in body_up.iter_mut().zip(dz) {
                *b += d;
            }
            any = true;
        }
        if any {
            self.body.backward(&trace.body, &body_up, &mut grad.body)?;
        }
        Ok(())
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = self.body.params().to_vec();
        for h in &self.heads {
            v.extend_from_slice(h.params());
        }
        v
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(CapsError::DimensionMismatch {
                context: "multi-head parameters",
                expected: self.n_params(),
                found: flat.len(),
            });
        }
        let mut off = self.body.n_params();
        self.body.set_params(flat[..off].to_vec())?;
        for h in &mut self.heads {
            let n = h.n_params();
            h.set_params(flat[off..off + n].to_vec())?;
            off += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.body.params().iter().all(|v| v.is_finite())
            && self.heads.iter().all(|h| h.params().iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::loss::cross_entropy;
    use crate::rng::RngSeed;

    fn net(k: usize) -> MultiHeadPolicyNet {
        let mut rng = RngSeed::new(11).rng();
        MultiHeadPolicyNet::new(4, &[6, 5], 3, k, Activation::Tanh, 11, &mut rng).unwrap()
    }

    #[test]
    fn heads_share_body_output() {
        let n = net(3);
        let x = [1.0, 0.0, 0.0, 0.5];
        let all = n.forward(&x).unwrap();
        for k in 0..3 {
            assert_eq!(all[k], n.forward_head(&x, k).unwrap());
        }
        assert!(n.forward_head(&x, 3).is_err());
    }

    #[test]
    fn head_loss_reaches_body_only_and_own_head() {
        let n = net(4);
        let x = [0.0, 1.0, 0.0, 0.25];
        let trace = n.forward_trace(&x).unwrap();
        for k in 0..4 {
            let mut up = vec![None; 4];
            up[k] = Some(cross_entropy(trace.logits(k), 1).1);
            let mut g = n.zero_grad();
            n.backward(&trace, &up, &mut g).unwrap();
            assert!(g.body.iter().any(|v| *v != 0.0));
            for j in 0..4 {
                let nonzero = g.heads[j].iter().any(|v| *v != 0.0);
                assert_eq!(nonzero, j == k, "head {j} for loss {k}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let n = net(2);
        let x = [0.0, 0.0, 1.0, 0.75];
        let loss = |m: &MultiHeadPolicyNet| {
            let l = m.forward(&x).unwrap();
            cross_entropy(&l[0], 2).0 + 0.5 * cross_entropy(&l[1], 0).0
        };
        let trace = n.forward_trace(&x).unwrap();
        let up0 = cross_entropy(trace.logits(0), 2).1;
        let up1: Vec<f64> = cross_entropy(trace.logits(1), 0).1.iter().map(|v| 0.5 * v).collect();
        let mut g = n.zero_grad();
        n.backward(&trace, &[Some(up0), Some(up1)], &mut g).unwrap();
        let flat = g.flat();
        let p = n.params_flat();
        let h = 1e-5;
        for i in 0..p.len() {
            let mut a = n.clone();
            let mut pa = p.clone();
            pa[i] += h;
            a.set_params_flat(&pa).unwrap();
            let mut b = n.clone();
            let mut pb = p.clone();
            pb[i] -= h;
            b.set_params_flat(&pb).unwrap();
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - flat[i]).abs() <= 1e-4 * flat[i].abs().max(1e-4), "param {i}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let n = net(3);
        let s = serde_json::to_string(&n).unwrap();
        let back: MultiHeadPolicyNet = serde_json::from_str(&s).unwrap();
        assert_eq!(back, n);
    }
}
