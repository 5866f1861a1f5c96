//! Building blocks shared by the neural trainers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::approximator::{encode_state, encoding_dim, expectile_loss, Activation, AdamState, Mlp, MlpSpec};
use crate::dataset::{OfflineDataset, Transition};
use crate::error::{CapsError, Result};

pub(super) const ACTIVATION: Activation = Activation::Relu;

pub(super) fn encode(ds: &OfflineDataset, s: usize, t: usize) -> Vec<f64> {
    encode_state(s, t, ds.n_states, ds.horizon)
}

pub(super) fn q_spec(ds: &OfflineDataset, hidden: &[usize]) -> MlpSpec {
    MlpSpec {
        input_dim: encoding_dim(ds.n_states),
        hidden: hidden.to_vec(),
        output_dim: ds.n_actions,
        activation: ACTIVATION,
    }
}

pub(super) fn v_spec(ds: &OfflineDataset, hidden: &[usize]) -> MlpSpec {
    MlpSpec {
        output_dim: 1,
        ..q_spec(ds, hidden)
    }
}

pub(super) fn sample_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Cost target of a final transition: its own cost plus the discounted
/// cost of the state the episode ends in.
pub(super) fn terminal_cost(ds: &OfflineDataset, tr: &Transition, gamma: f64) -> f64 {
    f64::from(tr.c) + gamma * f64::from(ds.state_cost(tr.s_next))
}

/// Q network with a slowly tracking target copy.
pub(super) struct Critic {
    pub q: Mlp,
    pub target: Mlp,
    opt: AdamState,
}

impl Critic {
    pub fn new(spec: MlpSpec, lr: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let q = Mlp::new(spec, false, rng)?;
        let opt = AdamState::new(q.n_params(), lr);
        Ok(Self {
            target: q.clone(),
            q,
            opt,
        })
    }

    /// One Adam step on the mean of `(Q(x)[a] - y)^2`; returns the loss.
    pub fn regress(&mut self, items: &[(Vec<f64>, usize, f64)]) -> Result<f64> {
        let mut grad = vec![0.0; self.q.n_params()];
        let mut loss = 0.0;
        let scale = 1.0 / items.len() as f64;
        let mut up = vec![0.0; self.q.spec.output_dim];
        for (x, a, y) in items {
            let trace = self.q.forward_trace(x)?;
            let d = trace.output()[*a] - y;
            loss += d * d * scale;
            up.iter_mut().for_each(|u| *u = 0.0);
            up[*a] = 2.0 * d * scale;
            self.q.backward(&trace, &up, &mut grad)?;
        }
        self.opt.adam_step(self.q.params_mut(), &grad)?;
        Ok(loss)
    }

    pub fn track(&mut self, rate: f64) {
        self.target.soft_update_from(&self.q, rate);
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        ensure_finite(&self.q, what)
    }
}

/// Scalar value network fitted by expectile regression.
pub(super) struct ValueNet {
    pub v: Mlp,
    opt: AdamState,
}

impl ValueNet {
    pub fn new(spec: MlpSpec, lr: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let v = Mlp::new(spec, false, rng)?;
        let opt = AdamState::new(v.n_params(), lr);
        Ok(Self { v, opt })
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.v.forward(x)?[0])
    }

    /// One Adam step on the mean expectile loss of `sign * (q - V(x))`.
    /// `sign = 1` tracks an upper expectile of `q`, `sign = -1` a lower one.
    pub fn regress(&mut self, items: &[(Vec<f64>, f64)], tau: f64, sign: f64) -> Result<f64> {
        let mut grad = vec![0.0; self.v.n_params()];
        let mut loss = 0.0;
        let scale = 1.0 / items.len() as f64;
        for (x, q) in items {
            let trace = self.v.forward_trace(x)?;
            let u = sign * (q - trace.output()[0]);
            let (l, dl_du) = expectile_loss(u, tau)?;
            loss += l * scale;
            self.v.backward(&trace, &[-sign * dl_du * scale], &mut grad)?;
        }
        self.opt.adam_step(self.v.params_mut(), &grad)?;
        Ok(loss)
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        ensure_finite(&self.v, what)
    }
}

pub(super) fn ensure_finite(net: &Mlp, what: &str) -> Result<()> {
    if net.params().iter().all(|p| p.is_finite()) {
        Ok(())
    } else {
        Err(CapsError::Diverged(format!("non-finite parameters in {what}")))
    }
}

pub(super) fn check_dataset(ds: &OfflineDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(CapsError::EmptyDataset);
    }
    Ok(())
}
