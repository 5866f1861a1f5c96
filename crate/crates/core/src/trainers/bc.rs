use serde::{Deserialize, Serialize};

use super::artifacts::PolicyModel;
use super::nets::{check_dataset, encode, sample_batch, ACTIVATION};
use super::TrainConfig;
use crate::approximator::{argmax, cross_entropy, encode_state, encoding_dim, softmax, AdamState, MultiHeadPolicyNet};
use crate::cmdp::CostAwarePolicy;
use crate::dataset::OfflineDataset;
use crate::error::{CapsError, Result};
use crate::rng::RngSeed;

/// Per-head, per-transition extraction weights.
pub(super) struct HeadWeights {
    n: usize,
    w: Vec<f64>,
}

impl HeadWeights {
    pub fn new(k: usize, n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut w = Vec::with_capacity(k * n);
        for head in 0..k {
            for i in 0..n {
                w.push(f(head, i));
            }
        }
        Self { n, w }
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.w[k * self.n + i]
    }

    pub fn max(&self) -> f64 {
        self.w.iter().copied().fold(0.0, f64::max)
    }
}

/// The `K` policy heads under training, either on one shared body or as
/// independent single-head networks.
pub(super) enum ActorSet {
    Shared {
        net: MultiHeadPolicyNet,
        opt: AdamState,
    },
    Separate {
        nets: Vec<(MultiHeadPolicyNet, AdamState)>,
    },
}

impl ActorSet {
    pub fn new(ds: &OfflineDataset, cfg: &TrainConfig, k: usize, seed: RngSeed) -> Result<Self> {
        let mut rng = seed.rng();
        let dim = encoding_dim(ds.n_states);
        let mut build = |heads: usize| {
            MultiHeadPolicyNet::new(dim, &cfg.hidden, ds.n_actions, heads, ACTIVATION, cfg.seed, &mut rng)
        };
        if cfg.shared_backbone || k == 1 {
            let net = build(k)?;
            let opt = AdamState::new(net.n_params(), cfg.lr_actor);
            Ok(ActorSet::Shared { net, opt })
        } else {
            let nets = (0..k)
                .map(|_| {
                    let net = build(1)?;
                    let opt = AdamState::new(net.n_params(), cfg.lr_actor);
                    Ok((net, opt))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ActorSet::Separate { nets })
        }
    }

    pub fn logits(&self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            ActorSet::Shared { net, .. } => net.forward_head(x, k),
            ActorSet::Separate { nets } => nets[k].0.forward_head(x, 0),
        }
    }

    /// One Adam step on the batch mean of per-sample losses. `grad_fn(k, j,
    /// logits)` returns the gradient of head `k`'s loss on batch entry `j`
    /// with respect to its logits, or `None` if the head is untouched.
    pub fn step(
        &mut self,
        ds: &OfflineDataset,
        idx: &[usize],
        mut grad_fn: impl FnMut(usize, usize, &[f64]) -> Option<Vec<f64>>,
    ) -> Result<()> {
        let scale = 1.0 / idx.len() as f64;
        let scaled = |g: Option<Vec<f64>>| g.map(|g| g.into_iter().map(|v| v * scale).collect());
        match self {
            ActorSet::Shared { net, opt } => {
                let mut grad = net.zero_grad();
                for (j, &i) in idx.iter().enumerate() {
                    let tr = &ds.transitions[i];
                    let trace = net.forward_trace(&encode(ds, tr.s, tr.t))?;
                    let up: Vec<Option<Vec<f64>>> = (0..net.n_heads())
                        .map(|k| scaled(grad_fn(k, j, trace.logits(k))))
                        .collect();
                    net.backward(&trace, &up, &mut grad)?;
                }
                let mut params = net.params_flat();
                opt.adam_step(&mut params, &grad.flat())?;
                net.set_params_flat(&params)?;
            }
            ActorSet::Separate { nets } => {
                for (k, (net, opt)) in nets.iter_mut().enumerate() {
                    let mut grad = net.zero_grad();
                    for (j, &i) in idx.iter().enumerate() {
                        let tr = &ds.transitions[i];
                        let trace = net.forward_trace(&encode(ds, tr.s, tr.t))?;
                        let up = [scaled(grad_fn(k, j, trace.logits(0)))];
                        net.backward(&trace, &up, &mut grad)?;
                    }
                    let mut params = net.params_flat();
                    opt.adam_step(&mut params, &grad.flat())?;
                    net.set_params_flat(&params)?;
                }
            }
        }
        Ok(())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        let finite = match self {
            ActorSet::Shared { net, .. } => net.all_finite(),
            ActorSet::Separate { nets } => nets.iter().all(|(n, _)| n.all_finite()),
        };
        if finite {
            Ok(())
        } else {
            Err(CapsError::Diverged("non-finite actor parameters".into()))
        }
    }

    pub fn into_policy(self, ds: &OfflineDataset) -> PolicyModel {
        match self {
            ActorSet::Shared { net, .. } => PolicyModel::Shared {
                n_states: ds.n_states,
                horizon: ds.horizon,
                net,
            },
            ActorSet::Separate { nets } => PolicyModel::Separate {
                n_states: ds.n_states,
                horizon: ds.horizon,
                nets: nets.into_iter().map(|(n, _)| n).collect(),
            },
        }
    }
}

/// Behaviour-cloned single policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BcPolicy {
    pub n_states: usize,
    pub horizon: usize,
    pub net: MultiHeadPolicyNet,
}

impl BcPolicy {
    pub fn probabilities(&self, s: usize, t: usize) -> Result<Vec<f64>> {
        let logits = self
            .net
            .forward_head(&encode_state(s, t, self.n_states, self.horizon), 0)?;
        Ok(softmax(&logits))
    }
}

impl CostAwarePolicy for BcPolicy {
    /// Most likely action; ignores the accumulated cost.
    fn action(&self, s: usize, t: usize, _c_before: u32) -> usize {
        self.net
            .forward_head(&encode_state(s, t, self.n_states, self.horizon), 0)
            .map(|l| argmax(&l))
            .unwrap_or(usize::MAX)
    }
}

/// Maximum-likelihood behaviour cloning with `cfg.steps` Adam steps.
pub fn train_bc(ds: &OfflineDataset, cfg: &TrainConfig) -> Result<BcPolicy> {
    cfg.validate()?;
    check_dataset(ds)?;
    let seed = RngSeed::new(cfg.seed);
    let mut actor = ActorSet::new(ds, cfg, 1, seed.derive("bc", 0))?;
    let mut batches = seed.derive("bc", 1).rng();
    for _ in 0..cfg.steps {
        let idx = sample_batch(&mut batches, ds.len(), cfg.batch_size);
        actor.step(ds, &idx, |_, j, logits| {
            Some(cross_entropy(logits, ds.transitions[idx[j]].a).1)
        })?;
    }
    actor.ensure_finite()?;
    match actor {
        ActorSet::Shared { net, .. } => Ok(BcPolicy {
            n_states: ds.n_states,
            horizon: ds.horizon,
            net,
        }),
        ActorSet::Separate { .. } => unreachable!("a single head always uses one network"),
    }
}
