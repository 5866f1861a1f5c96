use log::debug;
use serde::{Deserialize, Serialize};

use super::artifacts::{ActionTable, QFunction, QNetwork};
use super::nets::{check_dataset, encode, q_spec, sample_batch, terminal_cost, Critic};
use super::TrainConfig;
use crate::dataset::OfflineDataset;
use crate::error::{CapsError, Result};
use crate::rng::RngSeed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FqeObjective {
    Reward,
    Cost,
}

/// Fitted Q-evaluation result with the mean Bellman residual of each sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FqeEstimate {
    pub objective: FqeObjective,
    pub q: QNetwork,
    pub residuals: Vec<f64>,
}

impl QFunction for FqeEstimate {
    fn q_row(&self, s: usize, t: usize) -> Result<Vec<f64>> {
        self.q.q_row(s, t)
    }
}

/// Evaluates the fixed policy `policy` on the dataset: `cfg.fqe_sweeps`
/// sweeps, each regressing `Q` onto `r + gamma Q_frozen(s', pi(s', t+1))`
/// (costs analogously) for `cfg.fqe_steps_per_sweep` Adam steps, with the
/// frozen copy refreshed between sweeps.
pub fn fqe(
    ds: &OfflineDataset,
    policy: &ActionTable,
    objective: FqeObjective,
    cfg: &TrainConfig,
) -> Result<FqeEstimate> {
    cfg.validate()?;
    check_dataset(ds)?;
    if (policy.n_states, policy.horizon) != (ds.n_states, ds.horizon) {
        return Err(CapsError::DimensionMismatch {
            context: "fqe policy table",
            expected: ds.n_states * ds.horizon,
            found: policy.n_states * policy.horizon,
        });
    }
    if let Some(&a) = policy.actions.iter().find(|&&a| a >= ds.n_actions) {
        return Err(CapsError::IndexOutOfRange {
            what: "policy action",
            index: a,
            limit: ds.n_actions,
        });
    }
    let tag = match objective {
        FqeObjective::Reward => "fqe-reward",
        FqeObjective::Cost => "fqe-cost",
    };
    let seed = RngSeed::new(cfg.seed);
    let mut critic = Critic::new(q_spec(ds, &cfg.hidden), cfg.lr_critic, &mut seed.derive(tag, 0).rng())?;
    let mut batches = seed.derive(tag, 1).rng();
    let mut residuals = Vec::with_capacity(cfg.fqe_sweeps);
    for sweep in 0..cfg.fqe_sweeps {
        let frozen = critic.q.clone();
        let mut total = 0.0;
        for _ in 0..cfg.fqe_steps_per_sweep {
            let idx = sample_batch(&mut batches, ds.len(), cfg.batch_size);
            let mut items = Vec::with_capacity(idx.len());
            for &i in &idx {
                let tr = &ds.transitions[i];
                let stage = match objective {
                    FqeObjective::Reward => tr.r,
                    FqeObjective::Cost => f64::from(tr.c),
                };
                let y = if tr.done {
                    match objective {
                        FqeObjective::Reward => tr.r,
                        FqeObjective::Cost => terminal_cost(ds, tr, cfg.gamma),
                    }
                } else {
                    let a2 = policy.get(tr.s_next, tr.t + 1)?;
                    stage + cfg.gamma * frozen.forward(&encode(ds, tr.s_next, tr.t + 1))?[a2]
                };
                items.push((encode(ds, tr.s, tr.t), tr.a, y));
            }
            total += critic.regress(&items)?;
        }
        let residual = total / cfg.fqe_steps_per_sweep.max(1) as f64;
        debug!("{tag} sweep {sweep}: residual {residual:.3e}");
        residuals.push(residual);
    }
    critic.ensure_finite(tag)?;
    Ok(FqeEstimate {
        objective,
        q: QNetwork {
            n_states: ds.n_states,
            horizon: ds.horizon,
            net: critic.q,
        },
        residuals,
    })
}
