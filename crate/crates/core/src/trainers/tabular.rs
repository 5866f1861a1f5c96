use super::artifacts::{
    ActionTable, ArtifactMeta, ArtifactSource, PolicyModel, QModel, QTable, TrainCounters,
    TrainedArtifacts,
};
use super::{check_algo, lambda_schedule, Algo, TrainConfig};
use crate::dataset::OfflineDataset;
use crate::error::{CapsError, Result};

/// Certainty-equivalent model over the observed `(t, s, a)`.
struct EmpiricalModel {
    ns: usize,
    na: usize,
    horizon: usize,
    count: Vec<u64>,
    mean_reward: Vec<f64>,
    mean_cost: Vec<f64>,
    next_count: Vec<u64>,
}

impl EmpiricalModel {
    fn build(ds: &OfflineDataset) -> Self {
        let (ns, na, horizon) = (ds.n_states, ds.n_actions, ds.horizon);
        let cells = horizon * ns * na;
        let mut m = Self {
            ns,
            na,
            horizon,
            count: vec![0; cells],
            mean_reward: vec![0.0; cells],
            mean_cost: vec![0.0; cells],
            next_count: vec![0; cells * ns],
        };
        for tr in &ds.transitions {
            let i = m.idx(tr.t, tr.s, tr.a);
            m.count[i] += 1;
            // Running means reproduce a constant sample exactly.
            let n = m.count[i] as f64;
            m.mean_reward[i] += (tr.r - m.mean_reward[i]) / n;
            m.mean_cost[i] += (f64::from(tr.c) - m.mean_cost[i]) / n;
            m.next_count[i * ns + tr.s_next] += 1;
        }
        m
    }

    fn idx(&self, t: usize, s: usize, a: usize) -> usize {
        (t * self.ns + s) * self.na + a
    }

    fn observed(&self, t: usize, s: usize, a: usize) -> bool {
        self.count[self.idx(t, s, a)] > 0
    }

    fn expect(&self, i: usize, next: &[f64]) -> f64 {
        let n = self.count[i] as f64;
        self.next_count[i * self.ns..(i + 1) * self.ns]
            .iter()
            .zip(next)
            .map(|(&c, x)| (c as f64 / n) * x)
            .sum()
    }
}

/// Backward induction on the empirical model. Maximises when `maximize`,
/// otherwise minimises, in both cases over observed actions only.
/// Unobserved entries get the pessimistic `fill(t)`.
fn solve(
    m: &EmpiricalModel,
    stage: &[f64],
    terminal: &[f64],
    gamma: f64,
    maximize: bool,
    fill: impl Fn(usize) -> f64,
) -> QTable {
    let (ns, na, horizon) = (m.ns, m.na, m.horizon);
    let mut q = vec![0.0; horizon * ns * na];
    let mut v = vec![0.0; (horizon + 1) * ns];
    v[horizon * ns..].copy_from_slice(terminal);
    for t in (0..horizon).rev() {
        for s in 0..ns {
            let mut best: Option<f64> = None;
            for a in 0..na {
                let i = m.idx(t, s, a);
                if !m.observed(t, s, a) {
                    q[i] = fill(t);
                    continue;
                }
                let next = &v[(t + 1) * ns..(t + 2) * ns];
                let value = stage[i] + gamma * m.expect(i, next);
                q[i] = value;
                best = Some(match best {
                    None => value,
                    Some(b) if maximize => b.max(value),
                    Some(b) => b.min(value),
                });
            }
            v[t * ns + s] = best.unwrap_or_else(|| fill(t));
        }
    }
    QTable {
        n_states: ns,
        n_actions: na,
        horizon,
        q,
    }
}

/// Exact DP on the empirical MDP, then greedy extraction over observed
/// actions of `Q^r - lambda_k Q^c`. States never visited at `t` take the
/// most frequent dataset action.
pub fn train_tabular_caps(ds: &OfflineDataset, cfg: &TrainConfig) -> Result<TrainedArtifacts> {
    check_algo(cfg, Algo::Tabular)?;
    if ds.is_empty() {
        return Err(CapsError::EmptyDataset);
    }
    let lambdas = lambda_schedule(cfg.k)?;
    let m = EmpiricalModel::build(ds);
    let (ns, na, horizon) = (m.ns, m.na, m.horizon);

    let r_lo = ds
        .transitions
        .iter()
        .map(|tr| tr.r)
        .fold(f64::INFINITY, f64::min);
    let c_hi = f64::from(ds.max_observed_cost());
    let q_r = solve(&m, &m.mean_reward, &vec![0.0; ns], cfg.gamma, true, |t| {
        r_lo * (horizon - t) as f64
    });
    let terminal_cost: Vec<f64> = (0..ns).map(|s| f64::from(ds.state_cost(s))).collect();
    let q_c = solve(&m, &m.mean_cost, &terminal_cost, cfg.gamma, false, |t| {
        c_hi * (horizon - t + 1) as f64
    });

    let mut freq = vec![0u64; na];
    for tr in &ds.transitions {
        freq[tr.a] += 1;
    }
    let fallback = (0..na).fold(0, |best, a| if freq[a] > freq[best] { a } else { best });

    let extract = |score: &dyn Fn(f64, f64) -> f64| {
        ActionTable::from_fn(ns, horizon, |s, t| {
            let (rr, cc) = (q_r.row(s, t).expect("in range"), q_c.row(s, t).expect("in range"));
            let mut best: Option<(usize, f64)> = None;
            for a in (0..na).filter(|&a| m.observed(t, s, a)) {
                let v = score(rr[a], cc[a]);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((a, v));
                }
            }
            best.map_or(fallback, |(a, _)| a)
        })
    };
    let mut heads = Vec::with_capacity(cfg.k);
    heads.push(extract(&|r, _| r));
    for &lambda in &lambdas {
        heads.push(extract(&|r, c| r - lambda * c));
    }
    heads.push(extract(&|_, c| -c));

    Ok(TrainedArtifacts {
        policy: PolicyModel::Tabular { heads },
        q_reward: QModel::Table(q_r),
        q_cost: QModel::Table(q_c),
        meta: ArtifactMeta {
            source: ArtifactSource::Tabular,
            env_name: ds.env_name.clone(),
            n_states: ns,
            n_actions: na,
            horizon,
            k: cfg.k,
            lambda_values: lambdas,
            config: Some(cfg.clone()),
            dataset_hash: Some(ds.content_hash()),
            counters: TrainCounters {
                critic_passes: 2,
                critic_updates: vec![horizon as u64; 2],
                head_extractions: cfg.k,
                head_updates: cfg.k as u64,
                max_extraction_weight: 0.0,
            },
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{chain3, CHAIN3_RISKY, CHAIN3_SAFE};
    use crate::dataset::{exhaustive_dataset, BehaviorSpec, Transition};
    use crate::oracle::ValueTables;
    use crate::trainers::{HeadPolicies, QFunction};

    #[test]
    fn exhaustive_chain3_matches_oracle() {
        let cmdp = chain3();
        let ds = exhaustive_dataset(&cmdp).unwrap();
        let art = train_tabular_caps(&ds, &TrainConfig::tabular()).unwrap();
        let vt = ValueTables::solve(&cmdp);
        for s in 0..3 {
            for a in 0..2 {
                assert_eq!(art.q_reward.q(s, 0, a).unwrap(), vt.reward.q(0, s, a));
                assert_eq!(art.q_cost.q(s, 0, a).unwrap(), vt.cost.q(0, s, a));
            }
        }
        assert_eq!(art.policy.head_action(0, 0, 0).unwrap(), CHAIN3_RISKY);
        assert_eq!(art.policy.head_action(1, 0, 0).unwrap(), CHAIN3_SAFE);
        assert_eq!(art.meta.counters.critic_passes, 2);
    }

    #[test]
    fn unvisited_state_uses_most_frequent_action() {
        let cmdp = chain3();
        let tr = |a: usize, s_next: usize| Transition {
            t: 0,
            s: 0,
            a,
            r: cmdp.reward(0, a),
            c: 0,
            s_next,
            done: true,
        };
        let ds = OfflineDataset::from_transitions(
            &cmdp,
            vec![tr(1, 1), tr(1, 1), tr(0, 2)],
            3,
            0,
            BehaviorSpec::uniform(),
        )
        .unwrap();
        let art = train_tabular_caps(&ds, &TrainConfig::tabular()).unwrap();
        for k in 0..2 {
            assert_eq!(art.policy.head_action(k, 1, 0).unwrap(), 1);
            assert_eq!(art.policy.head_action(k, 2, 0).unwrap(), 1);
        }
    }

    #[test]
    fn wrong_algo_is_rejected() {
        let ds = exhaustive_dataset(&chain3()).unwrap();
        assert!(train_tabular_caps(&ds, &TrainConfig::iql()).is_err());
    }
}
