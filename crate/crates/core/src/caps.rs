//! Test-time CAPS: filter head proposals by the remaining budget, select the
//! reward-best survivor, fall back to the least-cost proposal.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cmdp::{Cmdp, CostAwarePolicy, Step, Trajectory};
use crate::error::{CapsError, Result};
use crate::rng::RngSeed;
use crate::trainers::{HeadPolicies, QFunction, TrainedArtifacts};

/// Slack on the budget comparison.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetState {
    pub kappa: f64,
    /// Cost accumulated strictly before the current state.
    pub c_before: u32,
}

/// One head's proposal. `qc` is already clamped at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub head: usize,
    pub action: usize,
    pub qr: f64,
    pub qc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub chosen_action: usize,
    pub chosen_head: usize,
    pub candidate_actions: Vec<usize>,
    pub feasible_mask: Vec<bool>,
    pub fallback_used: bool,
    pub qc_estimates: Vec<f64>,
    pub qr_estimates: Vec<f64>,
}

pub fn is_feasible(qc: f64, budget: BudgetState) -> bool {
    qc.max(0.0) + f64::from(budget.c_before) <= budget.kappa + FEASIBILITY_TOL
}

/// Candidates whose cost-to-go fits the remaining budget, in head order.
pub fn feasible_set(candidates: &[Candidate], budget: BudgetState) -> Vec<Candidate> {
    candidates
        .iter()
        .copied()
        .filter(|c| is_feasible(c.qc, budget))
        .collect()
}

/// Index of the chosen candidate and whether the fallback fired. Ties go to
/// the earliest head.
fn choose(candidates: &[Candidate], budget: BudgetState) -> (usize, bool) {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if is_feasible(c.qc, budget) && best.is_none_or(|b| c.qr > candidates[b].qr) {
            best = Some(i);
        }
    }
    if let Some(i) = best {
        return (i, false);
    }
    let mut low = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        if c.qc < candidates[low].qc {
            low = i;
        }
    }
    (low, true)
}

/// Filter, select and fall back. `candidates` must be nonempty.
pub fn select_action(candidates: &[Candidate], budget: BudgetState) -> Decision {
    let (i, fallback_used) = choose(candidates, budget);
    Decision {
        chosen_action: candidates[i].action,
        chosen_head: candidates[i].head,
        candidate_actions: candidates.iter().map(|c| c.action).collect(),
        feasible_mask: candidates.iter().map(|c| is_feasible(c.qc, budget)).collect(),
        fallback_used,
        qc_estimates: candidates.iter().map(|c| c.qc).collect(),
        qr_estimates: candidates.iter().map(|c| c.qr).collect(),
    }
}

/// Where the per-candidate Q values come from.
pub enum QSource<'a> {
    /// One estimator for every head.
    Shared(&'a dyn QFunction),
    /// Head `k` is scored by estimator `k`.
    PerHead(Vec<&'a dyn QFunction>),
}

impl QSource<'_> {
    fn for_head(&self, k: usize) -> &dyn QFunction {
        match self {
            QSource::Shared(q) => *q,
            QSource::PerHead(qs) => qs[k],
        }
    }

    fn check(&self, k: usize, what: &str) -> Result<()> {
        match self {
            QSource::PerHead(qs) if qs.len() != k => Err(CapsError::MissingEstimator(format!(
                "{what}: {} per-head estimators for {k} heads",
                qs.len()
            ))),
            _ => Ok(()),
        }
    }
}

/// Head proposals and their Q values for every `(t, s)`; the decision at
/// run time only consults the budget.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateTable {
    pub n_states: usize,
    pub horizon: usize,
    pub k: usize,
    cands: Vec<Candidate>,
}

impl CandidateTable {
    pub fn build(
        heads: &dyn HeadPolicies,
        qr: &QSource<'_>,
        qc: &QSource<'_>,
        n_states: usize,
        horizon: usize,
    ) -> Result<Self> {
        let k = heads.n_heads();
        if k == 0 {
            return Err(CapsError::InvalidSpec("policy set has no heads".into()));
        }
        qr.check(k, "reward")?;
        qc.check(k, "cost")?;
        let mut cands = Vec::with_capacity(horizon * n_states * k);
        for t in 0..horizon {
            for s in 0..n_states {
                let row_start = cands.len();
                for head in 0..k {
                    let action = heads.head_action(head, s, t)?;
                    // A repeated action keeps the earliest head's estimates.
                    let earlier = cands[row_start..]
                        .iter()
                        .find(|c: &&Candidate| c.action == action)
                        .copied();
                    let (r, c) = match earlier {
                        Some(e) => (e.qr, e.qc),
                        None => (
                            qr.for_head(head).q(s, t, action)?,
                            qc.for_head(head).q(s, t, action)?.max(0.0),
                        ),
                    };
                    if !r.is_finite() || !c.is_finite() {
                        return Err(CapsError::Diverged(format!(
                            "non-finite Q estimate at s = {s}, t = {t}, a = {action}"
                        )));
                    }
                    cands.push(Candidate {
                        head,
                        action,
                        qr: r,
                        qc: c,
                    });
                }
            }
        }
        Ok(Self {
            n_states,
            horizon,
            k,
            cands,
        })
    }

    pub fn candidates(&self, s: usize, t: usize) -> Option<&[Candidate]> {
        if s >= self.n_states || t >= self.horizon {
            return None;
        }
        let start = (t * self.n_states + s) * self.k;
        Some(&self.cands[start..start + self.k])
    }
}

/// The CAPS cost-aware policy at a fixed threshold.
#[derive(Debug, Clone)]
pub struct CapsPolicy {
    table: Arc<CandidateTable>,
    kappa: f64,
}

impl CapsPolicy {
    pub fn new(table: Arc<CandidateTable>, kappa: f64) -> Self {
        Self { table, kappa }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn table(&self) -> &Arc<CandidateTable> {
        &self.table
    }

    /// Same candidates, another threshold.
    pub fn with_kappa(&self, kappa: f64) -> Self {
        Self {
            table: Arc::clone(&self.table),
            kappa,
        }
    }

    fn budget(&self, c_before: u32) -> BudgetState {
        BudgetState {
            kappa: self.kappa,
            c_before,
        }
    }

    pub fn decide(&self, s: usize, t: usize, c_before: u32) -> Result<Decision> {
        let cands = self.candidates(s, t)?;
        Ok(select_action(cands, self.budget(c_before)))
    }

    /// `(action, head, fallback_used)` without building a full [`Decision`].
    pub fn choose(&self, s: usize, t: usize, c_before: u32) -> Result<(usize, usize, bool)> {
        let cands = self.candidates(s, t)?;
        let (i, fallback) = choose(cands, self.budget(c_before));
        Ok((cands[i].action, cands[i].head, fallback))
    }

    fn candidates(&self, s: usize, t: usize) -> Result<&[Candidate]> {
        self.table.candidates(s, t).ok_or(CapsError::IndexOutOfRange {
            what: "(s, t)",
            index: t * self.table.n_states + s,
            limit: self.table.n_states * self.table.horizon,
        })
    }
}

impl CostAwarePolicy for CapsPolicy {
    fn action(&self, s: usize, t: usize, c_before: u32) -> usize {
        // Out-of-range queries map to an invalid action, which rollouts and
        // the oracle report as an error.
        self.choose(s, t, c_before).map_or(usize::MAX, |(a, _, _)| a)
    }
}

/// CAPS over the artifact's heads and its learned `Q^r`, `Q^c`.
pub fn caps_policy(art: &TrainedArtifacts, kappa: f64) -> Result<CapsPolicy> {
    art.validate()?;
    let table = CandidateTable::build(
        &art.policy,
        &QSource::Shared(&art.q_reward),
        &QSource::Shared(&art.q_cost),
        art.meta.n_states,
        art.meta.horizon,
    )?;
    Ok(CapsPolicy::new(Arc::new(table), kappa))
}

/// CAPS with FQE estimators: per-head `Q^r` always, per-head `Q^c` when
/// given ("reward-cost FQE"), otherwise the artifact's `Q^c` ("reward FQE").
pub fn caps_policy_fqe_variant(
    art: &TrainedArtifacts,
    fqe_qr: &[&dyn QFunction],
    fqe_qc: Option<&[&dyn QFunction]>,
    kappa: f64,
) -> Result<CapsPolicy> {
    art.validate()?;
    let k = art.k();
    if fqe_qr.len() != k {
        return Err(CapsError::MissingEstimator(format!(
            "{} reward FQE estimators for {k} heads",
            fqe_qr.len()
        )));
    }
    let qr = QSource::PerHead(fqe_qr.to_vec());
    let qc = match fqe_qc {
        Some(qs) => QSource::PerHead(qs.to_vec()),
        None => QSource::Shared(&art.q_cost),
    };
    let table = CandidateTable::build(&art.policy, &qr, &qc, art.meta.n_states, art.meta.horizon)?;
    Ok(CapsPolicy::new(Arc::new(table), kappa))
}

/// Rolls out one episode and records the decision at every step.
pub fn trace_episode(
    cmdp: &Cmdp,
    policy: &CapsPolicy,
    seed: RngSeed,
) -> Result<(Trajectory, Vec<Decision>)> {
    let mut rng = seed.rng();
    let mut s = cmdp.sample_initial(&mut rng);
    let mut steps = Vec::with_capacity(cmdp.horizon());
    let mut decisions = Vec::with_capacity(cmdp.horizon());
    let (mut total_reward, mut c_before) = (0.0, 0u32);
    for t in 0..cmdp.horizon() {
        let d = policy.decide(s, t, c_before)?;
        let a = d.chosen_action;
        let (r, c) = (cmdp.reward(s, a), cmdp.cost(s));
        steps.push(Step { t, s, a, r, c });
        decisions.push(d);
        total_reward += r;
        c_before += c;
        s = cmdp.sample_next(s, a, &mut rng);
    }
    let terminal_cost = cmdp.cost(s);
    let traj = Trajectory {
        steps,
        final_state: s,
        terminal_cost,
        total_reward,
        total_cost: c_before + terminal_cost,
    };
    Ok((traj, decisions))
}

/// One JSON object per line.
pub fn decisions_to_jsonl(decisions: &[Decision]) -> Result<String> {
    let mut out = String::new();
    for d in decisions {
        out.push_str(&serde_json::to_string(d).map_err(|e| CapsError::json("decision", e))?);
        out.push('\n');
    }
    Ok(out)
}
