//! Exact finite-horizon dynamic programming.
//!
//! Value recursions are undiscounted. The cost objective charges every
//! visited state including the final one:
//!
//! ```text
//! V^c_T(s) = c(s)
//! Q^c_t(s, a) = c(s) + sum_s' P(s, a, s') V^c_{t+1}(s')
//! V^c_t(s) = min_a Q^c_t(s, a)
//! ```
//!
//! and the reward objective uses `r(s, a)` with `V^r_T = 0`.
//!
//! Policies of the form `pi_t(s, c_<t)` are evaluated exactly on the augmented
//! space `(t, s, b)` where `b` is the integer cost accumulated before `t`.

use serde::Serialize;

use crate::cmdp::{Cmdp, CostAwarePolicy};
use crate::error::{CapsError, Result};

/// Absolute tolerance for admissibility and bound checks.
pub const CHECK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    CostMinimizing,
    RewardMaximizing,
    RewardMinimizing,
}

/// Non-stationary Q and V tables for one objective. `q` covers `t < T`,
/// `v` covers `t <= T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveTables {
    pub objective: Objective,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    q: Vec<f64>,
    v: Vec<f64>,
}

impl ObjectiveTables {
    #[inline]
    pub fn q(&self, t: usize, s: usize, a: usize) -> f64 {
        self.q[(t * self.n_states + s) * self.n_actions + a]
    }

    #[inline]
    pub fn q_row(&self, t: usize, s: usize) -> &[f64] {
        let start = (t * self.n_states + s) * self.n_actions;
        &self.q[start..start + self.n_actions]
    }

    #[inline]
    pub fn v(&self, t: usize, s: usize) -> f64 {
        self.v[t * self.n_states + s]
    }

    /// Optimal action at `(t, s)`; ties go to the lowest index.
    pub fn greedy_action(&self, t: usize, s: usize) -> usize {
        let row = self.q_row(t, s);
        let better: fn(f64, f64) -> bool = match self.objective {
            Objective::CostMinimizing | Objective::RewardMinimizing => |x, best| x < best,
            Objective::RewardMaximizing => |x, best| x > best,
        };
        let mut best = 0;
        for a in 1..row.len() {
            if better(row[a], row[best]) {
                best = a;
            }
        }
        best
    }

    /// `sum_s mu0(s) V_0(s)`.
    pub fn initial_value(&self, cmdp: &Cmdp) -> f64 {
        cmdp.mu0()
            .iter()
            .enumerate()
            .map(|(s, &p)| p * self.v(0, s))
            .sum()
    }
}

fn backward_induction(cmdp: &Cmdp, objective: Objective) -> ObjectiveTables {
    let (ns, na, horizon) = (cmdp.n_states(), cmdp.n_actions(), cmdp.horizon());
    let mut q = vec![0.0; horizon * ns * na];
    let mut v = vec![0.0; (horizon + 1) * ns];
    if objective == Objective::CostMinimizing {
        for s in 0..ns {
            v[horizon * ns + s] = f64::from(cmdp.cost(s));
        }
    }
    for t in (0..horizon).rev() {
        for s in 0..ns {
            let mut best = match objective {
                Objective::CostMinimizing | Objective::RewardMinimizing => f64::INFINITY,
                Objective::RewardMaximizing => f64::NEG_INFINITY,
            };
            for a in 0..na {
                let stage = match objective {
                    Objective::CostMinimizing => f64::from(cmdp.cost(s)),
                    _ => cmdp.reward(s, a),
                };
                let next = &v[(t + 1) * ns..(t + 2) * ns];
                let expect: f64 = cmdp
                    .next_distribution(s, a)
                    .iter()
                    .zip(next)
                    .map(|(p, x)| p * x)
                    .sum();
                let value = stage + expect;
                q[(t * ns + s) * na + a] = value;
                best = match objective {
                    Objective::RewardMaximizing => best.max(value),
                    _ => best.min(value),
                };
            }
            v[t * ns + s] = best;
        }
    }
    ObjectiveTables {
        objective,
        n_states: ns,
        n_actions: na,
        horizon,
        q,
        v,
    }
}

pub fn solve_cost_optimal(cmdp: &Cmdp) -> ObjectiveTables {
    backward_induction(cmdp, Objective::CostMinimizing)
}

pub fn solve_reward_optimal(cmdp: &Cmdp) -> ObjectiveTables {
    backward_induction(cmdp, Objective::RewardMaximizing)
}

/// Minimum achievable expected return; supplies `r_min` for normalisation.
pub fn solve_reward_minimal(cmdp: &Cmdp) -> ObjectiveTables {
    backward_induction(cmdp, Objective::RewardMinimizing)
}

/// Cost-optimal and reward-optimal tables for one CMDP.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueTables {
    pub cost: ObjectiveTables,
    pub reward: ObjectiveTables,
}

impl ValueTables {
    pub fn solve(cmdp: &Cmdp) -> Self {
        Self {
            cost: solve_cost_optimal(cmdp),
            reward: solve_reward_optimal(cmdp),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VariationWitness {
    pub s: usize,
    pub a: usize,
    pub t: usize,
    pub s_max: usize,
    pub s_min: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariationReport {
    pub epsilon: f64,
    pub witness: Option<VariationWitness>,
}

/// Optimal-cost variation: the largest spread of `V^c_{t+1}(s')` over the
/// support of any `(s, a)` at any `t < T`.
pub fn optimal_cost_variation(cmdp: &Cmdp, cost: &ObjectiveTables) -> VariationReport {
    let mut epsilon = 0.0;
    let mut witness = None;
    for t in 0..cmdp.horizon() {
        for s in 0..cmdp.n_states() {
            for a in 0..cmdp.n_actions() {
                let mut hi: Option<(usize, f64)> = None;
                let mut lo: Option<(usize, f64)> = None;
                for (s2, &p) in cmdp.next_distribution(s, a).iter().enumerate() {
                    if p > 0.0 {
                        let x = cost.v(t + 1, s2);
                        if hi.is_none_or(|(_, h)| x > h) {
                            hi = Some((s2, x));
                        }
                        if lo.is_none_or(|(_, l)| x < l) {
                            lo = Some((s2, x));
                        }
                    }
                }
                let (Some((s_max, h)), Some((s_min, l))) = (hi, lo) else {
                    continue;
                };
                let spread = h - l;
                if witness.is_none() || spread > epsilon {
                    epsilon = spread;
                    witness = Some(VariationWitness {
                        s,
                        a,
                        t,
                        s_max,
                        s_min,
                    });
                }
            }
        }
    }
    VariationReport { epsilon, witness }
}

/// Dense table over `(t, s, b)` for `t <= T`, `b <= T * c_max`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentedValue {
    pub objective: Objective,
    pub n_states: usize,
    pub horizon: usize,
    pub n_budget: usize,
    v: Vec<f64>,
}

impl AugmentedValue {
    #[inline]
    pub fn get(&self, t: usize, s: usize, b: u32) -> f64 {
        self.v[(t * self.n_states + s) * self.n_budget + b as usize]
    }

    /// `sum_s mu0(s) v(0, s, 0)`.
    pub fn initial_value(&self, cmdp: &Cmdp) -> f64 {
        cmdp.mu0()
            .iter()
            .enumerate()
            .map(|(s, &p)| p * self.get(0, s, 0))
            .sum()
    }
}

/// Queries the policy on every `(t, s, b)` with `t < T` once and validates
/// the actions.
struct PolicyTable {
    n_states: usize,
    n_budget: usize,
    actions: Vec<usize>,
}

impl PolicyTable {
    fn build(cmdp: &Cmdp, policy: &dyn CostAwarePolicy) -> Result<Self> {
        let n_budget = cmdp.max_prior_cost() as usize + 1;
        let ns = cmdp.n_states();
        let mut actions = Vec::with_capacity(cmdp.horizon() * ns * n_budget);
        for t in 0..cmdp.horizon() {
            for s in 0..ns {
                for b in 0..n_budget {
                    let a = policy.action(s, t, b as u32);
                    if a >= cmdp.n_actions() {
                        return Err(CapsError::ActionOutOfRange {
                            state: s,
                            t,
                            action: a,
                            n_actions: cmdp.n_actions(),
                        });
                    }
                    actions.push(a);
                }
            }
        }
        Ok(Self {
            n_states: ns,
            n_budget,
            actions,
        })
    }

    #[inline]
    fn get(&self, t: usize, s: usize, b: u32) -> usize {
        self.actions[(t * self.n_states + s) * self.n_budget + b as usize]
    }
}

fn evaluate_augmented(cmdp: &Cmdp, table: &PolicyTable, objective: Objective) -> AugmentedValue {
    let (ns, horizon) = (cmdp.n_states(), cmdp.horizon());
    let n_budget = table.n_budget;
    let top = (n_budget - 1) as u32;
    let mut v = vec![0.0; (horizon + 1) * ns * n_budget];
    if objective == Objective::CostMinimizing {
        for s in 0..ns {
            let c = f64::from(cmdp.cost(s));
            for b in 0..n_budget {
                v[(horizon * ns + s) * n_budget + b] = c;
            }
        }
    }
    for t in (0..horizon).rev() {
        for s in 0..ns {
            for b in 0..n_budget as u32 {
                let a = table.get(t, s, b);
                // Only unreachable (t, b) pairs can exceed the axis.
                let b_next = (b + cmdp.cost(s)).min(top) as usize;
                let stage = match objective {
                    Objective::CostMinimizing => f64::from(cmdp.cost(s)),
                    _ => cmdp.reward(s, a),
                };
                let expect: f64 = cmdp
                    .next_distribution(s, a)
                    .iter()
                    .enumerate()
                    .map(|(s2, p)| p * v[((t + 1) * ns + s2) * n_budget + b_next])
                    .sum();
                v[(t * ns + s) * n_budget + b as usize] = stage + expect;
            }
        }
    }
    AugmentedValue {
        objective,
        n_states: ns,
        horizon,
        n_budget,
        v,
    }
}

/// Expected remaining cost `V^{pi,c}_t(s)` for every accumulated cost `b`.
pub fn evaluate_policy_cost(cmdp: &Cmdp, policy: &dyn CostAwarePolicy) -> Result<AugmentedValue> {
    let table = PolicyTable::build(cmdp, policy)?;
    Ok(evaluate_augmented(cmdp, &table, Objective::CostMinimizing))
}

/// Expected remaining reward of a cost-aware policy.
pub fn evaluate_policy_reward(
    cmdp: &Cmdp,
    policy: &dyn CostAwarePolicy,
) -> Result<AugmentedValue> {
    let table = PolicyTable::build(cmdp, policy)?;
    Ok(evaluate_augmented(cmdp, &table, Objective::RewardMaximizing))
}

/// Reachable `(t, s, b)` triples, `t <= T`, from `supp(mu0)` at `b = 0`.
#[derive(Debug, Clone)]
pub struct Reachable {
    n_states: usize,
    n_budget: usize,
    horizon: usize,
    flags: Vec<bool>,
}

impl Reachable {
    pub fn contains(&self, t: usize, s: usize, b: u32) -> bool {
        (b as usize) < self.n_budget && self.flags[(t * self.n_states + s) * self.n_budget + b as usize]
    }

    /// Iterates reachable triples in `(t, s, b)` lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        let (ns, nb) = (self.n_states, self.n_budget);
        (0..=self.horizon).flat_map(move |t| {
            (0..ns).flat_map(move |s| {
                (0..nb as u32).filter_map(move |b| self.contains(t, s, b).then_some((t, s, b)))
            })
        })
    }
}

fn reachable_from_table(cmdp: &Cmdp, table: &PolicyTable) -> Reachable {
    let (ns, horizon, nb) = (cmdp.n_states(), cmdp.horizon(), table.n_budget);
    let mut flags = vec![false; (horizon + 1) * ns * nb];
    for (s, &p) in cmdp.mu0().iter().enumerate() {
        if p > 0.0 {
            flags[s * nb] = true;
        }
    }
    for t in 0..horizon {
        for s in 0..ns {
            for b in 0..nb as u32 {
                if !flags[(t * ns + s) * nb + b as usize] {
                    continue;
                }
                let a = table.get(t, s, b);
                let b_next = (b + cmdp.cost(s)) as usize;
                debug_assert!(b_next < nb);
                for (s2, &p) in cmdp.next_distribution(s, a).iter().enumerate() {
                    if p > 0.0 {
                        flags[((t + 1) * ns + s2) * nb + b_next] = true;
                    }
                }
            }
        }
    }
    Reachable {
        n_states: ns,
        n_budget: nb,
        horizon,
        flags,
    }
}

pub fn reachable_triples(cmdp: &Cmdp, policy: &dyn CostAwarePolicy) -> Result<Reachable> {
    let table = PolicyTable::build(cmdp, policy)?;
    Ok(reachable_from_table(cmdp, &table))
}

/// Probability of being at `(t, s)` with accumulated cost `b`, for `t < T`.
#[derive(Debug, Clone)]
pub struct Occupancy {
    n_states: usize,
    n_budget: usize,
    horizon: usize,
    mass: Vec<f64>,
}

impl Occupancy {
    pub fn get(&self, t: usize, s: usize, b: u32) -> f64 {
        self.mass[(t * self.n_states + s) * self.n_budget + b as usize]
    }

    /// Non-zero entries as `((t, s, b), probability)`, `t <= T`.
    pub fn entries(&self) -> impl Iterator<Item = ((usize, usize, u32), f64)> + '_ {
        let (ns, nb) = (self.n_states, self.n_budget);
        (0..=self.horizon).flat_map(move |t| {
            (0..ns).flat_map(move |s| {
                (0..nb as u32).filter_map(move |b| {
                    let m = self.get(t, s, b);
                    (m > 0.0).then_some(((t, s, b), m))
                })
            })
        })
    }
}

/// Forward state distribution over the augmented space.
pub fn occupancy(cmdp: &Cmdp, policy: &dyn CostAwarePolicy) -> Result<Occupancy> {
    let table = PolicyTable::build(cmdp, policy)?;
    let (ns, horizon, nb) = (cmdp.n_states(), cmdp.horizon(), table.n_budget);
    let mut mass = vec![0.0; (horizon + 1) * ns * nb];
    for (s, &p) in cmdp.mu0().iter().enumerate() {
        mass[s * nb] = p;
    }
    for t in 0..horizon {
        for s in 0..ns {
            for b in 0..nb as u32 {
                let m = mass[(t * ns + s) * nb + b as usize];
                if m == 0.0 {
                    continue;
                }
                let a = table.get(t, s, b);
                let b_next = (b + cmdp.cost(s)) as usize;
                for (s2, &p) in cmdp.next_distribution(s, a).iter().enumerate() {
                    if p > 0.0 {
                        mass[((t + 1) * ns + s2) * nb + b_next] += m * p;
                    }
                }
            }
        }
    }
    Ok(Occupancy {
        n_states: ns,
        n_budget: nb,
        horizon,
        mass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdmissibilityViolation {
    pub s: usize,
    pub t: usize,
    pub b: u32,
    pub action: usize,
    pub qc: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub pass: bool,
    pub checked: usize,
    pub counterexample: Option<AdmissibilityViolation>,
}

/// Checks `Q^c_t(s, pi_t(s, b)) <= max{V^c_t(s), kappa - b}` on every
/// reachable `(t, s, b)` with `t < T`; reports the first violation in
/// `(t, s, b)` order.
pub fn check_admissible(
    cmdp: &Cmdp,
    policy: &dyn CostAwarePolicy,
    kappa: f64,
    cost: &ObjectiveTables,
) -> Result<AdmissibilityReport> {
    let table = PolicyTable::build(cmdp, policy)?;
    let reach = reachable_from_table(cmdp, &table);
    Ok(admissibility_on(cmdp, &table, &reach, kappa, cost))
}

fn admissibility_on(
    cmdp: &Cmdp,
    table: &PolicyTable,
    reach: &Reachable,
    kappa: f64,
    cost: &ObjectiveTables,
) -> AdmissibilityReport {
    let mut checked = 0;
    for (t, s, b) in reach.iter() {
        if t == cmdp.horizon() {
            continue;
        }
        checked += 1;
        let a = table.get(t, s, b);
        let qc = cost.q(t, s, a);
        let bound = cost.v(t, s).max(kappa - f64::from(b));
        if qc > bound + CHECK_TOL {
            return AdmissibilityReport {
                pass: false,
                checked,
                counterexample: Some(AdmissibilityViolation {
                    s,
                    t,
                    b,
                    action: a,
                    qc,
                    bound,
                }),
            };
        }
    }
    AdmissibilityReport {
        pass: true,
        checked,
        counterexample: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Margin {
    pub t: usize,
    pub s: usize,
    pub b: u32,
    pub value: f64,
    pub bound: f64,
    /// `value - bound`; positive means the bound is violated.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub kappa: f64,
    /// False when the policy is not admissible for `kappa`.
    pub applicable: bool,
    pub admissibility: AdmissibilityReport,
    pub variation: VariationReport,
    /// Largest `value - bound` over reachable triples (`-inf` if not applicable).
    pub max_violation: f64,
    pub holds: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub margins: Vec<Margin>,
}

/// Checks `V^{pi,c}_t(s) <= max{V^c_t(s), kappa - b} + (T - t) * epsilon` on
/// every reachable `(t, s, b)`, after first confirming admissibility.
pub fn verify_theorem_bound(
    cmdp: &Cmdp,
    policy: &dyn CostAwarePolicy,
    kappa: f64,
) -> Result<BoundReport> {
    let cost = solve_cost_optimal(cmdp);
    verify_theorem_bound_with(cmdp, policy, kappa, &cost)
}

/// As [`verify_theorem_bound`] with precomputed cost tables.
pub fn verify_theorem_bound_with(
    cmdp: &Cmdp,
    policy: &dyn CostAwarePolicy,
    kappa: f64,
    cost: &ObjectiveTables,
) -> Result<BoundReport> {
    let table = PolicyTable::build(cmdp, policy)?;
    let reach = reachable_from_table(cmdp, &table);
    let admissibility = admissibility_on(cmdp, &table, &reach, kappa, cost);
    let variation = optimal_cost_variation(cmdp, cost);
    if !admissibility.pass {
        return Ok(BoundReport {
            kappa,
            applicable: false,
            admissibility,
            variation,
            max_violation: f64::NEG_INFINITY,
            holds: false,
            margins: Vec::new(),
        });
    }
    let value = evaluate_augmented(cmdp, &table, Objective::CostMinimizing);
    let horizon = cmdp.horizon();
    let mut margins = Vec::new();
    let mut max_violation = f64::NEG_INFINITY;
    for (t, s, b) in reach.iter() {
        let v = value.get(t, s, b);
        let bound = cost.v(t, s).max(kappa - f64::from(b)) + (horizon - t) as f64 * variation.epsilon;
        let margin = v - bound;
        max_violation = max_violation.max(margin);
        margins.push(Margin {
            t,
            s,
            b,
            value: v,
            bound,
            margin,
        });
    }
    Ok(BoundReport {
        kappa,
        applicable: true,
        admissibility,
        variation,
        max_violation,
        holds: max_violation <= CHECK_TOL,
        margins,
    })
}
