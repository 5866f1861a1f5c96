//! Finite-horizon constrained MDPs.
//!
//! States and actions are dense indices. Costs attach to states and are
//! non-negative integers bounded by `c_max`; rewards attach to state-action
//! pairs. An episode visits `s_0 .. s_T`: actions are taken at `t = 0..T-1`
//! and the final state `s_T` is charged its cost but earns no reward.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CapsError, Result};
use crate::numfmt::fmt17;
use crate::rng::{open01, RngSeed};

const PROB_TOL: f64 = 1e-12;

/// A policy of the form `pi_t(s, c_<t)`: the action may depend on the state,
/// the timestep and the cost accumulated strictly before `t`.
pub trait CostAwarePolicy {
    fn action(&self, s: usize, t: usize, c_before: u32) -> usize;
}

impl<F> CostAwarePolicy for F
where
    F: Fn(usize, usize, u32) -> usize,
{
    fn action(&self, s: usize, t: usize, c_before: u32) -> usize {
        self(s, t, c_before)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cmdp {
    name: String,
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    c_max: u32,
    // P[s][a][s'] flattened as (s * n_actions + a) * n_states + s'.
    transition: Vec<f64>,
    // r[s][a] flattened as s * n_actions + a.
    reward: Vec<f64>,
    cost: Vec<u32>,
    mu0: Vec<f64>,
}

/// One failed invariant: which field, at which index, with what value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: &'static str,
    pub index: Vec<usize>,
    pub observed: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}: {}", self.field, self.index, self.observed)
    }
}

impl Cmdp {
    /// Builds a CMDP and rejects it if any invariant fails.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        horizon: usize,
        c_max: u32,
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        cost: Vec<u32>,
        mu0: Vec<f64>,
    ) -> Result<Self> {
        let cmdp = Self::new_unchecked(name, horizon, c_max, transition, reward, cost, mu0)?;
        let violations = cmdp.validate();
        if violations.is_empty() {
            Ok(cmdp)
        } else {
            Err(CapsError::InvalidCmdp(violations))
        }
    }

    /// Builds a CMDP checking only array shapes. Use [`Cmdp::validate`] to
    /// inspect the remaining invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn new_unchecked(
        name: impl Into<String>,
        horizon: usize,
        c_max: u32,
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        cost: Vec<u32>,
        mu0: Vec<f64>,
    ) -> Result<Self> {
        let n_states = transition.len();
        let n_actions = transition.first().map_or(0, |row| row.len());
        let shape = |context, expected, found| {
            if expected == found {
                Ok(())
            } else {
                Err(CapsError::DimensionMismatch {
                    context,
                    expected,
                    found,
                })
            }
        };
        shape("reward rows", n_states, reward.len())?;
        shape("cost", n_states, cost.len())?;
        shape("mu0", n_states, mu0.len())?;
        let mut flat_p = Vec::with_capacity(n_states * n_actions * n_states);
        for row in &transition {
            shape("transition actions", n_actions, row.len())?;
            for dist in row {
                shape("transition next states", n_states, dist.len())?;
                flat_p.extend_from_slice(dist);
            }
        }
        let mut flat_r = Vec::with_capacity(n_states * n_actions);
        for row in &reward {
            shape("reward actions", n_actions, row.len())?;
            flat_r.extend_from_slice(row);
        }
        Ok(Self {
            name: name.into(),
            n_states,
            n_actions,
            horizon,
            c_max,
            transition: flat_p,
            reward: flat_r,
            cost,
            mu0,
        })
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.n_states == 0 {
            out.push(Violation {
                field: "n_states",
                index: vec![],
                observed: "0".into(),
            });
        }
        if self.n_actions == 0 {
            out.push(Violation {
                field: "n_actions",
                index: vec![],
                observed: "0".into(),
            });
        }
        if self.horizon == 0 {
            out.push(Violation {
                field: "horizon",
                index: vec![],
                observed: "0".into(),
            });
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let dist = self.next_distribution(s, a);
                for (s2, &p) in dist.iter().enumerate() {
                    if !(p >= 0.0) || !p.is_finite() {
                        out.push(Violation {
                            field: "transition",
                            index: vec![s, a, s2],
                            observed: format!("probability {p}"),
                        });
                    }
                }
                let sum: f64 = dist.iter().sum();
                if !((sum - 1.0).abs() <= PROB_TOL) {
                    out.push(Violation {
                        field: "transition",
                        index: vec![s, a],
                        observed: format!("row sum {sum}"),
                    });
                }
                let r = self.reward(s, a);
                if !r.is_finite() {
                    out.push(Violation {
                        field: "reward",
                        index: vec![s, a],
                        observed: format!("{r}"),
                    });
                }
            }
            if self.cost[s] > self.c_max {
                out.push(Violation {
                    field: "cost",
                    index: vec![s],
                    observed: format!("{} > c_max {}", self.cost[s], self.c_max),
                });
            }
        }
        for (s, &p) in self.mu0.iter().enumerate() {
            if !(p >= 0.0) || !p.is_finite() {
                out.push(Violation {
                    field: "mu0",
                    index: vec![s],
                    observed: format!("probability {p}"),
                });
            }
        }
        let mu_sum: f64 = self.mu0.iter().sum();
        if self.n_states > 0 && !((mu_sum - 1.0).abs() <= PROB_TOL) {
            out.push(Violation {
                field: "mu0",
                index: vec![],
                observed: format!("sum {mu_sum}"),
            });
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn c_max(&self) -> u32 {
        self.c_max
    }
    pub fn mu0(&self) -> &[f64] {
        &self.mu0
    }
    pub fn costs(&self) -> &[u32] {
        &self.cost
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    #[inline]
    pub fn next_distribution(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s2]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    #[inline]
    pub fn cost(&self, s: usize) -> u32 {
        self.cost[s]
    }

    /// Largest possible accumulated cost strictly before the final state,
    /// `T * c_max`. Budget axes in the oracle are sized by this.
    pub fn max_prior_cost(&self) -> u32 {
        self.horizon as u32 * self.c_max
    }

    /// Largest possible episode cost including the final state, `(T + 1) * c_max`.
    pub fn max_episode_cost(&self) -> u32 {
        (self.horizon as u32 + 1) * self.c_max
    }

    /// `N(s, a)`: next states with strictly positive probability.
    pub fn support(&self, s: usize, a: usize) -> Result<BTreeSet<usize>> {
        self.check_state(s)?;
        self.check_action(a)?;
        Ok(self
            .next_distribution(s, a)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(s2, _)| s2)
            .collect())
    }

    /// True when every `(s, a)` has a single successor.
    pub fn is_deterministic(&self) -> bool {
        (0..self.n_states).all(|s| {
            (0..self.n_actions).all(|a| {
                self.next_distribution(s, a)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .count()
                    == 1
            })
        })
    }

    pub(crate) fn check_state(&self, s: usize) -> Result<()> {
        if s < self.n_states {
            Ok(())
        } else {
            Err(CapsError::IndexOutOfRange {
                what: "state",
                index: s,
                limit: self.n_states,
            })
        }
    }

    pub(crate) fn check_action(&self, a: usize) -> Result<()> {
        if a < self.n_actions {
            Ok(())
        } else {
            Err(CapsError::IndexOutOfRange {
                what: "action",
                index: a,
                limit: self.n_actions,
            })
        }
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.mu0, rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample_categorical(self.next_distribution(s, a), rng)
    }

    /// Serialises to the JSON text format with 17-significant-digit reals.
    pub fn to_json_string(&self) -> String {
        let mut out = String::new();
        out.push_str("{\n");
        out.push_str(&format!(
            "  \"name\": {},\n",
            serde_json::to_string(&self.name).expect("string serialisation")
        ));
        out.push_str(&format!("  \"n_states\": {},\n", self.n_states));
        out.push_str(&format!("  \"n_actions\": {},\n", self.n_actions));
        out.push_str(&format!("  \"horizon\": {},\n", self.horizon));
        out.push_str(&format!("  \"c_max\": {},\n", self.c_max));
        out.push_str("  \"transition\": [\n");
        for s in 0..self.n_states {
            out.push_str("    [");
            for a in 0..self.n_actions {
                if a > 0 {
                    out.push_str(", ");
                }
                out.push_str(&real_list(self.next_distribution(s, a)));
            }
            out.push(']');
            out.push_str(if s + 1 < self.n_states { ",\n" } else { "\n" });
        }
        out.push_str("  ],\n");
        out.push_str("  \"reward\": [\n");
        for s in 0..self.n_states {
            out.push_str("    ");
            out.push_str(&real_list(
                &self.reward[s * self.n_actions..(s + 1) * self.n_actions],
            ));
            out.push_str(if s + 1 < self.n_states { ",\n" } else { "\n" });
        }
        out.push_str("  ],\n");
        let costs: Vec<String> = self.cost.iter().map(|c| c.to_string()).collect();
        out.push_str(&format!("  \"cost\": [{}],\n", costs.join(", ")));
        out.push_str(&format!("  \"mu0\": {}\n", real_list(&self.mu0)));
        out.push_str("}\n");
        out
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: CmdpFile =
            serde_json::from_str(text).map_err(|e| CapsError::json("cmdp file", e))?;
        let cmdp = Self::new(
            raw.name,
            raw.horizon,
            raw.c_max,
            raw.transition,
            raw.reward,
            raw.cost,
            raw.mu0,
        )?;
        if cmdp.n_states != raw.n_states || cmdp.n_actions != raw.n_actions {
            return Err(CapsError::InvalidSpec(format!(
                "declared shape ({}, {}) disagrees with arrays ({}, {})",
                raw.n_states, raw.n_actions, cmdp.n_states, cmdp.n_actions
            )));
        }
        Ok(cmdp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, self.to_json_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CapsError::io(path, e))?;
        Self::from_json_str(&text)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CmdpFile {
    name: String,
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    c_max: u32,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    cost: Vec<u32>,
    mu0: Vec<f64>,
}

fn real_list(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|&x| fmt17(x)).collect();
    format!("[{}]", parts.join(", "))
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u = open01(rng);
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub t: usize,
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub c: u32,
}

/// A sampled episode: `T` action steps plus the final state.
///
/// `total_cost` charges the final state's cost as well, matching the value
/// recursion of the oracle; `step_cost()` is the sum over action steps only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub final_state: usize,
    pub terminal_cost: u32,
    pub total_reward: f64,
    pub total_cost: u32,
}

impl Trajectory {
    pub fn step_cost(&self) -> u32 {
        self.steps.iter().map(|s| s.c).sum()
    }
}

pub fn sample_episode(
    cmdp: &Cmdp,
    policy: &dyn CostAwarePolicy,
    seed: RngSeed,
) -> Result<Trajectory> {
    let mut rng = seed.rng();
    let mut s = cmdp.sample_initial(&mut rng);
    let mut steps = Vec::with_capacity(cmdp.horizon);
    let mut total_reward = 0.0;
    let mut c_before = 0u32;
    for t in 0..cmdp.horizon {
        let a = policy.action(s, t, c_before);
        if a >= cmdp.n_actions {
            return Err(CapsError::ActionOutOfRange {
                state: s,
                t,
                action: a,
                n_actions: cmdp.n_actions,
            });
        }
        let r = cmdp.reward(s, a);
        let c = cmdp.cost(s);
        steps.push(Step { t, s, a, r, c });
        total_reward += r;
        c_before += c;
        s = cmdp.sample_next(s, a, &mut rng);
    }
    let terminal_cost = cmdp.cost(s);
    Ok(Trajectory {
        steps,
        final_state: s,
        terminal_cost,
        total_reward,
        total_cost: c_before + terminal_cost,
    })
}

/// Grid cell as `(x, y)`.
pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub hazards: Vec<Cell>,
    pub goal: Cell,
    pub start: Cell,
    pub slip_prob: f64,
    pub horizon: usize,
}

/// Grid actions in index order.
pub const GRID_ACTIONS: [&str; 5] = ["up", "right", "down", "left", "stay"];

/// Hazard gridworld: moves up/right/down/left plus stay. A move slips to
/// each perpendicular direction with probability `slip_prob / 2`; moves into
/// a wall leave the agent in place. Hazard cells cost 1 per visit, the goal
/// is absorbing and pays 1 per step, every other step pays -0.01.
pub fn make_hazard_gridworld(spec: &GridSpec) -> Result<Cmdp> {
    let GridSpec {
        width,
        height,
        ref hazards,
        goal,
        start,
        slip_prob,
        horizon,
    } = *spec;
    let n = width * height;
    if n == 0 || n > 400 {
        return Err(CapsError::InvalidSpec(format!(
            "grid {width}x{height} must have between 1 and 400 cells"
        )));
    }
    let in_bounds = |c: Cell| c.0 < width && c.1 < height;
    if !in_bounds(goal) || !in_bounds(start) || hazards.iter().any(|&h| !in_bounds(h)) {
        return Err(CapsError::InvalidSpec("cell outside the grid".into()));
    }
    if hazards.contains(&goal) {
        return Err(CapsError::InvalidSpec(format!(
            "goal {goal:?} is a hazard cell"
        )));
    }
    if !(0.0..1.0).contains(&slip_prob) {
        return Err(CapsError::InvalidSpec(format!(
            "slip_prob {slip_prob} outside [0, 1)"
        )));
    }
    let index = |c: Cell| c.1 * width + c.0;
    let moved = |c: Cell, dir: usize| -> Cell {
        match dir {
            0 if c.1 + 1 < height => (c.0, c.1 + 1),
            1 if c.0 + 1 < width => (c.0 + 1, c.1),
            2 if c.1 > 0 => (c.0, c.1 - 1),
            3 if c.0 > 0 => (c.0 - 1, c.1),
            _ => c,
        }
    };
    let mut transition = vec![vec![vec![0.0; n]; 5]; n];
    let mut reward = vec![vec![-0.01; 5]; n];
    let mut cost = vec![0u32; n];
    for y in 0..height {
        for x in 0..width {
            let c = (x, y);
            let s = index(c);
            if hazards.contains(&c) {
                cost[s] = 1;
            }
            if c == goal {
                for a in 0..5 {
                    transition[s][a][s] = 1.0;
                    reward[s][a] = 1.0;
                }
                continue;
            }
            for dir in 0..4 {
                let row = &mut transition[s][dir];
                row[index(moved(c, dir))] += 1.0 - slip_prob;
                if slip_prob > 0.0 {
                    row[index(moved(c, (dir + 1) % 4))] += slip_prob / 2.0;
                    row[index(moved(c, (dir + 3) % 4))] += slip_prob / 2.0;
                }
            }
            transition[s][4][s] = 1.0;
        }
    }
    let mut mu0 = vec![0.0; n];
    mu0[index(start)] = 1.0;
    Cmdp::new(
        format!("grid{width}x{height}"),
        horizon,
        1,
        transition,
        reward,
        cost,
        mu0,
    )
}

/// Random CMDP for fuzzing: each `(s, a)` has exactly `branching` successors
/// with normalised exponential weights, rewards are uniform in [0, 1), costs
/// are uniform integers in `0..=cost_max` and episodes start in state 0.
pub fn make_random_cmdp(
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    branching: usize,
    cost_max: u32,
    seed: RngSeed,
) -> Result<Cmdp> {
    if branching == 0 || branching > n_states {
        return Err(CapsError::InvalidSpec(format!(
            "branching {branching} must be in 1..={n_states}"
        )));
    }
    let mut rng = seed.rng();
    let mut transition = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    let mut reward = vec![vec![0.0; n_actions]; n_states];
    for s in 0..n_states {
        for a in 0..n_actions {
            let succ = rand::seq::index::sample(&mut rng, n_states, branching);
            let weights: Vec<f64> = (0..branching).map(|_| -open01(&mut rng).ln()).collect();
            let total: f64 = weights.iter().sum();
            for (s2, w) in succ.iter().zip(&weights) {
                transition[s][a][s2] = w / total;
            }
            reward[s][a] = rng.random::<f64>();
        }
    }
    let cost: Vec<u32> = (0..n_states)
        .map(|_| rng.random_range(0..=cost_max))
        .collect();
    let mut mu0 = vec![0.0; n_states];
    mu0[0] = 1.0;
    Cmdp::new(
        format!("random-s{n_states}-a{n_actions}-t{horizon}-b{branching}-c{cost_max}"),
        horizon,
        cost_max,
        transition,
        reward,
        cost,
        mu0,
    )
}

/// Action indices of [`chain3`].
pub const CHAIN3_SAFE: usize = 0;
pub const CHAIN3_RISKY: usize = 1;

/// The 3-state, 2-action, horizon-1 reference instance. From `s0` the safe
/// arm pays 0.2 and lands in the zero-cost state `s2`; the risky arm pays 1.0
/// and lands in `s1`, which costs 1.
pub fn chain3() -> Cmdp {
    let transition = vec![
        vec![vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]],
        vec![vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]],
        vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]],
    ];
    let reward = vec![vec![0.2, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]];
    Cmdp::new(
        "chain3",
        1,
        1,
        transition,
        reward,
        vec![0, 1, 0],
        vec![1.0, 0.0, 0.0],
    )
    .expect("chain3 is well formed")
}

/// 3x3 grid with a hazard in the centre, start on the middle-left cell and
/// goal on the middle-right cell, so the short route crosses the hazard.
pub fn gridworld3x3_spec(slip_prob: f64) -> GridSpec {
    GridSpec {
        width: 3,
        height: 3,
        hazards: vec![(1, 1)],
        goal: (2, 1),
        start: (0, 1),
        slip_prob,
        horizon: 6,
    }
}

pub fn gridworld3x3() -> Cmdp {
    make_hazard_gridworld(&gridworld3x3_spec(0.0)).expect("preset grid is valid")
}

/// Serializable recipe for an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Chain3,
    Gridworld3x3 {
        #[serde(default)]
        slip_prob: f64,
    },
    Grid(GridSpec),
    Random {
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        branching: usize,
        cost_max: u32,
        seed: u64,
    },
    /// A CMDP JSON file written by [`Cmdp::save`].
    File { path: std::path::PathBuf },
}

impl EnvSpec {
    pub fn build(&self) -> Result<Cmdp> {
        match self {
            EnvSpec::Chain3 => Ok(chain3()),
            EnvSpec::Gridworld3x3 { slip_prob } => {
                let cmdp = make_hazard_gridworld(&gridworld3x3_spec(*slip_prob))?;
                Ok(if *slip_prob > 0.0 {
                    cmdp.with_name(format!("grid3x3-slip{slip_prob}"))
                } else {
                    cmdp
                })
            }
            EnvSpec::Grid(spec) => make_hazard_gridworld(spec),
            EnvSpec::Random {
                n_states,
                n_actions,
                horizon,
                branching,
                cost_max,
                seed,
            } => make_random_cmdp(
                *n_states,
                *n_actions,
                *horizon,
                *branching,
                *cost_max,
                RngSeed::new(*seed),
            )
            .map(|m| {
                let name = format!("{}-seed{seed}", m.name());
                m.with_name(name)
            }),
            EnvSpec::File { path } => Cmdp::load(path),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_state_chain() -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
        (
            vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
            vec![vec![1.0], vec![0.0]],
        )
    }

    #[test]
    fn validate_accepts_well_formed_chain() {
        let (p, r) = two_state_chain();
        let m = Cmdp::new_unchecked("c2", 2, 1, p, r, vec![0, 1], vec![1.0, 0.0]).unwrap();
        assert!(m.validate().is_empty());
    }

    #[test]
    fn validate_reports_row_sum() {
        let (mut p, r) = two_state_chain();
        p[0][0] = vec![0.5, 0.4];
        let m = Cmdp::new_unchecked("c2", 2, 1, p, r, vec![0, 1], vec![1.0, 0.0]).unwrap();
        let v = m.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "transition");
        assert_eq!(v[0].index, vec![0, 0]);
    }

    #[test]
    fn validate_reports_mu0_sum() {
        let (p, r) = two_state_chain();
        let m = Cmdp::new_unchecked("c2", 2, 1, p, r, vec![0, 1], vec![0.7, 0.7]).unwrap();
        let v = m.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "mu0");
    }

    #[test]
    fn validate_reports_cost_above_cmax() {
        let (p, r) = two_state_chain();
        let m = Cmdp::new_unchecked("c2", 2, 1, p, r, vec![0, 3], vec![1.0, 0.0]).unwrap();
        let v = m.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "cost");
        assert_eq!(v[0].index, vec![1]);
    }

    #[test]
    fn chain3_rollouts() {
        let m = chain3();
        for seed in 0..5 {
            let safe = sample_episode(&m, &|_, _, _| CHAIN3_SAFE, RngSeed::new(seed)).unwrap();
            assert_eq!(safe.total_cost, 0);
            assert_eq!(safe.total_reward, 0.2);
            assert_eq!(safe.steps.len(), 1);
            let risky = sample_episode(&m, &|_, _, _| CHAIN3_RISKY, RngSeed::new(seed)).unwrap();
            assert_eq!(risky.total_cost, 1);
            assert_eq!(risky.total_reward, 1.0);
            assert_eq!(risky.final_state, 1);
        }
    }

    #[test]
    fn out_of_range_action_is_reported_with_context() {
        let m = chain3();
        let err = sample_episode(&m, &|_, _, _| 7, RngSeed::new(0)).unwrap_err();
        match err {
            CapsError::ActionOutOfRange { state, t, action, .. } => {
                assert_eq!((state, t, action), (0, 0, 7));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn gridworld_presets() {
        let det = gridworld3x3();
        assert!(det.validate().is_empty());
        assert!(det.is_deterministic());
        let slip = make_hazard_gridworld(&gridworld3x3_spec(0.1)).unwrap();
        assert!(slip.validate().is_empty());
        assert!(!slip.is_deterministic());
        // Goal is absorbing.
        let goal = 1 * 3 + 2;
        for a in 0..5 {
            assert_eq!(slip.support(goal, a).unwrap(), BTreeSet::from([goal]));
        }
    }

    #[test]
    fn gridworld_rejects_goal_on_hazard() {
        let spec = GridSpec {
            width: 2,
            height: 2,
            hazards: vec![(1, 1)],
            goal: (1, 1),
            start: (0, 0),
            slip_prob: 0.0,
            horizon: 3,
        };
        assert!(matches!(
            make_hazard_gridworld(&spec),
            Err(CapsError::InvalidSpec(_))
        ));
    }

    #[test]
    fn random_cmdp_degenerate_and_deterministic() {
        let m = make_random_cmdp(1, 1, 1, 1, 0, RngSeed::new(3)).unwrap();
        let t = sample_episode(&m, &|_, _, _| 0, RngSeed::new(1)).unwrap();
        assert_eq!(t.total_cost, 0);
        let a = make_random_cmdp(8, 4, 6, 3, 3, RngSeed::new(42)).unwrap();
        let b = make_random_cmdp(8, 4, 6, 3, 3, RngSeed::new(42)).unwrap();
        assert_eq!(a.to_json_string(), b.to_json_string());
        let d = make_random_cmdp(6, 3, 4, 1, 2, RngSeed::new(5)).unwrap();
        assert!(d.is_deterministic());
        for s in 0..8 {
            for act in 0..4 {
                assert_eq!(a.support(s, act).unwrap().len(), 3);
            }
        }
    }

    #[test]
    fn support_uses_strict_positivity() {
        let p = vec![
            vec![vec![0.5, 0.0, 0.5], vec![1.0, 0.0, 0.0]],
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]],
            vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]],
        ];
        let r = vec![vec![0.0; 2]; 3];
        let m = Cmdp::new("s", 1, 0, p, r, vec![0; 3], vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.support(0, 0).unwrap(), BTreeSet::from([0, 2]));
        assert_eq!(m.support(0, 1).unwrap(), BTreeSet::from([0]));
        assert_eq!(
            chain3().support(0, CHAIN3_RISKY).unwrap(),
            BTreeSet::from([1])
        );
        assert!(m.support(3, 0).is_err());
        assert!(m.support(0, 2).is_err());
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        for m in [
            chain3(),
            gridworld3x3(),
            make_random_cmdp(5, 3, 4, 2, 3, RngSeed::new(11)).unwrap(),
        ] {
            let text = m.to_json_string();
            let back = Cmdp::from_json_str(&text).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_json_string(), text);
        }
    }

    #[test]
    fn json_rejects_unknown_keys_and_bad_rows() {
        let text = chain3().to_json_string().replace("\"name\"", "\"label\"");
        assert!(Cmdp::from_json_str(&text).is_err());
        let bad = chain3()
            .to_json_string()
            .replacen("1.0000000000000000e0]", "0.5]", 1);
        assert!(matches!(
            Cmdp::from_json_str(&bad),
            Err(CapsError::InvalidCmdp(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn trajectory_costs_add_up(seed in any::<u64>(), pseed in any::<u64>(), branching in 1usize..4) {
            let m = make_random_cmdp(5, 3, 5, branching, 3, RngSeed::new(seed)).unwrap();
            let policy = move |s: usize, t: usize, c: u32| ((s as u64 + t as u64 * 7 + c as u64 + pseed) % 3) as usize;
            let traj = sample_episode(&m, &policy, RngSeed::new(pseed)).unwrap();
            prop_assert_eq!(traj.steps.len(), m.horizon());
            let visited: u32 = traj.steps.iter().map(|st| m.cost(st.s)).sum();
            prop_assert_eq!(traj.step_cost(), visited);
            prop_assert_eq!(traj.total_cost, visited + m.cost(traj.final_state));
            prop_assert!(traj.step_cost() <= m.max_prior_cost());
            prop_assert!(traj.total_cost <= m.max_episode_cost());
            for (i, st) in traj.steps.iter().enumerate() {
                prop_assert_eq!(st.t, i);
            }
            let again = sample_episode(&m, &policy, RngSeed::new(pseed)).unwrap();
            prop_assert_eq!(traj, again);
        }

        #[test]
        fn deterministic_rollouts_ignore_seed(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
            let m = make_random_cmdp(6, 3, 5, 1, 2, RngSeed::new(seed)).unwrap();
            let policy = |s: usize, t: usize, _c: u32| (s + t) % 3;
            let x = sample_episode(&m, &policy, RngSeed::new(a)).unwrap();
            let y = sample_episode(&m, &policy, RngSeed::new(b)).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}
