use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::caps::caps_policy;
use crate::cmdp::make_random_cmdp;
use crate::error::{CapsError, Result};
use crate::oracle::{solve_cost_optimal, verify_theorem_bound_with, CHECK_TOL};
use crate::rng::RngSeed;
use crate::trainers::oracle_exact;

/// Random CMDP family and budget grid for bound verification. Instance
/// sizes are drawn uniformly up to the maxima.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuzzSpec {
    pub instances: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub max_horizon: usize,
    pub cost_max: u32,
    /// Largest successor-set size; 1 yields deterministic CMDPs.
    pub max_branching: usize,
    /// Heads of the exact CAPS artifact.
    pub k: usize,
    pub seed: u64,
}

impl Default for FuzzSpec {
    fn default() -> Self {
        Self {
            instances: 200,
            max_states: 8,
            max_actions: 4,
            max_horizon: 6,
            cost_max: 3,
            max_branching: 3,
            k: 4,
            seed: 0,
        }
    }
}

impl FuzzSpec {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0
            || self.max_states == 0
            || self.max_actions == 0
            || self.max_horizon == 0
            || self.max_branching == 0
        {
            return Err(CapsError::InvalidSpec(
                "fuzz instances, sizes and branching must be positive".into(),
            ));
        }
        if self.k < 2 {
            return Err(CapsError::InvalidSpec(format!("k = {} must be at least 2", self.k)));
        }
        Ok(())
    }
}

/// Bound check of one `(instance, kappa)` pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyCase {
    pub instance: usize,
    pub env: String,
    pub kappa: f64,
    pub epsilon: f64,
    pub admissible: bool,
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub spec: FuzzSpec,
    pub instances: usize,
    pub deterministic_instances: usize,
    pub checks: usize,
    pub admissibility_failures: usize,
    pub max_violation: f64,
    /// The case with the largest violation.
    pub worst: Option<VerifyCase>,
    pub pass: bool,
}

/// Integer budgets `0..=(T + 1) * cost_max`: the largest cost an episode
/// can incur, terminal state included.
pub fn kappa_grid(horizon: usize, cost_max: u32) -> Vec<f64> {
    (0..=(horizon as u64 + 1) * u64::from(cost_max)).map(|k| k as f64).collect()
}

fn verify_instance(spec: &FuzzSpec, i: usize) -> Result<Vec<VerifyCase>> {
    let stream = RngSeed::new(spec.seed).derive("fuzz-instance", i as u64);
    let mut rng = stream.rng();
    let n_states = rng.random_range(1..=spec.max_states);
    let n_actions = rng.random_range(1..=spec.max_actions);
    let horizon = rng.random_range(1..=spec.max_horizon);
    let branching = rng.random_range(1..=spec.max_branching.min(n_states));
    let cmdp = make_random_cmdp(
        n_states,
        n_actions,
        horizon,
        branching,
        spec.cost_max,
        stream.derive("cmdp", 0),
    )?;
    let cost = solve_cost_optimal(&cmdp);
    let base = caps_policy(&oracle_exact(&cmdp, spec.k)?, 0.0)?;
    kappa_grid(horizon, spec.cost_max)
        .into_iter()
        .map(|kappa| {
            let rep = verify_theorem_bound_with(&cmdp, &base.with_kappa(kappa), kappa, &cost)?;
            Ok(VerifyCase {
                instance: i,
                env: cmdp.name().to_string(),
                kappa,
                epsilon: rep.variation.epsilon,
                admissible: rep.admissibility.pass,
                max_violation: rep.max_violation,
            })
        })
        .collect()
}

/// Checks that exact CAPS is admissible and satisfies the cost bound on
/// every fuzzed instance and budget.
pub fn verify_fuzz(spec: &FuzzSpec) -> Result<VerifyReport> {
    spec.validate()?;
    let per_instance: Vec<Vec<VerifyCase>> = (0..spec.instances)
        .into_par_iter()
        .map(|i| verify_instance(spec, i))
        .collect::<Result<_>>()?;
    let cases: Vec<&VerifyCase> = per_instance.iter().flatten().collect();
    let deterministic_instances = per_instance
        .iter()
        .filter(|c| c.first().is_some_and(|c| c.epsilon == 0.0))
        .count();
    let admissibility_failures = cases.iter().filter(|c| !c.admissible).count();
    let mut worst: Option<&VerifyCase> = None;
    for c in &cases {
        if c.admissible && worst.is_none_or(|w| c.max_violation > w.max_violation) {
            worst = Some(c);
        }
    }
    let max_violation = worst.map_or(f64::NEG_INFINITY, |w| w.max_violation);
    Ok(VerifyReport {
        spec: spec.clone(),
        instances: spec.instances,
        deterministic_instances,
        checks: cases.len(),
        admissibility_failures,
        max_violation,
        worst: worst.cloned(),
        pass: admissibility_failures == 0 && max_violation <= CHECK_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_grid_covers_terminal_cost() {
        assert_eq!(kappa_grid(2, 3), (0..=9).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn small_fuzz_passes() {
        let spec = FuzzSpec {
            instances: 12,
            ..FuzzSpec::default()
        };
        let rep = verify_fuzz(&spec).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.checks >= 12 * 7);
    }

    #[test]
    fn deterministic_family_has_zero_variation() {
        let spec = FuzzSpec {
            instances: 10,
            max_branching: 1,
            ..FuzzSpec::default()
        };
        let rep = verify_fuzz(&spec).unwrap();
        assert_eq!(rep.deterministic_instances, 10);
        assert!(rep.pass);
    }

    #[test]
    fn zero_heads_rejected() {
        let spec = FuzzSpec { k: 1, ..FuzzSpec::default() };
        assert!(verify_fuzz(&spec).is_err());
    }
}
