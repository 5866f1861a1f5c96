use caps_core::caps::{caps_policy, caps_policy_fqe_variant, CapsPolicy};
use caps_core::cmdp::{chain3, gridworld3x3, Cmdp, EnvSpec};
use caps_core::error::Result;
use caps_core::oracle::{check_admissible, solve_cost_optimal};
use caps_core::trainers::{oracle_exact, QFunction, TrainedArtifacts};

/// Estimator defined by a closure over `(s, t)`.
struct FnQ<F: Fn(usize, usize) -> Vec<f64> + Sync>(F);

impl<F: Fn(usize, usize) -> Vec<f64> + Sync> QFunction for FnQ<F> {
    fn q_row(&self, s: usize, t: usize) -> Result<Vec<f64>> {
        Ok((self.0)(s, t))
    }
}

fn all_decisions_equal(cmdp: &Cmdp, a: &CapsPolicy, b: &CapsPolicy) {
    for t in 0..cmdp.horizon() {
        for s in 0..cmdp.n_states() {
            for c in 0..=cmdp.max_prior_cost() {
                assert_eq!(a.decide(s, t, c).unwrap(), b.decide(s, t, c).unwrap(), "(t {t}, s {s}, b {c})");
            }
        }
    }
}

fn kappas(cmdp: &Cmdp) -> Vec<f64> {
    (0..=2 * cmdp.max_episode_cost()).map(|k| f64::from(k) / 2.0).collect()
}

#[test]
fn equal_estimators_reproduce_decisions() {
    for cmdp in [chain3(), gridworld3x3(), EnvSpec::Gridworld3x3 { slip_prob: 0.1 }.build().unwrap()] {
        let art = oracle_exact(&cmdp, 4).unwrap();
        let qr: Vec<&dyn QFunction> = vec![&art.q_reward as &dyn QFunction; 4];
        let qc: Vec<&dyn QFunction> = vec![&art.q_cost as &dyn QFunction; 4];
        for kappa in kappas(&cmdp) {
            let original = caps_policy(&art, kappa).unwrap();
            let both = caps_policy_fqe_variant(&art, &qr, Some(&qc), kappa).unwrap();
            let reward_only = caps_policy_fqe_variant(&art, &qr, None, kappa).unwrap();
            all_decisions_equal(&cmdp, &original, &both);
            all_decisions_equal(&cmdp, &original, &reward_only);
        }
    }
}

#[test]
fn inflated_cost_estimates_force_fallback() {
    let cmdp = gridworld3x3();
    let art = oracle_exact(&cmdp, 2).unwrap();
    let kappa = 3.0;
    let na = cmdp.n_actions();
    let inflated = FnQ(move |s, _t| (0..na).map(|a| kappa + 1.0 + (s + a) as f64).collect());
    let qr: Vec<&dyn QFunction> = vec![&art.q_reward as &dyn QFunction; 2];
    let qc: Vec<&dyn QFunction> = vec![&inflated as &dyn QFunction; 2];
    let policy = caps_policy_fqe_variant(&art, &qr, Some(&qc), kappa).unwrap();
    for t in 0..cmdp.horizon() {
        for s in 0..cmdp.n_states() {
            for b in 0..=cmdp.max_prior_cost() {
                let d = policy.decide(s, t, b).unwrap();
                assert!(d.fallback_used && d.feasible_mask.iter().all(|f| !f));
                let min = d.qc_estimates.iter().copied().fold(f64::INFINITY, f64::min);
                assert_eq!(d.qc_estimates[d.chosen_head], min);
            }
        }
    }
}

#[test]
fn chain3_reward_fqe_with_exact_cost_matches_original() {
    let cmdp = chain3();
    let art = oracle_exact(&cmdp, 2).unwrap();
    // With T = 1 each head's own reward Q equals the optimal one.
    let vt = solve_cost_optimal(&cmdp);
    let heads: Vec<FnQ<_>> = (0..2)
        .map(|_| {
            let q = art.q_reward.clone();
            FnQ(move |s, t| q.q_row(s, t).unwrap())
        })
        .collect();
    let qr: Vec<&dyn QFunction> = heads.iter().map(|h| h as &dyn QFunction).collect();
    for kappa in kappas(&cmdp) {
        let original = caps_policy(&art, kappa).unwrap();
        let variant = caps_policy_fqe_variant(&art, &qr, None, kappa).unwrap();
        all_decisions_equal(&cmdp, &original, &variant);
        assert!(check_admissible(&cmdp, &variant, kappa, &vt).unwrap().pass);
    }
}

#[test]
fn wrong_estimator_count_is_rejected() {
    let art: TrainedArtifacts = oracle_exact(&chain3(), 4).unwrap();
    let qr: Vec<&dyn QFunction> = vec![&art.q_reward as &dyn QFunction; 3];
    assert!(caps_policy_fqe_variant(&art, &qr, None, 1.0).is_err());
    let qr: Vec<&dyn QFunction> = vec![&art.q_reward as &dyn QFunction; 4];
    let qc: Vec<&dyn QFunction> = vec![&art.q_cost as &dyn QFunction; 2];
    assert!(caps_policy_fqe_variant(&art, &qr, Some(&qc), 1.0).is_err());
}
