use caps_core::approximator::softmax;
use caps_core::cmdp::{chain3, gridworld3x3, make_random_cmdp, sample_episode, Cmdp, CHAIN3_RISKY, CHAIN3_SAFE};
use caps_core::dataset::{generate_dataset, BehaviorSpec, OfflineDataset, Transition};
use caps_core::oracle::{evaluate_policy_cost, ValueTables};
use caps_core::rng::RngSeed;
use caps_core::trainers::{
    fqe, train, ActionTable, Algo, FqeObjective, HeadPolicies, PolicyModel, QFunction, TrainConfig,
};

fn mixed(cmdp: &Cmdp, n: usize, seed: u64) -> OfflineDataset {
    let vt = ValueTables::solve(cmdp);
    generate_dataset(cmdp, &BehaviorSpec::mixed(), n, RngSeed::new(seed), &vt).unwrap()
}

/// Episodes of a fixed stationary policy.
fn rollouts(cmdp: &Cmdp, action: impl Fn(usize, usize) -> usize, n: usize) -> OfflineDataset {
    let policy = |s: usize, t: usize, _c: u32| action(s, t);
    let mut transitions = Vec::new();
    for e in 0..n {
        let traj = sample_episode(cmdp, &policy, RngSeed::new(1).derive("rollout", e as u64)).unwrap();
        let last = traj.steps.len() - 1;
        for (i, st) in traj.steps.iter().enumerate() {
            let s_next = traj.steps.get(i + 1).map_or(traj.final_state, |n| n.s);
            transitions.push(Transition {
                t: st.t,
                s: st.s,
                a: st.a,
                r: st.r,
                c: st.c,
                s_next,
                done: i == last,
            });
        }
    }
    OfflineDataset::from_transitions(cmdp, transitions, n, 1, BehaviorSpec::uniform()).unwrap()
}

fn head_probs(policy: &PolicyModel, k: usize, s: usize, t: usize) -> Vec<f64> {
    softmax(&policy.head_logits(k, s, t).unwrap().expect("network policy"))
}

fn iql() -> TrainConfig {
    TrainConfig {
        gamma: 1.0,
        lr_critic: 1e-3,
        expectile_tau: 0.95,
        ..TrainConfig::iql()
    }
}

#[test]
fn iql_chain3_cost_critic_matches_oracle() {
    let cmdp = chain3();
    let art = train(&mixed(&cmdp, 2000, 0), &iql()).unwrap();
    let q = art.q_cost.q(0, 0, CHAIN3_RISKY).unwrap();
    assert!((q - 1.0).abs() <= 0.1, "Q^c(s0, risky, 0) = {q}");
    assert!(art.meta.counters.max_extraction_weight <= art.meta.config.as_ref().unwrap().weight_clip);
}

#[test]
fn single_action_data_gives_one_hot_heads() {
    let cmdp = chain3();
    let ds = rollouts(&cmdp, |_, _| CHAIN3_SAFE, 500);
    for cfg in [iql(), TrainConfig { gamma: 1.0, ..TrainConfig::sacbc() }] {
        let art = train(&ds, &TrainConfig { k: 4, ..cfg }).unwrap();
        let weighted_likelihood = art.meta.config.as_ref().unwrap().algo == Algo::Iql;
        for k in 0..4 {
            let p = head_probs(&art.policy, k, 0, 0);
            assert_eq!(art.policy.head_action(k, 0, 0).unwrap(), CHAIN3_SAFE);
            // SAC+BC heads also weigh the critic's value of the unseen action.
            if weighted_likelihood {
                assert!(p[CHAIN3_SAFE] >= 0.99, "head {k}: {p:?}");
            }
        }
    }
}

#[test]
fn learned_trainers_are_deterministic() {
    let cmdp = gridworld3x3();
    let ds = mixed(&cmdp, 300, 4);
    for base in [TrainConfig::iql(), TrainConfig::sacbc()] {
        let cfg = TrainConfig { k: 4, steps: 200, seed: 9, ..base };
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
        let c = train(&ds, &TrainConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.content_hash().unwrap(), c.content_hash().unwrap());
    }
}

#[test]
fn sacbc_heads_follow_their_objectives_on_chain3() {
    let cmdp = chain3();
    let art = train(&mixed(&cmdp, 2000, 1), &TrainConfig { gamma: 1.0, ..TrainConfig::sacbc() }).unwrap();
    assert_eq!(art.policy.head_action(0, 0, 0).unwrap(), CHAIN3_RISKY);
    assert_eq!(art.policy.head_action(1, 0, 0).unwrap(), CHAIN3_SAFE);
}

#[test]
fn heavy_bc_weight_tracks_dataset_frequencies() {
    let cmdp = chain3();
    let ds = mixed(&cmdp, 2000, 2);
    let at_start: Vec<&Transition> = ds.transitions.iter().filter(|tr| tr.s == 0 && tr.t == 0).collect();
    let mut freq = vec![0.0; cmdp.n_actions()];
    for tr in &at_start {
        freq[tr.a] += 1.0 / at_start.len() as f64;
    }
    let cfg = TrainConfig {
        gamma: 1.0,
        bc_weight: 100.0,
        k: 4,
        ..TrainConfig::sacbc()
    };
    let art = train(&ds, &cfg).unwrap();
    for k in 0..4 {
        let p = head_probs(&art.policy, k, 0, 0);
        let tv: f64 = p.iter().zip(&freq).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv <= 0.05, "head {k}: {p:?} vs {freq:?} (TV {tv})");
    }
}

#[test]
fn separate_agents_arm_has_one_network_per_head() {
    let ds = mixed(&chain3(), 200, 3);
    for shared in [false, true] {
        let cfg = TrainConfig { k: 4, steps: 50, shared_backbone: shared, ..TrainConfig::iql() };
        let art = train(&ds, &cfg).unwrap();
        match &art.policy {
            PolicyModel::Separate { nets, .. } => {
                assert!(!shared);
                assert_eq!(nets.len(), 4);
            }
            PolicyModel::Shared { net, .. } => {
                assert!(shared);
                assert_eq!(net.n_heads(), 4);
            }
            PolicyModel::Tabular { .. } => panic!("network trainer produced a table"),
        }
        assert_eq!(art.policy.n_heads(), 4);
    }
}

#[test]
fn fqe_always_risky_cost_on_chain3() {
    let cmdp = chain3();
    let ds = mixed(&cmdp, 2000, 5);
    let risky = ActionTable::from_fn(cmdp.n_states(), cmdp.horizon(), |_, _| CHAIN3_RISKY);
    let cfg = TrainConfig { gamma: 1.0, ..TrainConfig::iql() };
    let est = fqe(&ds, &risky, FqeObjective::Cost, &cfg).unwrap();
    let exact = evaluate_policy_cost(&cmdp, &|_s: usize, _t: usize, _c: u32| CHAIN3_RISKY).unwrap();
    assert_eq!(exact.get(0, 0, 0), 1.0);
    let q = est.q(0, 0, CHAIN3_RISKY).unwrap();
    assert!((q - 1.0).abs() <= 0.1, "FQE Q^c(s0, risky, 0) = {q}");
    assert!(!est.residuals.is_empty());

    let again = fqe(&ds, &risky, FqeObjective::Cost, &cfg).unwrap();
    assert_eq!(est.q.net.params(), again.q.net.params());
}

#[test]
fn fqe_zero_reward_fixed_point() {
    let base = make_random_cmdp(4, 2, 3, 2, 1, RngSeed::new(12)).unwrap();
    let (ns, na) = (base.n_states(), base.n_actions());
    let cmdp = Cmdp::new(
        "zero-reward",
        base.horizon(),
        base.c_max(),
        (0..ns).map(|s| (0..na).map(|a| base.next_distribution(s, a).to_vec()).collect()).collect(),
        vec![vec![0.0; na]; ns],
        base.costs().to_vec(),
        base.mu0().to_vec(),
    )
    .unwrap();
    let ds = mixed(&cmdp, 500, 6);
    let table = ActionTable::from_fn(ns, cmdp.horizon(), |s, t| (s + t) % na);
    let est = fqe(&ds, &table, FqeObjective::Reward, &TrainConfig::iql()).unwrap();
    for tr in &ds.transitions {
        let q = est.q(tr.s, tr.t, tr.a).unwrap();
        assert!(q.abs() < 0.05, "Q-hat({}, {}, {}) = {q}", tr.s, tr.a, tr.t);
    }
}
