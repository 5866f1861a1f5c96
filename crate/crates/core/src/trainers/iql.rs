use log::debug;

use super::artifacts::{
    ArtifactMeta, ArtifactSource, QModel, QNetwork, TrainCounters, TrainedArtifacts,
};
use super::nets::{check_dataset, encode, q_spec, sample_batch, terminal_cost, v_spec, Critic, ValueNet};
use super::{check_algo, lambda_schedule, Algo, TrainConfig};
use crate::approximator::cross_entropy;
use crate::dataset::OfflineDataset;
use crate::error::Result;
use crate::rng::RngSeed;

use super::bc::{ActorSet, HeadWeights};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Signal {
    Reward,
    Cost,
}

/// One critic pass: `V` by expectile regression on the target `Q`, `Q` by
/// TD regression onto `r + gamma V(s')`. The cost critic tracks a lower
/// expectile, since lower cost is better.
fn train_critic(
    ds: &OfflineDataset,
    cfg: &TrainConfig,
    signal: Signal,
    seed: RngSeed,
) -> Result<(Critic, ValueNet, u64)> {
    let tag = match signal {
        Signal::Reward => "iql-reward",
        Signal::Cost => "iql-cost",
    };
    let mut init = seed.derive(tag, 0).rng();
    let mut batches = seed.derive(tag, 1).rng();
    let mut critic = Critic::new(q_spec(ds, &cfg.hidden), cfg.lr_critic, &mut init)?;
    let mut value = ValueNet::new(v_spec(ds, &cfg.hidden), cfg.lr_critic, &mut init)?;
    let sign = if signal == Signal::Reward { 1.0 } else { -1.0 };
    let n = ds.len();
    for step in 0..cfg.steps {
        let idx = sample_batch(&mut batches, n, cfg.batch_size);
        let mut v_items = Vec::with_capacity(idx.len());
        let mut q_items = Vec::with_capacity(idx.len());
        for &i in &idx {
            let tr = &ds.transitions[i];
            let x = encode(ds, tr.s, tr.t);
            let q_old = critic.target.forward(&x)?[tr.a];
            let y = match (signal, tr.done) {
                (Signal::Reward, true) => tr.r,
                (Signal::Cost, true) => terminal_cost(ds, tr, cfg.gamma),
                (_, false) => {
                    let stage = if signal == Signal::Reward { tr.r } else { f64::from(tr.c) };
                    stage + cfg.gamma * value.value(&encode(ds, tr.s_next, tr.t + 1))?
                }
            };
            v_items.push((x.clone(), q_old));
            q_items.push((x, tr.a, y));
        }
        let v_loss = value.regress(&v_items, cfg.expectile_tau, sign)?;
        let q_loss = critic.regress(&q_items)?;
        critic.track(cfg.polyak);
        if step % 500 == 0 {
            debug!("{tag} step {step}: v_loss {v_loss:.3e} q_loss {q_loss:.3e}");
        }
    }
    critic.ensure_finite(tag)?;
    value.ensure_finite(tag)?;
    Ok((critic, value, cfg.steps as u64))
}

/// IQL-style CAPS: two critic passes, then advantage-weighted extraction of
/// all `K` heads. Head `k` weighs dataset actions by
/// `min(exp(beta (A^r - lambda_k A^c)), clip)`; the reward head uses `A^r`
/// alone and the cost head `-A^c` alone.
pub fn train_iql_caps(ds: &OfflineDataset, cfg: &TrainConfig) -> Result<TrainedArtifacts> {
    check_algo(cfg, Algo::Iql)?;
    check_dataset(ds)?;
    let lambdas = lambda_schedule(cfg.k)?;
    let seed = RngSeed::new(cfg.seed);
    let mut counters = TrainCounters::default();

    let (q_r, v_r, updates) = train_critic(ds, cfg, Signal::Reward, seed)?;
    counters.critic_passes += 1;
    counters.critic_updates.push(updates);
    let (q_c, v_c, updates) = train_critic(ds, cfg, Signal::Cost, seed)?;
    counters.critic_passes += 1;
    counters.critic_updates.push(updates);

    // Advantages are fixed once the critics are trained.
    let mut adv = Vec::with_capacity(ds.len());
    for tr in &ds.transitions {
        let x = encode(ds, tr.s, tr.t);
        let a_r = q_r.target.forward(&x)?[tr.a] - v_r.value(&x)?;
        let a_c = q_c.target.forward(&x)?[tr.a] - v_c.value(&x)?;
        adv.push((a_r, a_c));
    }
    let exponent = |k: usize, (a_r, a_c): (f64, f64)| -> f64 {
        if k == 0 {
            a_r
        } else if k == cfg.k - 1 {
            -a_c
        } else {
            a_r - lambdas[k - 1] * a_c
        }
    };
    let weights = HeadWeights::new(cfg.k, ds.len(), |k, i| {
        (cfg.beta * exponent(k, adv[i])).exp().min(cfg.weight_clip)
    });
    counters.max_extraction_weight = weights.max();

    let mut actors = ActorSet::new(ds, cfg, cfg.k, seed.derive("iql-actor", 0))?;
    let mut batches = seed.derive("iql-actor", 1).rng();
    for _ in 0..cfg.steps {
        let idx = sample_batch(&mut batches, ds.len(), cfg.batch_size);
        actors.step(ds, &idx, |k, j, logits| {
            let i = idx[j];
            let (_, g) = cross_entropy(logits, ds.transitions[i].a);
            let w = weights.get(k, i);
            Some(g.into_iter().map(|v| w * v).collect())
        })?;
        counters.head_updates += cfg.k as u64;
    }
    counters.head_extractions = cfg.k;
    actors.ensure_finite()?;

    Ok(TrainedArtifacts {
        policy: actors.into_policy(ds),
        q_reward: QModel::Network(QNetwork {
            n_states: ds.n_states,
            horizon: ds.horizon,
            net: q_r.q,
        }),
        q_cost: QModel::Network(QNetwork {
            n_states: ds.n_states,
            horizon: ds.horizon,
            net: q_c.q,
        }),
        meta: ArtifactMeta {
            source: ArtifactSource::Learned,
            env_name: ds.env_name.clone(),
            n_states: ds.n_states,
            n_actions: ds.n_actions,
            horizon: ds.horizon,
            k: cfg.k,
            lambda_values: lambdas,
            config: Some(cfg.clone()),
            dataset_hash: Some(ds.content_hash()),
            counters,
        },
    })
}
