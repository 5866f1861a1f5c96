use log::debug;

use super::artifacts::{
    ArtifactMeta, ArtifactSource, QModel, QNetwork, TrainCounters, TrainedArtifacts,
};
use super::bc::ActorSet;
use super::nets::{check_dataset, encode, q_spec, sample_batch, terminal_cost, Critic};
use super::{check_algo, lambda_schedule, Algo, TrainConfig};
use crate::approximator::{entropy_regularized_value, log_softmax, softmax};
use crate::dataset::OfflineDataset;
use crate::error::Result;
use crate::rng::RngSeed;

/// `sum_a pi(a) (q(a) + sign * alpha * log pi(a))` for the head's logits.
fn soft_value(logits: &[f64], q: &[f64], alpha: f64, sign: f64) -> f64 {
    let logp = log_softmax(logits);
    softmax(logits)
        .iter()
        .zip(q)
        .zip(&logp)
        .map(|((p, q), l)| p * (q + sign * alpha * l))
        .sum()
}

/// SAC+BC-style CAPS for discrete actions. The reward critic bootstraps
/// through the reward head and the cost critic through the cost head, each
/// with the entropy-regularised soft value. Head `k` ascends
/// `sum_a pi_k(a) (Q^k(a) - alpha log pi_k(a)) + bc_weight log pi_k(a_data)`
/// with `Q^k = Q^r - lambda_k Q^c`, `Q^r` for the reward head and `-Q^c`
/// for the cost head.
pub fn train_sacbc_caps(ds: &OfflineDataset, cfg: &TrainConfig) -> Result<TrainedArtifacts> {
    check_algo(cfg, Algo::Sacbc)?;
    check_dataset(ds)?;
    let lambdas = lambda_schedule(cfg.k)?;
    let seed = RngSeed::new(cfg.seed);
    let k_cost = cfg.k - 1;

    let mut init = seed.derive("sacbc-critic", 0).rng();
    let mut q_r = Critic::new(q_spec(ds, &cfg.hidden), cfg.lr_critic, &mut init)?;
    let mut q_c = Critic::new(q_spec(ds, &cfg.hidden), cfg.lr_critic, &mut init)?;
    let mut actors = ActorSet::new(ds, cfg, cfg.k, seed.derive("sacbc-actor", 0))?;
    let mut batches = seed.derive("sacbc-batch", 0).rng();
    let mut counters = TrainCounters {
        critic_passes: 2,
        critic_updates: vec![0, 0],
        head_extractions: cfg.k,
        ..TrainCounters::default()
    };

    for step in 0..cfg.steps {
        let idx = sample_batch(&mut batches, ds.len(), cfg.batch_size);
        let mut r_items = Vec::with_capacity(idx.len());
        let mut c_items = Vec::with_capacity(idx.len());
        for &i in &idx {
            let tr = &ds.transitions[i];
            let x = encode(ds, tr.s, tr.t);
            let (y_r, y_c) = if tr.done {
                (tr.r, terminal_cost(ds, tr, cfg.gamma))
            } else {
                let x2 = encode(ds, tr.s_next, tr.t + 1);
                let v_r = soft_value(&actors.logits(0, &x2)?, &q_r.target.forward(&x2)?, cfg.alpha, -1.0);
                let v_c = soft_value(&actors.logits(k_cost, &x2)?, &q_c.target.forward(&x2)?, cfg.alpha, 1.0);
                (tr.r + cfg.gamma * v_r, f64::from(tr.c) + cfg.gamma * v_c)
            };
            r_items.push((x.clone(), tr.a, y_r));
            c_items.push((x, tr.a, y_c));
        }
        let loss_r = q_r.regress(&r_items)?;
        let loss_c = q_c.regress(&c_items)?;
        counters.critic_updates[0] += 1;
        counters.critic_updates[1] += 1;

        let rows = r_items
            .iter()
            .map(|(x, _, _)| Ok((q_r.q.forward(x)?, q_c.q.forward(x)?)))
            .collect::<Result<Vec<_>>>()?;
        actors.step(ds, &idx, |k, j, logits| {
            let (qr, qc) = &rows[j];
            let objective: Vec<f64> = if k == 0 {
                qr.clone()
            } else if k == k_cost {
                qc.iter().map(|c| -c).collect()
            } else {
                qr.iter().zip(qc).map(|(r, c)| r - lambdas[k - 1] * c).collect()
            };
            let (_, dj) = entropy_regularized_value(logits, &objective, cfg.alpha);
            let pi = softmax(logits);
            let a = ds.transitions[idx[j]].a;
            Some(
                dj.iter()
                    .zip(&pi)
                    .enumerate()
                    .map(|(b, (d, p))| -d + cfg.bc_weight * (p - f64::from(u8::from(b == a))))
                    .collect(),
            )
        })?;
        counters.head_updates += cfg.k as u64;
        q_r.track(cfg.polyak);
        q_c.track(cfg.polyak);
        if step % 500 == 0 {
            debug!("sacbc step {step}: reward loss {loss_r:.3e} cost loss {loss_c:.3e}");
        }
    }
    q_r.ensure_finite("reward critic")?;
    q_c.ensure_finite("cost critic")?;
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
