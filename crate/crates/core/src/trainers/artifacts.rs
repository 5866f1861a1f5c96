use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{lambda_schedule, TrainConfig};
use crate::approximator::{argmax, encode_state, MultiHeadPolicyNet, Mlp};
use crate::cmdp::Cmdp;
use crate::error::{CapsError, Result};
use crate::fsutil::write_atomic;
use crate::oracle::{ObjectiveTables, ValueTables};

/// A Q estimator over `(s, a, t)` for `t < T`.
pub trait QFunction: Sync {
    fn q_row(&self, s: usize, t: usize) -> Result<Vec<f64>>;

    fn q(&self, s: usize, t: usize, a: usize) -> Result<f64> {
        let row = self.q_row(s, t)?;
        row.get(a).copied().ok_or(CapsError::IndexOutOfRange {
            what: "action",
            index: a,
            limit: row.len(),
        })
    }
}

/// An ordered head set `[reward, intermediates..., cost]` of
/// time-dependent deterministic policies.
pub trait HeadPolicies: Sync {
    fn n_heads(&self) -> usize;
    fn head_action(&self, k: usize, s: usize, t: usize) -> Result<usize>;
}

/// Deterministic policy `pi(s, t)` stored densely at `t * n_states + s`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionTable {
    pub n_states: usize,
    pub horizon: usize,
    pub actions: Vec<usize>,
}

impl ActionTable {
    pub fn from_fn(n_states: usize, horizon: usize, mut f: impl FnMut(usize, usize) -> usize) -> Self {
        let mut actions = Vec::with_capacity(n_states * horizon);
        for t in 0..horizon {
            for s in 0..n_states {
                actions.push(f(s, t));
            }
        }
        Self {
            n_states,
            horizon,
            actions,
        }
    }

    pub fn get(&self, s: usize, t: usize) -> Result<usize> {
        check_index("state", s, self.n_states)?;
        check_index("t", t, self.horizon)?;
        Ok(self.actions[t * self.n_states + s])
    }
}

fn check_index(what: &'static str, index: usize, limit: usize) -> Result<()> {
    if index >= limit {
        return Err(CapsError::IndexOutOfRange { what, index, limit });
    }
    Ok(())
}

/// Dense `Q[t][s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub q: Vec<f64>,
}

impl QTable {
    pub fn from_objective(tables: &ObjectiveTables) -> Self {
        let mut q = Vec::with_capacity(tables.horizon * tables.n_states * tables.n_actions);
        for t in 0..tables.horizon {
            for s in 0..tables.n_states {
                q.extend_from_slice(tables.q_row(t, s));
            }
        }
        Self {
            n_states: tables.n_states,
            n_actions: tables.n_actions,
            horizon: tables.horizon,
            q,
        }
    }

    pub fn row(&self, s: usize, t: usize) -> Result<&[f64]> {
        check_index("state", s, self.n_states)?;
        check_index("t", t, self.horizon)?;
        let start = (t * self.n_states + s) * self.n_actions;
        Ok(&self.q[start..start + self.n_actions])
    }
}

impl QFunction for QTable {
    fn q_row(&self, s: usize, t: usize) -> Result<Vec<f64>> {
        self.row(s, t).map(<[f64]>::to_vec)
    }
}

/// Network mapping the state encoding to one Q value per action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QNetwork {
    pub n_states: usize,
    pub horizon: usize,
    pub net: Mlp,
}

impl QFunction for QNetwork {
    fn q_row(&self, s: usize, t: usize) -> Result<Vec<f64>> {
        check_index("state", s, self.n_states)?;
        check_index("t", t, self.horizon)?;
        self.net.forward(&encode_state(s, t, self.n_states, self.horizon))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QModel {
    Table(QTable),
    Network(QNetwork),
}

impl QFunction for QModel {
    fn q_row(&self, s: usize, t: usize) -> Result<Vec<f64>> {
        match self {
            QModel::Table(q) => q.q_row(s, t),
            QModel::Network(q) => q.q_row(s, t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyModel {
    Tabular {
        heads: Vec<ActionTable>,
    },
    /// One body, `K` heads.
    Shared {
        n_states: usize,
        horizon: usize,
        net: MultiHeadPolicyNet,
    },
    /// `K` independent single-head networks.
    Separate {
        n_states: usize,
        horizon: usize,
        nets: Vec<MultiHeadPolicyNet>,
    },
}

impl PolicyModel {
    /// Action logits of head `k`; `None` for tabular heads.
    pub fn head_logits(&self, k: usize, s: usize, t: usize) -> Result<Option<Vec<f64>>> {
        check_index("head", k, self.n_heads())?;
        match self {
            PolicyModel::Tabular { .. } => Ok(None),
            PolicyModel::Shared {
                n_states,
                horizon,
                net,
            } => {
                check_index("state", s, *n_states)?;
                check_index("t", t, *horizon)?;
                net.forward_head(&encode_state(s, t, *n_states, *horizon), k)
                    .map(Some)
            }
            PolicyModel::Separate {
                n_states,
                horizon,
                nets,
            } => {
                check_index("state", s, *n_states)?;
                check_index("t", t, *horizon)?;
                nets[k]
                    .forward_head(&encode_state(s, t, *n_states, *horizon), 0)
                    .map(Some)
            }
        }
    }

    pub fn head_table(&self, k: usize, n_states: usize, horizon: usize) -> Result<ActionTable> {
        let mut actions = Vec::with_capacity(n_states * horizon);
        for t in 0..horizon {
            for s in 0..n_states {
                actions.push(self.head_action(k, s, t)?);
            }
        }
        Ok(ActionTable {
            n_states,
            horizon,
            actions,
        })
    }

    pub fn all_finite(&self) -> bool {
        match self {
            PolicyModel::Tabular { .. } => true,
            PolicyModel::Shared { net, .. } => net.all_finite(),
            PolicyModel::Separate { nets, .. } => nets.iter().all(MultiHeadPolicyNet::all_finite),
        }
    }
}

impl HeadPolicies for PolicyModel {
    fn n_heads(&self) -> usize {
        match self {
            PolicyModel::Tabular { heads } => heads.len(),
            PolicyModel::Shared { net, .. } => net.n_heads(),
            PolicyModel::Separate { nets, .. } => nets.len(),
        }
    }

    fn head_action(&self, k: usize, s: usize, t: usize) -> Result<usize> {
        if let PolicyModel::Tabular { heads } = self {
            check_index("head", k, heads.len())?;
            return heads[k].get(s, t);
        }
        let logits = self.head_logits(k, s, t)?.unwrap_or_default();
        Ok(argmax(&logits))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactSource {
    Tabular,
    Learned,
    OracleExact,
}

impl ArtifactSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactSource::Tabular => "tabular",
            ArtifactSource::Learned => "learned",
            ArtifactSource::OracleExact => "oracle-exact",
        }
    }
}

/// Instrumentation recorded during training.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCounters {
    /// Full critic trainings; two per artifact whatever `K` is.
    pub critic_passes: usize,
    /// Gradient steps per critic pass, in pass order.
    pub critic_updates: Vec<u64>,
    pub head_extractions: usize,
    /// Per-head gradient steps summed over heads.
    pub head_updates: u64,
    pub max_extraction_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub source: ArtifactSource,
    pub env_name: String,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub k: usize,
    pub lambda_values: Vec<f64>,
    pub config: Option<TrainConfig>,
    pub dataset_hash: Option<String>,
    pub counters: TrainCounters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedArtifacts {
    pub policy: PolicyModel,
    pub q_reward: QModel,
    pub q_cost: QModel,
    pub meta: ArtifactMeta,
}

impl TrainedArtifacts {
    pub fn k(&self) -> usize {
        self.meta.k
    }

    /// Head count, lambda list and estimator shapes agree.
    pub fn validate(&self) -> Result<()> {
        let k = self.policy.n_heads();
        if k != self.meta.k || k < 2 || self.meta.lambda_values.len() != k - 2 {
            return Err(CapsError::InvalidSpec(format!(
                "artifact has {k} heads, K = {} and {} lambda values",
                self.meta.k,
                self.meta.lambda_values.len()
            )));
        }
        if !self.policy.all_finite() {
            return Err(CapsError::Diverged("non-finite policy parameters".into()));
        }
        Ok(())
    }

    /// SHA-256 over the serialized checkpoint files.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for part in [
            to_json(&self.meta, MANIFEST)?,
            to_json(&self.policy, POLICY)?,
            to_json(&self.q_reward, Q_REWARD)?,
            to_json(&self.q_cost, Q_COST)?,
        ] {
            h.update(&part);
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn check_compatible(&self, cmdp: &Cmdp) -> Result<()> {
        let m = &self.meta;
        if (m.n_states, m.n_actions, m.horizon)
            != (cmdp.n_states(), cmdp.n_actions(), cmdp.horizon())
        {
            return Err(CapsError::Incompatible(format!(
                "artifact shape (S={}, A={}, T={}) vs environment (S={}, A={}, T={})",
                m.n_states,
                m.n_actions,
                m.horizon,
                cmdp.n_states(),
                cmdp.n_actions(),
                cmdp.horizon()
            )));
        }
        Ok(())
    }
}

/// Artifact built from the exact value tables: reward-greedy, cost-greedy
/// and, in between, greedy policies of `Q^r - lambda_k Q^c`.
pub fn oracle_exact(cmdp: &Cmdp, k: usize) -> Result<TrainedArtifacts> {
    let lambdas = lambda_schedule(k)?;
    let vt = ValueTables::solve(cmdp);
    let (ns, horizon) = (cmdp.n_states(), cmdp.horizon());
    let mut heads = Vec::with_capacity(k);
    heads.push(ActionTable::from_fn(ns, horizon, |s, t| vt.reward.greedy_action(t, s)));
    for &lambda in &lambdas {
        heads.push(ActionTable::from_fn(ns, horizon, |s, t| {
            let mixed: Vec<f64> = vt
                .reward
                .q_row(t, s)
                .iter()
                .zip(vt.cost.q_row(t, s))
                .map(|(r, c)| r - lambda * c)
                .collect();
            argmax(&mixed)
        }));
    }
    heads.push(ActionTable::from_fn(ns, horizon, |s, t| vt.cost.greedy_action(t, s)));
    Ok(TrainedArtifacts {
        policy: PolicyModel::Tabular { heads },
        q_reward: QModel::Table(QTable::from_objective(&vt.reward)),
        q_cost: QModel::Table(QTable::from_objective(&vt.cost)),
        meta: ArtifactMeta {
            source: ArtifactSource::OracleExact,
            env_name: cmdp.name().to_string(),
            n_states: ns,
            n_actions: cmdp.n_actions(),
            horizon,
            k,
            lambda_values: lambdas,
            config: None,
            dataset_hash: None,
            counters: TrainCounters::default(),
        },
    })
}

const MANIFEST: &str = "manifest.json";
const POLICY: &str = "policy.json";
const Q_REWARD: &str = "q_reward.json";
const Q_COST: &str = "q_cost.json";

fn to_json<T: Serialize>(value: &T, what: &str) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CapsError::json(what, e))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CapsError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CapsError::json(path.display().to_string(), e))
}

/// Writes `manifest.json`, `policy.json`, `q_reward.json` and `q_cost.json`
/// into `dir`, creating it if needed.
pub fn save_artifacts(art: &TrainedArtifacts, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CapsError::io(dir, e))?;
    write_atomic(&dir.join(POLICY), &to_json(&art.policy, POLICY)?)?;
    write_atomic(&dir.join(Q_REWARD), &to_json(&art.q_reward, Q_REWARD)?)?;
    write_atomic(&dir.join(Q_COST), &to_json(&art.q_cost, Q_COST)?)?;
    // Manifest last: its presence marks a complete checkpoint.
    write_atomic(&dir.join(MANIFEST), &to_json(&art.meta, MANIFEST)?)
}

pub fn load_artifacts(dir: &Path) -> Result<TrainedArtifacts> {
    let art = TrainedArtifacts {
        meta: read_json(&dir.join(MANIFEST))?,
        policy: read_json(&dir.join(POLICY))?,
        q_reward: read_json(&dir.join(Q_REWARD))?,
        q_cost: read_json(&dir.join(Q_COST))?,
    };
    art.validate()?;
    Ok(art)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{chain3, gridworld3x3, CHAIN3_RISKY, CHAIN3_SAFE};

    #[test]
    fn oracle_exact_chain3_heads() {
        let art = oracle_exact(&chain3(), 2).unwrap();
        art.validate().unwrap();
        assert_eq!(art.policy.head_action(0, 0, 0).unwrap(), CHAIN3_RISKY);
        assert_eq!(art.policy.head_action(1, 0, 0).unwrap(), CHAIN3_SAFE);
        assert_eq!(art.q_cost.q(0, 0, CHAIN3_RISKY).unwrap(), 1.0);
        assert_eq!(art.q_reward.q(0, 0, CHAIN3_RISKY).unwrap(), 1.0);
        assert!(art.policy.head_action(2, 0, 0).is_err());
        assert!(art.q_cost.q_row(0, 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let art = oracle_exact(&gridworld3x3(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_artifacts(&art, dir.path()).unwrap();
        let back = load_artifacts(dir.path()).unwrap();
        assert_eq!(back, art);
    }

    #[test]
    fn missing_checkpoint_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_artifacts(dir.path()), Err(CapsError::Io { .. })));
    }
}
