//! CAPS training by reduction: one reward critic and one cost critic, then
//! `K` policy extractions that trade the two off through `lambda_schedule`.

mod artifacts;
mod bc;
mod fqe;
mod iql;
mod nets;
mod sacbc;
mod tabular;

use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::error::{CapsError, Result};

pub use artifacts::{
    load_artifacts, oracle_exact, save_artifacts, ActionTable, ArtifactMeta, ArtifactSource,
    HeadPolicies, PolicyModel, QFunction, QModel, QNetwork, QTable, TrainCounters,
    TrainedArtifacts,
};
pub use bc::{train_bc, BcPolicy};
pub use fqe::{fqe, FqeEstimate, FqeObjective};
pub use iql::train_iql_caps;
pub use sacbc::train_sacbc_caps;
pub use tabular::train_tabular_caps;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Iql,
    Sacbc,
    Tabular,
}

impl Algo {
    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Iql => "iql",
            Algo::Sacbc => "sacbc",
            Algo::Tabular => "tabular",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algo: Algo,
    /// Head count, reward and cost heads included.
    pub k: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub gamma: f64,
    pub beta: f64,
    pub expectile_tau: f64,
    pub alpha: f64,
    pub bc_weight: f64,
    pub seed: u64,
    pub shared_backbone: bool,
    pub hidden: Vec<usize>,
    pub weight_clip: f64,
    /// Target-network averaging rate.
    pub polyak: f64,
    pub fqe_sweeps: usize,
    pub fqe_steps_per_sweep: usize,
}

impl TrainConfig {
    pub fn iql() -> Self {
        Self {
            algo: Algo::Iql,
            k: 2,
            steps: 3000,
            batch_size: 128,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            gamma: 0.99,
            beta: 3.0,
            expectile_tau: 0.7,
            alpha: 0.0,
            bc_weight: 0.0,
            seed: 0,
            shared_backbone: true,
            hidden: vec![64, 64],
            weight_clip: 100.0,
            polyak: 0.005,
            fqe_sweeps: 50,
            fqe_steps_per_sweep: 40,
        }
    }

    pub fn sacbc() -> Self {
        Self {
            algo: Algo::Sacbc,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            alpha: 0.01,
            bc_weight: 0.05,
            ..Self::iql()
        }
    }

    pub fn tabular() -> Self {
        Self {
            algo: Algo::Tabular,
            gamma: 1.0,
            ..Self::iql()
        }
    }

    pub fn preset(algo: Algo) -> Self {
        match algo {
            Algo::Iql => Self::iql(),
            Algo::Sacbc => Self::sacbc(),
            Algo::Tabular => Self::tabular(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CapsError::InvalidSpec(m));
        if self.k < 2 {
            return fail(format!("head count K = {} must be >= 2", self.k));
        }
        if !(self.expectile_tau > 0.0 && self.expectile_tau < 1.0) {
            return fail(format!("expectile_tau {} outside (0, 1)", self.expectile_tau));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(self.beta > 0.0) {
            return fail(format!("beta {} must be positive", self.beta));
        }
        if self.algo != Algo::Tabular {
            if self.batch_size == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
                return fail("batch_size and hidden widths must be >= 1".into());
            }
            if !(self.lr_actor > 0.0 && self.lr_critic > 0.0) {
                return fail("learning rates must be positive".into());
            }
            if !(self.polyak > 0.0 && self.polyak <= 1.0) {
                return fail(format!("polyak {} outside (0, 1]", self.polyak));
            }
            if !(self.weight_clip > 0.0) || !(self.alpha >= 0.0) || !(self.bc_weight >= 0.0) {
                return fail("weight_clip must be positive, alpha and bc_weight non-negative".into());
            }
        }
        Ok(())
    }
}

/// `lambda_k = k / ((K - 1) / 2)` for `k = 1..K-2`.
pub fn lambda_schedule(k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(CapsError::InvalidSpec(format!(
            "head count K = {k} must be >= 2"
        )));
    }
    let half = (k as f64 - 1.0) / 2.0;
    Ok((1..k - 1).map(|i| i as f64 / half).collect())
}

/// Trains with the algorithm named in `cfg`.
pub fn train(ds: &OfflineDataset, cfg: &TrainConfig) -> Result<TrainedArtifacts> {
    match cfg.algo {
        Algo::Iql => train_iql_caps(ds, cfg),
        Algo::Sacbc => train_sacbc_caps(ds, cfg),
        Algo::Tabular => train_tabular_caps(ds, cfg),
    }
}

fn check_algo(cfg: &TrainConfig, expected: Algo) -> Result<()> {
    cfg.validate()?;
    if cfg.algo != expected {
        return Err(CapsError::InvalidSpec(format!(
            "config algo `{}` passed to the {} trainer",
            cfg.algo.as_str(),
            expected.as_str()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_schedule_values() {
        assert!(lambda_schedule(2).unwrap().is_empty());
        assert_eq!(lambda_schedule(4).unwrap(), vec![1.0 / 1.5, 2.0 / 1.5]);
        let l8 = lambda_schedule(8).unwrap();
        assert_eq!(l8, (1..=6).map(|k| k as f64 / 3.5).collect::<Vec<_>>());
        assert!(lambda_schedule(1).is_err());
    }

    #[test]
    fn presets_validate() {
        for algo in [Algo::Iql, Algo::Sacbc, Algo::Tabular] {
            TrainConfig::preset(algo).validate().unwrap();
        }
        let bad = TrainConfig {
            expectile_tau: 1.0,
            ..TrainConfig::iql()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { k: 1, ..TrainConfig::iql() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = TrainConfig::sacbc();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), cfg);
        let extra = s.replacen('{', "{\"bogus\":1,", 1);
        assert!(serde_json::from_str::<TrainConfig>(&extra).is_err());
    }
}
