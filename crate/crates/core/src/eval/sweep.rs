use serde::Serialize;

use super::{evaluate, finish_csv, EvalConfig, EvalReport};
use crate::cmdp::Cmdp;
use crate::error::{CapsError, Result};
use crate::trainers::TrainedArtifacts;

/// A method under comparison: one artifact per environment, in the order of
/// the environment list.
#[derive(Debug, Clone)]
pub struct SweepMethod {
    pub name: String,
    pub artifacts: Vec<TrainedArtifacts>,
}

/// One method on one environment under one threshold set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub threshold_set: String,
    pub method: String,
    pub env: String,
    pub mean_normalized_reward: f64,
    pub mean_normalized_cost: f64,
    pub safe: bool,
    /// Every threshold in the set is at least the optimal expected cost.
    pub attainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub threshold_set: String,
    pub method: String,
    pub n_safe: usize,
    pub n_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
    #[serde(skip)]
    pub reports: Vec<EvalReport>,
}

impl SweepTable {
    /// `sweep.csv`: `threshold_set, method, n_safe, n_total`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["threshold_set", "method", "n_safe", "n_total"])?;
        for r in &self.rows {
            w.write_record([
                r.threshold_set.clone(),
                r.method.clone(),
                r.n_safe.to_string(),
                r.n_total.to_string(),
            ])?;
        }
        finish_csv(w)
    }
}

/// `"10|20|40"` for `[10, 20, 40]`.
pub fn threshold_set_label(set: &[f64]) -> String {
    set.iter().map(f64::to_string).collect::<Vec<_>>().join("|")
}

/// Counts, per threshold set and method, the environments on which the
/// threshold-averaged normalised cost is at most 1.
pub fn sweep_thresholds(
    methods: &[SweepMethod],
    cmdps: &[Cmdp],
    threshold_sets: &[Vec<f64>],
    base: &EvalConfig,
) -> Result<SweepTable> {
    for m in methods {
        if m.artifacts.len() != cmdps.len() {
            return Err(CapsError::InvalidSpec(format!(
                "method `{}` has {} artifacts for {} environments",
                m.name,
                m.artifacts.len(),
                cmdps.len()
            )));
        }
    }
    let mut table = SweepTable {
        rows: Vec::new(),
        cells: Vec::new(),
        reports: Vec::new(),
    };
    for set in threshold_sets {
        let cfg = EvalConfig {
            thresholds: set.clone(),
            ..base.clone()
        };
        cfg.validate()?;
        let label = threshold_set_label(set);
        for m in methods {
            let mut n_safe = 0;
            for (art, cmdp) in m.artifacts.iter().zip(cmdps) {
                let rep = evaluate(art, cmdp, &cfg)?;
                let safe = rep.mean_safe();
                n_safe += usize::from(safe);
                table.cells.push(SweepCell {
                    threshold_set: label.clone(),
                    method: m.name.clone(),
                    env: cmdp.name().to_string(),
                    mean_normalized_reward: rep.mean_normalized_reward,
                    mean_normalized_cost: rep.mean_normalized_cost,
                    safe,
                    attainable: rep.results.iter().all(|r| r.attainable),
                });
                table.reports.push(rep);
            }
            table.rows.push(SweepRow {
                threshold_set: label.clone(),
                method: m.name.clone(),
                n_safe,
                n_total: cmdps.len(),
            });
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{chain3, gridworld3x3};
    use crate::trainers::oracle_exact;

    #[test]
    fn exact_caps_is_safe_everywhere_on_deterministic_envs() {
        let cmdps = vec![chain3(), gridworld3x3()];
        let method = SweepMethod {
            name: "oracle".into(),
            artifacts: cmdps.iter().map(|c| oracle_exact(c, 2).unwrap()).collect(),
        };
        let sets = vec![vec![1.0, 2.0, 4.0], vec![2.0, 4.0, 8.0]];
        let table = sweep_thresholds(&[method], &cmdps, &sets, &EvalConfig::exact(vec![1.0])).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(table.rows.iter().all(|r| r.n_safe == 2 && r.n_total == 2));
        let csv = table.to_csv().unwrap();
        assert!(csv.starts_with("threshold_set,method,n_safe,n_total\n1|2|4,oracle,2,2\n"));
    }

    #[test]
    fn zero_threshold_set_is_rejected() {
        let cmdps = vec![chain3()];
        let method = SweepMethod {
            name: "oracle".into(),
            artifacts: vec![oracle_exact(&cmdps[0], 2).unwrap()],
        };
        let r = sweep_thresholds(&[method], &cmdps, &[vec![0.0, 0.0]], &EvalConfig::exact(vec![1.0]));
        assert!(r.is_err());
    }
}
