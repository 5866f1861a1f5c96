//! Evaluation: normalised metrics over threshold sweeps in Monte Carlo or
//! exact mode, Table-2-style safety counts and the ablation harness.

mod ablation;
mod sweep;
mod verify;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::caps::{caps_policy, CapsPolicy};
use crate::cmdp::Cmdp;
use crate::error::{CapsError, Result};
use crate::oracle::{
    evaluate_policy_cost, evaluate_policy_reward, occupancy, solve_cost_optimal,
    solve_reward_minimal, solve_reward_optimal, CHECK_TOL,
};
use crate::rng::RngSeed;
use crate::trainers::TrainedArtifacts;

pub use ablation::{
    run_ablation, AblationKind, AblationReport, AblationSuite, DatasetRecipe, EnvArms,
    Observation, ObservationStatus,
};
pub use sweep::{sweep_thresholds, threshold_set_label, SweepCell, SweepMethod, SweepRow, SweepTable};
pub use verify::{kappa_grid, verify_fuzz, FuzzSpec, VerifyCase, VerifyReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    MonteCarlo,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub seeds: Vec<u64>,
    pub episodes_per_seed: usize,
    pub mode: EvalMode,
}

impl Default for EvalConfig {
    /// Three thresholds, three seeds, twenty episodes per seed.
    fn default() -> Self {
        Self {
            thresholds: vec![10.0, 20.0, 40.0],
            seeds: vec![0, 10, 20],
            episodes_per_seed: 20,
            mode: EvalMode::MonteCarlo,
        }
    }
}

impl EvalConfig {
    pub fn exact(thresholds: Vec<f64>) -> Self {
        Self {
            thresholds,
            mode: EvalMode::Exact,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
            return Err(CapsError::InvalidSpec(format!(
                "thresholds must be nonempty, finite and positive: {:?}",
                self.thresholds
            )));
        }
        if self.mode == EvalMode::MonteCarlo && (self.episodes_per_seed == 0 || self.seeds.is_empty()) {
            return Err(CapsError::InvalidSpec(
                "monte carlo evaluation needs at least one seed and one episode".into(),
            ));
        }
        Ok(())
    }
}

/// `(raw_reward - r_min) / (r_max - r_min)` and `raw_cost / kappa`.
pub fn normalize(raw_reward: f64, raw_cost: f64, kappa: f64, r_min: f64, r_max: f64) -> Result<(f64, f64)> {
    if !(r_max > r_min) {
        return Err(CapsError::DegenerateNormalization { r_min, r_max });
    }
    if !(kappa > 0.0) {
        return Err(CapsError::InvalidSpec(format!("kappa {kappa} must be positive")));
    }
    Ok(((raw_reward - r_min) / (r_max - r_min), raw_cost / kappa))
}

/// Where an evaluated policy came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub env: String,
    pub algo: String,
    pub k: usize,
    pub shared: bool,
    pub artifact_hash: String,
}

impl Provenance {
    pub fn of(art: &TrainedArtifacts, env: &str) -> Result<Self> {
        let algo = match &art.meta.config {
            Some(cfg) if art.meta.source != crate::trainers::ArtifactSource::OracleExact => {
                cfg.algo.as_str().to_string()
            }
            _ => art.meta.source.as_str().to_string(),
        };
        Ok(Self {
            env: env.to_string(),
            algo,
            k: art.k(),
            shared: matches!(art.policy, crate::trainers::PolicyModel::Shared { .. }),
            artifact_hash: art.content_hash()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub seed_count: usize,
    pub episodes: usize,
    pub raw_reward: f64,
    pub raw_cost: f64,
    /// Zero in exact mode.
    pub reward_stderr: f64,
    pub cost_stderr: f64,
    pub normalized_reward: f64,
    pub normalized_cost: f64,
    pub safe: bool,
    /// Share of decision steps that used the fallback.
    pub fallback_rate: f64,
    /// Share of decision steps won by each head.
    pub head_frequencies: Vec<f64>,
    /// Whether the optimal expected cost is within the threshold at all.
    pub attainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub provenance: Provenance,
    pub config: EvalConfig,
    pub r_min: f64,
    pub r_max: f64,
    /// Optimal expected episode cost from the initial distribution.
    pub optimal_cost: f64,
    pub results: Vec<ThresholdResult>,
    pub mean_normalized_reward: f64,
    pub mean_normalized_cost: f64,
    pub n_safe: usize,
    pub n_thresholds: usize,
}

impl EvalReport {
    pub fn mean_safe(&self) -> bool {
        self.mean_normalized_cost <= 1.0 + CHECK_TOL
    }
}

pub fn is_safe(normalized_cost: f64) -> bool {
    normalized_cost <= 1.0 + CHECK_TOL
}

/// Evaluates CAPS built from `art` at every threshold of `cfg`.
pub fn evaluate(art: &TrainedArtifacts, cmdp: &Cmdp, cfg: &EvalConfig) -> Result<EvalReport> {
    art.check_compatible(cmdp)?;
    let policy = caps_policy(art, cfg.thresholds.first().copied().unwrap_or(1.0))?;
    evaluate_caps(&policy, cmdp, cfg, Provenance::of(art, cmdp.name())?)
}

#[derive(Debug, Clone)]
struct EpisodeStats {
    reward: f64,
    cost: f64,
    head_counts: Vec<u64>,
    fallbacks: u64,
}

fn rollout(cmdp: &Cmdp, policy: &CapsPolicy, seed: RngSeed) -> Result<EpisodeStats> {
    let mut rng = seed.rng();
    let mut s = cmdp.sample_initial(&mut rng);
    let mut head_counts = vec![0; policy.table().k];
    let (mut reward, mut c_before, mut fallbacks) = (0.0, 0u32, 0);
    for t in 0..cmdp.horizon() {
        let (a, head, fallback) = policy.choose(s, t, c_before)?;
        head_counts[head] += 1;
        fallbacks += u64::from(fallback);
        reward += cmdp.reward(s, a);
        c_before += cmdp.cost(s);
        s = cmdp.sample_next(s, a, &mut rng);
    }
    Ok(EpisodeStats {
        reward,
        cost: f64::from(c_before + cmdp.cost(s)),
        head_counts,
        fallbacks,
    })
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

struct Measured {
    reward: f64,
    cost: f64,
    reward_stderr: f64,
    cost_stderr: f64,
    fallback_rate: f64,
    head_frequencies: Vec<f64>,
    episodes: usize,
}

fn measure_monte_carlo(cmdp: &Cmdp, policy: &CapsPolicy, cfg: &EvalConfig) -> Result<Measured> {
    let cells: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&seed| (0..cfg.episodes_per_seed).map(move |e| (seed, e)))
        .collect();
    // Ordered collection keeps the reduction independent of scheduling.
    let stats = cells
        .par_iter()
        .map(|&(seed, e)| rollout(cmdp, policy, RngSeed::new(seed).derive("eval-episode", e as u64)))
        .collect::<Result<Vec<_>>>()?;
    let rewards: Vec<f64> = stats.iter().map(|s| s.reward).collect();
    let costs: Vec<f64> = stats.iter().map(|s| s.cost).collect();
    let (reward, reward_stderr) = mean_and_stderr(&rewards);
    let (cost, cost_stderr) = mean_and_stderr(&costs);
    let k = policy.table().k;
    let mut heads = vec![0u64; k];
    let mut fallbacks = 0;
    for s in &stats {
        for (h, c) in heads.iter_mut().zip(&s.head_counts) {
            *h += c;
        }
        fallbacks += s.fallbacks;
    }
    let steps = (stats.len() * cmdp.horizon()) as f64;
    Ok(Measured {
        reward,
        cost,
        reward_stderr,
        cost_stderr,
        fallback_rate: fallbacks as f64 / steps,
        head_frequencies: heads.iter().map(|&h| h as f64 / steps).collect(),
        episodes: stats.len(),
    })
}

fn measure_exact(cmdp: &Cmdp, policy: &CapsPolicy) -> Result<Measured> {
    let reward = evaluate_policy_reward(cmdp, policy)?.initial_value(cmdp);
    let cost = evaluate_policy_cost(cmdp, policy)?.initial_value(cmdp);
    let occ = occupancy(cmdp, policy)?;
    let mut heads = vec![0.0; policy.table().k];
    let (mut fallback, mut total) = (0.0, 0.0);
    for ((t, s, b), m) in occ.entries() {
        if t == cmdp.horizon() {
            continue;
        }
        let (_, head, fb) = policy.choose(s, t, b)?;
        heads[head] += m;
        if fb {
            fallback += m;
        }
        total += m;
    }
    Ok(Measured {
        reward,
        cost,
        reward_stderr: 0.0,
        cost_stderr: 0.0,
        fallback_rate: fallback / total,
        head_frequencies: heads.iter().map(|h| h / total).collect(),
        episodes: 0,
    })
}

/// Evaluates an already-built CAPS policy at every threshold of `cfg`.
pub fn evaluate_caps(
    policy: &CapsPolicy,
    cmdp: &Cmdp,
    cfg: &EvalConfig,
    provenance: Provenance,
) -> Result<EvalReport> {
    cfg.validate()?;
    let r_min = solve_reward_minimal(cmdp).initial_value(cmdp);
    let r_max = solve_reward_optimal(cmdp).initial_value(cmdp);
    let optimal_cost = solve_cost_optimal(cmdp).initial_value(cmdp);
    let mut results = Vec::with_capacity(cfg.thresholds.len());
    for &kappa in &cfg.thresholds {
        let p = policy.with_kappa(kappa);
        let m = match cfg.mode {
            EvalMode::MonteCarlo => measure_monte_carlo(cmdp, &p, cfg)?,
            EvalMode::Exact => measure_exact(cmdp, &p)?,
        };
        let (normalized_reward, normalized_cost) = normalize(m.reward, m.cost, kappa, r_min, r_max)?;
        results.push(ThresholdResult {
            threshold: kappa,
            seed_count: if cfg.mode == EvalMode::Exact { 0 } else { cfg.seeds.len() },
            episodes: m.episodes,
            raw_reward: m.reward,
            raw_cost: m.cost,
            reward_stderr: m.reward_stderr,
            cost_stderr: m.cost_stderr,
            normalized_reward,
            normalized_cost,
            safe: is_safe(normalized_cost),
            fallback_rate: m.fallback_rate,
            head_frequencies: m.head_frequencies,
            attainable: optimal_cost <= kappa + CHECK_TOL,
        });
    }
    let n = results.len() as f64;
    Ok(EvalReport {
        provenance,
        config: cfg.clone(),
        r_min,
        r_max,
        optimal_cost,
        mean_normalized_reward: results.iter().map(|r| r.normalized_reward).sum::<f64>() / n,
        mean_normalized_cost: results.iter().map(|r| r.normalized_cost).sum::<f64>() / n,
        n_safe: results.iter().filter(|r| r.safe).count(),
        n_thresholds: results.len(),
        results,
    })
}

/// Column names of `eval.csv`.
pub const EVAL_COLUMNS: [&str; 10] = [
    "env",
    "algo",
    "K",
    "shared",
    "threshold",
    "seed_count",
    "norm_reward",
    "norm_cost",
    "safe",
    "fallback_rate",
];

/// `eval.csv`: one row per threshold plus a `mean` row per report.
pub fn eval_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EVAL_COLUMNS)?;
    for rep in reports {
        let p = &rep.provenance;
        let seed_count = rep.results.first().map_or(0, |r| r.seed_count);
        for r in &rep.results {
            w.write_record([
                p.env.clone(),
                p.algo.clone(),
                p.k.to_string(),
                p.shared.to_string(),
                r.threshold.to_string(),
                r.seed_count.to_string(),
                r.normalized_reward.to_string(),
                r.normalized_cost.to_string(),
                r.safe.to_string(),
                r.fallback_rate.to_string(),
            ])?;
        }
        let mean_fallback = rep.results.iter().map(|r| r.fallback_rate).sum::<f64>() / rep.results.len() as f64;
        w.write_record([
            p.env.clone(),
            p.algo.clone(),
            p.k.to_string(),
            p.shared.to_string(),
            "mean".to_string(),
            seed_count.to_string(),
            rep.mean_normalized_reward.to_string(),
            rep.mean_normalized_cost.to_string(),
            rep.mean_safe().to_string(),
            mean_fallback.to_string(),
        ])?;
    }
    finish_csv(w)
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| CapsError::InvalidSpec(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| CapsError::InvalidSpec(format!("csv encoding: {e}")))
}
