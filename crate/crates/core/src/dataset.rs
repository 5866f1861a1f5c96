//! Offline datasets of timestamped transitions.
//!
//! File format: line 1 is a JSON header, line 2 the CSV column names
//! `t,s,a,r,c,s_next,done`, then one transition per line with `r` written
//! with 17 significant digits and `done` as `0`/`1`.
//!
//! Costs are per-state, so a transition only records the cost of `s`. The
//! header additionally carries `state_costs`, the cost of every state seen in
//! the data (as `s` or `s_next`); this is how the cost of an episode's final
//! state is known.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cmdp::Cmdp;
use crate::error::{CapsError, Result};
use crate::numfmt::fmt17;
use crate::oracle::ValueTables;
use crate::rng::RngSeed;

pub const COLUMNS: [&str; 7] = ["t", "s", "a", "r", "c", "s_next", "done"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t: usize,
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub c: u32,
    pub s_next: usize,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorSpec {
    pub weight_reward_greedy: f64,
    pub weight_cost_greedy: f64,
    pub weight_uniform: f64,
    pub epsilon_explore: f64,
}

impl BehaviorSpec {
    pub fn uniform() -> Self {
        Self {
            weight_reward_greedy: 0.0,
            weight_cost_greedy: 0.0,
            weight_uniform: 1.0,
            epsilon_explore: 0.0,
        }
    }

    /// Even mix of the three components with 20% exploration.
    pub fn mixed() -> Self {
        Self {
            weight_reward_greedy: 1.0 / 3.0,
            weight_cost_greedy: 1.0 / 3.0,
            weight_uniform: 1.0 / 3.0,
            epsilon_explore: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [
            self.weight_reward_greedy,
            self.weight_cost_greedy,
            self.weight_uniform,
        ];
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(CapsError::InvalidSpec(format!(
                "behaviour weights must be non-negative: {w:?}"
            )));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(CapsError::InvalidSpec(format!(
                "behaviour weights sum to {sum}, expected 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon_explore) {
            return Err(CapsError::InvalidSpec(format!(
                "epsilon_explore {} outside [0, 1]",
                self.epsilon_explore
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub return_min: f64,
    pub return_max: f64,
    pub return_mean: f64,
    /// Episode cost (final state included) to episode count.
    pub cost_histogram: BTreeMap<u32, usize>,
    /// Distinct `(s, a, t)` over `n_states * n_actions * horizon`.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    env_name: String,
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    n_episodes: usize,
    seed: u64,
    behavior: BehaviorSpec,
    state_costs: Vec<(usize, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub env_name: String,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub n_episodes: usize,
    pub seed: u64,
    pub behavior: BehaviorSpec,
    pub state_costs: BTreeMap<usize, u32>,
    pub transitions: Vec<Transition>,
    pub stats: DatasetStats,
}

impl OfflineDataset {
    /// Assembles a dataset from episode-ordered transitions, recording the
    /// observed state costs and computing the summary statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn from_transitions(
        cmdp: &Cmdp,
        transitions: Vec<Transition>,
        n_episodes: usize,
        seed: u64,
        behavior: BehaviorSpec,
    ) -> Result<Self> {
        if transitions.is_empty() || n_episodes == 0 {
            return Err(CapsError::EmptyDataset);
        }
        let mut state_costs = BTreeMap::new();
        for tr in &transitions {
            state_costs.insert(tr.s, tr.c);
            state_costs.insert(tr.s_next, cmdp.cost(tr.s_next));
        }
        let mut ds = Self {
            env_name: cmdp.name().to_string(),
            n_states: cmdp.n_states(),
            n_actions: cmdp.n_actions(),
            horizon: cmdp.horizon(),
            n_episodes,
            seed,
            behavior,
            state_costs,
            transitions,
            stats: DatasetStats {
                return_min: 0.0,
                return_max: 0.0,
                return_mean: 0.0,
                cost_histogram: BTreeMap::new(),
                coverage: 0.0,
            },
        };
        ds.check_structure()?;
        ds.stats = dataset_stats(&ds)?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Episodes as contiguous slices of length `horizon`.
    pub fn episodes(&self) -> impl Iterator<Item = &[Transition]> {
        self.transitions.chunks(self.horizon)
    }

    /// Observed cost of a state; states never seen get the largest observed cost.
    pub fn state_cost(&self, s: usize) -> u32 {
        self.state_costs
            .get(&s)
            .copied()
            .unwrap_or_else(|| self.max_observed_cost())
    }

    pub fn max_observed_cost(&self) -> u32 {
        self.state_costs.values().copied().max().unwrap_or(0)
    }

    /// Episode cost including the final state's observed cost.
    pub fn episode_cost(&self, episode: &[Transition]) -> u32 {
        let steps: u32 = episode.iter().map(|t| t.c).sum();
        steps + episode.last().map_or(0, |t| self.state_cost(t.s_next))
    }

    fn check_structure(&self) -> Result<()> {
        if self.horizon == 0 || self.transitions.len() != self.n_episodes * self.horizon {
            return Err(CapsError::InvalidSpec(format!(
                "{} transitions do not form {} episodes of length {}",
                self.transitions.len(),
                self.n_episodes,
                self.horizon
            )));
        }
        for (i, tr) in self.transitions.iter().enumerate() {
            let expected_t = i % self.horizon;
            if tr.t != expected_t
                || tr.done != (tr.t + 1 == self.horizon)
                || tr.s >= self.n_states
                || tr.s_next >= self.n_states
                || tr.a >= self.n_actions
            {
                return Err(CapsError::InvalidSpec(format!(
                    "transition {i} is inconsistent with the episode layout: {tr:?}"
                )));
            }
        }
        Ok(())
    }

    /// Caller-side check that the dataset was collected on `cmdp`.
    pub fn check_compatible(&self, cmdp: &Cmdp) -> Result<()> {
        if self.env_name != cmdp.name() {
            return Err(CapsError::Incompatible(format!(
                "dataset env `{}` vs environment `{}`",
                self.env_name,
                cmdp.name()
            )));
        }
        if (self.n_states, self.n_actions, self.horizon)
            != (cmdp.n_states(), cmdp.n_actions(), cmdp.horizon())
        {
            return Err(CapsError::Incompatible(format!(
                "dataset shape ({}, {}, {}) vs environment ({}, {}, {})",
                self.n_states,
                self.n_actions,
                self.horizon,
                cmdp.n_states(),
                cmdp.n_actions(),
                cmdp.horizon()
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let header = Header {
            env_name: self.env_name.clone(),
            n_states: self.n_states,
            n_actions: self.n_actions,
            horizon: self.horizon,
            n_episodes: self.n_episodes,
            seed: self.seed,
            behavior: self.behavior,
            state_costs: self.state_costs.iter().map(|(&s, &c)| (s, c)).collect(),
        };
        let mut out = serde_json::to_string(&header).expect("header serialisation");
        out.push('\n');
        out.push_str(&COLUMNS.join(","));
        out.push('\n');
        for tr in &self.transitions {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                tr.t,
                tr.s,
                tr.a,
                fmt17(tr.r),
                tr.c,
                tr.s_next,
                u8::from(tr.done)
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (first, rest) = text
            .split_once('\n')
            .ok_or_else(|| CapsError::MalformedHeader("missing header line".into()))?;
        let header: Header = serde_json::from_str(first)
            .map_err(|e| CapsError::MalformedHeader(e.to_string()))?;
        header
            .behavior
            .validate()
            .map_err(|e| CapsError::MalformedHeader(e.to_string()))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(rest.as_bytes());
        let columns = reader.headers()?.clone();
        if columns.iter().collect::<Vec<_>>() != COLUMNS {
            return Err(CapsError::MalformedHeader(format!(
                "expected columns {:?}, found {:?}",
                COLUMNS.join(","),
                columns.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut transitions = Vec::new();
        for record in reader.records() {
            let record = record?;
            // Line numbers count the JSON header line as well.
            let line = record.position().map_or(0, |p| p.line()) + 1;
            if record.len() != COLUMNS.len() {
                return Err(CapsError::RowArity {
                    line,
                    expected: COLUMNS.len(),
                    found: record.len(),
                });
            }
            let parse_usize = |i: usize, field: &'static str| -> Result<usize> {
                record[i].parse().map_err(|_| CapsError::FieldParse {
                    line,
                    field,
                    value: record[i].to_string(),
                })
            };
            let c: u32 = record[4].parse().map_err(|_| CapsError::NonIntegerCost {
                line,
                value: record[4].to_string(),
            })?;
            let r: f64 = record[3].parse().map_err(|_| CapsError::FieldParse {
                line,
                field: "r",
                value: record[3].to_string(),
            })?;
            let done = match &record[6] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(CapsError::FieldParse {
                        line,
                        field: "done",
                        value: other.to_string(),
                    })
                }
            };
            transitions.push(Transition {
                t: parse_usize(0, "t")?,
                s: parse_usize(1, "s")?,
                a: parse_usize(2, "a")?,
                r,
                c,
                s_next: parse_usize(5, "s_next")?,
                done,
            });
        }
        if transitions.is_empty() {
            return Err(CapsError::EmptyDataset);
        }
        let mut ds = Self {
            env_name: header.env_name,
            n_states: header.n_states,
            n_actions: header.n_actions,
            horizon: header.horizon,
            n_episodes: header.n_episodes,
            seed: header.seed,
            behavior: header.behavior,
            state_costs: header.state_costs.into_iter().collect(),
            transitions,
            stats: DatasetStats {
                return_min: 0.0,
                return_max: 0.0,
                return_mean: 0.0,
                cost_histogram: BTreeMap::new(),
                coverage: 0.0,
            },
        };
        ds.check_structure()?;
        ds.stats = dataset_stats(&ds)?;
        Ok(ds)
    }

    /// SHA-256 of the serialised dataset, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

pub fn save_dataset(ds: &OfflineDataset, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, ds.to_text().as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let text = fs::read_to_string(path).map_err(|e| CapsError::io(path, e))?;
    OfflineDataset::from_text(&text)
}

pub fn dataset_stats(ds: &OfflineDataset) -> Result<DatasetStats> {
    if ds.transitions.is_empty() {
        return Err(CapsError::EmptyDataset);
    }
    let mut return_min = f64::INFINITY;
    let mut return_max = f64::NEG_INFINITY;
    let mut return_sum = 0.0;
    let mut cost_histogram = BTreeMap::new();
    let mut n = 0usize;
    for ep in ds.episodes() {
        let ret: f64 = ep.iter().map(|t| t.r).sum();
        return_min = return_min.min(ret);
        return_max = return_max.max(ret);
        return_sum += ret;
        *cost_histogram.entry(ds.episode_cost(ep)).or_insert(0) += 1;
        n += 1;
    }
    let distinct: HashSet<(usize, usize, usize)> =
        ds.transitions.iter().map(|t| (t.s, t.a, t.t)).collect();
    let coverage = distinct.len() as f64 / (ds.n_states * ds.n_actions * ds.horizon) as f64;
    Ok(DatasetStats {
        return_min,
        return_max,
        return_mean: return_sum / n as f64,
        cost_histogram,
        coverage,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Component {
    RewardGreedy,
    CostGreedy,
    Uniform,
}

/// Rolls out `n_episodes` episodes. Each episode draws one behaviour component
/// by weight and acts greedily for it (uniformly for the uniform component),
/// replacing the action by a uniform one with probability `epsilon_explore`.
/// Episode `i` uses the sub-stream `seed.derive("dataset", i)`.
pub fn generate_dataset(
    cmdp: &Cmdp,
    spec: &BehaviorSpec,
    n_episodes: usize,
    seed: RngSeed,
    vt: &ValueTables,
) -> Result<OfflineDataset> {
    if n_episodes == 0 {
        return Err(CapsError::EmptyDataset);
    }
    spec.validate()?;
    let na = cmdp.n_actions();
    let mut transitions = Vec::with_capacity(n_episodes * cmdp.horizon());
    for ep in 0..n_episodes {
        let mut rng = seed.derive("dataset", ep as u64).rng();
        let u: f64 = rng.random();
        let component = if u < spec.weight_reward_greedy {
            Component::RewardGreedy
        } else if u < spec.weight_reward_greedy + spec.weight_cost_greedy {
            Component::CostGreedy
        } else {
            Component::Uniform
        };
        let mut s = cmdp.sample_initial(&mut rng);
        for t in 0..cmdp.horizon() {
            let explore = spec.epsilon_explore > 0.0 && rng.random::<f64>() < spec.epsilon_explore;
            let a = if explore || component == Component::Uniform {
                rng.random_range(0..na)
            } else if component == Component::RewardGreedy {
                vt.reward.greedy_action(t, s)
            } else {
                vt.cost.greedy_action(t, s)
            };
            let s_next = cmdp.sample_next(s, a, &mut rng);
            transitions.push(Transition {
                t,
                s,
                a,
                r: cmdp.reward(s, a),
                c: cmdp.cost(s),
                s_next,
                done: t + 1 == cmdp.horizon(),
            });
            s = s_next;
        }
    }
    OfflineDataset::from_transitions(cmdp, transitions, n_episodes, seed.seed, *spec)
}

/// Every action sequence from every start state of a deterministic CMDP.
/// Every `(s, a, t)` with `s` reachable at `t` from some state appears, so
/// the empirical model equals the true model on that set.
pub fn exhaustive_dataset(cmdp: &Cmdp) -> Result<OfflineDataset> {
    if !cmdp.is_deterministic() {
        return Err(CapsError::InvalidSpec(
            "exhaustive enumeration requires deterministic transitions".into(),
        ));
    }
    let (ns, na, horizon) = (cmdp.n_states(), cmdp.n_actions(), cmdp.horizon());
    let n_sequences = (na as u64).checked_pow(horizon as u32).unwrap_or(u64::MAX);
    let total = n_sequences.saturating_mul((ns * horizon) as u64);
    if total > 5_000_000 {
        return Err(CapsError::InvalidSpec(format!(
            "exhaustive dataset would hold {total} transitions"
        )));
    }
    let successor = |s: usize, a: usize| {
        cmdp.next_distribution(s, a)
            .iter()
            .position(|&p| p > 0.0)
            .expect("deterministic row has a successor")
    };
    let mut transitions = Vec::with_capacity(total as usize);
    for start in 0..ns {
        for code in 0..n_sequences {
            let mut rest = code;
            let mut s = start;
            for t in 0..horizon {
                let a = (rest % na as u64) as usize;
                rest /= na as u64;
                let s_next = successor(s, a);
                transitions.push(Transition {
                    t,
                    s,
                    a,
                    r: cmdp.reward(s, a),
                    c: cmdp.cost(s),
                    s_next,
                    done: t + 1 == horizon,
                });
                s = s_next;
            }
        }
    }
    OfflineDataset::from_transitions(
        cmdp,
        transitions,
        ns * n_sequences as usize,
        0,
        BehaviorSpec::uniform(),
    )
}

/// Distinct `(s, a)` pairs present in the data.
pub fn observed_pairs(ds: &OfflineDataset) -> BTreeSet<(usize, usize)> {
    ds.transitions.iter().map(|t| (t.s, t.a)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{chain3, gridworld3x3, make_random_cmdp, CHAIN3_RISKY};

    fn gen(cmdp: &Cmdp, spec: BehaviorSpec, n: usize, seed: u64) -> OfflineDataset {
        let vt = ValueTables::solve(cmdp);
        generate_dataset(cmdp, &spec, n, RngSeed::new(seed), &vt).unwrap()
    }

    #[test]
    fn reward_greedy_chain3() {
        let spec = BehaviorSpec {
            weight_reward_greedy: 1.0,
            weight_cost_greedy: 0.0,
            weight_uniform: 0.0,
            epsilon_explore: 0.0,
        };
        let ds = gen(&chain3(), spec, 25, 1);
        assert!(ds.transitions.iter().all(|t| t.a == CHAIN3_RISKY));
        assert_eq!(ds.stats.cost_histogram, BTreeMap::from([(1, 25)]));
        assert_eq!(ds.stats.return_min, 1.0);
        assert_eq!(ds.stats.return_max, 1.0);
    }

    #[test]
    fn uniform_coverage_approaches_one() {
        let ds = gen(&chain3(), BehaviorSpec::uniform(), 200, 2);
        // Only s0 is visited at t = 0, so the reachable fraction is 2 / 6.
        assert!((ds.stats.coverage - 2.0 / 6.0).abs() < 1e-12);
        let grid = gridworld3x3();
        let small = gen(&grid, BehaviorSpec::uniform(), 20, 3).stats.coverage;
        let large = gen(&grid, BehaviorSpec::uniform(), 2000, 3).stats.coverage;
        assert!(large > small);
    }

    #[test]
    fn exhaustive_covers_everything() {
        let ds = exhaustive_dataset(&chain3()).unwrap();
        assert_eq!(ds.stats.coverage, 1.0);
        let ds = exhaustive_dataset(&gridworld3x3()).unwrap();
        assert_eq!(ds.stats.coverage, 1.0);
        assert!(exhaustive_dataset(
            &crate::cmdp::make_hazard_gridworld(&crate::cmdp::gridworld3x3_spec(0.1)).unwrap()
        )
        .is_err());
    }

    #[test]
    fn single_episode_stats() {
        let ds = gen(&gridworld3x3(), BehaviorSpec::uniform(), 1, 9);
        let ret: f64 = ds.transitions.iter().map(|t| t.r).sum();
        assert_eq!(ds.stats.return_min, ret);
        assert_eq!(ds.stats.return_max, ret);
    }

    #[test]
    fn zero_episodes_is_an_error() {
        let m = chain3();
        let vt = ValueTables::solve(&m);
        assert!(matches!(
            generate_dataset(&m, &BehaviorSpec::uniform(), 0, RngSeed::new(0), &vt),
            Err(CapsError::EmptyDataset)
        ));
    }

    #[test]
    fn determinism_and_round_trip() {
        let m = make_random_cmdp(6, 3, 4, 2, 2, RngSeed::new(4)).unwrap();
        let a = gen(&m, BehaviorSpec::mixed(), 50, 17);
        let b = gen(&m, BehaviorSpec::mixed(), 50, 17);
        assert_eq!(a.to_text(), b.to_text());
        let back = OfflineDataset::from_text(&a.to_text()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_text(), a.to_text());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = gen(&gridworld3x3(), BehaviorSpec::mixed(), 10, 5);
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_file_reports_row_arity() {
        let ds = gen(&gridworld3x3(), BehaviorSpec::mixed(), 3, 5);
        let text = ds.to_text();
        let cut = text.trim_end().rfind(',').unwrap();
        let truncated = &text[..cut];
        match OfflineDataset::from_text(truncated) {
            Err(CapsError::RowArity { line, found, .. }) => {
                assert_eq!(found, 6);
                assert_eq!(line as usize, 2 + ds.len());
            }
            other => panic!("expected row arity error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_are_distinct() {
        let ds = gen(&chain3(), BehaviorSpec::mixed(), 2, 5);
        let text = ds.to_text();
        assert!(matches!(
            OfflineDataset::from_text(&text.replacen("{", "[", 1)),
            Err(CapsError::MalformedHeader(_))
        ));
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut fields: Vec<String> = lines[2].split(',').map(String::from).collect();
        fields[4] = "0.5".into();
        lines[2] = fields.join(",");
        match OfflineDataset::from_text(&(lines.join("\n") + "\n")) {
            Err(CapsError::NonIntegerCost { line, value }) => {
                assert_eq!(line, 3);
                assert_eq!(value, "0.5");
            }
            other => panic!("expected cost error, got {other:?}"),
        }
    }

    #[test]
    fn env_mismatch_is_caught_by_caller() {
        let ds = gen(&chain3(), BehaviorSpec::mixed(), 2, 5);
        assert!(ds.check_compatible(&chain3()).is_ok());
        assert!(matches!(
            ds.check_compatible(&gridworld3x3()),
            Err(CapsError::Incompatible(_))
        ));
    }

    #[test]
    fn transitions_respect_model() {
        let m = make_random_cmdp(6, 3, 5, 3, 3, RngSeed::new(8)).unwrap();
        let ds = gen(&m, BehaviorSpec::mixed(), 100, 8);
        for tr in &ds.transitions {
            assert!(m.support(tr.s, tr.a).unwrap().contains(&tr.s_next));
            assert_eq!(tr.c, m.cost(tr.s));
            assert_eq!(tr.r, m.reward(tr.s, tr.a));
        }
        for ep in ds.episodes() {
            for w in ep.windows(2) {
                assert_eq!(w[0].s_next, w[1].s);
            }
        }
    }
}
