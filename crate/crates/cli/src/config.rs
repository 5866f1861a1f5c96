use std::fs;
use std::path::{Path, PathBuf};

use caps_core::cmdp::EnvSpec;
use caps_core::dataset::BehaviorSpec;
use caps_core::eval::{AblationKind, EvalConfig, FuzzSpec};
use caps_core::trainers::{Algo, TrainConfig};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

/// One file drives every command; each command reads the sections it needs.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the dataset, training and fuzzing seeds when set.
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub env: Option<EnvSpec>,
    pub dataset: Option<DatasetSection>,
    pub train: Option<TrainSection>,
    /// Artifact directory for `eval`; when absent `eval` trains first.
    pub artifacts: Option<PathBuf>,
    pub eval: Option<EvalConfig>,
    pub sweep: Option<SweepSection>,
    pub ablation: Option<AblationSection>,
    pub fuzz: Option<FuzzSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Existing dataset file; generation settings are ignored when set.
    pub path: Option<PathBuf>,
    #[serde(default = "BehaviorSpec::mixed")]
    pub behavior: BehaviorSpec,
    #[serde(default = "default_episodes")]
    pub n_episodes: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_episodes() -> usize {
    5000
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            path: None,
            behavior: BehaviorSpec::mixed(),
            n_episodes: default_episodes(),
            seed: 0,
        }
    }
}

/// `algo` selects a preset; every other key overrides one preset field.
#[derive(Debug, Clone)]
pub struct TrainSection(pub TrainConfig);

impl<'de> Deserialize<'de> for TrainSection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let mut table = toml::Table::deserialize(d)?;
        let algo: Algo = match table.get("algo") {
            Some(v) => v.clone().try_into().map_err(D::Error::custom)?,
            None => return Err(D::Error::missing_field("algo")),
        };
        let preset = toml::Table::try_from(TrainConfig::preset(algo)).map_err(D::Error::custom)?;
        for (key, value) in preset {
            table.entry(key).or_insert(value);
        }
        TrainConfig::deserialize(toml::Value::Table(table))
            .map(TrainSection)
            .map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub envs: Vec<EnvSpec>,
    pub threshold_sets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub kinds: Vec<AblationKind>,
    pub envs: Vec<EnvSpec>,
    #[serde(default = "default_algos")]
    pub algos: Vec<Algo>,
    #[serde(default = "default_heads")]
    pub heads: Vec<usize>,
    #[serde(default = "default_threshold_sets")]
    pub threshold_sets: Vec<Vec<f64>>,
}

fn default_algos() -> Vec<Algo> {
    vec![Algo::Iql, Algo::Sacbc]
}

fn default_heads() -> Vec<usize> {
    vec![2, 4, 8]
}

fn default_threshold_sets() -> Vec<Vec<f64>> {
    vec![vec![10.0, 20.0, 40.0], vec![20.0, 40.0, 80.0]]
}

impl RunConfig {
    /// Parses TOML; errors name the offending key path.
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Schema(e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Schema(format!("at `{path}`: {}", e.into_inner()))
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingInput(format!("{}: {e}", path.display())),
            _ => CliError::Invariant(format!("{}: {e}", path.display())),
        })?;
        Self::from_toml(&text)
    }

    pub fn env(&self) -> CliResult<&EnvSpec> {
        self.env.as_ref().ok_or_else(|| missing_section("env"))
    }

    pub fn dataset(&self) -> DatasetSection {
        let mut ds = self.dataset.clone().unwrap_or_default();
        if let Some(seed) = self.seed {
            ds.seed = seed;
        }
        ds
    }

    pub fn train(&self) -> CliResult<TrainConfig> {
        let mut cfg = self.train.clone().ok_or_else(|| missing_section("train"))?.0;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval(&self) -> CliResult<EvalConfig> {
        let cfg = self.eval.clone().unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fuzz(&self) -> CliResult<FuzzSpec> {
        let mut spec = self.fuzz.clone().unwrap_or_default();
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        spec.validate()?;
        Ok(spec)
    }
}

pub fn missing_section(name: &str) -> CliError {
    CliError::Schema(format!("missing section `{name}`"))
}
