use std::fs;
use std::path::{Path, PathBuf};

use caps_core::cmdp::Cmdp;
use caps_core::dataset::{generate_dataset, load_dataset, save_dataset, OfflineDataset};
use caps_core::eval::{
    eval_csv, evaluate, run_ablation, sweep_thresholds, verify_fuzz, AblationSuite, DatasetRecipe,
    SweepMethod,
};
use caps_core::fsutil::write_atomic;
use caps_core::oracle::ValueTables;
use caps_core::rng::RngSeed;
use caps_core::trainers::{load_artifacts, oracle_exact, save_artifacts, train, TrainedArtifacts};
use log::info;
use serde::Serialize;

use crate::config::{missing_section, RunConfig};
use crate::error::{CliError, CliResult};

pub const ENV_FILE: &str = "env.json";
pub const DATASET_FILE: &str = "dataset.csv";
pub const ARTIFACT_DIR: &str = "artifacts";

fn out_path(out: &Path, name: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(out).map_err(|e| CliError::Invariant(format!("{}: {e}", out.display())))?;
    Ok(out.join(name))
}

fn write_text(out: &Path, name: &str, text: &str) -> CliResult<PathBuf> {
    let path = out_path(out, name)?;
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> CliResult<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Invariant(e.to_string()))?;
    text.push('\n');
    write_text(out, name, &text)
}

fn dataset_for(cfg: &RunConfig, cmdp: &Cmdp) -> CliResult<OfflineDataset> {
    let section = cfg.dataset();
    if let Some(path) = &section.path {
        info!("loading dataset {}", path.display());
        return Ok(load_dataset(path)?);
    }
    let vt = ValueTables::solve(cmdp);
    Ok(generate_dataset(
        cmdp,
        &section.behavior,
        section.n_episodes,
        RngSeed::new(section.seed),
        &vt,
    )?)
}

fn artifacts_for(cfg: &RunConfig, cmdp: &Cmdp) -> CliResult<TrainedArtifacts> {
    match &cfg.artifacts {
        Some(dir) => Ok(load_artifacts(dir)?),
        None => Ok(train(&dataset_for(cfg, cmdp)?, &cfg.train()?)?),
    }
}

pub fn env_gen(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let cmdp = cfg.env()?.build()?;
    let path = out_path(out, ENV_FILE)?;
    cmdp.save(&path)?;
    Ok(format!(
        "env-gen: {} ({} states, {} actions, T = {}) -> {}",
        cmdp.name(),
        cmdp.n_states(),
        cmdp.n_actions(),
        cmdp.horizon(),
        path.display()
    ))
}

pub fn dataset_gen(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let cmdp = cfg.env()?.build()?;
    let ds = dataset_for(cfg, &cmdp)?;
    let path = out_path(out, DATASET_FILE)?;
    save_dataset(&ds, &path)?;
    Ok(format!(
        "dataset-gen: {} episodes, {} transitions of {} -> {}",
        ds.n_episodes,
        ds.len(),
        ds.env_name,
        path.display()
    ))
}

pub fn train_cmd(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let cmdp = cfg.env()?.build()?;
    let tc = cfg.train()?;
    let ds = dataset_for(cfg, &cmdp)?;
    let art = train(&ds, &tc)?;
    let dir = out_path(out, ARTIFACT_DIR)?;
    save_artifacts(&art, &dir)?;
    Ok(format!(
        "train: {} K = {} on {} ({} critic passes) -> {}",
        tc.algo.as_str(),
        art.k(),
        ds.env_name,
        art.meta.counters.critic_passes,
        dir.display()
    ))
}

pub fn eval_cmd(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let cmdp = cfg.env()?.build()?;
    let ec = cfg.eval()?;
    let art = artifacts_for(cfg, &cmdp)?;
    let report = evaluate(&art, &cmdp, &ec)?;
    let csv = write_text(out, "eval.csv", &eval_csv(std::slice::from_ref(&report))?)?;
    write_json(out, "eval.json", &report)?;
    Ok(format!(
        "eval: {} safe at {}/{} thresholds, mean normalized reward {:.4}, cost {:.4} -> {}",
        cmdp.name(),
        report.n_safe,
        report.n_thresholds,
        report.mean_normalized_reward,
        report.mean_normalized_cost,
        csv.display()
    ))
}

pub fn sweep_cmd(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let section = cfg.sweep.as_ref().ok_or_else(|| missing_section("sweep"))?;
    let tc = cfg.train()?;
    let ec = cfg.eval()?;
    let cmdps = section
        .envs
        .iter()
        .map(|e| e.build())
        .collect::<Result<Vec<_>, _>>()?;
    let mut learned = Vec::with_capacity(cmdps.len());
    let mut exact = Vec::with_capacity(cmdps.len());
    for cmdp in &cmdps {
        info!("sweep: training on {}", cmdp.name());
        learned.push(train(&dataset_for(cfg, cmdp)?, &tc)?);
        exact.push(oracle_exact(cmdp, tc.k)?);
    }
    let methods = vec![
        SweepMethod {
            name: format!("CAPS({})", tc.algo.as_str()),
            artifacts: learned,
        },
        SweepMethod {
            name: "CAPS(exact)".into(),
            artifacts: exact,
        },
    ];
    let table = sweep_thresholds(&methods, &cmdps, &section.threshold_sets, &ec)?;
    let path = write_text(out, "sweep.csv", &table.to_csv()?)?;
    write_json(out, "sweep.json", &table)?;
    let cells: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{} [{}] {}/{}", r.method, r.threshold_set, r.n_safe, r.n_total))
        .collect();
    Ok(format!("sweep: {} -> {}", cells.join(", "), path.display()))
}

pub fn ablate_cmd(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let section = cfg.ablation.as_ref().ok_or_else(|| missing_section("ablation"))?;
    if section.kinds.is_empty() {
        return Err(CliError::Schema("ablation.kinds is empty".into()));
    }
    let ds = cfg.dataset();
    if ds.path.is_some() {
        return Err(CliError::Schema(
            "ablation generates one dataset per env; dataset.path is not supported".into(),
        ));
    }
    let suite = AblationSuite {
        envs: section.envs.clone(),
        dataset: DatasetRecipe {
            behavior: ds.behavior,
            n_episodes: ds.n_episodes,
            seed: ds.seed,
        },
        train: cfg.train()?,
        algos: section.algos.clone(),
        heads: section.heads.clone(),
        eval: cfg.eval()?,
        threshold_sets: section.threshold_sets.clone(),
    };
    let mut parts = Vec::new();
    for &kind in &section.kinds {
        info!("ablation: {}", kind.as_str());
        let report = run_ablation(kind, &suite)?;
        let name = kind.as_str();
        write_text(out, &format!("ablation-{name}.csv"), &report.to_csv()?)?;
        if report.sweep.is_none() {
            write_text(out, &format!("ablation-{name}-detail.csv"), &report.detail_csv()?)?;
        }
        write_json(out, &format!("ablation-{name}.json"), &report)?;
        let observed = report
            .observations
            .iter()
            .filter(|o| o.status == caps_core::eval::ObservationStatus::Pass)
            .count();
        parts.push(format!(
            "{name} ({} arms, {observed}/{} findings reproduced)",
            report.arms.len(),
            report.observations.len()
        ));
    }
    Ok(format!("ablate: {} -> {}", parts.join(", "), out.display()))
}

pub fn verify_cmd(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let spec = cfg.fuzz()?;
    let report = verify_fuzz(&spec)?;
    let path = write_json(out, "verify.json", &report)?;
    let summary = format!(
        "verify: {} instances, {} checks, {} admissibility failures, max violation {:e} -> {}",
        report.instances,
        report.checks,
        report.admissibility_failures,
        report.max_violation,
        path.display()
    );
    if report.pass {
        Ok(summary)
    } else {
        Err(CliError::Violation(summary))
    }
}
