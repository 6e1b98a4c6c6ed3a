//! Run artifacts: per-episode CSV, JSON summary, and seed-merged curve tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ActorKind, CriticKind, ExperimentConfig, Noise};
use super::metrics::{mean_ci, MeanCi};
use super::run::RunResult;
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 7] =
    ["episode", "exact_value", "mixture_value", "cum_regret", "optimism_violation_rate", "proj_err_max", "wall_ms"];

/// Episodes averaged for the headline "final value".
pub const TAIL_EPISODES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub episode: usize,
    pub exact_value: f64,
    pub mixture_value: f64,
    pub cum_regret: f64,
    pub optimism_violation_rate: f64,
    pub proj_err_max: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub seed: u64,
    pub config_hash: String,
    pub csv: String,
    pub episodes_completed: usize,
    pub aborted: Option<String>,
    pub optimal_value: f64,
    pub final_value: f64,
    /// Mean exact value over the last [`TAIL_EPISODES`] episodes, with its interval.
    pub tail_value: MeanCi,
    pub final_mixture_value: f64,
    pub final_regret: f64,
    pub chains: usize,
    pub zeta_inv: f64,
    pub coreset_size: Option<usize>,
    pub policy_parameters: usize,
    pub max_optimism_violation_rate: f64,
    pub max_proj_err: f64,
    pub bound_violations: usize,
    pub max_implicit_gap: Option<f64>,
    pub max_decomposition_residual: Option<f64>,
    pub config: ExperimentConfig,
}

/// Curve name used when a config carries no label, e.g. `lmc-npg-exp`.
pub fn algorithm_name(config: &ExperimentConfig) -> String {
    if let Some(label) = &config.label {
        return label.clone();
    }
    let critic = match (config.critic, config.noise) {
        (CriticKind::RidgeGreedy, _) => return "lsvi-ridge".into(),
        (CriticKind::LmcNoNoise, _) | (CriticKind::Lmc, Noise::Off) => "lmc-nonoise",
        (CriticKind::Lmc, Noise::On) => "lmc",
    };
    let actor = match config.actor {
        ActorKind::NpgExplicit => "npg-exp",
        ActorKind::NpgImplicit => "npg-imp",
        ActorKind::SpmaExplicit => "spma-exp",
        ActorKind::None => "greedy",
    };
    format!("{critic}-{actor}")
}

fn max_of(xs: impl Iterator<Item = f64>) -> f64 {
    xs.fold(0.0, f64::max)
}

pub fn summarize(result: &RunResult, csv_name: &str) -> RunSummary {
    let rec = &result.records;
    let n = rec.len();
    let tail: Vec<f64> = rec[n.saturating_sub(TAIL_EPISODES)..].iter().map(|r| r.exact_value).collect();
    let opt_max = |f: fn(&super::run::EpisodeRecord) -> Option<f64>| {
        let v: Vec<f64> = rec.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| max_of(v.into_iter()))
    };
    RunSummary {
        algorithm: algorithm_name(&result.config),
        seed: result.config.seed,
        config_hash: result.config.hash_hex(),
        csv: csv_name.to_string(),
        episodes_completed: n,
        aborted: result.aborted.clone(),
        optimal_value: result.optimal_value,
        final_value: rec.last().map_or(f64::NAN, |r| r.exact_value),
        tail_value: mean_ci(&tail),
        final_mixture_value: rec.last().map_or(f64::NAN, |r| r.mixture_value),
        final_regret: rec.last().map_or(0.0, |r| r.cum_regret),
        chains: result.chains,
        zeta_inv: result.zeta_inv,
        coreset_size: result.coreset_size,
        policy_parameters: result.policy_parameters,
        max_optimism_violation_rate: max_of(rec.iter().map(|r| r.optimism_violation_rate)),
        max_proj_err: max_of(rec.iter().map(|r| r.proj_err_max)),
        bound_violations: rec.iter().map(|r| r.bound_violations).sum(),
        max_implicit_gap: opt_max(|r| r.implicit_gap),
        max_decomposition_residual: opt_max(|r| r.decomposition_residual),
        config: result.config.clone(),
    }
}

pub fn write_episode_csv(path: &Path, result: &RunResult) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    for r in &result.records {
        w.serialize(CsvRow {
            episode: r.episode,
            exact_value: r.exact_value,
            mixture_value: r.mixture_value,
            cum_regret: r.cum_regret,
            optimism_violation_rate: r.optimism_violation_rate,
            proj_err_max: r.proj_err_max,
            wall_ms: r.wall_ms,
        })?;
    }
    if result.records.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_episode_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<CsvRow>, _>>()?;
    Ok(rows)
}

/// File stem for one run: `<config-hash>_seed<seed>`.
pub fn artifact_stem(config: &ExperimentConfig) -> String {
    format!("{}_seed{}", config.hash_hex(), config.seed)
}

/// Paths of the CSV and JSON summary a run writes into `dir`.
pub fn artifact_paths(dir: &Path, config: &ExperimentConfig) -> (PathBuf, PathBuf) {
    let stem = artifact_stem(config);
    (dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.json")))
}

/// Writes the CSV and JSON summary of a run; returns their paths.
pub fn write_run(dir: &Path, result: &RunResult) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let (csv_path, json_path) = artifact_paths(dir, &result.config);
    let csv_name = csv_path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    let summary = summarize(result, &csv_name);
    // Write under temporary names so a crash leaves no half-written artifact.
    let tmp_csv = csv_path.with_extension("csv.tmp");
    let tmp_json = json_path.with_extension("json.tmp");
    write_episode_csv(&tmp_csv, result)?;
    fs::write(&tmp_json, serde_json::to_string_pretty(&summary)? + "\n")?;
    fs::rename(&tmp_csv, &csv_path)?;
    fs::rename(&tmp_json, &json_path)?;
    Ok((csv_path, json_path))
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(path)?)?;
    summary.config.validate()?;
    Ok(summary)
}

/// One row of the long-format curve table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub algorithm: String,
    pub metric: String,
    pub episode: usize,
    pub mean: f64,
    /// Empty for a single seed.
    pub ci95: Option<f64>,
    pub n: usize,
}

const CURVE_METRICS: [&str; 3] = ["exact_value", "mixture_value", "cum_regret"];

/// Merges every run summary found in `dir` into mean and 95% interval per
/// `(algorithm, metric, episode)`.
pub fn aggregate_curves(dir: &Path) -> Result<Vec<CurvePoint>> {
    if !dir.is_dir() {
        return Err(Error::InvalidParameter(format!("{} is not a directory", dir.display())));
    }
    let mut summaries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    summaries.sort();
    // algorithm -> metric -> episode -> values
    let mut table: BTreeMap<String, BTreeMap<usize, BTreeMap<usize, Vec<f64>>>> = BTreeMap::new();
    let mut found = 0;
    for path in summaries {
        let Ok(summary) = read_summary(&path) else { continue };
        let rows = read_episode_csv(&dir.join(&summary.csv))?;
        found += 1;
        let per_metric = table.entry(summary.algorithm).or_default();
        for row in rows {
            let values = [row.exact_value, row.mixture_value, row.cum_regret];
            for (m, v) in values.into_iter().enumerate() {
                per_metric.entry(m).or_default().entry(row.episode).or_default().push(v);
            }
        }
    }
    if found == 0 {
        return Err(Error::InvalidParameter(format!("no run artifacts in {}", dir.display())));
    }
    let mut out = Vec::new();
    for (algorithm, metrics) in table {
        for (m, episodes) in metrics {
            for (episode, values) in episodes {
                let c = mean_ci(&values);
                out.push(CurvePoint {
                    algorithm: algorithm.clone(),
                    metric: CURVE_METRICS[m].to_string(),
                    episode,
                    mean: c.mean,
                    ci95: c.ci95,
                    n: c.n,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_curves(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run::run_experiment;

    fn config(seed: u64) -> ExperimentConfig {
        ExperimentConfig::default()
            .with_overrides(&[
                "horizon=4",
                "episodes=3",
                "critic_steps=10",
                "record_timing=false",
                &format!("seed={seed}"),
            ])
            .unwrap()
    }

    #[test]
    fn csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let result = run_experiment(&config(0)).unwrap();
        let (csv_path, json_path) = write_run(dir.path(), &result).unwrap();
        let text = fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert!(!text.contains('\r'));
        let rows = read_episode_csv(&csv_path).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].exact_value, result.records[2].exact_value);
        let summary = read_summary(&json_path).unwrap();
        assert_eq!(summary.config, result.config);
    }

    #[test]
    fn curves_constant_and_single_seed() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..3 {
            write_run(dir.path(), &run_experiment(&config(seed)).unwrap()).unwrap();
        }
        let curves = aggregate_curves(dir.path()).unwrap();
        assert_eq!(curves.len(), 3 * 3);
        assert!(curves.iter().all(|c| c.n == 3 && c.ci95.is_some()));

        let single = tempfile::tempdir().unwrap();
        write_run(single.path(), &run_experiment(&config(0)).unwrap()).unwrap();
        assert!(aggregate_curves(single.path()).unwrap().iter().all(|c| c.ci95.is_none()));
    }

    #[test]
    fn constant_series_has_zero_width() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..4 {
            let mut c = config(seed).with_overrides(&["env_seed=11", "episodes=1"]).unwrap();
            c.label = Some("fixed".into());
            write_run(dir.path(), &run_experiment(&c).unwrap()).unwrap();
        }
        for p in aggregate_curves(dir.path()).unwrap() {
            assert_eq!(p.ci95, Some(0.0), "{p:?}");
        }
    }

    #[test]
    fn missing_artifacts_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(aggregate_curves(dir.path()).is_err());
        assert!(aggregate_curves(&dir.path().join("absent")).is_err());
    }
}
