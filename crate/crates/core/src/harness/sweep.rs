//! Grid sweeps over configs and seeds, with best-config selection.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::ExperimentConfig;
use super::metrics::{mean_ci, MeanCi};
use super::output::{artifact_paths, read_summary, write_run, TAIL_EPISODES};
use super::run::run_experiment;
use crate::error::{invalid, Error, Result};

/// A named axis of values to cross with every other axis.
pub type GridAxis = (String, Vec<Value>);

/// The reference search space: step size, posterior temperature, critic step size,
/// with the critic step count pinned at 100.
pub fn reference_grid() -> Vec<GridAxis> {
    vec![
        ("eta".into(), vec![json!(0.1), json!(1.0), json!(10.0), json!(100.0)]),
        ("zeta_inv".into(), vec![json!(1e-2), json!(1e-3), json!(1e-4), json!(1e-5)]),
        ("critic_lr".into(), vec![json!(1e-2), json!(1e-3), json!(1e-4), json!(1e-5)]),
        ("critic_steps".into(), vec![json!(100)]),
    ]
}

/// Cartesian product of `grid` applied to `base`, first axis varying slowest.
pub fn expand_grid(base: &ExperimentConfig, grid: &[GridAxis]) -> Result<Vec<ExperimentConfig>> {
    let mut assignments: Vec<Vec<String>> = vec![vec![]];
    for (key, values) in grid {
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis `{key}` has no values")));
        }
        assignments = assignments
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push(format!("{key}={v}"));
                    next
                })
            })
            .collect();
    }
    assignments.iter().map(|a| base.with_overrides(a)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Per-seed mean exact value over the last [`TAIL_EPISODES`] episodes.
    pub tail_values: Vec<f64>,
    pub optimal_values: Vec<f64>,
    pub aborted: usize,
    pub score: MeanCi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub entries: Vec<SweepEntry>,
    /// Index of the entry with the highest mean tail value among runs without aborts.
    pub best: Option<usize>,
}

impl SweepOutcome {
    pub fn best_entry(&self) -> Option<&SweepEntry> {
        self.best.map(|i| &self.entries[i])
    }
}

struct SeedOutcome {
    tail: f64,
    optimal: f64,
    aborted: bool,
}

fn run_one(config: &ExperimentConfig, out: Option<&Path>) -> Result<SeedOutcome> {
    if let Some(dir) = out {
        // Artifacts are write-once per (config-hash, seed); reuse a finished run.
        let (csv, json) = artifact_paths(dir, config);
        if csv.exists() && json.exists() {
            let s = read_summary(&json)?;
            return Ok(SeedOutcome { tail: s.tail_value.mean, optimal: s.optimal_value, aborted: s.aborted.is_some() });
        }
    }
    let result = run_experiment(config)?;
    if let Some(dir) = out {
        write_run(dir, &result)?;
    }
    Ok(SeedOutcome {
        tail: result.tail_mean(TAIL_EPISODES),
        optimal: result.optimal_value,
        aborted: result.aborted.is_some(),
    })
}

/// Runs every config on every seed with at most `jobs` runs in flight.
///
/// The outcome does not depend on `jobs`.
pub fn run_sweep(configs: &[ExperimentConfig], seeds: &[u64], jobs: usize, out: Option<&Path>) -> Result<SweepOutcome> {
    if seeds.is_empty() || configs.is_empty() {
        return Err(invalid("a sweep needs at least one config and one seed"));
    }
    let tasks: Vec<ExperimentConfig> = configs
        .iter()
        .flat_map(|c| {
            seeds.iter().map(move |&s| {
                let mut c = c.clone();
                c.seed = s;
                c
            })
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| invalid(&format!("thread pool: {e}")))?;
    let results: Vec<Result<SeedOutcome>> = pool.install(|| tasks.par_iter().map(|c| run_one(c, out)).collect());

    let mut entries = Vec::with_capacity(configs.len());
    let mut results = results.into_iter();
    for config in configs {
        let mut tail_values = Vec::with_capacity(seeds.len());
        let mut optimal_values = Vec::with_capacity(seeds.len());
        let mut aborted = 0;
        for _ in seeds {
            let r = results.next().expect("one result per task")?;
            tail_values.push(r.tail);
            optimal_values.push(r.optimal);
            aborted += r.aborted as usize;
        }
        entries.push(SweepEntry {
            config: config.clone(),
            config_hash: config.hash_hex(),
            seeds: seeds.to_vec(),
            score: mean_ci(&tail_values),
            tail_values,
            optimal_values,
            aborted,
        });
    }
    let best = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.aborted == 0 && e.score.mean.is_finite())
        .max_by(|(i, a), (j, b)| a.score.mean.total_cmp(&b.score.mean).then(j.cmp(i)))
        .map(|(i, _)| i);
    Ok(SweepOutcome { entries, best })
}
