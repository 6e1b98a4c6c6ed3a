use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use linrl::critic::{validate_posterior, PosteriorCheckConfig};
use linrl::design::greedy_g_design;
use linrl::harness::{
    aggregate_curves, build_actor_features, build_mdp, expand_grid, reference_grid, run_experiment, write_curves,
    write_run, ExperimentConfig, GridAxis,
};
use linrl::Error;

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ABORT: u8 = 3;

/// Optimistic actor-critic experiments on linear MDPs.
#[derive(Parser)]
#[command(name = "linrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one config for each seed and write per-episode CSV and a JSON summary.
    Run(RunArgs),
    /// Run a hyperparameter grid over seeds and report the best config.
    Sweep(SweepArgs),
    /// Build the actor's G-optimal design coreset and print it as JSON.
    Design(DesignArgs),
    /// Check the critic's chain moments against their closed form.
    ValidatePosterior(PosteriorArgs),
    /// Merge run artifacts into a long-format mean/CI table.
    PlotData(PlotArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> linrl::Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::from_path(p).map_err(as_config_error)?,
            None => ExperimentConfig::default(),
        };
        base.with_overrides(&self.overrides)
    }
}

#[derive(Args)]
struct SeedArgs {
    /// Single seed; overrides the config's.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Seed list: `0,3,7` or a half-open range `0..20`.
    #[arg(long)]
    seeds: Option<String>,
}

impl SeedArgs {
    fn resolve(&self, config: &ExperimentConfig) -> linrl::Result<Vec<u64>> {
        if let Some(s) = self.seed {
            return Ok(vec![s]);
        }
        match &self.seeds {
            None => Ok(vec![config.seed]),
            Some(text) => parse_seeds(text),
        }
    }
}

fn parse_seeds(text: &str) -> linrl::Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seed list `{text}`"));
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    seeds: SeedArgs,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    seeds: SeedArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Concurrent runs. Forced to 1 when LINRL_DETERMINISTIC=1.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// JSON object mapping config keys to value lists; defaults to the reference grid.
    #[arg(long)]
    grid: Option<PathBuf>,
}

#[derive(Args)]
struct DesignArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Write the coreset here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PosteriorArgs {
    /// Override a check setting, e.g. `chain_lr_scale=1.5` or `zeta_inv=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PlotArgs {
    /// Directory holding run artifacts.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV; defaults to `<input>/curves.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn deterministic() -> bool {
    std::env::var("LINRL_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn as_config_error(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) | Error::DimensionMismatch(_) => EXIT_CONFIG,
        Error::NumericalAbort(_) => EXIT_ABORT,
        _ => EXIT_FAIL,
    }
}

fn prepare(config: &ExperimentConfig) -> ExperimentConfig {
    let mut c = config.clone();
    if deterministic() {
        c.record_timing = false;
    }
    c
}

fn cmd_run(args: &RunArgs) -> linrl::Result<u8> {
    let config = prepare(&args.config.load()?);
    let seeds = args.seeds.resolve(&config)?;
    let mut status = 0;
    for seed in seeds {
        let mut c = config.clone();
        c.seed = seed;
        let result = run_experiment(&c)?;
        let (csv, _) = write_run(&args.out, &result)?;
        match &result.aborted {
            Some(msg) => {
                eprintln!("seed {seed}: numerical abort after {} episodes: {msg}", result.records.len());
                status = EXIT_ABORT;
            }
            None => println!(
                "seed {seed}: final value {:.4} (V* = {:.4}), regret {:.3} -> {}",
                result.records.last().map_or(f64::NAN, |r| r.exact_value),
                result.optimal_value,
                result.records.last().map_or(0.0, |r| r.cum_regret),
                csv.display()
            ),
        }
    }
    Ok(status)
}

fn load_grid(path: &Path) -> linrl::Result<Vec<GridAxis>> {
    let value: Value = serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(Error::Config("grid must be a JSON object".into()));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::Array(values) => Ok((k, values)),
            single => Ok((k, vec![single])),
        })
        .collect()
}

fn cmd_sweep(args: &SweepArgs) -> linrl::Result<u8> {
    let base = prepare(&args.config.load()?);
    let seeds = args.seeds.resolve(&base)?;
    let grid = match &args.grid {
        Some(p) => load_grid(p)?,
        None => reference_grid(),
    };
    let configs = expand_grid(&base, &grid)?;
    let jobs = if deterministic() { 1 } else { args.jobs };
    let outcome = linrl::harness::run_sweep(&configs, &seeds, jobs, Some(&args.out))?;
    let mut entries = Vec::with_capacity(outcome.entries.len());
    for e in &outcome.entries {
        let mut assigned = Map::new();
        let full = e.config.to_value();
        for (key, _) in &grid {
            assigned.insert(key.clone(), full[key.as_str()].clone());
        }
        entries.push(json!({
            "config_hash": e.config_hash,
            "grid": assigned,
            "mean": e.score.mean,
            "ci95": e.score.ci95,
            "aborted": e.aborted,
        }));
    }
    let best = outcome.best_entry();
    let report = json!({
        "seeds": seeds,
        "entries": entries,
        "best": best.map(|b| json!({"config_hash": b.config_hash, "mean": b.score.mean, "ci95": b.score.ci95, "config": b.config})),
    });
    std::fs::write(args.out.join("sweep.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    match best {
        Some(b) => {
            println!("{} configs x {} seeds; best {} mean {:.4}", configs.len(), seeds.len(), b.config_hash, b.score.mean);
            Ok(0)
        }
        None => {
            eprintln!("every config aborted");
            Ok(EXIT_ABORT)
        }
    }
}

fn cmd_design(args: &DesignArgs) -> linrl::Result<u8> {
    let config = args.config.load()?;
    let mdp = build_mdp(&config)?;
    let features = build_actor_features(&config, &mdp);
    let coreset = greedy_g_design(&features, config.design_epsilon, config.design_cap)?;
    let text = serde_json::to_string_pretty(&coreset)? + "\n";
    match &args.out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    eprintln!(
        "{} points ({} distinct) over {} candidates, score {:.4}{}",
        coreset.len(),
        coreset.support.len(),
        features.nrows(),
        coreset.score,
        if coreset.capped { ", capped" } else { "" }
    );
    Ok(0)
}

fn cmd_validate_posterior(args: &PosteriorArgs) -> linrl::Result<u8> {
    let mut value = serde_json::to_value(PosteriorCheckConfig::default())?;
    for item in &args.overrides {
        let (key, raw) =
            item.split_once('=').ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
        let key = key.trim().rsplit('.').next().unwrap_or_default();
        if value.get(key).is_none() {
            return Err(Error::Config(format!("unknown posterior-check key `{key}`")));
        }
        let raw = raw.trim();
        value[key] = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    }
    let mut check: PosteriorCheckConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(s) = args.seed {
        check.seed = s;
    }
    let report = validate_posterior(&check)?;
    println!("{:<14} {:>12} {:>12} {:>10} {:>8}", "moment", "predicted", "empirical", "std_err", "z");
    for c in &report.checks {
        println!("{:<14} {:>12.6} {:>12.6} {:>10.2e} {:>8.3}", c.label, c.predicted, c.empirical, c.std_error, c.z);
    }
    let verdict = if report.pass { "PASS" } else { "FAIL" };
    println!("{verdict}: max |z| = {:.3}, threshold {}", report.max_abs_z, report.threshold);
    Ok(if report.pass { 0 } else { EXIT_FAIL })
}

fn cmd_plot_data(args: &PlotArgs) -> linrl::Result<u8> {
    let points = aggregate_curves(&args.input).map_err(|e| match e {
        Error::InvalidParameter(m) => Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, m)),
        other => other,
    })?;
    let out = args.out.clone().unwrap_or_else(|| args.input.join("curves.csv"));
    write_curves(&out, &points)?;
    println!("{} rows -> {}", points.len(), out.display());
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Design(a) => cmd_design(a),
        Command::ValidatePosterior(a) => cmd_validate_posterior(a),
        Command::PlotData(a) => cmd_plot_data(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
