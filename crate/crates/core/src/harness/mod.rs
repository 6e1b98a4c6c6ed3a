//! Experiment driver: configuration, the episode loop, metrics, outputs and sweeps.

mod config;
mod metrics;
mod output;
mod run;
mod sweep;

pub use config::{ActorDesign, ActorFeatures, ActorKind, CriticKind, EnvKind, ExperimentConfig, Noise};
pub use metrics::{
    mean_ci, regret_decomposition, regret_metrics, value_difference_check, values_under, MeanCi,
    RegretDecomposition, RegretSummary, ValueDifference,
};
pub use output::{
    aggregate_curves, algorithm_name, artifact_paths, read_episode_csv, read_summary, summarize, write_curves,
    write_episode_csv, write_run, CsvRow, CurvePoint, RunSummary, CSV_COLUMNS, TAIL_EPISODES,
};
pub use run::{build_actor_features, build_mdp, run_experiment, run_seeds, EpisodeRecord, RunResult, BOUND_SLACK};
pub use sweep::{expand_grid, reference_grid, run_sweep, GridAxis, SweepEntry, SweepOutcome};
