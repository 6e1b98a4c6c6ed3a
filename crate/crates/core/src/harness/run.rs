//! The episode loop: collect data, update the critic, then the actor.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{ActorDesign, ActorFeatures, ActorKind, EnvKind, ExperimentConfig};
use super::metrics::regret_decomposition;
use crate::actor::{
    actor_solve_factored, actor_update_gd, projection_error_bound, projection_error_logits, select_rows, spma_target,
    ActorConfig, ActorProblem, ActorSolver, ActorVariant, GramFactor, DEGENERATE_RIDGE,
};
use crate::critic::{
    critic_update, model_prediction_error, optimism_stats, theory_constants, CriticOutput, CriticParams,
    CriticState, DataMode, Dataset, TheoryConstants, ValuePolicy, ValueTarget,
};
use crate::design::{greedy_g_design, max_norm, Coreset};
use crate::dp::{exact_policy_value, optimal_values};
use crate::envs::{make_deep_sea, make_random_mdp_with};
use crate::error::{invalid, Error, Result};
use crate::linalg::sym_pinv;
use crate::mdp::LinearMdp;
use crate::policy::{ImplicitNpgPolicy, LogLinearPolicy, TabularPolicy};
use crate::rng::{stream_rng, tags};
use crate::sim::rollout;

/// Slack when comparing a measured projection error with its bound.
pub const BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// 1-based.
    pub episode: usize,
    /// `V^{π_t}₁(s₁)` of the policy that collected this episode's data.
    pub exact_value: f64,
    /// `exact_value` in the environment's original reward units.
    pub raw_value: f64,
    pub mixture_value: f64,
    pub cum_regret: f64,
    pub optimism_violation_rate: f64,
    pub max_prediction_error: f64,
    /// `max_{h,s} |ε_h^t(s)|`; zero for actors without a projection.
    pub proj_err_max: f64,
    /// `max_h` of the projection-error bound, when diagnostics are on.
    pub bound_max: Option<f64>,
    /// Steps `h` where `max_s |ε_h^t(s)|` exceeded its bound.
    pub bound_violations: usize,
    /// Largest regression suboptimality of the actor solve.
    pub eps_opt_max: f64,
    /// `max |π_explicit − π_implicit|` over the next policy, with a shadow implicit actor.
    pub implicit_gap: Option<f64>,
    pub actor_term: Option<f64>,
    pub critic_term: Option<f64>,
    pub decomposition_residual: Option<f64>,
    pub rollout_return: f64,
    pub dataset_size: usize,
    pub critic_steps: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub optimal_value: f64,
    pub optimal_raw_value: f64,
    pub records: Vec<EpisodeRecord>,
    /// Message of the numerical failure that ended the run early.
    pub aborted: Option<String>,
    pub chains: usize,
    pub zeta_inv: f64,
    pub theory: TheoryConstants,
    pub coreset_size: Option<usize>,
    pub coreset_capped: Option<bool>,
    /// Scalars held by the policy at the end of the run.
    pub policy_parameters: usize,
}

impl RunResult {
    pub fn exact_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.exact_value).collect()
    }

    /// Mean exact value over the last `k` recorded episodes.
    pub fn tail_mean(&self, k: usize) -> f64 {
        let n = self.records.len();
        let tail = &self.records[n.saturating_sub(k)..];
        tail.iter().map(|r| r.exact_value).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Environment described by `config`.
pub fn build_mdp(config: &ExperimentConfig) -> Result<LinearMdp> {
    match config.env {
        EnvKind::RandomMdp => make_random_mdp_with(
            config.env_seed.unwrap_or(config.seed),
            config.horizon,
            config.feature_dim,
            config.random_features,
            config.random_dynamics,
        ),
        EnvKind::DeepSea => make_deep_sea(config.deep_sea_size, config.feature_dim, config.deep_sea_rewards),
        EnvKind::File => {
            let path = config.env_path.as_deref().ok_or_else(|| Error::Config("env_path missing".into()))?;
            LinearMdp::from_json(&std::fs::read_to_string(path)?)
        }
    }
}

/// Actor feature table, one row per `(s, a)`.
pub fn build_actor_features(config: &ExperimentConfig, mdp: &LinearMdp) -> DMatrix<f64> {
    let pairs = mdp.num_pairs();
    match config.actor_features {
        ActorFeatures::Critic => mdp.features.clone(),
        ActorFeatures::OneHot => DMatrix::identity(pairs, pairs),
        ActorFeatures::Random => {
            let mut rng = stream_rng(config.env_seed.unwrap_or(config.seed), tags::FEATURES, 1);
            DMatrix::from_fn(pairs, config.actor_dim, |_, _| rng.sample::<f64, _>(StandardNormal))
        }
    }
}

enum Actor {
    Explicit(LogLinearPolicy),
    Implicit(ImplicitNpgPolicy),
    Greedy,
}

/// Fixed design with its cached factors.
struct Design {
    coreset: Coreset,
    factor: GramFactor,
    /// `max_{s,a} ‖φ_a‖_{G⁻¹}` with `G = Σ ρ φφᵀ`.
    phi_bar: f64,
}

fn build_design(features: &DMatrix<f64>, points: Vec<usize>, weights: Vec<f64>, coreset: Coreset) -> Design {
    let support = Coreset { support: points, weights, ..coreset };
    let gram = support.design_gram(features);
    let factor = GramFactor::new(&gram);
    let weight = if factor.rank < gram.nrows() {
        let mut reg = gram.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += DEGENERATE_RIDGE;
        }
        sym_pinv(&reg).0
    } else {
        factor.pinv.clone()
    };
    let phi_bar = max_norm(features, &weight);
    Design { coreset: support, factor, phi_bar }
}

struct ActorOutcome {
    proj_err_max: f64,
    bound_max: Option<f64>,
    bound_violations: usize,
    eps_opt_max: f64,
}

/// Runs the full episode loop.
///
/// Setup errors are returned; a numerical failure mid-run ends the loop and is
/// reported in [`RunResult::aborted`] with the episodes completed so far.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let mdp = build_mdp(config)?;
    let (hh, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let s1 = mdp.initial_state;
    let theory_inputs = config.theory_inputs(mdp.critic_dim());
    let theory = theory_constants(&theory_inputs)?;
    let critic_config = config.critic_config();
    let params: CriticParams = critic_config.resolve(&theory_inputs)?;
    let actor_config = config.actor_config();

    let (optimal, pi_star) = optimal_values(&mdp);
    let optimal_value = optimal.v(0, s1);

    let actor_features = Arc::new(build_actor_features(config, &mdp));
    let critic_features = Arc::new(mdp.features.clone());
    let uses_actor = !config.is_value_based();
    let mut actor = if !uses_actor {
        Actor::Greedy
    } else if config.actor == ActorKind::NpgImplicit {
        Actor::Implicit(ImplicitNpgPolicy::new(config.eta, critic_features.clone(), na, hh, config.actor_clip)?)
    } else {
        Actor::Explicit(LogLinearPolicy::uniform(actor_features.clone(), na, hh)?)
    };
    let mut shadow = match (&actor, config.shadow_implicit) {
        (Actor::Explicit(_), true) => {
            Some(ImplicitNpgPolicy::new(config.eta, critic_features.clone(), na, hh, config.actor_clip)?)
        }
        _ => None,
    };

    let design = if matches!(actor, Actor::Explicit(_)) && config.actor_design == ActorDesign::Coreset {
        let c = greedy_g_design(&actor_features, config.design_epsilon, config.design_cap)?;
        if c.is_empty() {
            return Err(Error::Config(format!(
                "design_epsilon = {} is met by the identity anchor alone; the coreset is empty",
                config.design_epsilon
            )));
        }
        let (p, w) = (c.support.clone(), c.weights.clone());
        Some(build_design(&actor_features, p, w, c))
    } else {
        None
    };
    // Full-table least squares for the bias estimate.
    let full_factor = (config.bound_diagnostics && matches!(actor, Actor::Explicit(_)))
        .then(|| GramFactor::new(&(actor_features.transpose() * actor_features.as_ref())));

    let mut state = CriticState::new(hh, params.chains, mdp.critic_dim());
    let mut data = Dataset::new(hh);
    let mut current = TabularPolicy::uniform(hh, ns, na);
    let mut previous = current.clone();
    let mut records: Vec<EpisodeRecord> = Vec::with_capacity(config.episodes);
    let mut aborted = None;
    let (mut value_sum, mut regret) = (0.0, 0.0);

    for t in 0..config.episodes {
        let started = Instant::now();
        let value = exact_policy_value(&mdp, &current).v(0, s1);

        if config.mode == DataMode::OnPolicy {
            data.clear();
        }
        let batch = if config.mode == DataMode::OnPolicy { config.batch } else { 1 };
        let mut rng = stream_rng(config.seed, tags::ROLLOUT, t as u64);
        let mut returns = 0.0;
        for _ in 0..batch {
            let traj = rollout(&mdp, &current, &mut rng);
            returns += traj.total_reward();
            data.push(&traj, na)?;
        }

        let target = if !uses_actor {
            ValueTarget::Greedy
        } else if critic_config.value_policy == ValuePolicy::Previous {
            ValueTarget::Policy(&previous)
        } else {
            ValueTarget::Policy(&current)
        };
        let out = match critic_update(&mdp, &data, target, &mut state, &params, config.seed) {
            Ok(o) => o,
            Err(Error::NumericalAbort(msg)) => {
                aborted = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        let optimism = optimism_stats(&model_prediction_error(&mdp, &out.values));
        let decomposition = (config.decomposition && uses_actor)
            .then(|| regret_decomposition(&mdp, &pi_star, &current, &out.values.q));

        let outcome = match &mut actor {
            Actor::Greedy => {
                previous = std::mem::replace(&mut current, TabularPolicy::greedy(&out.values.q, hh, ns, na));
                ActorOutcome { proj_err_max: 0.0, bound_max: None, bound_violations: 0, eps_opt_max: 0.0 }
            }
            Actor::Implicit(pi) => {
                pi.push(state.weights.clone())?;
                previous = std::mem::replace(&mut current, TabularPolicy::from_policy(pi, hh, ns));
                ActorOutcome { proj_err_max: 0.0, bound_max: None, bound_violations: 0, eps_opt_max: 0.0 }
            }
            Actor::Explicit(pi) => {
                let step = ExplicitStep {
                    mdp: &mdp,
                    features: &actor_features,
                    config: &actor_config,
                    clip: config.actor_clip,
                    design: design.as_ref(),
                    full_factor: full_factor.as_ref(),
                    data: &data,
                    pi_star: &pi_star,
                    critic: &out,
                };
                match step.apply(pi, &current) {
                    Ok(o) => {
                        previous = std::mem::replace(&mut current, TabularPolicy::from_policy(pi, hh, ns));
                        o
                    }
                    Err(Error::NumericalAbort(msg)) => {
                        aborted = Some(msg);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        };

        let implicit_gap = match &mut shadow {
            Some(sh) => {
                sh.push(state.weights.clone())?;
                Some(TabularPolicy::from_policy(sh, hh, ns).max_abs_diff(&current))
            }
            None => None,
        };

        value_sum += value;
        regret += optimal_value - value;
        let n = (t + 1) as f64;
        records.push(EpisodeRecord {
            episode: t + 1,
            exact_value: value,
            raw_value: mdp.reward_map.value_to_raw(value, hh),
            mixture_value: value_sum / n,
            cum_regret: regret,
            optimism_violation_rate: optimism.violation_rate,
            max_prediction_error: optimism.max_error,
            proj_err_max: outcome.proj_err_max,
            bound_max: outcome.bound_max,
            bound_violations: outcome.bound_violations,
            eps_opt_max: outcome.eps_opt_max,
            implicit_gap,
            actor_term: decomposition.map(|d| d.actor_term),
            critic_term: decomposition.map(|d| d.critic_term),
            decomposition_residual: decomposition.map(|d| d.residual),
            rollout_return: returns / batch as f64,
            dataset_size: data.trajectories,
            critic_steps: out.steps_run,
            wall_ms: if config.record_timing { started.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
        });
    }

    let policy_parameters = match &actor {
        Actor::Explicit(p) => p.parameter_count(),
        Actor::Implicit(p) => p.parameter_count(),
        Actor::Greedy => hh * mdp.critic_dim() * params.chains,
    };
    Ok(RunResult {
        config: config.clone(),
        optimal_value,
        optimal_raw_value: mdp.reward_map.value_to_raw(optimal_value, hh),
        records,
        aborted,
        chains: params.chains,
        zeta_inv: params.zeta_inv,
        theory,
        coreset_size: design.as_ref().map(|d| d.coreset.len()),
        coreset_capped: design.as_ref().map(|d| d.coreset.capped),
        policy_parameters,
    })
}

struct ExplicitStep<'a> {
    mdp: &'a LinearMdp,
    features: &'a DMatrix<f64>,
    config: &'a ActorConfig,
    clip: crate::policy::ClipRule,
    design: Option<&'a Design>,
    full_factor: Option<&'a GramFactor>,
    data: &'a Dataset,
    pi_star: &'a TabularPolicy,
    critic: &'a CriticOutput,
}

impl ExplicitStep<'_> {
    /// Projected update of every step's `θ`; `current` is `π^t` as a table.
    fn apply(&self, pi: &mut LogLinearPolicy, current: &TabularPolicy) -> Result<ActorOutcome> {
        let (hh, ns, na) = (self.mdp.horizon(), self.mdp.num_states(), self.mdp.num_actions());
        let pairs = ns * na;
        let mut outcome = ActorOutcome {
            proj_err_max: 0.0,
            bound_max: self.full_factor.map(|_| 0.0),
            bound_violations: 0,
            eps_opt_max: 0.0,
        };
        for h in 0..hh {
            let level = self.clip.level(h, hh);
            let q = |s: usize, a: usize| self.critic.values.q(h, s, a).max(0.0).min(level);
            let prev = pi.theta(h).clone();
            let logits_prev = self.features * &prev;

            // Unprojected logits for every pair.
            let mut full_target = DVector::zeros(pairs);
            for s in 0..ns {
                match self.config.variant {
                    ActorVariant::Npg => {
                        for a in 0..na {
                            full_target[s * na + a] = logits_prev[s * na + a] + self.config.eta * q(s, a);
                        }
                    }
                    ActorVariant::Spma => {
                        let z: Vec<f64> = (0..na).map(|a| logits_prev[s * na + a]).collect();
                        let qs: Vec<f64> = (0..na).map(|a| q(s, a)).collect();
                        let t = spma_target(&z, &qs, current.row(h, s), self.config.eta)?;
                        for a in 0..na {
                            full_target[s * na + a] = t[a];
                        }
                    }
                }
            }

            let (points, weights, local_design);
            let design = match self.design {
                Some(d) => d,
                None => {
                    let mut seen: Vec<usize> = self.data.steps[h].pairs.clone();
                    seen.sort_unstable();
                    seen.dedup();
                    if seen.is_empty() {
                        continue;
                    }
                    points = seen;
                    weights = vec![1.0 / points.len() as f64; points.len()];
                    let empty = Coreset {
                        points: points.clone(),
                        support: vec![],
                        weights: vec![],
                        score: f64::NAN,
                        capped: false,
                        scans: 0,
                    };
                    local_design = build_design(self.features, points.clone(), weights.clone(), empty);
                    &local_design
                }
            };
            let support = &design.coreset.support;
            let problem = ActorProblem::new(
                select_rows(self.features, support),
                DVector::from_column_slice(&design.coreset.weights),
                DVector::from_iterator(support.len(), support.iter().map(|&k| full_target[k])),
            )?;
            let solution = match self.config.solver {
                ActorSolver::ClosedForm => actor_solve_factored(&problem, &prev, &design.factor)?,
                ActorSolver::GradientDescent => actor_update_gd(&problem, &prev, self.config.steps, self.config.lr)?,
            };
            outcome.eps_opt_max = outcome.eps_opt_max.max(solution.diagnostics.eps_opt_estimate);
            let logits_new = self.features * &solution.theta;

            let mut step_err: f64 = 0.0;
            for s in 0..ns {
                let slice = |v: &DVector<f64>| -> Vec<f64> { (0..na).map(|a| v[s * na + a]).collect() };
                let e = projection_error_logits(self.pi_star.row(h, s), &slice(&logits_new), &slice(&full_target))?;
                step_err = step_err.max(e.abs());
            }
            outcome.proj_err_max = outcome.proj_err_max.max(step_err);

            if let Some(full) = self.full_factor {
                // Unweighted loss over the whole table at its own minimizer.
                let all = ActorProblem::new(self.features.clone(), DVector::from_element(pairs, 1.0), full_target)?;
                let best = &prev - &full.pinv * all.gradient(&prev);
                let eps_bias = all.loss(&best);
                let bound = projection_error_bound(design.phi_bar, eps_bias, solution.diagnostics.eps_opt_estimate);
                if step_err > bound + BOUND_SLACK {
                    outcome.bound_violations += 1;
                }
                outcome.bound_max = outcome.bound_max.map(|b| b.max(bound));
            }
            pi.set_theta(h, solution.theta);
        }
        Ok(outcome)
    }
}

/// Runs `config` once per seed.
pub fn run_seeds(config: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<RunResult>> {
    if seeds.is_empty() {
        return Err(invalid("at least one seed is required"));
    }
    seeds
        .iter()
        .map(|&s| {
            let mut c = config.clone();
            c.seed = s;
            run_experiment(&c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(overrides: &[&str]) -> ExperimentConfig {
        ExperimentConfig::default()
            .with_overrides(&["horizon=5", "episodes=4", "num_chains=2", "critic_steps=20", "record_timing=false"])
            .unwrap()
            .with_overrides(overrides)
            .unwrap()
    }

    #[test]
    fn single_episode_is_uniform() {
        let cfg = small(&["episodes=1"]);
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.records.len(), 1);
        let mdp = build_mdp(&cfg).unwrap();
        let uniform = exact_policy_value(&mdp, &TabularPolicy::uniform(5, 15, 5)).v(0, 0);
        assert_eq!(r.records[0].exact_value, uniform);
    }

    #[test]
    fn off_policy_dataset_grows() {
        let r = run_experiment(&small(&["mode=off_policy", "episodes=5"])).unwrap();
        let sizes: Vec<usize> = r.records.iter().map(|x| x.dataset_size).collect();
        assert_eq!(sizes, vec![1, 2, 3, 4, 5]);
        let r = run_experiment(&small(&["batch=3"])).unwrap();
        assert!(r.records.iter().all(|x| x.dataset_size == 3));
    }

    #[test]
    fn reproducible() {
        let cfg = small(&["seed=7"]);
        assert_eq!(run_experiment(&cfg).unwrap(), run_experiment(&cfg).unwrap());
    }

    #[test]
    fn values_in_range_and_regret_bookkeeping() {
        for actor in ["npg_explicit", "npg_implicit", "none"] {
            let r = run_experiment(&small(&[&format!("actor={actor}")])).unwrap();
            let mut reg = 0.0;
            for rec in &r.records {
                assert!((0.0..=5.0).contains(&rec.exact_value));
                reg += r.optimal_value - rec.exact_value;
                assert!((rec.cum_regret - reg).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn memory_contract() {
        let exp = run_experiment(&small(&["episodes=6"])).unwrap();
        assert_eq!(exp.policy_parameters, 5 * 10);
        let imp3 = run_experiment(&small(&["actor=npg_implicit", "episodes=3"])).unwrap();
        let imp6 = run_experiment(&small(&["actor=npg_implicit", "episodes=6"])).unwrap();
        assert_eq!(imp3.policy_parameters, 3 * 5 * 2 * 10);
        assert_eq!(imp6.policy_parameters, 6 * 5 * 2 * 10);
    }

    #[test]
    fn decomposition_holds_per_episode() {
        let r = run_experiment(&small(&["decomposition=true", "episodes=5"])).unwrap();
        for rec in &r.records {
            assert!(rec.decomposition_residual.unwrap() < 1e-8);
        }
    }

    #[test]
    fn spma_and_gd_paths_run() {
        let r = run_experiment(&small(&["actor=spma_explicit", "actor_variant=spma", "eta=0.1"])).unwrap();
        assert!(r.aborted.is_none());
        let r = run_experiment(&small(&["actor_solver=gradient_descent", "actor_steps=50", "bound_diagnostics=true"]))
            .unwrap();
        assert!(r.aborted.is_none());
        assert!(r.records.iter().all(|x| x.eps_opt_max >= -1e-12));
        let r = run_experiment(&small(&["actor_design=buffer"])).unwrap();
        assert!(r.aborted.is_none());
    }

    #[test]
    fn divergent_critic_aborts_with_partial_records() {
        let r = run_experiment(&small(&["critic_lr=50.0", "critic_steps=500", "episodes=3"])).unwrap();
        assert!(r.aborted.is_some());
        assert!(r.records.len() < 3);
    }
}
