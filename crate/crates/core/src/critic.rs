//! Langevin Monte Carlo critic.
//!
//! For each step `h`, working backwards, the critic forms the ridge problem
//! `Λ = Σ φφᵀ + λI`, `b = Σ (r + V̂_{h+1}(s')) φ` and runs `M` independent noisy
//! gradient chains `w ← w − α(Λw − b) + √(α/ζ) ν`, warm-started from the previous
//! episode. The optimistic estimate takes the max over chains.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actor::clip_to;
use crate::dp::{bellman_backup, ValueTables};
use crate::error::{invalid, mismatch, Error, Result};
use crate::linalg::{eig_extremes, lambda_max_power, spd_solve};
use crate::mdp::LinearMdp;
use crate::policy::{ChainWeights, ClipRule, Policy};
use crate::rng::{chain_rng, stream_rng, tags};
use crate::sim::Trajectory;

pub const POWER_ITERATIONS: usize = 50;
pub const POWER_TOL: f64 = 1e-10;
/// Threshold above which a prediction error counts as an optimism violation.
pub const OPTIMISM_TOL: f64 = 1e-9;

/// A configured number, or a rule that derives it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Setting<T> {
    Value(T),
    Rule(Rule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Theory,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    #[default]
    OnPolicy,
    OffPolicy,
}

/// Which policy `V̂_h(s) = E_a Q̂_h(s, a)` averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValuePolicy {
    /// The policy that collected the newest data.
    #[default]
    Current,
    /// The policy before the latest data was collected.
    Previous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub lambda: f64,
    /// `1/ζ`; `theory` derives it from the confidence width.
    pub zeta_inv: Setting<f64>,
    pub steps: Setting<usize>,
    pub lr: Setting<f64>,
    pub chains: Setting<usize>,
    pub noise: bool,
    pub clip: ClipRule,
    pub value_policy: ValuePolicy,
    /// Solve the ridge problem exactly instead of iterating (one deterministic chain).
    pub exact_ridge: bool,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            zeta_inv: Setting::Value(1e-3),
            steps: Setting::Value(100),
            lr: Setting::Rule(Rule::Auto),
            chains: Setting::Value(1),
            noise: true,
            clip: ClipRule::Horizon,
            value_policy: ValuePolicy::Current,
            exact_ridge: false,
        }
    }
}

/// How `J_t` is chosen each episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Fixed(usize),
    Theory,
}

/// How `α_c` is chosen at each `(t, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrRule {
    Fixed(f64),
    /// `1 / (2 λ_max(Λ))`.
    Auto,
}

/// Critic settings with run-level quantities (`M`, `ζ`) resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    pub lambda: f64,
    /// `0` when noise is off.
    pub zeta_inv: f64,
    pub steps: StepRule,
    pub lr: LrRule,
    pub chains: usize,
    pub clip: ClipRule,
    pub exact_ridge: bool,
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(invalid("lambda must be positive"));
        }
        match self.zeta_inv {
            Setting::Value(z) if !(z >= 0.0) || !z.is_finite() => {
                return Err(invalid("zeta_inv must be finite and nonnegative"))
            }
            Setting::Rule(Rule::Auto) => return Err(invalid("zeta_inv accepts a number or \"theory\"")),
            _ => {}
        }
        match self.steps {
            Setting::Value(0) => return Err(invalid("critic_steps must be at least 1")),
            Setting::Rule(Rule::Auto) => return Err(invalid("critic_steps accepts a number or \"theory\"")),
            _ => {}
        }
        match self.lr {
            Setting::Value(a) if !(a > 0.0) => return Err(invalid("critic_lr must be positive")),
            Setting::Rule(Rule::Theory) => return Err(invalid("critic_lr accepts a number or \"auto\"")),
            _ => {}
        }
        match self.chains {
            Setting::Value(0) => return Err(invalid("num_chains must be at least 1")),
            Setting::Rule(Rule::Auto) => return Err(invalid("num_chains accepts a number or \"theory\"")),
            _ => {}
        }
        Ok(())
    }

    pub fn resolve(&self, theory: &TheoryInputs) -> Result<CriticParams> {
        self.validate()?;
        let constants = theory_constants(theory)?;
        let zeta_inv = if !self.noise || self.exact_ridge {
            0.0
        } else {
            match self.zeta_inv {
                Setting::Value(z) => z,
                Setting::Rule(_) => 1.0 / constants.zeta,
            }
        };
        let chains = if self.exact_ridge {
            1
        } else {
            match self.chains {
                Setting::Value(m) => m,
                Setting::Rule(_) => constants.chains,
            }
        };
        Ok(CriticParams {
            lambda: self.lambda,
            zeta_inv,
            steps: match self.steps {
                Setting::Value(j) => StepRule::Fixed(j),
                Setting::Rule(_) => StepRule::Theory,
            },
            lr: match self.lr {
                Setting::Value(a) => LrRule::Fixed(a),
                Setting::Rule(_) => LrRule::Auto,
            },
            chains,
            clip: self.clip,
            exact_ridge: self.exact_ridge,
        })
    }
}

/// Transitions observed at one step, indexed into the feature table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepSamples {
    pub pairs: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<usize>,
}

impl StepSamples {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Regression data split by step.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub steps: Vec<StepSamples>,
    pub trajectories: usize,
}

impl Dataset {
    pub fn new(horizon: usize) -> Self {
        Self { steps: vec![StepSamples::default(); horizon], trajectories: 0 }
    }

    pub fn push(&mut self, trajectory: &Trajectory, num_actions: usize) -> Result<()> {
        if trajectory.len() != self.steps.len() {
            return Err(mismatch("trajectory length must equal the horizon"));
        }
        for (h, t) in trajectory.steps.iter().enumerate() {
            let step = &mut self.steps[h];
            step.pairs.push(t.state * num_actions + t.action);
            step.rewards.push(t.reward);
            step.next_states.push(t.next_state);
        }
        self.trajectories += 1;
        Ok(())
    }

    pub fn clear(&mut self) {
        let h = self.steps.len();
        *self = Self::new(h);
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

/// Critic parameters per step and chain, carried across episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticState {
    pub weights: ChainWeights,
    /// Number of completed updates.
    pub episode: usize,
}

impl CriticState {
    pub fn new(horizon: usize, chains: usize, dim: usize) -> Self {
        Self { weights: vec![vec![DVector::zeros(dim); chains]; horizon], episode: 0 }
    }

    pub fn chains(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }
}

/// How the next-step value is formed from `Q̂`.
#[derive(Clone, Copy)]
pub enum ValueTarget<'a> {
    Policy(&'a dyn Policy),
    /// `V̂_h(s) = max_a Q̂_h(s, a)`.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub samples: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticOutput {
    /// `Q̂` and `V̂` tables (`V̂_H ≡ 0`).
    pub values: ValueTables,
    pub steps_run: usize,
    pub step_stats: Vec<StepStats>,
    pub theory: Option<TheorySchedule>,
}

/// `Λ w − b`.
pub fn critic_gradient(w: &DVector<f64>, gram: &DMatrix<f64>, moment: &DVector<f64>) -> DVector<f64> {
    gram * w - moment
}

/// `Λ⁻¹ b`.
pub fn ridge_solve(gram: &DMatrix<f64>, moment: &DVector<f64>) -> DVector<f64> {
    spd_solve(gram, moment)
}

/// One Langevin step. `zeta_inv = 0` gives plain gradient descent.
pub fn lmc_step<R: Rng + ?Sized>(
    w: &DVector<f64>,
    gram: &DMatrix<f64>,
    moment: &DVector<f64>,
    lr: f64,
    zeta_inv: f64,
    rng: &mut R,
) -> DVector<f64> {
    let mut next = w - critic_gradient(w, gram, moment) * lr;
    add_noise(&mut next, (lr * zeta_inv).sqrt(), rng);
    next
}

fn add_noise<R: Rng + ?Sized>(w: &mut DVector<f64>, scale: f64, rng: &mut R) {
    if scale > 0.0 {
        for x in w.iter_mut() {
            *x += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Gram matrix and moment for one step's regression.
pub fn regression_system(
    features: &DMatrix<f64>,
    samples: &StepSamples,
    next_values: &[f64],
    lambda: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let d = features.ncols();
    let mut gram = DMatrix::identity(d, d) * lambda;
    let mut moment = DVector::zeros(d);
    for i in 0..samples.len() {
        let phi = features.row(samples.pairs[i]).transpose();
        let y = samples.rewards[i] + next_values[samples.next_states[i]];
        gram.ger(1.0, &phi, &phi, 1.0);
        moment.axpy(y, &phi, 1.0);
    }
    (gram, moment)
}

fn feature_gram(features: &DMatrix<f64>, samples: &StepSamples, lambda: f64) -> DMatrix<f64> {
    let d = features.ncols();
    let mut gram = DMatrix::identity(d, d) * lambda;
    for &p in &samples.pairs {
        let phi = features.row(p).transpose();
        gram.ger(1.0, &phi, &phi, 1.0);
    }
    gram
}

/// One backward pass of the critic over `data`.
///
/// Chain `m` at step `h` draws from its own stream keyed by `(seed, episode, h, m)`,
/// so the result does not depend on scheduling.
pub fn critic_update(
    mdp: &LinearMdp,
    data: &Dataset,
    value_target: ValueTarget<'_>,
    state: &mut CriticState,
    params: &CriticParams,
    seed: u64,
) -> Result<CriticOutput> {
    let (hh, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let d = mdp.critic_dim();
    if data.horizon() != hh || state.weights.len() != hh {
        return Err(mismatch("dataset and critic state must cover the horizon"));
    }
    if state.chains() != params.chains {
        return Err(mismatch("critic state chain count differs from the configuration"));
    }
    let features = &mdp.features;
    let episode = state.episode;

    // Λ depends only on the visited features, so the whole schedule is known up front.
    let grams: Vec<DMatrix<f64>> = data.steps.iter().map(|s| feature_gram(features, s, params.lambda)).collect();
    let theory = match params.steps {
        StepRule::Theory => Some(theory_schedule(&grams, data.trajectories, hh, d)?),
        StepRule::Fixed(_) => None,
    };
    let steps = match (params.steps, &theory) {
        (StepRule::Fixed(j), _) => j,
        (StepRule::Theory, Some(s)) => s.steps,
        (StepRule::Theory, None) => unreachable!(),
    };

    let mut values = ValueTables {
        horizon: hh,
        num_states: ns,
        num_actions: na,
        v: vec![0.0; (hh + 1) * ns],
        q: vec![0.0; hh * ns * na],
    };
    let mut stats = Vec::with_capacity(hh);
    let mut probs = vec![0.0; na];
    for h in (0..hh).rev() {
        let next_v = values.v[(h + 1) * ns..(h + 2) * ns].to_vec();
        let (gram, moment) = regression_system(features, &data.steps[h], &next_v, params.lambda);
        let (lambda_min, lambda_max) = eig_extremes(&gram);
        let lr = match params.lr {
            LrRule::Fixed(a) => a,
            LrRule::Auto => 0.5 / lambda_max_power(&gram, POWER_ITERATIONS, POWER_TOL),
        };
        if params.exact_ridge {
            let w = ridge_solve(&gram, &moment);
            for chain in state.weights[h].iter_mut() {
                *chain = w.clone();
            }
        } else {
            let zeta_inv = params.zeta_inv;
            state.weights[h].par_iter_mut().enumerate().for_each(|(m, w)| {
                let mut rng = chain_rng(seed, episode, h, m);
                let noise = (lr * zeta_inv).sqrt();
                for _ in 0..steps {
                    let g = critic_gradient(w, &gram, &moment);
                    w.axpy(-lr, &g, 1.0);
                    add_noise(w, noise, &mut rng);
                }
            });
            if state.weights[h].iter().any(|w| w.iter().any(|x| !x.is_finite())) {
                return Err(Error::NumericalAbort(format!(
                    "critic weights diverged at episode {episode}, step {h} (lr {lr:e}, λ_max {lambda_max:e})"
                )));
            }
        }
        stats.push(StepStats { samples: data.steps[h].len(), lambda_min, lambda_max, lr });

        let level = params.clip.level(h, hh);
        for s in 0..ns {
            let base = (h * ns + s) * na;
            for a in 0..na {
                let phi = features.row(s * na + a);
                let raw = state.weights[h]
                    .iter()
                    .map(|w| phi.dot(&w.transpose()))
                    .fold(f64::NEG_INFINITY, f64::max);
                values.q[base + a] = clip_to(raw, level);
            }
            let row = &values.q[base..base + na];
            values.v[h * ns + s] = match value_target {
                ValueTarget::Greedy => row.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                ValueTarget::Policy(pi) => {
                    pi.probs_into(h, s, &mut probs);
                    probs.iter().zip(row).map(|(p, q)| p * q).sum()
                }
            };
        }
    }
    stats.reverse();
    state.episode += 1;
    Ok(CriticOutput { values, steps_run: if params.exact_ridge { 0 } else { steps }, step_stats: stats, theory })
}

/// Least-squares value iteration with exact ridge solves: the noise-free, infinite-step limit.
pub fn lsvi_ridge(mdp: &LinearMdp, data: &Dataset, value_target: ValueTarget<'_>, lambda: f64, clip: ClipRule) -> Result<ValueTables> {
    let params = CriticParams {
        lambda,
        zeta_inv: 0.0,
        steps: StepRule::Fixed(1),
        lr: LrRule::Auto,
        chains: 1,
        clip,
        exact_ridge: true,
    };
    let mut state = CriticState::new(mdp.horizon(), 1, mdp.critic_dim());
    Ok(critic_update(mdp, data, value_target, &mut state, &params, 0)?.values)
}

/// `ι_h(s, a) = r_h(s, a) + Σ P_h(s'|s, a) V̂_{h+1}(s') − Q̂_h(s, a)` on the tabular model.
pub fn model_prediction_error(mdp: &LinearMdp, estimate: &ValueTables) -> Vec<f64> {
    let (hh, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut iota = vec![0.0; hh * ns * na];
    for h in 0..hh {
        let next_v = &estimate.v[(h + 1) * ns..(h + 2) * ns];
        for s in 0..ns {
            for a in 0..na {
                iota[(h * ns + s) * na + a] = bellman_backup(mdp, h, s, a, next_v) - estimate.q(h, s, a);
            }
        }
    }
    iota
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimismStats {
    /// Fraction of `(h, s, a)` with `ι > OPTIMISM_TOL`.
    pub violation_rate: f64,
    pub max_error: f64,
}

pub fn optimism_stats(iota: &[f64]) -> OptimismStats {
    let violations = iota.iter().filter(|&&x| x > OPTIMISM_TOL).count();
    OptimismStats {
        violation_rate: violations as f64 / iota.len().max(1) as f64,
        max_error: iota.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// `Σ_i ‖φ_i‖²_{Λ⁻¹}` with `Λ = λI + Σ φ_i φ_iᵀ` over the whole stream.
pub fn elliptical_potential(rows: &[DVector<f64>], lambda: f64) -> f64 {
    let d = rows.first().map_or(0, |r| r.len());
    let mut gram = DMatrix::identity(d, d) * lambda;
    for r in rows {
        gram.ger(1.0, r, r, 1.0);
    }
    let chol = match gram.cholesky() {
        Some(c) => c,
        None => return f64::INFINITY,
    };
    rows.iter().map(|r| r.dot(&chol.solve(r))).sum()
}

// Theory-driven hyperparameters.

/// Anti-concentration constant `1 / (2√(2eπ))`.
pub fn anti_concentration() -> f64 {
    1.0 / (2.0 * (2.0 * std::f64::consts::E * std::f64::consts::PI).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    pub horizon: usize,
    pub episodes: usize,
    /// On-policy batch size `N`.
    pub batch: usize,
    pub delta: f64,
    pub critic_dim: usize,
    pub mode: DataMode,
    /// Covering-number term of the off-policy width; `0` when not supplied.
    pub covering: f64,
    /// Replaces the derived confidence width.
    pub width_override: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub c: f64,
    pub chains: usize,
    pub width: f64,
    pub zeta: f64,
}

/// `M = ⌈log(HT/δ) / log(1/(1 − c))⌉` and `ζ = (2H√d · C_δ + 8/3)⁻²`.
pub fn theory_constants(inputs: &TheoryInputs) -> Result<TheoryConstants> {
    if !(inputs.delta > 0.0 && inputs.delta < 1.0) {
        return Err(invalid("delta must lie in (0, 1)"));
    }
    if inputs.horizon == 0 || inputs.episodes == 0 || inputs.critic_dim == 0 {
        return Err(invalid("horizon, episodes and critic_dim must be positive"));
    }
    let c = anti_concentration();
    let (hh, tt) = (inputs.horizon as f64, inputs.episodes as f64);
    let chains = ((hh * tt / inputs.delta).ln() / (1.0 / (1.0 - c)).ln()).ceil().max(1.0) as usize;
    let width = match inputs.width_override {
        Some(w) => w,
        None => match inputs.mode {
            DataMode::OnPolicy => (inputs.batch.max(1) as f64 / inputs.delta).ln().sqrt(),
            DataMode::OffPolicy => {
                let inner = 0.5 * (tt + 1.0).ln()
                    + (2.0 * 2f64.sqrt() * tt / hh).ln()
                    + (2.0 / inputs.delta).ln()
                    + inputs.covering;
                3.0 * inner.max(0.0).sqrt()
            }
        },
    };
    let zeta = (2.0 * hh * (inputs.critic_dim as f64).sqrt() * width + 8.0 / 3.0).powi(-2);
    Ok(TheoryConstants { c, chains, width, zeta })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheorySchedule {
    /// `α_h = 1 / (2 λ_max(Λ_h))`.
    pub lrs: Vec<f64>,
    /// `max_h λ_max(Λ_h) / λ_min(Λ_h)`.
    pub kappa: f64,
    /// `1 / (4H(|D| + 1)√d)`.
    pub sigma: f64,
    /// `⌈2κ log(1/σ)⌉`.
    pub steps: usize,
}

pub fn theory_schedule(grams: &[DMatrix<f64>], dataset_size: usize, horizon: usize, critic_dim: usize) -> Result<TheorySchedule> {
    let mut kappa: f64 = 1.0;
    let mut lrs = Vec::with_capacity(grams.len());
    for g in grams {
        let (lo, hi) = eig_extremes(g);
        if !(lo > 0.0) {
            return Err(invalid("Gram matrix is not positive definite"));
        }
        kappa = kappa.max(hi / lo);
        lrs.push(0.5 / hi);
    }
    let sigma = 1.0 / (4.0 * horizon as f64 * (dataset_size as f64 + 1.0) * (critic_dim as f64).sqrt());
    let steps = (2.0 * kappa * (1.0 / sigma).ln()).ceil().max(1.0) as usize;
    Ok(TheorySchedule { lrs, kappa, sigma, steps })
}

/// All theory-driven critic settings at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryHyperparams {
    pub lambda: f64,
    pub constants: TheoryConstants,
    pub schedule: TheorySchedule,
}

/// `λ = 1` and the `(α, J, M, ζ)` implied by the data's Gram matrices.
pub fn theory_hyperparams(grams: &[DMatrix<f64>], dataset_size: usize, inputs: &TheoryInputs) -> Result<TheoryHyperparams> {
    Ok(TheoryHyperparams {
        lambda: 1.0,
        constants: theory_constants(inputs)?,
        schedule: theory_schedule(grams, dataset_size, inputs.horizon, inputs.critic_dim)?,
    })
}

// Posterior moments of the LMC iterates.

/// One episode of updates at a fixed step `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStage {
    pub gram: DMatrix<f64>,
    pub moment: DVector<f64>,
    pub lr: f64,
    pub steps: usize,
}

/// Mean and covariance of the chain after every stage, starting from `w0`.
///
/// With `A_i = I − α_i Λ_i` the stages compose as
/// `μ ← A^J μ + (I − A^J) Λ⁻¹b` and
/// `Σ ← A^J Σ A^J + ζ⁻¹ (I − A^{2J}) Λ⁻¹ (I + A)⁻¹`.
pub fn posterior_moments(stages: &[PosteriorStage], w0: &DVector<f64>, zeta_inv: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = w0.len();
    let mut mean = w0.clone();
    let mut cov = DMatrix::zeros(d, d);
    for (i, st) in stages.iter().enumerate() {
        if st.gram.nrows() != d || st.moment.len() != d {
            return Err(mismatch("posterior stage dimension"));
        }
        let eig = SymmetricEigen::new(st.gram.clone());
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(invalid(format!("stage {i}: Gram matrix is not positive definite")));
        }
        let a: Vec<f64> = eig.eigenvalues.iter().map(|l| 1.0 - st.lr * l).collect();
        if a.iter().any(|x| x.abs() >= 1.0) {
            return Err(invalid(format!("stage {i}: step size {} gives ‖I − αΛ‖ ≥ 1", st.lr)));
        }
        let q = &eig.eigenvectors;
        let pow = |k: usize| -> DMatrix<f64> {
            let diag = DVector::from_iterator(d, a.iter().map(|x| x.powi(k as i32)));
            q * DMatrix::from_diagonal(&diag) * q.transpose()
        };
        let a_j = pow(st.steps);
        let ridge = ridge_solve(&st.gram, &st.moment);
        mean = &a_j * &mean + (DMatrix::identity(d, d) - &a_j) * ridge;
        let spread = DVector::from_iterator(
            d,
            a.iter()
                .zip(eig.eigenvalues.iter())
                .map(|(x, l)| (1.0 - x.powi(2 * st.steps as i32)) / (l * (1.0 + x))),
        );
        let added = q * DMatrix::from_diagonal(&spread) * q.transpose() * zeta_inv;
        cov = &a_j * cov * &a_j + added;
    }
    Ok((mean, cov))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorCheckConfig {
    pub seed: u64,
    pub chains: usize,
    /// Steps per synthetic episode.
    pub steps: Vec<usize>,
    /// New samples per synthetic episode.
    pub samples_per_episode: usize,
    pub zeta_inv: f64,
    /// Step size as a fraction of `1 / λ_max(Λ)`.
    pub lr_fraction: f64,
    /// Multiplies the step size used by the chains only; `1` leaves the check consistent.
    pub chain_lr_scale: f64,
    /// Pass threshold in standard errors.
    pub threshold: f64,
}

impl Default for PosteriorCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            chains: 5000,
            steps: vec![5, 5],
            samples_per_episode: 4,
            zeta_inv: 0.5,
            lr_fraction: 0.5,
            chain_lr_scale: 1.0,
            threshold: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub label: String,
    pub predicted: f64,
    pub empirical: f64,
    pub std_error: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorCheckReport {
    pub checks: Vec<MomentCheck>,
    pub max_abs_z: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Synthetic 2-dimensional regression with accumulating data, one stage per episode.
pub fn synthetic_stages(config: &PosteriorCheckConfig) -> Result<Vec<PosteriorStage>> {
    let d = 2;
    let mut rng = stream_rng(config.seed, tags::POSTERIOR, 0);
    let truth = DVector::from_vec(vec![0.8, -0.5]);
    let mut gram = DMatrix::identity(d, d);
    let mut moment = DVector::zeros(d);
    let mut stages = Vec::with_capacity(config.steps.len());
    for &steps in &config.steps {
        for _ in 0..config.samples_per_episode {
            let phi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = phi.dot(&truth) + 0.1 * rng.sample::<f64, _>(StandardNormal);
            gram.ger(1.0, &phi, &phi, 1.0);
            moment.axpy(y, &phi, 1.0);
        }
        let lr = config.lr_fraction / lambda_max_power(&gram, 200, 1e-14);
        stages.push(PosteriorStage { gram: gram.clone(), moment: moment.clone(), lr, steps });
    }
    Ok(stages)
}

/// Runs independent chains from `w0 = 0` through every stage and compares the
/// empirical mean and covariance against [`posterior_moments`].
pub fn validate_posterior(config: &PosteriorCheckConfig) -> Result<PosteriorCheckReport> {
    if config.chains < 2 {
        return Err(invalid("posterior check needs at least two chains"));
    }
    let stages = synthetic_stages(config)?;
    let d = 2;
    let (mu, sigma) = posterior_moments(&stages, &DVector::zeros(d), config.zeta_inv)?;
    let finals: Vec<DVector<f64>> = (0..config.chains)
        .into_par_iter()
        .map(|m| {
            let mut rng = stream_rng(config.seed, tags::POSTERIOR, 1 + m as u64);
            let mut w = DVector::zeros(d);
            for st in &stages {
                let lr = st.lr * config.chain_lr_scale;
                for _ in 0..st.steps {
                    w = lmc_step(&w, &st.gram, &st.moment, lr, config.zeta_inv, &mut rng);
                }
            }
            w
        })
        .collect();
    let n = finals.len() as f64;
    let mean = finals.iter().fold(DVector::zeros(d), |acc, w| acc + w) / n;
    let mut cov = DMatrix::zeros(d, d);
    for w in &finals {
        let c = w - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n - 1.0;

    let z_score = |diff: f64, se: f64| -> f64 {
        if se > 0.0 {
            diff / se
        } else if diff.abs() <= 1e-10 {
            0.0
        } else {
            f64::INFINITY
        }
    };
    let mut checks = Vec::new();
    for i in 0..d {
        let se = (sigma[(i, i)] / n).sqrt();
        checks.push(MomentCheck {
            label: format!("mean[{i}]"),
            predicted: mu[i],
            empirical: mean[i],
            std_error: se,
            z: z_score(mean[i] - mu[i], se),
        });
    }
    for i in 0..d {
        for j in i..d {
            // Gaussian sampling variance of a covariance entry.
            let se = ((sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / n).sqrt();
            checks.push(MomentCheck {
                label: format!("cov[{i},{j}]"),
                predicted: sigma[(i, j)],
                empirical: cov[(i, j)],
                std_error: se,
                z: z_score(cov[(i, j)] - sigma[(i, j)], se),
            });
        }
    }
    let max_abs_z = checks.iter().map(|c| c.z.abs()).fold(0.0, f64::max);
    Ok(PosteriorCheckReport { checks, max_abs_z, threshold: config.threshold, pass: max_abs_z <= config.threshold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::make_random_mdp;
    use crate::mdp::{fit_linear_mdp, TabularDynamics};
    use crate::policy::TabularPolicy;
    use crate::rng::stream_rng;
    use crate::sim::rollout;
    use proptest::prelude::*;
    use rand::Rng;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn vec1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn gradient_examples() {
        let g = critic_gradient(&vec1(0.0), &scalar(2.0), &vec1(1.0));
        assert_eq!(g[0], -1.0);
        let w = DVector::from_vec(vec![0.3, -1.2]);
        assert_eq!(critic_gradient(&w, &DMatrix::identity(2, 2), &DVector::zeros(2)), w);
        let gram = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let b = DVector::from_vec(vec![1.0, -1.0]);
        assert!(critic_gradient(&ridge_solve(&gram, &b), &gram, &b).amax() < 1e-14);
    }

    #[test]
    fn ridge_examples() {
        assert_eq!(ridge_solve(&DMatrix::identity(3, 3), &DVector::zeros(3)), DVector::zeros(3));
        // One sample φ = 1, y = 1, λ = 1.
        assert!((ridge_solve(&scalar(2.0), &vec1(1.0))[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ridge_is_gd_fixed_point() {
        let gram = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let lr = 0.5 / lambda_max_power(&gram, 200, 1e-14);
        let mut w = DVector::zeros(3);
        let mut rng = stream_rng(0, 0, 0);
        for _ in 0..2000 {
            w = lmc_step(&w, &gram, &b, lr, 0.0, &mut rng);
        }
        assert!((w - ridge_solve(&gram, &b)).amax() < 1e-10);
    }

    #[test]
    fn noiseless_step_is_affine_contraction() {
        let mut rng = stream_rng(0, 0, 0);
        for w0 in [-3.0, 0.0, 0.5, 10.0] {
            let w = lmc_step(&vec1(w0), &scalar(2.0), &vec1(1.0), 0.25, 0.0, &mut rng);
            assert!((w[0] - (w0 / 2.0 + 0.25)).abs() < 1e-15);
        }
    }

    #[test]
    fn step_noise_has_expected_variance() {
        let (lr, zeta_inv) = (0.3, 0.7);
        let gram = DMatrix::identity(2, 2);
        let w = DVector::from_vec(vec![1.0, -2.0]);
        let mut rng = stream_rng(11, 0, 0);
        let n = 100_000;
        let expected_var = lr * zeta_inv;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let next = lmc_step(&w, &gram, &w, lr, zeta_inv, &mut rng);
            for i in 0..2 {
                let delta = next[i] - w[i];
                sum[i] += delta;
                sq[i] += delta * delta;
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!(mean.abs() <= 3.0 * (expected_var / n as f64).sqrt());
            // Variance of the sample variance of a Gaussian is 2σ⁴/n.
            assert!((var - expected_var).abs() <= 3.0 * (2.0 * expected_var.powi(2) / n as f64).sqrt());
        }
    }

    #[test]
    fn seeded_step_repeats() {
        let g = DMatrix::identity(3, 3);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = lmc_step(&b, &g, &b, 0.1, 1.0, &mut stream_rng(5, 1, 2));
        let c = lmc_step(&b, &g, &b, 0.1, 1.0, &mut stream_rng(5, 1, 2));
        assert_eq!(a, c);
    }

    /// Step-by-step recursion `μ ← Aμ + αb`, `Σ ← AΣAᵀ + (α/ζ) I`.
    fn recursion_oracle(stages: &[PosteriorStage], w0: &DVector<f64>, zeta_inv: f64) -> (DVector<f64>, DMatrix<f64>) {
        let d = w0.len();
        let mut mu = w0.clone();
        let mut sigma = DMatrix::zeros(d, d);
        for st in stages {
            let a = DMatrix::identity(d, d) - &st.gram * st.lr;
            for _ in 0..st.steps {
                mu = &a * mu + &st.moment * st.lr;
                sigma = &a * sigma * a.transpose() + DMatrix::identity(d, d) * (st.lr * zeta_inv);
            }
        }
        (mu, sigma)
    }

    #[test]
    fn moments_match_recursion() {
        let cfg = PosteriorCheckConfig { steps: vec![7, 3, 12], ..PosteriorCheckConfig::default() };
        let stages = synthetic_stages(&cfg).unwrap();
        let w0 = DVector::from_vec(vec![0.4, 1.5]);
        let (mu, sigma) = posterior_moments(&stages, &w0, 0.3).unwrap();
        let (mu_o, sigma_o) = recursion_oracle(&stages, &w0, 0.3);
        assert!((mu - mu_o).amax() < 1e-12);
        assert!((sigma - sigma_o).amax() < 1e-12);
    }

    #[test]
    fn moments_geometric_limit() {
        // A = 1/2, so Σ → ζ⁻¹ Λ⁻¹ (1 + A)⁻¹ = 1/(3ζ).
        let st = PosteriorStage { gram: scalar(2.0), moment: vec1(1.0), lr: 0.25, steps: 200 };
        let zeta_inv = 2.0;
        let (mu, sigma) = posterior_moments(&[st], &vec1(5.0), zeta_inv).unwrap();
        assert!((mu[0] - 0.5).abs() < 1e-12);
        assert!((sigma[(0, 0)] - zeta_inv / 3.0).abs() < 1e-12);
    }

    #[test]
    fn moments_degenerate_cases() {
        let stages = synthetic_stages(&PosteriorCheckConfig::default()).unwrap();
        let w0 = DVector::from_vec(vec![1.0, 2.0]);
        let (mu_noisy, _) = posterior_moments(&stages, &w0, 1.0).unwrap();
        let (mu, sigma) = posterior_moments(&stages, &w0, 0.0).unwrap();
        assert_eq!(sigma, DMatrix::zeros(2, 2));
        assert!((mu - mu_noisy).amax() < 1e-15);

        let frozen: Vec<PosteriorStage> = stages.iter().cloned().map(|s| PosteriorStage { steps: 0, ..s }).collect();
        let (mu, sigma) = posterior_moments(&frozen, &w0, 1.0).unwrap();
        assert_eq!(mu, w0);
        assert_eq!(sigma, DMatrix::zeros(2, 2));

        let bad = PosteriorStage { gram: scalar(2.0), moment: vec1(1.0), lr: 1.0, steps: 3 };
        assert!(posterior_moments(&[bad], &vec1(0.0), 1.0).is_err());
    }

    #[test]
    fn posterior_check_passes_and_negative_control_fails() {
        let ok = validate_posterior(&PosteriorCheckConfig::default()).unwrap();
        assert!(ok.pass, "{ok:?}");
        let noiseless = validate_posterior(&PosteriorCheckConfig { zeta_inv: 0.0, chains: 50, ..Default::default() }).unwrap();
        assert!(noiseless.pass, "{noiseless:?}");
        let wrong = validate_posterior(&PosteriorCheckConfig { chain_lr_scale: 1.5, ..Default::default() }).unwrap();
        assert!(!wrong.pass, "{wrong:?}");
    }

    #[test]
    fn theory_constants_examples() {
        assert!((anti_concentration() - 0.12099).abs() < 5e-6);
        let inputs = TheoryInputs {
            horizon: 10,
            episodes: 100,
            batch: 1,
            delta: 0.05,
            critic_dim: 4,
            mode: DataMode::OnPolicy,
            covering: 0.0,
            width_override: None,
        };
        let c = theory_constants(&inputs).unwrap();
        // Direct evaluation: log(20000) / log(1/(1 − 0.12099)) = 76.3…
        let direct = (20000f64).ln() / (1.0f64 / (1.0 - 0.120_990_7)).ln();
        assert!(direct > 76.0 && direct < 77.0);
        assert_eq!(c.chains, 77);
        assert!((c.width - (1.0f64 / 0.05).ln().sqrt()).abs() < 1e-15);
        let zeta = (2.0 * 10.0 * 2.0 * c.width + 8.0 / 3.0f64).powi(-2);
        assert!((c.zeta - zeta).abs() < 1e-18);
        assert!(theory_constants(&TheoryInputs { delta: 1.0, ..inputs }).is_err());
    }

    #[test]
    fn theory_schedule_examples() {
        let g = DMatrix::identity(3, 3) * 2.0;
        let s = theory_schedule(&[g.clone(), g], 4, 10, 9).unwrap();
        assert_eq!(s.lrs, vec![0.25, 0.25]);
        assert_eq!(s.kappa, 1.0);
        let sigma = 1.0 / (4.0 * 10.0 * 5.0 * 3.0);
        assert!((s.sigma - sigma).abs() < 1e-18);
        assert_eq!(s.steps, (2.0 * (1.0 / sigma).ln()).ceil() as usize);
    }

    /// Two states, one step, two actions; rewards known, one-hot features.
    fn two_state_mdp() -> LinearMdp {
        let mut d = TabularDynamics::new(1, 2, 2);
        let r = [[0.2, 0.9], [0.5, 0.0]];
        for s in 0..2 {
            for a in 0..2 {
                d.next_dist_mut(0, s, a)[0] = 1.0;
                d.set_reward(0, s, a, r[s][a]);
            }
        }
        fit_linear_mdp(d, DMatrix::identity(4, 4), 0).unwrap()
    }

    #[test]
    fn noiseless_two_state_matches_ridge_targets() {
        let mdp = two_state_mdp();
        let mut data = Dataset::new(1);
        let mut counts = [0usize; 4];
        let mut rng = stream_rng(3, 0, 0);
        for _ in 0..40 {
            let s = Rng::random_range(&mut rng, 0..2);
            let a = Rng::random_range(&mut rng, 0..2);
            counts[s * 2 + a] += 1;
            let tr = Trajectory {
                steps: vec![crate::sim::Transition { state: s, action: a, reward: mdp.dynamics.reward(0, s, a), next_state: 0 }],
                episode: 0,
                seed: None,
            };
            data.push(&tr, 2).unwrap();
        }
        let params = CriticParams {
            lambda: 1.0,
            zeta_inv: 0.0,
            steps: StepRule::Fixed(3000),
            lr: LrRule::Auto,
            chains: 1,
            clip: ClipRule::Horizon,
            exact_ridge: false,
        };
        let pi = TabularPolicy::uniform(1, 2, 2);
        let mut state = CriticState::new(1, 1, 4);
        let out = critic_update(&mdp, &data, ValueTarget::Policy(&pi), &mut state, &params, 0).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                let n = counts[s * 2 + a] as f64;
                // One-hot ridge: n r / (n + λ).
                let expected = n * mdp.dynamics.reward(0, s, a) / (n + 1.0);
                assert!((out.values.q(0, s, a) - expected).abs() < 1e-8);
            }
        }
    }

    fn collect(mdp: &LinearMdp, episodes: usize, seed: u64) -> Dataset {
        let pi = TabularPolicy::uniform(mdp.horizon(), mdp.num_states(), mdp.num_actions());
        let mut data = Dataset::new(mdp.horizon());
        let mut rng = stream_rng(seed, tags::ROLLOUT, 0);
        for _ in 0..episodes {
            data.push(&rollout(mdp, &pi, &mut rng), mdp.num_actions()).unwrap();
        }
        data
    }

    fn lmc_params(chains: usize, zeta_inv: f64, steps: usize) -> CriticParams {
        CriticParams {
            lambda: 1.0,
            zeta_inv,
            steps: StepRule::Fixed(steps),
            lr: LrRule::Auto,
            chains,
            clip: ClipRule::Horizon,
            exact_ridge: false,
        }
    }

    #[test]
    fn clip_contract_and_value_convexity() {
        let mdp = make_random_mdp(0, 5, 10).unwrap();
        let data = collect(&mdp, 3, 1);
        let pi = TabularPolicy::uniform(5, 15, 5);
        let mut state = CriticState::new(5, 4, 10);
        let out = critic_update(&mdp, &data, ValueTarget::Policy(&pi), &mut state, &lmc_params(4, 5.0, 50), 9).unwrap();
        let v = &out.values;
        for h in 0..5 {
            for s in 0..15 {
                let row = v.q_row(h, s);
                assert!(row.iter().all(|&q| (0.0..=5.0).contains(&q)));
                let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(v.v(h, s) >= lo - 1e-12 && v.v(h, s) <= hi + 1e-12);
            }
        }
        assert_eq!(state.episode, 1);
    }

    #[test]
    fn empty_dataset_is_pure_prior() {
        let mdp = make_random_mdp(0, 3, 10).unwrap();
        let data = Dataset::new(3);
        let pi = TabularPolicy::uniform(3, 15, 5);
        let mut state = CriticState::new(3, 1, 10);
        let out = critic_update(&mdp, &data, ValueTarget::Policy(&pi), &mut state, &lmc_params(1, 0.0, 10), 0).unwrap();
        assert!(out.values.q.iter().all(|&q| q == 0.0));
        assert!(out.step_stats.iter().all(|s| s.samples == 0 && (s.lambda_max - 1.0).abs() < 1e-12));
    }

    #[test]
    fn critic_is_reproducible() {
        let mdp = make_random_mdp(1, 4, 10).unwrap();
        let data = collect(&mdp, 2, 2);
        let pi = TabularPolicy::uniform(4, 15, 5);
        let run = || {
            let mut state = CriticState::new(4, 6, 10);
            critic_update(&mdp, &data, ValueTarget::Policy(&pi), &mut state, &lmc_params(6, 1.0, 30), 77).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn optimism_monotone_in_chains() {
        let mdp = make_random_mdp(2, 4, 10).unwrap();
        let data = collect(&mdp, 2, 3);
        let mut previous: Option<Vec<f64>> = None;
        for m in 1..=6 {
            // Fixed next-step values isolate the max over chains at every step.
            let mut state = CriticState::new(4, m, 10);
            let out = critic_update(&mdp, &data, ValueTarget::Greedy, &mut state, &lmc_params(m, 0.5, 20), 5).unwrap();
            let raw: Vec<f64> = state.weights[3]
                .iter()
                .map(|w| (&mdp.features * w).iter().cloned().collect::<Vec<f64>>())
                .fold(vec![f64::NEG_INFINITY; 75], |acc, q| acc.iter().zip(&q).map(|(a, b)| a.max(*b)).collect());
            if let Some(prev) = &previous {
                for (a, b) in raw.iter().zip(prev) {
                    assert!(a >= b);
                }
            }
            assert!(out.values.q.len() == 4 * 75);
            previous = Some(raw);
        }
    }

    #[test]
    fn prediction_error_examples() {
        let mdp = make_random_mdp(0, 4, 10).unwrap();
        let pi = TabularPolicy::uniform(4, 15, 5);
        let exact = crate::dp::exact_policy_value(&mdp, &pi);
        assert!(model_prediction_error(&mdp, &exact).iter().all(|x| x.abs() < 1e-12));
        let mut inflated = exact.clone();
        for q in inflated.q.iter_mut() {
            *q += 1.0;
        }
        assert!(model_prediction_error(&mdp, &inflated).iter().all(|x| (x + 1.0).abs() < 1e-12));
        let stats = optimism_stats(&[-1.0, 0.5, 0.0, 1e-12]);
        assert_eq!(stats.violation_rate, 0.25);
        assert_eq!(stats.max_error, 0.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn elliptical_potential_is_at_most_dim(
            rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..60),
        ) {
            let rows: Vec<DVector<f64>> = rows.into_iter().map(DVector::from_vec).collect();
            prop_assert!(elliptical_potential(&rows, 1.0) <= 4.0 + 1e-9);
        }
    }

    #[test]
    fn config_rules() {
        let c = CriticConfig::default();
        assert!(c.validate().is_ok());
        let bad = CriticConfig { lr: Setting::Rule(Rule::Theory), ..c.clone() };
        assert!(bad.validate().is_err());
        let json = r#"{"lambda":1.0,"zeta_inv":"theory","steps":"theory","lr":"auto","chains":3,"noise":true,"clip":"stepwise","value_policy":"current","exact_ridge":false}"#;
        let parsed: CriticConfig = serde_json::from_str(json).unwrap();
        assert_eq!(parsed.steps, Setting::Rule(Rule::Theory));
        assert_eq!(parsed.chains, Setting::Value(3));
    }
}
