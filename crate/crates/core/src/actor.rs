//! Projected NPG actor: logit-matching regression onto the log-linear class.
//!
//! Every step `h` solves a weighted least-squares problem
//! `½ Σ ρ(s,a) [⟨φ_a(s,a), θ⟩ − ẑ(s,a)]²` over the design points, where the target
//! `ẑ` is the unprojected mirror-descent logit (NPG: `⟨φ_a, θ_prev⟩ + η Q̂`;
//! SPMA: `⟨φ_a, θ_prev⟩ + log(1 + η Â)`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::linalg::{lambda_max_power, sym_pinv};
use crate::policy::log_softmax;

/// `min{max{x, 0}, level}`.
pub fn clip_to(x: f64, level: f64) -> f64 {
    x.max(0.0).min(level)
}

/// Actor clip `[0, H − h + 1]` with 0-based `step = h − 1`.
pub fn clip_q(x: f64, step: usize, horizon: usize) -> f64 {
    clip_to(x, horizon.saturating_sub(step) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorSolver {
    #[default]
    ClosedForm,
    GradientDescent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorVariant {
    #[default]
    Npg,
    Spma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorConfig {
    pub eta: f64,
    /// Gradient-descent steps `K_t`; unused by the closed-form solver.
    pub steps: usize,
    /// Gradient-descent step size; `None` means `1 / (2 λ_max(G))`.
    pub lr: Option<f64>,
    pub solver: ActorSolver,
    pub variant: ActorVariant,
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self { eta: 1.0, steps: 100, lr: None, solver: ActorSolver::ClosedForm, variant: ActorVariant::Npg }
    }
}

impl ActorConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(invalid("eta must be positive and finite"));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0) {
                return Err(invalid("actor_lr must be positive"));
            }
        }
        if self.variant == ActorVariant::Spma && self.eta > 1.0 / (2.0 * horizon as f64) {
            return Err(invalid(format!("spma requires eta <= 1/(2H) = {}", 1.0 / (2.0 * horizon as f64))));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActorDiagnostics {
    /// Loss at the returned `θ`.
    pub achieved_loss: f64,
    /// Loss at the exact minimizer.
    pub optimal_loss: f64,
    /// `achieved_loss − optimal_loss`.
    pub eps_opt_estimate: f64,
    pub rank: usize,
    pub rank_deficient: bool,
    /// All design features identical; `G` was regularized by `1e-10 · I` for the step size.
    pub degenerate: bool,
    pub steps_run: usize,
    pub lr: Option<f64>,
}

/// Regularization applied to a degenerate Gram matrix.
pub const DEGENERATE_RIDGE: f64 = 1e-10;

/// One step's logit-matching regression.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorProblem {
    /// Design features, one row per point.
    pub phi: DMatrix<f64>,
    pub rho: DVector<f64>,
    pub target: DVector<f64>,
}

impl ActorProblem {
    pub fn new(phi: DMatrix<f64>, rho: DVector<f64>, target: DVector<f64>) -> Result<Self> {
        if phi.nrows() != rho.len() || phi.nrows() != target.len() {
            return Err(mismatch("actor problem: features, weights and targets must align"));
        }
        if phi.nrows() == 0 {
            return Err(invalid("actor problem needs at least one design point"));
        }
        if rho.iter().any(|&r| !(r >= 0.0)) {
            return Err(invalid("design weights must be nonnegative"));
        }
        Ok(Self { phi, rho, target })
    }

    /// Rows of `features` at `points`, with NPG targets `⟨φ_a, θ_prev⟩ + η q`.
    pub fn npg(
        features: &DMatrix<f64>,
        points: &[usize],
        rho: &[f64],
        theta_prev: &DVector<f64>,
        q: &[f64],
        eta: f64,
    ) -> Result<Self> {
        if q.len() != points.len() {
            return Err(mismatch("one Q̂ value per design point"));
        }
        let phi = select_rows(features, points);
        let target = &phi * theta_prev + DVector::from_column_slice(q) * eta;
        Self::new(phi, DVector::from_column_slice(rho), target)
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    /// `G = Σ ρ φ φᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        let weighted = DMatrix::from_fn(self.phi.nrows(), self.phi.ncols(), |i, j| self.rho[i] * self.phi[(i, j)]);
        self.phi.transpose() * weighted
    }

    /// `Σ ρ ẑ φ`.
    pub fn moment(&self) -> DVector<f64> {
        self.phi.transpose() * self.rho.component_mul(&self.target)
    }

    pub fn residuals(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.phi * theta - &self.target
    }

    pub fn loss(&self, theta: &DVector<f64>) -> f64 {
        let r = self.residuals(theta);
        0.5 * r.iter().zip(self.rho.iter()).map(|(x, w)| w * x * x).sum::<f64>()
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.phi.transpose() * self.rho.component_mul(&self.residuals(theta))
    }

    fn is_degenerate(&self) -> bool {
        let first = self.phi.row(0);
        (1..self.phi.nrows()).all(|i| self.phi.row(i) == first)
    }
}

pub(crate) fn select_rows(features: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), features.ncols(), |i, j| features[(rows[i], j)])
}

/// `½ Σ ρ [⟨φ_a, θ − θ_prev⟩ − η Q̂]²` on the design points.
pub fn actor_loss(
    theta: &DVector<f64>,
    theta_prev: &DVector<f64>,
    features: &DMatrix<f64>,
    points: &[usize],
    rho: &[f64],
    q: &[f64],
    eta: f64,
) -> Result<f64> {
    Ok(ActorProblem::npg(features, points, rho, theta_prev, q, eta)?.loss(theta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorSolution {
    pub theta: DVector<f64>,
    pub diagnostics: ActorDiagnostics,
}

/// Pseudo-inverse of a design Gram matrix, reusable while the design points and
/// weights stay fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct GramFactor {
    pub pinv: DMatrix<f64>,
    pub rank: usize,
}

impl GramFactor {
    pub fn new(gram: &DMatrix<f64>) -> Self {
        let (pinv, rank) = sym_pinv(gram);
        Self { pinv, rank }
    }
}

/// Exact minimizer closest to `θ_prev`: `θ_prev + G⁺ Σ ρ (ẑ − ⟨φ_a, θ_prev⟩) φ_a`.
pub fn actor_solve_closed_form(problem: &ActorProblem, theta_prev: &DVector<f64>) -> Result<ActorSolution> {
    actor_solve_factored(problem, theta_prev, &GramFactor::new(&problem.gram()))
}

/// [`actor_solve_closed_form`] with a precomputed factor of `problem.gram()`.
pub fn actor_solve_factored(
    problem: &ActorProblem,
    theta_prev: &DVector<f64>,
    factor: &GramFactor,
) -> Result<ActorSolution> {
    if theta_prev.len() != problem.dim() || factor.pinv.nrows() != problem.dim() {
        return Err(mismatch("θ_prev dimension"));
    }
    let rank = factor.rank;
    let step = problem.gradient(theta_prev);
    let theta = theta_prev - &factor.pinv * step;
    let loss = problem.loss(&theta);
    Ok(ActorSolution {
        theta,
        diagnostics: ActorDiagnostics {
            achieved_loss: loss,
            optimal_loss: loss,
            eps_opt_estimate: 0.0,
            rank,
            rank_deficient: rank < problem.dim(),
            degenerate: problem.is_degenerate(),
            steps_run: 0,
            lr: None,
        },
    })
}

/// `K` full-gradient steps from `θ_prev`.
///
/// Aborts with [`Error::NumericalAbort`] when the loss rises on three consecutive steps.
pub fn actor_update_gd(
    problem: &ActorProblem,
    theta_prev: &DVector<f64>,
    steps: usize,
    lr: Option<f64>,
) -> Result<ActorSolution> {
    let exact = actor_solve_closed_form(problem, theta_prev)?;
    let mut gram = problem.gram();
    let degenerate = exact.diagnostics.degenerate;
    if degenerate {
        for i in 0..gram.nrows() {
            gram[(i, i)] += DEGENERATE_RIDGE;
        }
    }
    let lr = match lr {
        Some(lr) => lr,
        None => {
            let top = lambda_max_power(&gram, 200, 1e-14);
            if top <= 0.0 {
                return Err(invalid("actor Gram matrix is zero"));
            }
            0.5 / top
        }
    };
    let mut theta = theta_prev.clone();
    let mut loss = problem.loss(&theta);
    let mut rises = 0;
    for k in 0..steps {
        theta -= problem.gradient(&theta) * lr;
        let next = problem.loss(&theta);
        if !next.is_finite() {
            return Err(Error::NumericalAbort(format!("actor loss non-finite at step {k}")));
        }
        // Rounding near the optimum is not a rise.
        rises = if next > loss * (1.0 + 1e-12) + f64::MIN_POSITIVE { rises + 1 } else { 0 };
        if rises >= 3 {
            return Err(Error::NumericalAbort(format!(
                "actor loss increased on 3 consecutive steps (step {k}, loss {next:e}, lr {lr:e})"
            )));
        }
        loss = next;
    }
    Ok(ActorSolution {
        theta,
        diagnostics: ActorDiagnostics {
            achieved_loss: loss,
            optimal_loss: exact.diagnostics.optimal_loss,
            eps_opt_estimate: loss - exact.diagnostics.optimal_loss,
            rank: exact.diagnostics.rank,
            rank_deficient: exact.diagnostics.rank_deficient,
            degenerate,
            steps_run: steps,
            lr: Some(lr),
        },
    })
}

/// Dispatches on the configured solver.
pub fn actor_solve(problem: &ActorProblem, theta_prev: &DVector<f64>, config: &ActorConfig) -> Result<ActorSolution> {
    match config.solver {
        ActorSolver::ClosedForm => actor_solve_closed_form(problem, theta_prev),
        ActorSolver::GradientDescent => actor_update_gd(problem, theta_prev, config.steps, config.lr),
    }
}

/// SPMA targets for one state: `logit + log(1 + η Â)` with `Â = Q̂ − ⟨π, Q̂⟩`.
pub fn spma_target(logits: &[f64], q: &[f64], probs: &[f64], eta: f64) -> Result<Vec<f64>> {
    if logits.len() != q.len() || q.len() != probs.len() {
        return Err(mismatch("spma_target: logits, Q̂ and π must have one entry per action"));
    }
    let baseline: f64 = probs.iter().zip(q).map(|(p, x)| p * x).sum();
    logits
        .iter()
        .zip(q)
        .map(|(z, x)| {
            let ratio = 1.0 + eta * (x - baseline);
            if ratio <= 0.0 {
                Err(invalid(format!("spma_target: 1 + η·Â = {ratio} is not positive")))
            } else {
                Ok(z + ratio.ln())
            }
        })
        .collect()
}

/// Unprojected NPG step `p · exp(η g) / Z`.
pub fn npg_half_step(probs: &[f64], g: &[f64], eta: f64) -> Vec<f64> {
    let logits: Vec<f64> = probs.iter().zip(g).map(|(p, x)| p.ln() + eta * x).collect();
    crate::policy::softmax(&logits)
}

/// `KL(u ‖ p)`, with `0 · log 0 = 0` in `u`; `p` must be strictly positive.
pub fn kl_divergence(u: &[f64], p: &[f64]) -> Result<f64> {
    if u.len() != p.len() {
        return Err(mismatch("KL: length mismatch"));
    }
    if p.iter().any(|&x| !(x > 0.0)) {
        return Err(invalid("KL: reference distribution has a zero entry"));
    }
    Ok(u.iter().zip(p).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum())
}

/// `KL(u ‖ p_projected) − KL(u ‖ p_half)`.
///
/// `u` may contain zeros (a deterministic comparator); both `p` must be strictly positive.
pub fn projection_error(u: &[f64], p_projected: &[f64], p_half: &[f64]) -> Result<f64> {
    if u.iter().any(|&x| x < 0.0) {
        return Err(invalid("projection_error: negative comparator entry"));
    }
    // Evaluated as Σ u log(p_half / p_projected) to avoid cancelling two large KLs.
    if u.len() != p_projected.len() || u.len() != p_half.len() {
        return Err(mismatch("projection_error: length mismatch"));
    }
    if p_projected.iter().chain(p_half).any(|&x| !(x > 0.0)) {
        return Err(invalid("projection_error: zero-probability entry"));
    }
    Ok(u.iter()
        .zip(p_projected.iter().zip(p_half))
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, (pp, ph))| a * (ph.ln() - pp.ln()))
        .sum())
}

/// [`projection_error`] from logits, for policies whose probabilities underflow.
pub fn projection_error_logits(u: &[f64], z_projected: &[f64], z_half: &[f64]) -> Result<f64> {
    if u.len() != z_projected.len() || u.len() != z_half.len() {
        return Err(mismatch("projection_error: length mismatch"));
    }
    if u.iter().any(|&x| x < 0.0) {
        return Err(invalid("projection_error: negative comparator entry"));
    }
    let (lp, lh) = (log_softmax(z_projected), log_softmax(z_half));
    Ok(u.iter().zip(lp.iter().zip(&lh)).filter(|(a, _)| **a > 0.0).map(|(a, (p, h))| a * (h - p)).sum())
}

/// `2 (φ̄_G + 1) √ε_bias + 2 √ε_opt`.
pub fn projection_error_bound(phi_bar: f64, eps_bias: f64, eps_opt: f64) -> f64 {
    2.0 * (phi_bar + 1.0) * eps_bias.max(0.0).sqrt() + 2.0 * eps_opt.max(0.0).sqrt()
}
