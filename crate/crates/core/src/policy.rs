//! Policies over a finite action set.
//!
//! [`LogLinearPolicy`] is the explicit actor: logits linear in actor features.
//! [`ImplicitNpgPolicy`] realizes the unprojected NPG iterate by keeping every
//! past critic and summing the clipped `Q̂` functions at query time.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actor::clip_to;
use crate::error::{invalid, mismatch, Result};

/// A (possibly time-inhomogeneous) Markov policy. Steps are 0-based.
pub trait Policy {
    fn num_actions(&self) -> usize;

    /// Writes `π_h(·|s)` into `out` (length `num_actions`).
    fn probs_into(&self, step: usize, state: usize, out: &mut [f64]);

    fn action_probs(&self, step: usize, state: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_actions()];
        self.probs_into(step, state, &mut out);
        out
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// `log softmax(z)`, finite wherever `z` is, even when the probability underflows.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - max - log_sum).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// Categorical draw from `π_h(·|s)`.
pub fn sample_action<P: Policy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    step: usize,
    state: usize,
    rng: &mut R,
) -> usize {
    sample_categorical(&policy.action_probs(step, state), rng)
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    WeightedIndex::new(probs)
        .expect("action probabilities must be finite, nonnegative and not all zero")
        .sample(rng)
}

/// Explicit table `π[h][s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; horizon * num_states * num_actions],
        }
    }

    /// Deterministic policy from a `[h][s] -> a` rule.
    pub fn deterministic(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        choose: impl Fn(usize, usize) -> usize,
    ) -> Self {
        let mut p = Self {
            horizon,
            num_states,
            num_actions,
            probs: vec![0.0; horizon * num_states * num_actions],
        };
        for h in 0..horizon {
            for s in 0..num_states {
                let a = choose(h, s);
                p.row_mut(h, s)[a] = 1.0;
            }
        }
        p
    }

    /// Greedy policy for a `q[h][s][a]` table, smallest index on ties.
    pub fn greedy(q: &[f64], horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self::deterministic(horizon, num_states, num_actions, |h, s| {
            let base = (h * num_states + s) * num_actions;
            argmax_first(&q[base..base + num_actions])
        })
    }

    /// Snapshot of any policy.
    pub fn from_policy<P: Policy + ?Sized>(policy: &P, horizon: usize, num_states: usize) -> Self {
        let na = policy.num_actions();
        let mut probs = vec![0.0; horizon * num_states * na];
        for h in 0..horizon {
            for s in 0..num_states {
                let base = (h * num_states + s) * na;
                policy.probs_into(h, s, &mut probs[base..base + na]);
            }
        }
        Self { horizon, num_states, num_actions: na, probs }
    }

    pub fn from_table(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        if probs.len() != horizon * num_states * num_actions {
            return Err(mismatch("policy table size"));
        }
        for row in probs.chunks(num_actions) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(invalid("policy rows must be probability vectors"));
            }
        }
        Ok(Self { horizon, num_states, num_actions, probs })
    }

    pub fn row(&self, step: usize, state: usize) -> &[f64] {
        let base = (step * self.num_states + state) * self.num_actions;
        &self.probs[base..base + self.num_actions]
    }

    pub fn row_mut(&mut self, step: usize, state: usize) -> &mut [f64] {
        let base = (step * self.num_states + state) * self.num_actions;
        &mut self.probs[base..base + self.num_actions]
    }

    pub fn table(&self) -> &[f64] {
        &self.probs
    }

    /// Largest absolute difference between two tables of the same shape.
    pub fn max_abs_diff(&self, other: &TabularPolicy) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Policy for TabularPolicy {
    fn num_actions(&self) -> usize {
        self.num_actions
    }
    fn probs_into(&self, step: usize, state: usize, out: &mut [f64]) {
        out.copy_from_slice(self.row(step, state));
    }
}

pub(crate) fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `π_h(a|s, θ) ∝ exp⟨φ_a(s,a), θ_h⟩`.
#[derive(Debug, Clone)]
pub struct LogLinearPolicy {
    features: Arc<DMatrix<f64>>,
    num_actions: usize,
    theta: Vec<DVector<f64>>,
}

impl LogLinearPolicy {
    /// `θ = 0` at every step, i.e. the uniform policy.
    pub fn uniform(features: Arc<DMatrix<f64>>, num_actions: usize, horizon: usize) -> Result<Self> {
        if num_actions == 0 || features.nrows() % num_actions != 0 {
            return Err(mismatch("actor feature rows must be a multiple of the action count"));
        }
        let d = features.ncols();
        Ok(Self { features, num_actions, theta: vec![DVector::zeros(d); horizon] })
    }

    pub fn with_params(
        features: Arc<DMatrix<f64>>,
        num_actions: usize,
        theta: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let mut p = Self::uniform(features, num_actions, theta.len())?;
        if theta.iter().any(|t| t.len() != p.actor_dim()) {
            return Err(mismatch("θ dimension must match actor features"));
        }
        p.theta = theta;
        Ok(p)
    }

    pub fn actor_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.theta.len()
    }

    pub fn features(&self) -> &Arc<DMatrix<f64>> {
        &self.features
    }

    pub fn theta(&self, step: usize) -> &DVector<f64> {
        &self.theta[step]
    }

    pub fn set_theta(&mut self, step: usize, theta: DVector<f64>) {
        assert_eq!(theta.len(), self.actor_dim());
        self.theta[step] = theta;
    }

    /// Number of stored scalars; `H · d_a` regardless of how long training ran.
    pub fn parameter_count(&self) -> usize {
        self.theta.len() * self.actor_dim()
    }

    pub fn logit(&self, step: usize, state: usize, action: usize) -> f64 {
        self.features.row(state * self.num_actions + action).dot(&self.theta[step].transpose())
    }

    pub fn logits(&self, step: usize, state: usize) -> Vec<f64> {
        (0..self.num_actions).map(|a| self.logit(step, state, a)).collect()
    }

    /// `θ` as one JSON array per step.
    pub fn params_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.theta
                .iter()
                .map(|t| serde_json::json!(t.iter().cloned().collect::<Vec<f64>>()))
                .collect(),
        )
    }
}

impl Policy for LogLinearPolicy {
    fn num_actions(&self) -> usize {
        self.num_actions
    }
    fn probs_into(&self, step: usize, state: usize, out: &mut [f64]) {
        let logits = self.logits(step, state);
        softmax_into(&logits, out);
    }
}

/// Clip applied to each stored `Q̂` when the implicit policy is queried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipRule {
    /// `[0, H − h + 1]` with 1-based `h`, i.e. `[0, H − step]`.
    #[default]
    Stepwise,
    /// `[0, H]`.
    Horizon,
}

impl ClipRule {
    pub fn level(self, step: usize, horizon: usize) -> f64 {
        match self {
            ClipRule::Stepwise => (horizon - step) as f64,
            ClipRule::Horizon => horizon as f64,
        }
    }
}

/// Critic parameters produced at one episode: `weights[h][m]`.
pub type ChainWeights = Vec<Vec<DVector<f64>>>;

/// `π^{t+1}_h(·|s) ∝ exp(η Σ_{i≤t} Q̂^i_h(s, ·))` from uniform, computed on the fly.
#[derive(Debug, Clone)]
pub struct ImplicitNpgPolicy {
    eta: f64,
    features: Arc<DMatrix<f64>>,
    num_actions: usize,
    horizon: usize,
    clip: ClipRule,
    stored: Vec<ChainWeights>,
    /// `η Σ_i Q̂^i` over the whole table, updated on every push.
    logit_cache: Vec<f64>,
}

impl ImplicitNpgPolicy {
    pub fn new(
        eta: f64,
        critic_features: Arc<DMatrix<f64>>,
        num_actions: usize,
        horizon: usize,
        clip: ClipRule,
    ) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(invalid("η must be positive"));
        }
        if num_actions == 0 || critic_features.nrows() % num_actions != 0 {
            return Err(mismatch("critic feature rows must be a multiple of the action count"));
        }
        let cache = vec![0.0; horizon * critic_features.nrows()];
        Ok(Self { eta, features: critic_features, num_actions, horizon, clip, stored: Vec::new(), logit_cache: cache })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Appends one episode's critic (all steps, all chains).
    pub fn push(&mut self, weights: ChainWeights) -> Result<()> {
        if weights.len() != self.horizon
            || weights.iter().flatten().any(|w| w.len() != self.features.ncols())
        {
            return Err(mismatch("stored critic shape"));
        }
        self.stored.push(weights);
        let episode = self.stored.len() - 1;
        let pairs = self.features.nrows();
        for h in 0..self.horizon {
            for k in 0..pairs {
                let (s, a) = (k / self.num_actions, k % self.num_actions);
                self.logit_cache[h * pairs + k] += self.eta * self.stored_q(episode, h, s, a);
            }
        }
        Ok(())
    }

    pub fn stored_episodes(&self) -> usize {
        self.stored.len()
    }

    /// Number of stored scalars; grows linearly with episodes.
    pub fn parameter_count(&self) -> usize {
        self.stored.iter().flatten().flatten().map(|w| w.len()).sum()
    }

    /// Clipped `Q̂^i_h(s, a)` of stored episode `i`.
    pub fn stored_q(&self, episode: usize, step: usize, state: usize, action: usize) -> f64 {
        let phi = self.features.row(state * self.num_actions + action);
        let raw = self.stored[episode][step]
            .iter()
            .map(|w| phi.dot(&w.transpose()))
            .fold(f64::NEG_INFINITY, f64::max);
        clip_to(raw, self.clip.level(step, self.horizon))
    }

    pub fn logits(&self, step: usize, state: usize) -> Vec<f64> {
        let base = step * self.features.nrows() + state * self.num_actions;
        self.logit_cache[base..base + self.num_actions].to_vec()
    }

    /// Logits summed directly from the stored critics.
    pub fn logits_from_storage(&self, step: usize, state: usize) -> Vec<f64> {
        (0..self.num_actions)
            .map(|a| {
                let total: f64 =
                    (0..self.stored.len()).map(|i| self.stored_q(i, step, state, a)).sum();
                self.eta * total
            })
            .collect()
    }
}

impl Policy for ImplicitNpgPolicy {
    fn num_actions(&self) -> usize {
        self.num_actions
    }
    fn probs_into(&self, step: usize, state: usize, out: &mut [f64]) {
        softmax_into(&self.logits(step, state), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;

    /// Direct evaluation of `e^{z_i} / Σ_j e^{z_j}` without stabilization.
    fn naive_softmax(z: &[f64]) -> Vec<f64> {
        let e: Vec<f64> = z.iter().map(|x| x.exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    #[test]
    fn zero_theta_is_uniform() {
        let f = Arc::new(DMatrix::from_fn(6, 2, |i, j| (i + j) as f64 * 0.1));
        let p = LogLinearPolicy::uniform(f, 3, 2).unwrap();
        for x in p.action_probs(1, 1) {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_action_softmax_value() {
        let oracle = naive_softmax(&[1.0, 0.0]);
        let p = softmax(&[1.0, 0.0]);
        assert!((p[0] - oracle[0]).abs() < 1e-15);
        assert!((p[0] - 0.73106).abs() < 1e-5);
        assert!((p[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_handles_huge_logits() {
        let p = softmax(&[1000.0, 999.0]);
        let q = softmax(&[1.0, 0.0]);
        assert!((p[0] - q[0]).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(z in prop::collection::vec(-30.0f64..30.0, 2..8), c in -100.0f64..100.0) {
            let p = softmax(&z);
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn implicit_policy_basics() {
        // One state, two actions, one-hot critic features.
        let f = Arc::new(DMatrix::identity(2, 2));
        let mut p = ImplicitNpgPolicy::new(1.0, f, 2, 1, ClipRule::Stepwise).unwrap();
        assert_eq!(p.action_probs(0, 0), vec![0.5, 0.5]);

        p.push(vec![vec![DVector::from_vec(vec![0.7, 0.7])]]).unwrap();
        let u = p.action_probs(0, 0);
        assert!((u[0] - 0.5).abs() < 1e-15);

        let mut p = ImplicitNpgPolicy::new(1.0, Arc::new(DMatrix::identity(2, 2)), 2, 1, ClipRule::Stepwise)
            .unwrap();
        // Raw Q = (3, -2) clips to (1, 0) at H = 1.
        p.push(vec![vec![DVector::from_vec(vec![3.0, -2.0])]]).unwrap();
        let probs = p.action_probs(0, 0);
        let oracle = naive_softmax(&[1.0, 0.0]);
        assert!((probs[0] - oracle[0]).abs() < 1e-15);
        assert!((probs[0] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn implicit_uses_max_over_chains() {
        let f = Arc::new(DMatrix::identity(2, 2));
        let mut p = ImplicitNpgPolicy::new(2.0, f, 2, 3, ClipRule::Horizon).unwrap();
        let w = |a: f64, b: f64| DVector::from_vec(vec![a, b]);
        p.push(vec![vec![w(0.1, 0.0), w(0.4, 0.2)]; 3]).unwrap();
        assert!((p.stored_q(0, 2, 0, 0) - 0.4).abs() < 1e-15);
        assert_eq!(p.stored_episodes(), 1);
        assert_eq!(p.parameter_count(), 3 * 2 * 2);
    }

    #[test]
    fn implicit_cache_matches_storage() {
        let f = Arc::new(DMatrix::from_fn(6, 2, |i, j| ((i * 3 + j) % 5) as f64 * 0.3));
        let mut p = ImplicitNpgPolicy::new(0.7, f, 3, 2, ClipRule::Stepwise).unwrap();
        let w = |a: f64, b: f64| DVector::from_vec(vec![a, b]);
        p.push(vec![vec![w(0.5, -0.2), w(1.0, 0.1)], vec![w(0.3, 0.3), w(-1.0, 2.0)]]).unwrap();
        p.push(vec![vec![w(2.0, 1.0), w(0.0, 0.0)], vec![w(0.1, 0.1), w(0.2, 0.4)]]).unwrap();
        for h in 0..2 {
            for s in 0..2 {
                for (a, b) in p.logits(h, s).iter().zip(p.logits_from_storage(h, s)) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn sampling_deterministic_and_reproducible() {
        let mut rng = stream_rng(1, 2, 3);
        for _ in 0..100 {
            assert_eq!(sample_categorical(&[1.0, 0.0, 0.0], &mut rng), 0);
        }
        let draw = |seed| {
            let mut r = stream_rng(seed, 0, 0);
            (0..20).map(|_| sample_categorical(&[0.2, 0.3, 0.5], &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn sampling_frequencies_match() {
        // 10^5 Bernoulli(0.3) draws: SE = sqrt(0.21/1e5) ≈ 0.00145, so 0.01 is ~7 SE.
        let mut rng = stream_rng(11, 0, 0);
        let n = 100_000;
        let zeros = (0..n).filter(|_| sample_categorical(&[0.3, 0.7], &mut rng) == 0).count();
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.3).abs() < 0.01, "{freq}");
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let q = vec![1.0, 1.0, 0.5, 0.2, 0.9, 0.9];
        let p = TabularPolicy::greedy(&q, 1, 2, 3);
        assert_eq!(p.row(0, 0), &[1.0, 0.0, 0.0]);
        assert_eq!(p.row(0, 1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn memory_contract_counts() {
        let f = Arc::new(DMatrix::identity(4, 4));
        let p = LogLinearPolicy::uniform(f.clone(), 2, 5).unwrap();
        assert_eq!(p.parameter_count(), 20);
        let mut imp = ImplicitNpgPolicy::new(1.0, f, 2, 5, ClipRule::Stepwise).unwrap();
        for t in 1..=4 {
            imp.push(vec![vec![DVector::zeros(4)]; 5]).unwrap();
            assert_eq!(imp.parameter_count(), t * 5 * 4);
        }
    }
}
