//! Finite-horizon linear MDPs backed by explicit tabular dynamics.
//!
//! The simulator and every exact evaluation run on the tabular kernel and
//! rewards. The fitted measures `ψ_h` and reward vectors `υ_h` exist so the
//! linear structure `P_h(s'|s,a) ≈ ⟨φ(s,a), ψ_h(s')⟩`, `r_h(s,a) ≈ ⟨φ(s,a), υ_h⟩`
//! can be checked, with the achieved residual recorded as `fit_tol`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};

/// Tolerance on row sums of the tabular kernel.
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Singular-value cutoff (relative) for the least-squares fit.
const FIT_RCOND: f64 = 1e-12;

/// Affine map from the stored critic-scale rewards in `[0, 1]` back to the
/// environment's raw rewards: `raw = scale * r + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardMap {
    pub scale: f64,
    pub offset: f64,
}

impl RewardMap {
    pub const IDENTITY: RewardMap = RewardMap { scale: 1.0, offset: 0.0 };

    /// Map that sends `[min, max]` onto `[0, 1]`.
    pub fn from_range(min: f64, max: f64) -> Self {
        if max > min {
            RewardMap { scale: max - min, offset: min }
        } else {
            RewardMap { scale: 1.0, offset: min }
        }
    }

    pub fn to_unit(&self, raw: f64) -> f64 {
        (raw - self.offset) / self.scale
    }

    /// Raw-scale value of a return accumulated over `steps` rewards.
    pub fn value_to_raw(&self, value: f64, steps: usize) -> f64 {
        self.scale * value + self.offset * steps as f64
    }
}

impl Default for RewardMap {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Dense `(h, s, a)`-indexed tabular dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDynamics {
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    /// Flattened `P[h][s][a][s']`.
    pub transitions: Vec<f64>,
    /// Flattened `r[h][s][a]`, in `[0, 1]`.
    pub rewards: Vec<f64>,
}

impl TabularDynamics {
    pub fn new(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            transitions: vec![0.0; horizon * num_states * num_actions * num_states],
            rewards: vec![0.0; horizon * num_states * num_actions],
        }
    }

    #[inline]
    pub fn sa_index(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    #[inline]
    fn hsa(&self, h: usize, s: usize, a: usize) -> usize {
        (h * self.num_states + s) * self.num_actions + a
    }

    /// Distribution over next states for `(h, s, a)`.
    #[inline]
    pub fn next_dist(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let base = self.hsa(h, s, a) * self.num_states;
        &self.transitions[base..base + self.num_states]
    }

    #[inline]
    pub fn next_dist_mut(&mut self, h: usize, s: usize, a: usize) -> &mut [f64] {
        let base = self.hsa(h, s, a) * self.num_states;
        let n = self.num_states;
        &mut self.transitions[base..base + n]
    }

    #[inline]
    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.rewards[self.hsa(h, s, a)]
    }

    #[inline]
    pub fn set_reward(&mut self, h: usize, s: usize, a: usize, r: f64) {
        let i = self.hsa(h, s, a);
        self.rewards[i] = r;
    }

    /// Checks shape, probability simplex rows, and the reward range.
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.num_states == 0 || self.num_actions == 0 {
            return Err(invalid("horizon, state count and action count must be positive"));
        }
        let n = self.horizon * self.num_states * self.num_actions;
        if self.transitions.len() != n * self.num_states || self.rewards.len() != n {
            return Err(mismatch(format!(
                "tabular dynamics sized for H={}, S={}, A={}",
                self.horizon, self.num_states, self.num_actions
            )));
        }
        for h in 0..self.horizon {
            for s in 0..self.num_states {
                for a in 0..self.num_actions {
                    let row = self.next_dist(h, s, a);
                    if row.iter().any(|&p| !(p >= 0.0)) {
                        return Err(invalid(format!("negative transition at (h={h}, s={s}, a={a})")));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(invalid(format!(
                            "transition row (h={h}, s={s}, a={a}) sums to {sum}"
                        )));
                    }
                    let r = self.reward(h, s, a);
                    if !(0.0..=1.0).contains(&r) {
                        return Err(invalid(format!("reward {r} at (h={h}, s={s}, a={a}) outside [0, 1]")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A finite-horizon MDP with a linear structure fitted to its tabular dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMdp {
    pub dynamics: TabularDynamics,
    /// `φ(s, a)` as rows indexed by `s * A + a`; shape `(S·A) × d_c`.
    pub features: DMatrix<f64>,
    /// `ψ_h` as `d_c × S` matrices, column `s'` is `ψ_h(s')`.
    pub measures: Vec<DMatrix<f64>>,
    /// `υ_h` for each step.
    pub reward_vecs: Vec<DVector<f64>>,
    pub initial_state: usize,
    /// Max absolute residual of the linear fit over kernel and rewards.
    pub fit_tol: f64,
    /// Numerical rank of the feature matrix used in the fit.
    pub feature_rank: usize,
    /// Factor the raw features were divided by to enforce `‖φ‖ ≤ 1`.
    pub feature_scale: f64,
    pub reward_map: RewardMap,
}

impl LinearMdp {
    pub fn horizon(&self) -> usize {
        self.dynamics.horizon
    }
    pub fn num_states(&self) -> usize {
        self.dynamics.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.dynamics.num_actions
    }
    pub fn critic_dim(&self) -> usize {
        self.features.ncols()
    }
    pub fn num_pairs(&self) -> usize {
        self.num_states() * self.num_actions()
    }

    /// `φ(s, a)` as a column vector.
    pub fn feature(&self, s: usize, a: usize) -> DVector<f64> {
        self.features.row(self.dynamics.sa_index(s, a)).transpose()
    }

    /// Whether the fitted model spans the tabular dynamics exactly (up to `tol`).
    pub fn is_linear_within(&self, tol: f64) -> bool {
        self.fit_tol <= tol
    }

    /// Fitted transition probability `⟨φ(s,a), ψ_h(s')⟩`.
    pub fn fitted_transition(&self, h: usize, s: usize, a: usize, next: usize) -> f64 {
        let row = self.features.row(self.dynamics.sa_index(s, a));
        (row * self.measures[h].column(next))[(0, 0)]
    }

    /// Fitted reward `⟨φ(s,a), υ_h⟩`.
    pub fn fitted_reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.features.row(self.dynamics.sa_index(s, a)).dot(&self.reward_vecs[h].transpose())
    }

    /// The model rebuilt from its own linear fit, so the features span it.
    ///
    /// Fitted probabilities are clipped at zero and renormalized and fitted rewards
    /// clipped to `[0, 1]`; `fit_tol` of the result measures what clipping left over.
    pub fn projected(&self) -> Result<LinearMdp> {
        let (hh, ns, na) = (self.horizon(), self.num_states(), self.num_actions());
        let mut dynamics = TabularDynamics::new(hh, ns, na);
        for h in 0..hh {
            for s in 0..ns {
                for a in 0..na {
                    let row = dynamics.next_dist_mut(h, s, a);
                    for (next, p) in row.iter_mut().enumerate() {
                        *p = self.fitted_transition(h, s, a, next).max(0.0);
                    }
                    let sum: f64 = row.iter().sum();
                    if !(sum > 0.0) {
                        return Err(Error::NumericalAbort(format!("fitted kernel row ({h}, {s}, {a}) has no mass")));
                    }
                    row.iter_mut().for_each(|p| *p /= sum);
                    dynamics.set_reward(h, s, a, self.fitted_reward(h, s, a).clamp(0.0, 1.0));
                }
            }
        }
        let mut mdp = fit_linear_mdp(dynamics, self.features.clone(), self.initial_state)?;
        mdp.feature_scale = self.feature_scale;
        mdp.reward_map = self.reward_map;
        Ok(mdp)
    }

    pub fn to_document(&self) -> MdpDocument {
        MdpDocument::from(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        doc.into_mdp()
    }
}

/// Least-squares fit of the linear structure onto tabular dynamics.
///
/// `features` has one row per `(s, a)` pair (index `s * A + a`). Rows with
/// norm above one are handled by dividing all features by the largest norm;
/// the factor is recorded in `feature_scale`. Rank-deficient feature matrices
/// fall back to the minimum-norm solution and the rank is recorded.
pub fn fit_linear_mdp(
    dynamics: TabularDynamics,
    features: DMatrix<f64>,
    initial_state: usize,
) -> Result<LinearMdp> {
    dynamics.validate()?;
    let pairs = dynamics.num_states * dynamics.num_actions;
    if features.nrows() != pairs {
        return Err(mismatch(format!(
            "feature table has {} rows, expected S·A = {pairs}",
            features.nrows()
        )));
    }
    if features.ncols() == 0 {
        return Err(invalid("feature dimension must be positive"));
    }
    if initial_state >= dynamics.num_states {
        return Err(invalid(format!("initial state {initial_state} out of range")));
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(invalid("features must be finite"));
    }

    let max_norm = features.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    let (features, feature_scale) = if max_norm > 1.0 {
        (features / max_norm, max_norm)
    } else {
        (features, 1.0)
    };

    let svd = features.clone().svd(true, true);
    let top = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = FIT_RCOND * top.max(f64::MIN_POSITIVE) * pairs.max(features.ncols()) as f64;
    let feature_rank = svd.rank(eps);

    let (h_max, n_s, n_a) = (dynamics.horizon, dynamics.num_states, dynamics.num_actions);
    let mut measures = Vec::with_capacity(h_max);
    let mut reward_vecs = Vec::with_capacity(h_max);
    let mut fit_tol: f64 = 0.0;
    for h in 0..h_max {
        let kernel = DMatrix::from_fn(pairs, n_s, |i, next| {
            dynamics.next_dist(h, i / n_a, i % n_a)[next]
        });
        let rewards = DVector::from_fn(pairs, |i, _| dynamics.reward(h, i / n_a, i % n_a));
        let psi = svd
            .solve(&kernel, eps)
            .map_err(|e| Error::NumericalAbort(format!("least-squares fit failed: {e}")))?;
        let upsilon = svd
            .solve(&rewards, eps)
            .map_err(|e| Error::NumericalAbort(format!("least-squares fit failed: {e}")))?;
        let kernel_res = (&features * &psi - &kernel).amax();
        let reward_res = (&features * &upsilon - &rewards).amax();
        fit_tol = fit_tol.max(kernel_res).max(reward_res);
        measures.push(psi);
        reward_vecs.push(upsilon);
    }

    Ok(LinearMdp {
        dynamics,
        features,
        measures,
        reward_vecs,
        initial_state,
        fit_tol,
        feature_rank,
        feature_scale,
        reward_map: RewardMap::IDENTITY,
    })
}

/// JSON form of a [`LinearMdp`], with nested arrays in place of matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    pub horizon: usize,
    pub state_count: usize,
    pub action_count: usize,
    pub critic_dim: usize,
    pub initial_state: usize,
    /// `features[s][a]` is `φ(s, a)`.
    pub features: Vec<Vec<Vec<f64>>>,
    /// `transitions[h][s][a]` is the next-state distribution.
    pub transitions: Vec<Vec<Vec<Vec<f64>>>>,
    /// `rewards[h][s][a]`, critic scale `[0, 1]`.
    pub rewards: Vec<Vec<Vec<f64>>>,
    /// `measures[h][s']` is `ψ_h(s')`; recomputed on load.
    #[serde(default)]
    pub measures: Vec<Vec<Vec<f64>>>,
    /// `reward_vecs[h]` is `υ_h`; recomputed on load.
    #[serde(default)]
    pub reward_vecs: Vec<Vec<f64>>,
    #[serde(default)]
    pub fit_tol: f64,
    #[serde(default)]
    pub feature_scale: Option<f64>,
    #[serde(default)]
    pub reward_map: RewardMap,
}

impl From<&LinearMdp> for MdpDocument {
    fn from(m: &LinearMdp) -> Self {
        let d = &m.dynamics;
        let (hh, ns, na) = (d.horizon, d.num_states, d.num_actions);
        MdpDocument {
            horizon: hh,
            state_count: ns,
            action_count: na,
            critic_dim: m.critic_dim(),
            initial_state: m.initial_state,
            features: (0..ns)
                .map(|s| (0..na).map(|a| m.feature(s, a).iter().cloned().collect()).collect())
                .collect(),
            transitions: (0..hh)
                .map(|h| {
                    (0..ns)
                        .map(|s| (0..na).map(|a| d.next_dist(h, s, a).to_vec()).collect())
                        .collect()
                })
                .collect(),
            rewards: (0..hh)
                .map(|h| (0..ns).map(|s| (0..na).map(|a| d.reward(h, s, a)).collect()).collect())
                .collect(),
            measures: m
                .measures
                .iter()
                .map(|psi| psi.column_iter().map(|c| c.iter().cloned().collect()).collect())
                .collect(),
            reward_vecs: m.reward_vecs.iter().map(|u| u.iter().cloned().collect()).collect(),
            fit_tol: m.fit_tol,
            feature_scale: Some(m.feature_scale),
            reward_map: m.reward_map,
        }
    }
}

impl MdpDocument {
    /// Validates the tabular part and refits the linear structure.
    pub fn into_mdp(self) -> Result<LinearMdp> {
        let (hh, ns, na, dc) = (self.horizon, self.state_count, self.action_count, self.critic_dim);
        let shape_err = |what: &str| mismatch(format!("{what} does not match declared dimensions"));
        if self.features.len() != ns
            || self.features.iter().any(|r| r.len() != na || r.iter().any(|f| f.len() != dc))
        {
            return Err(shape_err("features"));
        }
        if self.transitions.len() != hh
            || self.transitions.iter().any(|hs| {
                hs.len() != ns || hs.iter().any(|sa| sa.len() != na || sa.iter().any(|p| p.len() != ns))
            })
        {
            return Err(shape_err("transitions"));
        }
        if self.rewards.len() != hh
            || self.rewards.iter().any(|hs| hs.len() != ns || hs.iter().any(|sa| sa.len() != na))
        {
            return Err(shape_err("rewards"));
        }
        let mut dynamics = TabularDynamics::new(hh, ns, na);
        for h in 0..hh {
            for s in 0..ns {
                for a in 0..na {
                    dynamics.next_dist_mut(h, s, a).copy_from_slice(&self.transitions[h][s][a]);
                    dynamics.set_reward(h, s, a, self.rewards[h][s][a]);
                }
            }
        }
        let mut raw = DMatrix::zeros(ns * na, dc);
        for s in 0..ns {
            for a in 0..na {
                for (k, &x) in self.features[s][a].iter().enumerate() {
                    raw[(s * na + a, k)] = x;
                }
            }
        }
        let mut mdp = fit_linear_mdp(dynamics, raw, self.initial_state)?;
        if let Some(scale) = self.feature_scale {
            if scale > 0.0 {
                mdp.feature_scale *= scale;
            }
        }
        mdp.reward_map = self.reward_map;
        Ok(mdp)
    }
}
