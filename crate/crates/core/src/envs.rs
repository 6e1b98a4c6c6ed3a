//! Benchmark environments: a small random MDP and the linear Deep Sea grid.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mdp::{fit_linear_mdp, LinearMdp, RewardMap, TabularDynamics};
use crate::rng::{stream_rng, tags};

pub const RANDOM_MDP_STATES: usize = 15;
pub const RANDOM_MDP_ACTIONS: usize = 5;
/// Reward for action 0 in state 0.
pub const RANDOM_MDP_SMALL_REWARD: f64 = 0.1;
/// Reward for action 1 in the last state.
pub const RANDOM_MDP_LARGE_REWARD: f64 = 1.0;

/// Feature construction for the random MDP.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomFeatures {
    /// Random per-state code concatenated with an action one-hot, ℓ₂-normalized.
    #[default]
    Tile,
    /// Indicator of the `(s, a)` pair; requires `d_c = S·A`.
    OneHot,
}

/// Which dynamics the random MDP simulates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomDynamics {
    /// The least-squares projection of the random kernel and rewards onto the
    /// features, which makes the MDP linear in them.
    #[default]
    Projected,
    /// The random kernel and sparse rewards themselves.
    Tabular,
}

/// Random MDP with 15 states and 5 actions, tile-coded features and projected dynamics.
pub fn make_random_mdp(seed: u64, horizon: usize, feature_dim: usize) -> Result<LinearMdp> {
    make_random_mdp_with(seed, horizon, feature_dim, RandomFeatures::Tile, RandomDynamics::Projected)
}

pub fn make_random_mdp_with(
    seed: u64,
    horizon: usize,
    feature_dim: usize,
    kind: RandomFeatures,
    dynamics_kind: RandomDynamics,
) -> Result<LinearMdp> {
    if feature_dim == 0 {
        return Err(invalid("feature dimension must be at least 1"));
    }
    if horizon == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    let (ns, na) = (RANDOM_MDP_STATES, RANDOM_MDP_ACTIONS);
    let mut rng = stream_rng(seed, tags::ENV, 0);

    // One stationary kernel, each row drawn uniformly and normalized.
    let mut kernel = vec![0.0; ns * na * ns];
    for row in kernel.chunks_mut(ns) {
        for p in row.iter_mut() {
            *p = rng.random::<f64>();
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= sum);
    }
    let mut dynamics = TabularDynamics::new(horizon, ns, na);
    for h in 0..horizon {
        for s in 0..ns {
            for a in 0..na {
                let base = (s * na + a) * ns;
                dynamics.next_dist_mut(h, s, a).copy_from_slice(&kernel[base..base + ns]);
            }
        }
        dynamics.set_reward(h, 0, 0, RANDOM_MDP_SMALL_REWARD);
        dynamics.set_reward(h, ns - 1, 1, RANDOM_MDP_LARGE_REWARD);
    }

    let features = match kind {
        RandomFeatures::Tile => tile_features(&mut rng, ns, na, feature_dim),
        RandomFeatures::OneHot => {
            if feature_dim != ns * na {
                return Err(invalid(format!(
                    "one-hot features need d_c = S·A = {}, got {feature_dim}",
                    ns * na
                )));
            }
            DMatrix::identity(ns * na, ns * na)
        }
    };
    let mdp = fit_linear_mdp(dynamics, features, 0)?;
    match dynamics_kind {
        RandomDynamics::Tabular => Ok(mdp),
        RandomDynamics::Projected => mdp.projected(),
    }
}

fn tile_features<R: Rng>(rng: &mut R, ns: usize, na: usize, dim: usize) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(ns * na, dim);
    if dim > na {
        let code_dim = dim - na;
        for s in 0..ns {
            let code: Vec<f64> = (0..code_dim).map(|_| rng.random::<f64>()).collect();
            for a in 0..na {
                let row = s * na + a;
                for (k, &c) in code.iter().enumerate() {
                    f[(row, k)] = c;
                }
                f[(row, code_dim + a)] = 1.0;
            }
        }
    } else {
        // Too few dimensions for an action block: random codes per pair.
        for x in f.iter_mut() {
            *x = rng.random::<f64>();
        }
    }
    for mut row in f.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    f
}

/// Which move pays the small penalty in Deep Sea.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeepSeaRewards {
    /// Moving right is free and moving left costs `0.01/N`.
    #[default]
    CostLeft,
    /// The usual benchmark: moving right costs `0.01/N`, moving left is free.
    CostRight,
}

pub const DEEP_SEA_RIGHT: usize = 0;
pub const DEEP_SEA_LEFT: usize = 1;

/// Grid index of `(row, col)`.
pub fn deep_sea_state(size: usize, row: usize, col: usize) -> usize {
    row * size + col
}

/// `N × N` Deep Sea with horizon `N`, stored in `[0, 1]` reward scale.
///
/// The agent starts in the top-left cell and each action moves one row down and
/// one column right or left (clamped at the walls). Taking "right" in the
/// bottom-right cell pays 1. Features put each `(s, a)` pair into one of
/// `feature_dim` uniform bins and one-hot encode the bin.
pub fn make_deep_sea(size: usize, feature_dim: usize, rewards: DeepSeaRewards) -> Result<LinearMdp> {
    if size < 2 {
        return Err(invalid("Deep Sea needs N >= 2"));
    }
    let ns = size * size;
    let na = 2;
    let pairs = ns * na;
    if feature_dim == 0 || feature_dim > pairs {
        return Err(invalid(format!(
            "Deep Sea feature dimension must be in 1..={pairs}, got {feature_dim}"
        )));
    }
    let penalty = -0.01 / size as f64;
    let (right_cost, left_cost) = match rewards {
        DeepSeaRewards::CostLeft => (0.0, penalty),
        DeepSeaRewards::CostRight => (penalty, 0.0),
    };
    let raw_reward = |s: usize, a: usize| {
        let base = if a == DEEP_SEA_RIGHT { right_cost } else { left_cost };
        let corner = deep_sea_state(size, size - 1, size - 1);
        if s == corner && a == DEEP_SEA_RIGHT {
            base + 1.0
        } else {
            base
        }
    };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in 0..ns {
        for a in 0..na {
            lo = lo.min(raw_reward(s, a));
            hi = hi.max(raw_reward(s, a));
        }
    }
    let map = RewardMap::from_range(lo, hi);

    let mut dynamics = TabularDynamics::new(size, ns, na);
    for h in 0..size {
        for row in 0..size {
            for col in 0..size {
                let s = deep_sea_state(size, row, col);
                let next_row = (row + 1).min(size - 1);
                for a in 0..na {
                    let next_col = if a == DEEP_SEA_RIGHT {
                        (col + 1).min(size - 1)
                    } else {
                        col.saturating_sub(1)
                    };
                    dynamics.next_dist_mut(h, s, a)[deep_sea_state(size, next_row, next_col)] = 1.0;
                    dynamics.set_reward(h, s, a, map.to_unit(raw_reward(s, a)));
                }
            }
        }
    }

    let mut features = DMatrix::zeros(pairs, feature_dim);
    for k in 0..pairs {
        features[(k, k * feature_dim / pairs)] = 1.0;
    }
    let mut mdp = fit_linear_mdp(dynamics, features, 0)?;
    mdp.reward_map = map;
    Ok(mdp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_mdp_shape_and_rewards() {
        let mdp = make_random_mdp_with(0, 4, 10, RandomFeatures::Tile, RandomDynamics::Tabular).unwrap();
        assert_eq!(mdp.num_states(), 15);
        assert_eq!(mdp.num_actions(), 5);
        assert_eq!(mdp.critic_dim(), 10);
        for h in 0..4 {
            let nonzero: Vec<f64> = (0..15)
                .flat_map(|s| (0..5).map(move |a| (s, a)))
                .map(|(s, a)| mdp.dynamics.reward(h, s, a))
                .filter(|&r| r != 0.0)
                .collect();
            assert_eq!(nonzero, vec![0.1, 1.0]);
        }
        assert!(mdp.features.row_iter().all(|r| (r.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn random_mdp_is_deterministic() {
        let a = make_random_mdp(3, 5, 10).unwrap();
        let b = make_random_mdp(3, 5, 10).unwrap();
        assert_eq!(a, b);
        let c = make_random_mdp(4, 5, 10).unwrap();
        assert_ne!(a.dynamics, c.dynamics);
    }

    #[test]
    fn random_mdp_one_hot_is_linear() {
        let mdp = make_random_mdp_with(1, 3, 75, RandomFeatures::OneHot, RandomDynamics::Tabular).unwrap();
        assert!(mdp.fit_tol <= 1e-10);
        assert!(make_random_mdp_with(1, 3, 10, RandomFeatures::OneHot, RandomDynamics::Tabular).is_err());
    }

    #[test]
    fn projected_dynamics_are_linear() {
        let raw = make_random_mdp_with(2, 3, 20, RandomFeatures::Tile, RandomDynamics::Tabular).unwrap();
        assert!(raw.fit_tol > 0.1);
        let mdp = make_random_mdp(2, 3, 20).unwrap();
        mdp.dynamics.validate().unwrap();
        // Only the clipped negative rewards are left unexplained.
        assert!(mdp.fit_tol < 0.05, "{}", mdp.fit_tol);
        assert!(mdp.projected().unwrap().fit_tol <= mdp.fit_tol + 1e-12);
        // One-hot features already span the tabular model.
        let a = make_random_mdp_with(1, 3, 75, RandomFeatures::OneHot, RandomDynamics::Tabular).unwrap();
        let b = make_random_mdp_with(1, 3, 75, RandomFeatures::OneHot, RandomDynamics::Projected).unwrap();
        let gap = a.dynamics.transitions.iter().zip(&b.dynamics.transitions).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-12);
    }

    #[test]
    fn tiny_feature_dims_still_build() {
        let mdp = make_random_mdp(0, 2, 1).unwrap();
        assert_eq!(mdp.critic_dim(), 1);
        assert!(make_random_mdp(0, 2, 0).is_err());
    }

    #[test]
    fn deep_sea_one_hot_and_minimal() {
        let mdp = make_deep_sea(10, 200, DeepSeaRewards::CostLeft).unwrap();
        assert_eq!(mdp.horizon(), 10);
        assert_eq!(mdp.num_states(), 100);
        assert!(mdp.fit_tol <= 1e-10);
        let small = make_deep_sea(2, 8, DeepSeaRewards::CostLeft).unwrap();
        assert_eq!(small.num_states(), 4);
        assert_eq!(small.horizon(), 2);
        assert!(make_deep_sea(10, 201, DeepSeaRewards::CostLeft).is_err());
        assert!(make_deep_sea(1, 2, DeepSeaRewards::CostLeft).is_err());
    }

    #[test]
    fn deep_sea_reward_conventions() {
        let left = make_deep_sea(10, 200, DeepSeaRewards::CostLeft).unwrap();
        let m = left.reward_map;
        let corner = deep_sea_state(10, 9, 9);
        let raw = |mdp: &LinearMdp, s, a| mdp.reward_map.value_to_raw(mdp.dynamics.reward(0, s, a), 1);
        assert!((raw(&left, 0, DEEP_SEA_RIGHT) - 0.0).abs() < 1e-15);
        assert!((raw(&left, 0, DEEP_SEA_LEFT) + 0.001).abs() < 1e-15);
        assert!((raw(&left, corner, DEEP_SEA_RIGHT) - 1.0).abs() < 1e-15);
        assert!(m.scale > 1.0);
        let std = make_deep_sea(10, 200, DeepSeaRewards::CostRight).unwrap();
        assert!((raw(&std, 0, DEEP_SEA_RIGHT) + 0.001).abs() < 1e-15);
        assert!((raw(&std, 0, DEEP_SEA_LEFT) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn deep_sea_binned_features() {
        let mdp = make_deep_sea(4, 8, DeepSeaRewards::CostLeft).unwrap();
        // 32 pairs into 8 bins: 4 consecutive pairs per bin.
        for k in 0..32 {
            assert_eq!(mdp.features[(k, k / 4)], 1.0);
        }
    }
}
