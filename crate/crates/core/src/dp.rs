//! Exact dynamic programming on the tabular dynamics.

use crate::mdp::LinearMdp;
use crate::policy::{argmax_first, Policy, TabularPolicy};

/// Value tables from a backward pass.
///
/// `v` is `(H + 1) × S` with `v[H] ≡ 0`; `q` is `H × S × A`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTables {
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
}

impl ValueTables {
    fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            v: vec![0.0; (horizon + 1) * num_states],
            q: vec![0.0; horizon * num_states * num_actions],
        }
    }

    pub fn v(&self, step: usize, state: usize) -> f64 {
        self.v[step * self.num_states + state]
    }

    pub fn q(&self, step: usize, state: usize, action: usize) -> f64 {
        self.q[(step * self.num_states + state) * self.num_actions + action]
    }

    pub fn q_row(&self, step: usize, state: usize) -> &[f64] {
        let base = (step * self.num_states + state) * self.num_actions;
        &self.q[base..base + self.num_actions]
    }
}

/// `r_h(s,a) + Σ_{s'} P_h(s'|s,a) V(s')`.
pub fn bellman_backup(mdp: &LinearMdp, step: usize, state: usize, action: usize, next_v: &[f64]) -> f64 {
    let d = &mdp.dynamics;
    let expected: f64 = d
        .next_dist(step, state, action)
        .iter()
        .zip(next_v)
        .map(|(p, v)| p * v)
        .sum();
    d.reward(step, state, action) + expected
}

/// `V^π_h(s)` and `Q^π_h(s, a)` for every step.
pub fn exact_policy_value<P: Policy + ?Sized>(mdp: &LinearMdp, policy: &P) -> ValueTables {
    let (hh, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut t = ValueTables::zeros(hh, ns, na);
    let mut probs = vec![0.0; na];
    for h in (0..hh).rev() {
        let (head, tail) = t.v.split_at_mut((h + 1) * ns);
        let next_v = &tail[..ns];
        let cur_v = &mut head[h * ns..];
        for s in 0..ns {
            policy.probs_into(h, s, &mut probs);
            let mut v = 0.0;
            for a in 0..na {
                let q = bellman_backup(mdp, h, s, a, next_v);
                t.q[(h * ns + s) * na + a] = q;
                v += probs[a] * q;
            }
            cur_v[s] = v;
        }
    }
    t
}

/// Bellman-optimal values and the greedy policy (smallest action index on ties).
pub fn optimal_values(mdp: &LinearMdp) -> (ValueTables, TabularPolicy) {
    let (hh, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut t = ValueTables::zeros(hh, ns, na);
    let mut choice = vec![0usize; hh * ns];
    for h in (0..hh).rev() {
        let (head, tail) = t.v.split_at_mut((h + 1) * ns);
        let next_v = &tail[..ns];
        let cur_v = &mut head[h * ns..];
        for s in 0..ns {
            let base = (h * ns + s) * na;
            for a in 0..na {
                t.q[base + a] = bellman_backup(mdp, h, s, a, next_v);
            }
            let best = argmax_first(&t.q[base..base + na]);
            choice[h * ns + s] = best;
            cur_v[s] = t.q[base + best];
        }
    }
    let pi = TabularPolicy::deterministic(hh, ns, na, |h, s| choice[h * ns + s]);
    (t, pi)
}

/// State occupancy `d^π_h(s)` from the initial state, `H × S`.
pub fn state_occupancy<P: Policy + ?Sized>(mdp: &LinearMdp, policy: &P) -> Vec<f64> {
    let (hh, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut occ = vec![0.0; hh * ns];
    occ[mdp.initial_state] = 1.0;
    let mut probs = vec![0.0; na];
    for h in 0..hh.saturating_sub(1) {
        for s in 0..ns {
            let mass = occ[h * ns + s];
            if mass == 0.0 {
                continue;
            }
            policy.probs_into(h, s, &mut probs);
            for (a, &pa) in probs.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for (next, &p) in mdp.dynamics.next_dist(h, s, a).iter().enumerate() {
                    occ[(h + 1) * ns + next] += mass * pa * p;
                }
            }
        }
    }
    occ
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_deep_sea, make_random_mdp, DeepSeaRewards, DEEP_SEA_RIGHT};
    use crate::mdp::{fit_linear_mdp, TabularDynamics};
    use crate::rng::stream_rng;
    use crate::sim::rollout;
    use nalgebra::DMatrix;

    fn bandit(h: usize, rewards: &[f64]) -> LinearMdp {
        let na = rewards.len();
        let mut d = TabularDynamics::new(h, 1, na);
        for step in 0..h {
            for (a, &r) in rewards.iter().enumerate() {
                d.next_dist_mut(step, 0, a)[0] = 1.0;
                d.set_reward(step, 0, a, r);
            }
        }
        fit_linear_mdp(d, DMatrix::identity(na, na), 0).unwrap()
    }

    #[test]
    fn sum_of_unit_rewards() {
        let mdp = bandit(5, &[1.0]);
        let v = exact_policy_value(&mdp, &TabularPolicy::uniform(5, 1, 1));
        assert!((v.v(0, 0) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_two_armed() {
        let mdp = bandit(1, &[1.0, 0.0]);
        let v = exact_policy_value(&mdp, &TabularPolicy::uniform(1, 1, 2));
        assert!((v.v(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn optimal_single_step() {
        let mdp = bandit(1, &[0.3, 0.7]);
        let (v, pi) = optimal_values(&mdp);
        assert!((v.v(0, 0) - 0.7).abs() < 1e-15);
        assert_eq!(pi.row(0, 0), &[0.0, 1.0]);
    }

    /// Independent forward oracle for Deep Sea: walk the deterministic grid.
    fn deep_sea_always_right_return(size: usize) -> f64 {
        let mdp = make_deep_sea(size, 2 * size * size, DeepSeaRewards::CostLeft).unwrap();
        let mut s = mdp.initial_state;
        let mut total = 0.0;
        for h in 0..size {
            let raw = mdp.reward_map.value_to_raw(mdp.dynamics.reward(h, s, DEEP_SEA_RIGHT), 1);
            total += raw;
            s = mdp.dynamics.next_dist(h, s, DEEP_SEA_RIGHT).iter().position(|&p| p == 1.0).unwrap();
        }
        total
    }

    #[test]
    fn deep_sea_values() {
        assert!((deep_sea_always_right_return(10) - 1.0).abs() < 1e-12);
        let mdp = make_deep_sea(10, 200, DeepSeaRewards::CostLeft).unwrap();
        let right = TabularPolicy::deterministic(10, 100, 2, |_, _| DEEP_SEA_RIGHT);
        let v = exact_policy_value(&mdp, &right);
        let raw = mdp.reward_map.value_to_raw(v.v(0, 0), 10);
        assert!((raw - 1.0).abs() < 1e-12, "{raw}");
        let (opt, _) = optimal_values(&mdp);
        let raw_opt = mdp.reward_map.value_to_raw(opt.v(0, 0), 10);
        assert!((raw_opt - 1.0).abs() < 1e-12);
    }

    #[test]
    fn optimal_policy_value_matches_optimal_values() {
        for seed in 0..5 {
            let mdp = make_random_mdp(seed, 8, 10).unwrap();
            let (opt, pi) = optimal_values(&mdp);
            let v = exact_policy_value(&mdp, &pi);
            for (a, b) in v.v.iter().zip(&opt.v) {
                assert!((a - b).abs() < 1e-12);
            }
            let uni = exact_policy_value(&mdp, &TabularPolicy::uniform(8, 15, 5));
            for (a, b) in uni.v.iter().zip(&opt.v) {
                assert!(a <= &(b + 1e-12));
            }
        }
    }

    #[test]
    fn monte_carlo_matches_exact_value() {
        let mdp = make_random_mdp(2, 6, 10).unwrap();
        let pi = TabularPolicy::uniform(6, 15, 5);
        let exact = exact_policy_value(&mdp, &pi).v(0, 0);
        let n = 10_000;
        let mut rng = stream_rng(4, 0, 0);
        let returns: Vec<f64> = (0..n).map(|_| rollout(&mdp, &pi, &mut rng).total_reward()).collect();
        let mean = returns.iter().sum::<f64>() / n as f64;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - exact).abs() <= 4.0 * se, "mean {mean}, exact {exact}, se {se}");
    }

    #[test]
    fn occupancy_sums_to_one() {
        let mdp = make_random_mdp(1, 5, 10).unwrap();
        let occ = state_occupancy(&mdp, &TabularPolicy::uniform(5, 15, 5));
        for h in 0..5 {
            let s: f64 = occ[h * 15..(h + 1) * 15].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
