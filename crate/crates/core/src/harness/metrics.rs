//! Regret bookkeeping, value-difference identities and seed aggregation.

use serde::{Deserialize, Serialize};

use crate::critic::model_prediction_error;
use crate::dp::{exact_policy_value, state_occupancy, ValueTables};
use crate::error::{invalid, Result};
use crate::mdp::LinearMdp;
use crate::policy::Policy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretSummary {
    pub episodes: usize,
    pub cumulative_regret: Vec<f64>,
    pub optimality_gap: Vec<f64>,
    /// Value of the uniform mixture over the first `t` policies.
    pub mixture_value: Vec<f64>,
    pub final_regret: f64,
    /// `Reg(T) / T`.
    pub final_gap: f64,
}

/// Cumulative regret `Σ (V* − V^{π_t})` and the mixture value after every episode.
pub fn regret_metrics(values: &[f64], optimal: f64) -> Result<RegretSummary> {
    if values.is_empty() {
        return Err(invalid("regret metrics need at least one episode"));
    }
    let mut cumulative_regret = Vec::with_capacity(values.len());
    let mut optimality_gap = Vec::with_capacity(values.len());
    let mut mixture_value = Vec::with_capacity(values.len());
    let (mut regret, mut total) = (0.0, 0.0);
    for (i, v) in values.iter().enumerate() {
        regret += optimal - v;
        total += v;
        let t = (i + 1) as f64;
        cumulative_regret.push(regret);
        optimality_gap.push(regret / t);
        mixture_value.push(total / t);
    }
    Ok(RegretSummary {
        episodes: values.len(),
        final_regret: regret,
        final_gap: regret / values.len() as f64,
        cumulative_regret,
        optimality_gap,
        mixture_value,
    })
}

/// Both sides of the value-difference identity
/// `V̂₁ − V^π₁ = Σ_h E_π⟨π'_h − π_h, Q̂_h⟩ + Σ_h E_π[Q̂_h − r_h − P_h V̂_{h+1}]`
/// with `V̂_h(s) = ⟨π'_h(·|s), Q̂_h(s, ·)⟩`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueDifference {
    pub lhs: f64,
    pub policy_term: f64,
    pub evaluation_term: f64,
    pub residual: f64,
}

/// `V̂` built from `q` under `policy`.
pub fn values_under(mdp: &LinearMdp, q: &[f64], policy: &dyn Policy) -> ValueTables {
    let (hh, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut v = vec![0.0; (hh + 1) * ns];
    let mut probs = vec![0.0; na];
    for h in 0..hh {
        for s in 0..ns {
            policy.probs_into(h, s, &mut probs);
            let base = (h * ns + s) * na;
            v[h * ns + s] = probs.iter().zip(&q[base..base + na]).map(|(p, x)| p * x).sum();
        }
    }
    ValueTables { horizon: hh, num_states: ns, num_actions: na, v, q: q.to_vec() }
}

pub fn value_difference_check(
    mdp: &LinearMdp,
    policy: &dyn Policy,
    other: &dyn Policy,
    q: &[f64],
) -> ValueDifference {
    let (hh, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let estimate = values_under(mdp, q, other);
    let truth = exact_policy_value(mdp, policy);
    let occupancy = state_occupancy(mdp, policy);
    let iota = model_prediction_error(mdp, &estimate);
    let s1 = mdp.initial_state;
    let lhs = estimate.v(0, s1) - truth.v(0, s1);
    let (mut p, mut o) = (vec![0.0; na], vec![0.0; na]);
    let (mut policy_term, mut evaluation_term) = (0.0, 0.0);
    for h in 0..hh {
        for s in 0..ns {
            let mass = occupancy[h * ns + s];
            if mass == 0.0 {
                continue;
            }
            policy.probs_into(h, s, &mut p);
            other.probs_into(h, s, &mut o);
            for a in 0..na {
                let idx = (h * ns + s) * na + a;
                policy_term += mass * (o[a] - p[a]) * q[idx];
                evaluation_term -= mass * p[a] * iota[idx];
            }
        }
    }
    ValueDifference { lhs, policy_term, evaluation_term, residual: (lhs - policy_term - evaluation_term).abs() }
}

/// Split of `V*₁ − V^{π_t}₁` into an actor part `Σ_h E_{π*}⟨π*_h − π^t_h, Q̂_h⟩` and a
/// critic part `Σ_h E_{π*}[ι_h] − Σ_h E_{π^t}[ι_h]`, with `V̂` taken under `π^t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretDecomposition {
    pub gap: f64,
    pub actor_term: f64,
    pub critic_term: f64,
    pub residual: f64,
}

pub fn regret_decomposition(
    mdp: &LinearMdp,
    optimal: &dyn Policy,
    current: &dyn Policy,
    q: &[f64],
) -> RegretDecomposition {
    let (hh, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let estimate = values_under(mdp, q, current);
    let iota = model_prediction_error(mdp, &estimate);
    let occ_star = state_occupancy(mdp, optimal);
    let occ_t = state_occupancy(mdp, current);
    let s1 = mdp.initial_state;
    let gap = exact_policy_value(mdp, optimal).v(0, s1) - exact_policy_value(mdp, current).v(0, s1);
    let (mut ps, mut pt) = (vec![0.0; na], vec![0.0; na]);
    let (mut actor_term, mut critic_term) = (0.0, 0.0);
    for h in 0..hh {
        for s in 0..ns {
            let (ms, mt) = (occ_star[h * ns + s], occ_t[h * ns + s]);
            optimal.probs_into(h, s, &mut ps);
            current.probs_into(h, s, &mut pt);
            for a in 0..na {
                let idx = (h * ns + s) * na + a;
                actor_term += ms * (ps[a] - pt[a]) * q[idx];
                critic_term += ms * ps[a] * iota[idx] - mt * pt[a] * iota[idx];
            }
        }
    }
    RegretDecomposition { gap, actor_term, critic_term, residual: (gap - actor_term - critic_term).abs() }
}

/// Mean with a normal-approximation 95% interval half-width; `None` for fewer than two samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci95: Option<f64>,
    pub n: usize,
}

pub fn mean_ci(xs: &[f64]) -> MeanCi {
    let n = xs.len();
    let mean = if n == 0 { f64::NAN } else { xs.iter().sum::<f64>() / n as f64 };
    let ci95 = (n >= 2).then(|| {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    });
    MeanCi { mean, ci95, n }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::optimal_values;
    use crate::envs::make_random_mdp;
    use crate::policy::TabularPolicy;
    use crate::rng::stream_rng;
    use rand::Rng;

    #[test]
    fn regret_examples() {
        let r = regret_metrics(&[2.0; 5], 2.0).unwrap();
        assert_eq!(r.final_regret, 0.0);
        let r = regret_metrics(&[1.5; 8], 2.0).unwrap();
        assert!((r.final_regret - 4.0).abs() < 1e-12);
        for (t, (reg, og)) in r.cumulative_regret.iter().zip(&r.optimality_gap).enumerate() {
            assert!((og - reg / (t + 1) as f64).abs() <= 1e-12);
        }
        assert!(regret_metrics(&[], 1.0).is_err());
    }

    fn random_policy<R: Rng>(rng: &mut R, h: usize, s: usize, a: usize) -> TabularPolicy {
        let mut table: Vec<f64> = (0..h * s * a).map(|_| rng.random::<f64>() + 1e-3).collect();
        for row in table.chunks_mut(a) {
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= z);
        }
        TabularPolicy::from_table(h, s, a, table).unwrap()
    }

    #[test]
    fn value_difference_identity() {
        let mdp = make_random_mdp(4, 6, 10).unwrap();
        let mut rng = stream_rng(0, 0x5D, 0);
        for _ in 0..20 {
            let p = random_policy(&mut rng, 6, 15, 5);
            let p2 = random_policy(&mut rng, 6, 15, 5);
            let q: Vec<f64> = (0..6 * 75).map(|_| rng.random_range(0.0..6.0)).collect();
            assert!(value_difference_check(&mdp, &p, &p2, &q).residual <= 1e-9);
            let same = value_difference_check(&mdp, &p, &p, &q);
            assert_eq!(same.policy_term, 0.0);
            assert!(same.residual <= 1e-9);
        }
    }

    #[test]
    fn decomposition_identity() {
        let mdp = make_random_mdp(5, 5, 10).unwrap();
        let (_, star) = optimal_values(&mdp);
        let mut rng = stream_rng(1, 0x5D, 0);
        let p = random_policy(&mut rng, 5, 15, 5);
        let q: Vec<f64> = (0..5 * 75).map(|_| rng.random_range(0.0..5.0)).collect();
        let d = regret_decomposition(&mdp, &star, &p, &q);
        assert!(d.residual < 1e-9, "{d:?}");
        assert!(d.gap >= 0.0);
    }

    #[test]
    fn ci_examples() {
        let c = mean_ci(&[3.0; 10]);
        assert_eq!(c.mean, 3.0);
        assert_eq!(c.ci95, Some(0.0));
        assert_eq!(mean_ci(&[1.0]).ci95, None);
    }
}
