//! Trajectory sampling on the tabular ground truth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mdp::LinearMdp;
use crate::policy::{sample_categorical, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// `H` consecutive transitions from the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    pub episode: usize,
    pub seed: Option<u64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|t| t.reward).sum()
    }
}

/// Samples one episode under `policy` with transitions drawn from the tabular kernel.
pub fn rollout<P: Policy + ?Sized, R: Rng + ?Sized>(mdp: &LinearMdp, policy: &P, rng: &mut R) -> Trajectory {
    let d = &mdp.dynamics;
    let mut steps = Vec::with_capacity(d.horizon);
    let mut probs = vec![0.0; d.num_actions];
    let mut state = mdp.initial_state;
    for h in 0..d.horizon {
        policy.probs_into(h, state, &mut probs);
        let action = sample_categorical(&probs, rng);
        let next_state = sample_categorical(d.next_dist(h, state, action), rng);
        steps.push(Transition { state, action, reward: d.reward(h, state, action), next_state });
        state = next_state;
    }
    Trajectory { steps, episode: 0, seed: None }
}
