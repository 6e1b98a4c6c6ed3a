//! Experiment configuration: a flat JSON object with one key per setting.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::actor::{ActorConfig, ActorSolver, ActorVariant};
use crate::critic::{CriticConfig, DataMode, Rule, Setting, TheoryInputs, ValuePolicy};
use crate::envs::{DeepSeaRewards, RandomDynamics, RandomFeatures};
use crate::error::{Error, Result};
use crate::policy::ClipRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    #[default]
    RandomMdp,
    DeepSea,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorKind {
    #[default]
    NpgExplicit,
    NpgImplicit,
    SpmaExplicit,
    /// Act greedily on the critic's `Q̂`.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    #[default]
    Lmc,
    LmcNoNoise,
    /// Exact ridge solve and greedy acting.
    RidgeGreedy,
}

/// Features of the log-linear actor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorFeatures {
    /// Same table as the critic.
    #[default]
    Critic,
    /// `(s, a)` indicators, `d_a = S·A`.
    OneHot,
    /// Gaussian features of dimension `actor_dim`.
    Random,
}

/// Where the actor regression takes its points and weights from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorDesign {
    /// Greedy G-optimal coreset over the whole feature table.
    #[default]
    Coreset,
    /// Uniform weights over the distinct pairs in the current dataset.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    #[default]
    On,
    Off,
}

fn default_horizon() -> usize {
    20
}
fn default_deep_sea_size() -> usize {
    10
}
fn default_feature_dim() -> usize {
    10
}
fn default_actor_dim() -> usize {
    4
}
fn default_one() -> usize {
    1
}
fn default_episodes() -> usize {
    100
}
fn default_delta() -> f64 {
    0.1
}
fn default_eta() -> f64 {
    1.0
}
fn default_actor_steps() -> usize {
    100
}
fn default_lambda() -> f64 {
    1.0
}
fn default_zeta_inv() -> Setting<f64> {
    Setting::Value(1e-3)
}
fn default_critic_steps() -> Setting<usize> {
    Setting::Value(100)
}
fn default_critic_lr() -> Setting<f64> {
    Setting::Rule(Rule::Auto)
}
fn default_chains() -> Setting<usize> {
    Setting::Value(1)
}
fn default_critic_clip() -> ClipRule {
    ClipRule::Horizon
}
fn default_design_epsilon() -> f64 {
    0.5
}
fn default_design_cap() -> Option<f64> {
    Some(crate::design::DEFAULT_CAP_FRACTION)
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub env: EnvKind,
    /// MDP document for `env = "file"`.
    #[serde(default)]
    pub env_path: Option<String>,
    /// Seed of the random MDP instance; defaults to `seed`.
    #[serde(default)]
    pub env_seed: Option<u64>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_deep_sea_size")]
    pub deep_sea_size: usize,
    #[serde(default)]
    pub deep_sea_rewards: DeepSeaRewards,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub random_features: RandomFeatures,
    #[serde(default)]
    pub random_dynamics: RandomDynamics,
    #[serde(default)]
    pub actor_features: ActorFeatures,
    #[serde(default = "default_actor_dim")]
    pub actor_dim: usize,

    #[serde(default)]
    pub mode: DataMode,
    #[serde(default = "default_one")]
    pub batch: usize,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Covering-number term of the off-policy confidence width.
    #[serde(default)]
    pub covering: f64,
    /// Overrides the derived confidence width `C_δ`.
    #[serde(default)]
    pub confidence_width: Option<f64>,

    #[serde(default)]
    pub actor: ActorKind,
    #[serde(default)]
    pub critic: CriticKind,

    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_actor_steps")]
    pub actor_steps: usize,
    #[serde(default)]
    pub actor_lr: Option<f64>,
    #[serde(default)]
    pub actor_solver: ActorSolver,
    #[serde(default)]
    pub actor_variant: ActorVariant,
    #[serde(default)]
    pub actor_clip: ClipRule,

    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_zeta_inv")]
    pub zeta_inv: Setting<f64>,
    #[serde(default = "default_critic_steps")]
    pub critic_steps: Setting<usize>,
    #[serde(default = "default_critic_lr")]
    pub critic_lr: Setting<f64>,
    #[serde(default = "default_chains")]
    pub num_chains: Setting<usize>,
    #[serde(default)]
    pub noise: Noise,
    #[serde(default = "default_critic_clip")]
    pub critic_clip: ClipRule,
    #[serde(default)]
    pub value_policy: ValuePolicy,

    #[serde(default = "default_design_epsilon")]
    pub design_epsilon: f64,
    /// `null` removes the cap.
    #[serde(default = "default_design_cap")]
    pub design_cap: Option<f64>,
    #[serde(default)]
    pub actor_design: ActorDesign,

    /// Track an implicit NPG policy fed by the same critic and report the gap.
    #[serde(default)]
    pub shadow_implicit: bool,
    /// Per-step projection-error bound terms.
    #[serde(default)]
    pub bound_diagnostics: bool,
    /// Actor/critic split of each episode's suboptimality.
    #[serde(default)]
    pub decomposition: bool,
    /// Record wall time per episode; `false` writes 0 so outputs are byte-stable.
    #[serde(default = "default_true")]
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Map::new())).expect("all keys have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. Values parse as JSON, falling back to a bare string.
    ///
    /// A dotted key addresses its last segment, so `critic.lambda=2` and
    /// `lambda=2` are the same override.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut map = match self.to_value() {
            Value::Object(m) => m,
            _ => unreachable!(),
        };
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let key = key.trim().rsplit('.').next().unwrap_or_default();
            if !map.contains_key(key) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            let raw = raw.trim();
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            map.insert(key.to_string(), value);
        }
        let cfg: Self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.episodes == 0 {
            return fail("episodes must be at least 1");
        }
        if self.mode == DataMode::OnPolicy && self.batch == 0 {
            return fail("on-policy mode needs batch >= 1");
        }
        if self.env == EnvKind::File && self.env_path.is_none() {
            return fail("env = \"file\" needs env_path");
        }
        if self.actor_features == ActorFeatures::Random && self.actor_dim == 0 {
            return fail("actor_dim must be positive");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail("delta must lie in (0, 1)");
        }
        let spma = self.actor == ActorKind::SpmaExplicit;
        if spma != (self.actor_variant == ActorVariant::Spma) && self.actor != ActorKind::None {
            return fail("actor_variant = \"spma\" goes with actor = \"spma_explicit\" and only with it");
        }
        if !(self.design_epsilon > 0.0) {
            return fail("design_epsilon must be positive");
        }
        if let Some(c) = self.design_cap {
            if !(c > 0.0 && c <= 1.0) {
                return fail("design_cap must lie in (0, 1]");
            }
        }
        if self.actor != ActorKind::None {
            self.actor_config().validate(self.effective_horizon()).map_err(|e| Error::Config(e.to_string()))?;
        }
        self.critic_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Horizon of the configured environment (`N` for Deep Sea).
    pub fn effective_horizon(&self) -> usize {
        match self.env {
            EnvKind::DeepSea => self.deep_sea_size,
            _ => self.horizon,
        }
    }

    pub fn actor_config(&self) -> ActorConfig {
        ActorConfig {
            eta: self.eta,
            steps: self.actor_steps,
            lr: self.actor_lr,
            solver: self.actor_solver,
            variant: self.actor_variant,
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig {
            lambda: self.lambda,
            zeta_inv: self.zeta_inv,
            steps: self.critic_steps,
            lr: self.critic_lr,
            chains: self.num_chains,
            noise: self.noise == Noise::On && self.critic == CriticKind::Lmc,
            clip: self.critic_clip,
            value_policy: self.value_policy,
            exact_ridge: self.critic == CriticKind::RidgeGreedy,
        }
    }

    pub fn theory_inputs(&self, critic_dim: usize) -> TheoryInputs {
        TheoryInputs {
            horizon: self.effective_horizon(),
            episodes: self.episodes,
            batch: self.batch,
            delta: self.delta,
            critic_dim,
            mode: self.mode,
            covering: self.covering,
            width_override: self.confidence_width,
        }
    }

    /// Acting greedily on `Q̂` rather than through an actor.
    pub fn is_value_based(&self) -> bool {
        self.actor == ActorKind::None || self.critic == CriticKind::RidgeGreedy
    }

    /// Stable 64-bit FNV-1a hash of the canonical JSON, ignoring the seed.
    pub fn hash_hex(&self) -> String {
        let mut value = self.to_value();
        if let Value::Object(m) = &mut value {
            m.remove("seed");
        }
        let text = value.to_string();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.design_cap, Some(0.8));
        assert_eq!(c.critic_clip, ClipRule::Horizon);
        assert_eq!(c.actor_clip, ClipRule::Stepwise);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(ExperimentConfig::from_json(r#"{"etaa": 1.0}"#), Err(Error::Config(_))));
        let c = ExperimentConfig::default();
        assert!(matches!(c.with_overrides(&["bogus=1"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["eta"]), Err(Error::Config(_))));
    }

    #[test]
    fn overrides() {
        let c = ExperimentConfig::default()
            .with_overrides(&["eta=10", "actor.actor_solver=gradient_descent", "critic_steps=theory", "design_cap=null"])
            .unwrap();
        assert_eq!(c.eta, 10.0);
        assert_eq!(c.actor_solver, ActorSolver::GradientDescent);
        assert_eq!(c.critic_steps, Setting::Rule(Rule::Theory));
        assert_eq!(c.design_cap, None);
        assert!(c.with_overrides(&["episodes=0"]).is_err());
        assert!(c.with_overrides(&["critic_lr=theory"]).is_err());
    }

    #[test]
    fn round_trip_and_hash() {
        let c = ExperimentConfig::default().with_overrides(&["seed=3", "label=\"x\""]).unwrap();
        let back = ExperimentConfig::from_json(&c.to_value().to_string()).unwrap();
        assert_eq!(back, c);
        let other_seed = c.with_overrides(&["seed=4"]).unwrap();
        assert_eq!(c.hash_hex(), other_seed.hash_hex());
        assert_ne!(c.hash_hex(), c.with_overrides(&["eta=2"]).unwrap().hash_hex());
    }

    #[test]
    fn spma_consistency() {
        let c = ExperimentConfig::default();
        assert!(c.with_overrides(&["actor=spma_explicit"]).is_err());
        assert!(c.with_overrides(&["actor=spma_explicit", "actor_variant=spma", "eta=0.01"]).is_ok());
        assert!(c.with_overrides(&["actor=spma_explicit", "actor_variant=spma", "eta=0.5"]).is_err());
    }
}
