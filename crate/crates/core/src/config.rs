//! Run configuration. Every field has a default and unknown keys are rejected.

use std::path::Path;

use cnav_autodiff::AdamConfig;
use cnav_sim::{InitPattern, ScenarioSpec, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub latent_dim: usize,
    /// Output channels of each stride-2 conv layer.
    pub conv_channels: Vec<usize>,
    pub actor_hidden: usize,
    pub critic_hidden: usize,
    /// When false every mask is pinned to ones, which is the SAC+RAE baseline.
    pub cfs_enabled: bool,
    /// Number of masked hidden layers in the actor (0..=2).
    pub cfs_modules: usize,
    pub cfs_eps: f64,
    pub cfs_min_hidden: usize,
    /// Initial value of the trainable mask weights before jitter.
    pub cfs_w_init: f64,
    pub cfs_w_jitter: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Body-frame goal vectors are multiplied by this before entering the networks.
    pub goal_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            latent_dim: 16,
            conv_channels: vec![8, 16, 16, 16],
            actor_hidden: 64,
            critic_hidden: 64,
            cfs_enabled: true,
            cfs_modules: 2,
            cfs_eps: 1e-8,
            cfs_min_hidden: 8,
            cfs_w_init: 0.5,
            cfs_w_jitter: 0.05,
            log_std_min: -10.0,
            log_std_max: 2.0,
            goal_scale: 0.125,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(CoreError::Config(format!("net.{msg}"))) };
        check(self.latent_dim >= 1, "latent_dim must be at least 1")?;
        check(!self.conv_channels.is_empty(), "conv_channels must not be empty")?;
        check(self.conv_channels.iter().all(|&c| c >= 1), "conv_channels entries must be positive")?;
        check(self.actor_hidden >= 1 && self.critic_hidden >= 1, "hidden widths must be positive")?;
        check(self.cfs_modules <= 2, "cfs_modules must be at most 2")?;
        check(self.cfs_eps > 0.0, "cfs_eps must be positive")?;
        check(self.log_std_min < self.log_std_max, "log_std_min must be below log_std_max")?;
        check(self.goal_scale > 0.0, "goal_scale must be positive")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Environment steps (world ticks) to run.
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub gamma: f64,
    pub tau: f64,
    pub encoder_tau: f64,
    pub critic: AdamConfig,
    pub actor: AdamConfig,
    pub cfs: AdamConfig,
    pub rae: AdamConfig,
    pub alpha: AdamConfig,
    pub init_alpha: f64,
    pub target_entropy: f64,
    pub lambda_z: f64,
    pub lambda_phi: f64,
    /// Apply the weight penalty to the decoder (true) or the encoder (false).
    pub penalize_decoder: bool,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            total_steps: 100_000,
            warmup_steps: 1_000,
            batch_size: 128,
            buffer_capacity: 100_000,
            gamma: 0.99,
            tau: 0.005,
            encoder_tau: 0.05,
            critic: AdamConfig::default(),
            actor: AdamConfig::default(),
            cfs: AdamConfig { eps: 1e-15, ..AdamConfig::default() },
            rae: AdamConfig::default(),
            alpha: AdamConfig { lr: 1e-4, beta1: 0.5, ..AdamConfig::default() },
            init_alpha: 0.1,
            target_entropy: -3.0,
            lambda_z: 1e-6,
            lambda_phi: 1e-7,
            penalize_decoder: true,
            log_every: 100,
            checkpoint_every: 5_000,
            eval_every: 5_000,
            eval_episodes: 20,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(CoreError::Config(format!("trainer.{msg}"))) };
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        check(self.buffer_capacity >= self.batch_size, "buffer_capacity must be at least batch_size")?;
        check((0.0..=1.0).contains(&self.gamma), "gamma must lie in [0, 1]")?;
        check((0.0..=1.0).contains(&self.tau), "tau must lie in [0, 1]")?;
        check((0.0..=1.0).contains(&self.encoder_tau), "encoder_tau must lie in [0, 1]")?;
        check(self.init_alpha > 0.0, "init_alpha must be positive")?;
        check(self.lambda_z >= 0.0 && self.lambda_phi >= 0.0, "penalty weights must be non-negative")?;
        check(self.log_every >= 1, "log_every must be at least 1")?;
        check(self.checkpoint_every >= 1, "checkpoint_every must be at least 1")?;
        check(self.eval_every == 0 || self.eval_episodes >= 1, "eval_episodes must be at least 1 when eval_every is set")?;
        for (name, a) in [("critic", &self.critic), ("actor", &self.actor), ("cfs", &self.cfs), ("rae", &self.rae), ("alpha", &self.alpha)] {
            if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
                return Err(CoreError::Config(format!("trainer.{name}: invalid optimizer settings")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub suite: Vec<ScenarioSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 100, suite: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    /// Training scenario; its seed is replaced per episode.
    pub scenario: ScenarioSpec,
    pub net: NetConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

pub fn default_training_scenario() -> ScenarioSpec {
    ScenarioSpec {
        name: Some("playground".into()),
        background: Default::default(),
        obstacles: Vec::new(),
        init: InitPattern::Random,
        n_agents: 2,
        seed: 0,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            world: WorldConfig::default(),
            scenario: default_training_scenario(),
            net: NetConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate().map_err(|e| CoreError::Config(format!("world: {e}")))?;
        self.scenario.validate(&self.world).map_err(|e| CoreError::Config(format!("scenario: {e}")))?;
        for s in &self.eval.suite {
            s.validate(&self.world).map_err(|e| CoreError::Config(format!("eval.suite: {e}")))?;
        }
        self.net.validate()?;
        self.trainer.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| CoreError::File { what: "cannot read config", path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
