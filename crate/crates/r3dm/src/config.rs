//! Run configuration: one canonical schema for the config file, with every
//! default taken from the published hyperparameter tables. Unknown keys are
//! rejected when parsing.

use serde::{Deserialize, Serialize};

use crate::env::EnvSpec;
use crate::error::{R3dmError, Result};

/// Weights and horizon of the intrinsic reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntrinsicConfig {
    /// Task/intrinsic trade-off in the TD target.
    pub alpha: f64,
    /// Weight of the role-conditioned log-likelihood bracket.
    pub beta1: f64,
    /// Weight of the latent-dynamics log-likelihood terms.
    pub beta2: f64,
    /// Weight of the policy intrinsic reward relative to the dynamics one.
    pub beta3: f64,
    /// Reward-computation horizon (real future steps).
    pub k: usize,
    /// Optional symmetric clip on the per-step total intrinsic reward.
    pub clip: Option<f64>,
}

impl Default for IntrinsicConfig {
    fn default() -> Self {
        IntrinsicConfig { alpha: 0.05, beta1: 1.0, beta2: 0.0, beta3: 1.0, k: 1, clip: None }
    }
}

/// World-model dimensions and loss scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldModelConfig {
    pub hidden_dim: usize,
    pub latent_vars: usize,
    pub latent_classes: usize,
    pub unimix_ratio: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub recon_scale: f64,
    pub dyn_scale: f64,
    pub rep_scale: f64,
    /// Free-nats floor on each KL term. 1.0 at desk scale; 512 reproduces
    /// the published table, which disables KL pressure entirely.
    pub free_nats: f64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        WorldModelConfig {
            hidden_dim: 128,
            latent_vars: 16,
            latent_classes: 16,
            unimix_ratio: 0.01,
            learning_rate: 1e-4,
            batch_size: 16,
            grad_clip: 1000.0,
            recon_scale: 1.0,
            dyn_scale: 0.5,
            rep_scale: 0.1,
            free_nats: 1.0,
        }
    }
}

/// Everything the training loop needs besides the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub use_lr_decay: bool,
    pub contrastive_lr: f64,
    /// Momentum of the key role encoder update.
    pub zeta: f64,
    /// Contrastive update interval, counted in Q-network updates.
    pub t_cl: u64,
    /// Replay capacity in episodes.
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub target_momentum: f64,
    /// When set, replaces soft target updates with a hard copy every
    /// this many Q-network updates.
    pub target_update_interval: Option<u64>,
    /// Number of role clusters |M|.
    pub cluster_count: usize,
    pub agent_embedding_dim: usize,
    pub role_dim: usize,
    pub state_embedding_dim: usize,
    pub attention_heads: usize,
    pub attention_embed_dim: usize,
    pub attention_output_dim: usize,
    pub hypernet_hidden: usize,
    pub mixing_embed_dim: usize,
    pub q_hidden_dim: usize,
    pub grad_clip_q: f64,
    /// Stop TD gradients at the role embedding input of the utility heads.
    pub detach_role_for_q: bool,
    /// Learner iterations run after every this many collected episodes.
    pub train_interval_episodes: u64,
    pub world_model: WorldModelConfig,
    pub intrinsic: IntrinsicConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gamma: 0.99,
            learning_rate: 6e-4,
            use_lr_decay: true,
            contrastive_lr: 8e-4,
            zeta: 0.005,
            t_cl: 100,
            buffer_capacity: 5000,
            batch_size: 32,
            eps_start: 1.0,
            eps_end: 0.02,
            eps_decay_steps: 80_000,
            eval_interval: 5000,
            eval_episodes: 32,
            target_momentum: 0.005,
            target_update_interval: None,
            cluster_count: 3,
            agent_embedding_dim: 128,
            role_dim: 64,
            state_embedding_dim: 64,
            attention_heads: 4,
            attention_embed_dim: 128,
            attention_output_dim: 64,
            hypernet_hidden: 32,
            mixing_embed_dim: 32,
            q_hidden_dim: 128,
            grad_clip_q: 10.0,
            detach_role_for_q: false,
            train_interval_episodes: 1,
            world_model: WorldModelConfig::default(),
            intrinsic: IntrinsicConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("contrastive_lr", self.contrastive_lr),
            ("target_momentum", self.target_momentum),
        ];
        for (name, v) in positive {
            if v <= 0.0 {
                return Err(R3dmError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(R3dmError::Config("gamma must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(R3dmError::Config(format!("zeta must lie in [0, 1], got {}", self.zeta)));
        }
        if self.eps_end > self.eps_start {
            return Err(R3dmError::Config("eps_end must not exceed eps_start".into()));
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return Err(R3dmError::Config("epsilon endpoints must lie in [0, 1]".into()));
        }
        let counts = [
            ("buffer_capacity", self.buffer_capacity),
            ("batch_size", self.batch_size),
            ("eval_episodes", self.eval_episodes),
            ("cluster_count", self.cluster_count),
            ("agent_embedding_dim", self.agent_embedding_dim),
            ("role_dim", self.role_dim),
            ("state_embedding_dim", self.state_embedding_dim),
            ("attention_heads", self.attention_heads),
            ("attention_embed_dim", self.attention_embed_dim),
            ("attention_output_dim", self.attention_output_dim),
            ("hypernet_hidden", self.hypernet_hidden),
            ("mixing_embed_dim", self.mixing_embed_dim),
            ("q_hidden_dim", self.q_hidden_dim),
            ("wm.hidden_dim", self.world_model.hidden_dim),
            ("wm.latent_vars", self.world_model.latent_vars),
            ("wm.latent_classes", self.world_model.latent_classes),
            ("wm.batch_size", self.world_model.batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(R3dmError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.attention_embed_dim % self.attention_heads != 0 {
            return Err(R3dmError::Config(
                "attention_embed_dim must be divisible by attention_heads".into(),
            ));
        }
        if self.intrinsic.k == 0 {
            return Err(R3dmError::Config("intrinsic horizon k must be at least 1".into()));
        }
        for (name, v) in [
            ("intrinsic.alpha", self.intrinsic.alpha),
            ("intrinsic.beta1", self.intrinsic.beta1),
            ("intrinsic.beta2", self.intrinsic.beta2),
            ("intrinsic.beta3", self.intrinsic.beta3),
        ] {
            if v < 0.0 {
                return Err(R3dmError::Config(format!("{name} must be non-negative")));
            }
        }
        if self.train_interval_episodes == 0 || self.t_cl == 0 {
            return Err(R3dmError::Config("update intervals must be at least 1".into()));
        }
        Ok(())
    }
}

/// The config file: env, run and intrinsic sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub env: EnvSpec,
    pub run: RunConfig,
    pub intrinsic: IntrinsicConfig,
}

impl ConfigFile {
    /// Parse from JSON text, rejecting unknown keys.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ConfigFile = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.run.validate()?;
        Ok(())
    }

    /// The run configuration with the intrinsic section folded in.
    pub fn effective_run(&self) -> RunConfig {
        let mut run = self.run.clone();
        run.intrinsic = self.intrinsic.clone();
        run
    }
}
