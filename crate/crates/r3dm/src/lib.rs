//! Role-based cooperative multi-agent Q-learning with contrastive role
//! discovery and dual world-model intrinsic rewards.
//!
//! The crate is organised around the training pipeline:
//!
//! * [`env`] — fire-fighting gridworld, Dec-POMDP plumbing, tabular MDP fixtures
//! * [`encoders`] — recurrent trajectory encoder, role encoder, momentum keys
//! * [`qmixer`] — individual utilities, attention-augmented monotonic mixing
//! * [`rolecl`] — K-means role clustering and the contrastive loss
//! * [`worldmodel`] — role-conditioned and role-agnostic recurrent state-space models
//! * [`intrinsic`] — policy and dynamics intrinsic rewards
//! * [`trainer`] — replay, schedules, TD objective and the training loop
//! * [`oracles`] — independent brute-force checks used by tests and `verify`
//! * [`cli`] — train / ablate / verify / export-roles entry points
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoders;
pub mod env;
pub mod error;
pub mod intrinsic;
pub mod nn;
pub mod oracles;
pub mod plot;
pub mod qmixer;
pub mod rolecl;
pub mod tape;
pub mod trainer;
pub mod worldmodel;

pub use config::{ConfigFile, IntrinsicConfig, RunConfig, WorldModelConfig};
pub use env::{EnvSpec, GlobalState, JointAction, Observation, TabularMdp, TwinFires};
pub use error::{R3dmError, Result};
