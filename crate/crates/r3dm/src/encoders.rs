//! Trajectory and role encoders.
//!
//! The trajectory encoder turns an observation/last-action pair and the
//! previous embedding into a new agent embedding (dense projection with ReLU
//! into a GRU). The role encoder is a deterministic two-layer head on top of
//! the agent embedding; a slow-moving momentum copy of it provides stable
//! contrastive keys.

use ndarray::{Array2, ArrayView1};
use rand::Rng;

use crate::error::{R3dmError, Result};
use crate::nn::{Dense, DenseVars, GruCell, GruVars};
use crate::tape::{Tape, Var};

/// Recurrent embedding of one agent's observation-action history.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentEmbedding(pub Vec<f64>);

impl AgentEmbedding {
    pub fn zeros(dim: usize) -> Self {
        AgentEmbedding(vec![0.0; dim])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Latent role code for one agent at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleEmbedding(pub Vec<f64>);

impl RoleEmbedding {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Two dense layers with a ReLU in between; the final layer is linear.
#[derive(Debug, Clone)]
pub struct RoleHead {
    pub l1: Dense,
    pub l2: Dense,
}

impl RoleHead {
    pub fn new<R: Rng>(rng: &mut R, embed_dim: usize, role_dim: usize) -> Self {
        RoleHead { l1: Dense::new(rng, embed_dim, embed_dim), l2: Dense::new(rng, embed_dim, role_dim) }
    }

    pub fn zeros(embed_dim: usize, role_dim: usize) -> Self {
        RoleHead { l1: Dense::zeros(embed_dim, embed_dim), l2: Dense::zeros(embed_dim, role_dim) }
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        [self.l1.tensors(), self.l2.tensors()].concat()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = self.l1.tensors_mut();
        v.extend(self.l2.tensors_mut());
        v
    }

    pub fn tensor_names() -> Vec<&'static str> {
        vec!["l1.w", "l1.b", "l2.w", "l2.b"]
    }

    pub fn mount(&self, tape: &mut Tape) -> RoleHeadVars {
        RoleHeadVars { l1: self.l1.mount(tape), l2: self.l2.mount(tape) }
    }

    /// Batched forward without parameter gradients.
    pub fn forward_frozen(&self, e: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(e.clone());
        let vars = self.mount(&mut tape);
        let out = vars.forward(&mut tape, x);
        tape.value(out).clone()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RoleHeadVars {
    pub l1: DenseVars,
    pub l2: DenseVars,
}

impl RoleHeadVars {
    pub fn forward(&self, tape: &mut Tape, e: Var) -> Var {
        let h = self.l1.forward(tape, e);
        let a = tape.relu(h);
        self.l2.forward(tape, a)
    }

    pub fn var_list(&self) -> Vec<Var> {
        [self.l1.var_list(), self.l2.var_list()].concat()
    }
}

/// Recurrent trajectory encoder: dense projection with ReLU into a GRU.
#[derive(Debug, Clone)]
pub struct TrajectoryEncoder {
    pub proj: Dense,
    pub gru: GruCell,
}

impl TrajectoryEncoder {
    pub fn new<R: Rng>(rng: &mut R, input_dim: usize, embed_dim: usize) -> Self {
        TrajectoryEncoder {
            proj: Dense::new(rng, input_dim, embed_dim),
            gru: GruCell::new(rng, embed_dim, embed_dim),
        }
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        [self.proj.tensors(), self.gru.tensors()].concat()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = self.proj.tensors_mut();
        v.extend(self.gru.tensors_mut());
        v
    }

    pub fn tensor_names() -> Vec<&'static str> {
        vec!["proj.w", "proj.b", "gru.w_ih", "gru.w_hh", "gru.b_ih", "gru.b_hh"]
    }

    pub fn mount(&self, tape: &mut Tape) -> TrajectoryEncoderVars {
        TrajectoryEncoderVars { proj: self.proj.mount(tape), gru: self.gru.mount(tape) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrajectoryEncoderVars {
    pub proj: DenseVars,
    pub gru: GruVars,
}

impl TrajectoryEncoderVars {
    /// One recurrent step over a batch: rows are agents (or agent-episodes).
    pub fn forward(&self, tape: &mut Tape, obs_action: Var, prev: Var) -> Var {
        let p = self.proj.forward(tape, obs_action);
        let x = tape.relu(p);
        self.gru.forward(tape, x, prev)
    }

    pub fn var_list(&self) -> Vec<Var> {
        [self.proj.var_list(), self.gru.var_list()].concat()
    }
}

/// All encoder parameters: trajectory encoder, role head, and the momentum
/// key copy of the role head.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub theta_e: TrajectoryEncoder,
    pub theta_r: RoleHead,
    pub theta_r_key: RoleHead,
}

impl EncoderParams {
    pub fn new<R: Rng>(rng: &mut R, input_dim: usize, embed_dim: usize, role_dim: usize) -> Self {
        let theta_e = TrajectoryEncoder::new(rng, input_dim, embed_dim);
        let theta_r = RoleHead::new(rng, embed_dim, role_dim);
        let theta_r_key = theta_r.clone();
        EncoderParams { theta_e, theta_r, theta_r_key }
    }

    pub fn embed_dim(&self) -> usize {
        self.theta_e.gru.hidden
    }

    pub fn role_dim(&self) -> usize {
        self.theta_r.l2.out_dim()
    }
}

/// Advance one agent's embedding by a single step.
pub fn encode_step(
    params: &EncoderParams,
    prev: &AgentEmbedding,
    obs: &[f64],
    last_action: &[f64],
) -> AgentEmbedding {
    let input_dim = params.theta_e.proj.in_dim();
    assert_eq!(
        obs.len() + last_action.len(),
        input_dim,
        "encode_step: obs+action length {} does not match encoder input {}",
        obs.len() + last_action.len(),
        input_dim
    );
    assert_eq!(prev.0.len(), params.embed_dim(), "encode_step: embedding dim mismatch");
    let mut tape = Tape::new();
    let vars = params.theta_e.mount(&mut tape);
    let mut row = Vec::with_capacity(input_dim);
    row.extend_from_slice(obs);
    row.extend_from_slice(last_action);
    let x = tape.leaf(Array2::from_shape_vec((1, input_dim), row).unwrap());
    let h = tape.leaf(Array2::from_shape_vec((1, prev.0.len()), prev.0.clone()).unwrap());
    let out = vars.forward(&mut tape, x, h);
    AgentEmbedding(tape.value(out).row(0).to_vec())
}

/// Deterministic role embedding from an agent embedding.
pub fn encode_role(params: &EncoderParams, e: &AgentEmbedding) -> RoleEmbedding {
    assert!(e.is_finite(), "encode_role: non-finite agent embedding");
    let arr = Array2::from_shape_vec((1, e.0.len()), e.0.clone()).unwrap();
    RoleEmbedding(params.theta_r.forward_frozen(&arr).row(0).to_vec())
}

/// Exponential interpolation of the key encoder toward the online role
/// encoder: `key <- (1 - zeta) * online + zeta * key`.
pub fn momentum_update(theta_r: &RoleHead, theta_r_key: &mut RoleHead, zeta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&zeta) {
        return Err(R3dmError::Config(format!("zeta must lie in [0, 1], got {zeta}")));
    }
    for (online, key) in theta_r.tensors().into_iter().zip(theta_r_key.tensors_mut()) {
        assert_eq!(online.dim(), key.dim(), "momentum_update: shape mismatch");
        key.zip_mut_with(online, |k, &o| *k = (1.0 - zeta) * o + zeta * *k);
    }
    Ok(())
}

/// Batched multi-step unroll for a single agent, returning the embedding at
/// every timestep. Row `t` of `obs`/`last_actions` is the input at step `t`.
pub fn unroll_embeddings(
    params: &EncoderParams,
    obs: &Array2<f64>,
    last_actions: &Array2<f64>,
) -> Vec<AgentEmbedding> {
    let steps = obs.nrows();
    assert_eq!(last_actions.nrows(), steps);
    let mut tape = Tape::new();
    let vars = params.theta_e.mount(&mut tape);
    let mut h = tape.leaf(Array2::zeros((1, params.embed_dim())));
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut row: Vec<f64> = obs.row(t).to_vec();
        row.extend(last_actions.row(t).iter());
        let x = tape.leaf(Array2::from_shape_vec((1, row.len()), row).unwrap());
        h = vars.forward(&mut tape, x, h);
        out.push(AgentEmbedding(tape.value(h).row(0).to_vec()));
    }
    out
}

pub(crate) fn row_to_array(row: ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_vec((1, row.len()), row.to_vec()).unwrap()
}
