//! Replay, schedules, the TD objective and the training loop.
//!
//! The loop per collected episode: append the trajectory (with embeddings
//! and roles cached at collection time), every `t_cl` Q-updates run a
//! K-means + momentum + contrastive step, then update both world models on
//! fresh minibatches, recompute intrinsic rewards for a third minibatch
//! with current parameters, and take one TD step with soft target updates.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::config::RunConfig;
use crate::encoders::{momentum_update, EncoderParams, RoleHead, TrajectoryEncoder};
use crate::env::{EnvSpec, TwinFires, N_ACTIONS};
use crate::error::{R3dmError, Result};
use crate::intrinsic::{policy_kl_rows, total_intrinsic};
use crate::nn::{clip_grads, collect_grads, Adam};
use crate::qmixer::{epsilon_greedy, greedy_joint_action, Mixer, MixerDims, QHead};
use crate::rolecl::{contrastive_loss_graph, kmeans, positive_mask, BilinearScore};
use crate::tape::{Tape, Var};
use crate::worldmodel::{
    rollout_posteriors, train_world_model, RolloutStep, Rssm, RssmDims, WmBatch,
};

/// One complete episode with everything the learners need.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    /// Flat global-state vector at each step (before the action).
    pub states: Vec<Vec<f64>>,
    /// Per step: n_agents x obs_dim observation matrix.
    pub obs: Vec<Array2<f64>>,
    /// Per step: chosen action per agent.
    pub actions: Vec<Vec<usize>>,
    /// Per step: n_agents x n_actions availability mask.
    pub avail: Vec<Array2<f64>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Agent embeddings cached at collection time (n_agents x embed_dim).
    pub embeddings: Vec<Array2<f64>>,
    /// Role embeddings cached at collection time (n_agents x role_dim).
    pub roles: Vec<Array2<f64>>,
    /// All fires extinguished before the step limit.
    pub success: bool,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.rewards.len();
        if t == 0 {
            return Err(R3dmError::Contract("empty episode record".into()));
        }
        if [
            self.states.len(),
            self.obs.len(),
            self.actions.len(),
            self.avail.len(),
            self.dones.len(),
            self.embeddings.len(),
            self.roles.len(),
        ]
        .iter()
        .any(|&l| l != t)
        {
            return Err(R3dmError::Contract("episode sequences differ in length".into()));
        }
        if self.dones[..t - 1].iter().any(|&d| d) {
            return Err(R3dmError::Contract("done flag set before the final step".into()));
        }
        Ok(())
    }
}

/// FIFO episode replay buffer.
#[derive(Debug, Default)]
pub struct ReplayBuffer {
    episodes: VecDeque<EpisodeRecord>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { episodes: VecDeque::new(), capacity }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn push_episode(&mut self, record: EpisodeRecord) -> Result<()> {
        record.validate()?;
        self.episodes.push_back(record);
        while self.episodes.len() > self.capacity {
            self.episodes.pop_front();
        }
        Ok(())
    }

    /// Sample `count` distinct episodes (without replacement within a draw).
    pub fn sample<'a, R: Rng>(&'a self, count: usize, rng: &mut R) -> Vec<&'a EpisodeRecord> {
        assert!(count <= self.episodes.len(), "not enough episodes buffered");
        let mut idx: Vec<usize> = (0..self.episodes.len()).collect();
        for i in 0..count {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        idx[..count].iter().map(|&i| &self.episodes[i]).collect()
    }
}

/// Linear epsilon ramp, constant after the decay horizon.
pub fn epsilon_at(cfg: &RunConfig, step: u64) -> f64 {
    if step >= cfg.eps_decay_steps {
        cfg.eps_end
    } else {
        cfg.eps_start + (cfg.eps_end - cfg.eps_start) * step as f64 / cfg.eps_decay_steps as f64
    }
}

/// Linear learning-rate decay to zero over the budget; never negative.
pub fn lr_at(cfg: &RunConfig, step: u64, total_steps: u64) -> f64 {
    if !cfg.use_lr_decay || total_steps == 0 {
        return cfg.learning_rate;
    }
    let frac = 1.0 - step as f64 / total_steps as f64;
    cfg.learning_rate * frac.max(0.0)
}

/// Elementwise `target <- (1 - m) * target + m * online`.
pub fn soft_update_target(online: &[&Array2<f64>], target: &mut [&mut Array2<f64>], momentum: f64) {
    assert_eq!(online.len(), target.len(), "tensor lists differ in length");
    for (o, t) in online.iter().zip(target.iter_mut()) {
        assert_eq!(o.dim(), t.dim(), "soft update shape mismatch");
        t.zip_mut_with(o, |tv, &ov| *tv = (1.0 - momentum) * *tv + momentum * ov);
    }
}

/// All online networks.
pub struct Nets {
    pub encoder: EncoderParams,
    pub q_head: QHead,
    pub mixer: Mixer,
    pub bilinear: BilinearScore,
    pub wm_role: Rssm,
    pub wm_agnostic: Rssm,
}

/// Target copies used by the TD bootstrap.
pub struct TargetNets {
    pub theta_e: TrajectoryEncoder,
    pub theta_r: RoleHead,
    pub q_head: QHead,
    pub mixer: Mixer,
}

impl Nets {
    pub fn new<R: Rng>(rng: &mut R, spec: &EnvSpec, cfg: &RunConfig) -> Self {
        let obs_dim = spec.obs_len();
        let input_dim = obs_dim + N_ACTIONS;
        let state_len = spec.state_len();
        let encoder = EncoderParams::new(rng, input_dim, cfg.agent_embedding_dim, cfg.role_dim);
        let q_head = QHead::new(rng, cfg.agent_embedding_dim, cfg.role_dim, cfg.q_hidden_dim, N_ACTIONS);
        let mixer = Mixer::new(
            rng,
            MixerDims {
                n_agents: spec.n_agents,
                state_len,
                role_dim: cfg.role_dim,
                state_embed_dim: cfg.state_embedding_dim,
                attn_embed_dim: cfg.attention_embed_dim,
                attn_out_dim: cfg.attention_output_dim,
                heads: cfg.attention_heads,
                hyper_hidden: cfg.hypernet_hidden,
                mix_dim: cfg.mixing_embed_dim,
            },
        );
        let bilinear = BilinearScore::new(rng, cfg.role_dim);
        let wm_role = Rssm::new(
            rng,
            RssmDims::from_config(&cfg.world_model, obs_dim, N_ACTIONS, Some(cfg.role_dim)),
        );
        let wm_agnostic =
            Rssm::new(rng, RssmDims::from_config(&cfg.world_model, obs_dim, N_ACTIONS, None));
        Nets { encoder, q_head, mixer, bilinear, wm_role, wm_agnostic }
    }

    pub fn make_targets(&self) -> TargetNets {
        TargetNets {
            theta_e: self.encoder.theta_e.clone(),
            theta_r: self.encoder.theta_r.clone(),
            q_head: self.q_head.clone(),
            mixer: self.mixer.clone(),
        }
    }

    fn td_tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = self.encoder.theta_e.tensors();
        v.extend(self.encoder.theta_r.tensors());
        v.extend(self.q_head.tensors());
        v.extend(self.mixer.tensors());
        v
    }

    fn td_tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = self.encoder.theta_e.tensors_mut();
        v.extend(self.encoder.theta_r.tensors_mut());
        v.extend(self.q_head.tensors_mut());
        v.extend(self.mixer.tensors_mut());
        v
    }
}

impl TargetNets {
    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = self.theta_e.tensors_mut();
        v.extend(self.theta_r.tensors_mut());
        v.extend(self.q_head.tensors_mut());
        v.extend(self.mixer.tensors_mut());
        v
    }
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Contrastive updates disabled.
    NoCl,
    /// Intrinsic rewards scaled out of the TD target (alpha forced to 0);
    /// they are still computed and reported.
    NoIntrinsic,
}

impl Variant {
    pub fn parse(name: &str) -> Result<Variant> {
        match name {
            "full" => Ok(Variant::Full),
            "no_cl" => Ok(Variant::NoCl),
            "no_intrinsic" => Ok(Variant::NoIntrinsic),
            other => Err(R3dmError::Config(format!("unknown variant '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCl => "no_cl",
            Variant::NoIntrinsic => "no_intrinsic",
        }
    }
}

/// One metrics row, written at every evaluation point.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: u64,
    pub episode: u64,
    pub success_rate: f64,
    pub mean_return: f64,
    pub td_loss: f64,
    pub cl_loss: f64,
    pub wm_role_loss: f64,
    pub wm_agnostic_loss: f64,
    pub r_pol_mean: f64,
    pub r_dyn_mean: f64,
    pub epsilon: f64,
}

pub const METRICS_HEADER: &str = "step,episode,success_rate,mean_return,td_loss,cl_loss,wm_role_loss,wm_agnostic_loss,r_pol_mean,r_dyn_mean,epsilon";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episode,
            self.success_rate,
            self.mean_return,
            self.td_loss,
            self.cl_loss,
            self.wm_role_loss,
            self.wm_agnostic_loss,
            self.r_pol_mean,
            self.r_dyn_mean,
            self.epsilon
        )
    }
}

/// Result of a training run.
pub struct RunArtifacts {
    pub metrics: Vec<MetricsRow>,
    pub final_success: f64,
    pub nets: Nets,
    pub targets: TargetNets,
}

#[derive(Default)]
struct RunningMeans {
    td: (f64, f64),
    cl: (f64, f64),
    wm_role: (f64, f64),
    wm_agn: (f64, f64),
    r_pol: (f64, f64),
    r_dyn: (f64, f64),
}

impl RunningMeans {
    fn mean(pair: (f64, f64)) -> f64 {
        if pair.1 > 0.0 {
            pair.0 / pair.1
        } else {
            0.0
        }
    }
}

/// The training driver.
pub struct Trainer {
    pub env: TwinFires,
    pub cfg: RunConfig,
    pub nets: Nets,
    pub targets: TargetNets,
    pub buffer: ReplayBuffer,
    pub variant: Variant,
    rng: ChaCha20Rng,
    opt_td: Adam,
    opt_cl: Adam,
    opt_wm_role: Adam,
    opt_wm_agn: Adam,
    env_steps: u64,
    episodes: u64,
    q_updates: u64,
    means: RunningMeans,
    workers: usize,
}

/// Snapshot of the policy-relevant nets for rollout workers.
#[derive(Clone)]
struct PolicySnapshot {
    encoder: EncoderParams,
    q_head: QHead,
}

impl Trainer {
    pub fn new(spec: EnvSpec, cfg: RunConfig, seed: u64, variant: Variant) -> Result<Self> {
        cfg.validate()?;
        let env = TwinFires::new(spec)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let nets = Nets::new(&mut rng, &env.spec, &cfg);
        let targets = nets.make_targets();
        let buffer = ReplayBuffer::new(cfg.buffer_capacity);
        let workers = std::env::var("R3DM_NUM_WORKERS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(1)
            .max(1);
        Ok(Trainer {
            env,
            cfg,
            nets,
            targets,
            buffer,
            variant,
            rng,
            opt_td: Adam::new(),
            opt_cl: Adam::new(),
            opt_wm_role: Adam::new(),
            opt_wm_agn: Adam::new(),
            env_steps: 0,
            episodes: 0,
            q_updates: 0,
            means: RunningMeans::default(),
            workers,
        })
    }

    fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot { encoder: self.nets.encoder.clone(), q_head: self.nets.q_head.clone() }
    }

    /// Collect one episode with epsilon-greedy exploration. Returns `None`
    /// when the step budget ran out mid-episode (the partial episode is
    /// discarded; its steps still count).
    fn collect_episode(
        env: &TwinFires,
        snap: &PolicySnapshot,
        cfg: &RunConfig,
        rng: &mut ChaCha20Rng,
        env_steps: &mut u64,
        total_steps: u64,
        eval_greedy: bool,
    ) -> Option<EpisodeRecord> {
        let n = env.spec.n_agents;
        let (mut state, mut obs) = env.reset(rng.gen());
        let embed_dim = snap.encoder.embed_dim();
        let mut prev_e = Array2::zeros((n, embed_dim));
        let mut last_action_onehot = Array2::zeros((n, N_ACTIONS));

        let mut rec = EpisodeRecord {
            states: Vec::new(),
            obs: Vec::new(),
            actions: Vec::new(),
            avail: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            embeddings: Vec::new(),
            roles: Vec::new(),
            success: false,
        };

        loop {
            let obs_mat = obs_matrix(&obs);
            let avail = Array2::from_elem((n, N_ACTIONS), 1.0);

            // e_t = f(obs_t, a_{t-1}, e_{t-1}); z_t = role head(e_t).
            let mut tape = Tape::new();
            let enc_vars = snap.encoder.theta_e.mount(&mut tape);
            let role_vars = snap.encoder.theta_r.mount(&mut tape);
            let x = {
                let mut joined = Array2::zeros((n, obs_mat.ncols() + N_ACTIONS));
                joined.slice_mut(ndarray::s![.., ..obs_mat.ncols()]).assign(&obs_mat);
                joined
                    .slice_mut(ndarray::s![.., obs_mat.ncols()..])
                    .assign(&last_action_onehot);
                tape.leaf(joined)
            };
            let prev = tape.leaf(prev_e.clone());
            let e_var = enc_vars.forward(&mut tape, x, prev);
            let z_var = role_vars.forward(&mut tape, e_var);
            let e_mat = tape.value(e_var).clone();
            let z_mat = tape.value(z_var).clone();
            let q_var = {
                let q_vars = snap.q_head.mount(&mut tape);
                q_vars.forward(&mut tape, e_var, z_var, &avail)
            };
            let q_mat = tape.value(q_var).clone();

            let joint = if eval_greedy {
                greedy_joint_action(&q_mat, &avail)
            } else {
                let eps = epsilon_at(cfg, *env_steps);
                epsilon_greedy(&q_mat, &avail, eps, rng)
            };

            let outcome = env.step(&state, &joint).expect("non-terminal state");
            rec.states.push(env.state_vector(&state));
            rec.obs.push(obs_mat);
            rec.actions.push(joint.actions.clone());
            rec.avail.push(avail);
            rec.rewards.push(outcome.reward);
            rec.dones.push(outcome.done);
            rec.embeddings.push(e_mat.clone());
            rec.roles.push(z_mat);

            *env_steps += 1;
            prev_e = e_mat;
            last_action_onehot = Array2::zeros((n, N_ACTIONS));
            for (i, &a) in joint.actions.iter().enumerate() {
                last_action_onehot[(i, a)] = 1.0;
            }
            state = outcome.state;
            obs = outcome.observations;

            if outcome.done {
                rec.success = state.all_fires_out();
                return Some(rec);
            }
            if !eval_greedy && *env_steps >= total_steps {
                return None;
            }
        }
    }

    /// Greedy evaluation: success rate and mean undiscounted return.
    pub fn evaluate(&mut self) -> (f64, f64) {
        let mut successes = 0usize;
        let mut returns = 0.0;
        let snap = self.snapshot();
        for _ in 0..self.cfg.eval_episodes {
            let mut steps = 0u64;
            let rec = Self::collect_episode(
                &self.env,
                &snap,
                &self.cfg,
                &mut self.rng,
                &mut steps,
                u64::MAX,
                true,
            )
            .expect("greedy episodes always terminate");
            if rec.success {
                successes += 1;
            }
            returns += rec.rewards.iter().sum::<f64>();
        }
        (
            successes as f64 / self.cfg.eval_episodes as f64,
            returns / self.cfg.eval_episodes as f64,
        )
    }

    /// Run until the env-step budget is exhausted, invoking `on_eval` at
    /// every evaluation point.
    pub fn run(
        &mut self,
        total_steps: u64,
        mut on_eval: impl FnMut(&MetricsRow, &Nets, &TargetNets, &RunConfig),
    ) -> Vec<MetricsRow> {
        let mut rows = Vec::new();
        let mut next_eval = self.cfg.eval_interval;
        while self.env_steps < total_steps {
            let collected = self.collect_round(total_steps);
            for rec in collected {
                self.buffer.push_episode(rec).expect("collected episodes are valid");
                self.episodes += 1;
                if self.ready_to_learn() && self.episodes % self.cfg.train_interval_episodes == 0 {
                    self.learn_iteration(total_steps);
                }
            }
            while self.env_steps >= next_eval && next_eval <= total_steps {
                let row = self.eval_row(next_eval);
                on_eval(&row, &self.nets, &self.targets, &self.cfg);
                rows.push(row);
                next_eval += self.cfg.eval_interval;
            }
        }
        rows
    }

    fn collect_round(&mut self, total_steps: u64) -> Vec<EpisodeRecord> {
        let snap = self.snapshot();
        if self.workers <= 1 {
            let mut out = Vec::new();
            if let Some(rec) = Self::collect_episode(
                &self.env,
                &snap,
                &self.cfg,
                &mut self.rng,
                &mut self.env_steps,
                total_steps,
                false,
            ) {
                out.push(rec);
            }
            return out;
        }
        // Parallel rollouts: one worker per episode with a private RNG
        // stream; results join in worker order. Epsilon is held at the value
        // of the round start, so multi-worker runs are reproducible but not
        // bit-identical to single-worker ones.
        let seeds: Vec<u64> = (0..self.workers).map(|_| self.rng.gen()).collect();
        let env = &self.env;
        let cfg = &self.cfg;
        let base_steps = self.env_steps;
        let results: Vec<Option<(EpisodeRecord, u64)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| {
                    let snap = snap.clone();
                    scope.spawn(move || {
                        let mut rng = ChaCha20Rng::seed_from_u64(seed);
                        let mut steps = base_steps;
                        Self::collect_episode(env, &snap, cfg, &mut rng, &mut steps, u64::MAX, false)
                            .map(|rec| {
                                let used = steps - base_steps;
                                (rec, used)
                            })
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut out = Vec::new();
        for r in results.into_iter().flatten() {
            if self.env_steps >= total_steps {
                break;
            }
            self.env_steps += r.1;
            out.push(r.0);
        }
        out
    }

    fn ready_to_learn(&self) -> bool {
        let need = self.cfg.batch_size.max(self.cfg.world_model.batch_size);
        self.buffer.len() >= need
    }

    fn learn_iteration(&mut self, total_steps: u64) {
        self.q_updates += 1;

        // Contrastive step on schedule (lines: cluster, momentum, loss).
        if self.variant != Variant::NoCl
            && self.env.spec.n_agents >= 2
            && self.q_updates % self.cfg.t_cl == 0
        {
            let loss = self.contrastive_update();
            self.means.cl.0 += loss;
            self.means.cl.1 += 1.0;
        }

        // World models on fresh minibatches.
        let role_batch = {
            let eps = self.buffer.sample(self.cfg.world_model.batch_size, &mut self.rng);
            episodes_to_wm_batch(&eps, true)
        };
        if let Some(rep) = train_world_model(
            &mut self.nets.wm_role,
            &role_batch,
            &self.cfg.world_model,
            &mut self.opt_wm_role,
            &mut self.rng,
        ) {
            self.means.wm_role.0 += rep.total;
            self.means.wm_role.1 += 1.0;
        }
        let agn_batch = {
            let eps = self.buffer.sample(self.cfg.world_model.batch_size, &mut self.rng);
            episodes_to_wm_batch(&eps, false)
        };
        if let Some(rep) = train_world_model(
            &mut self.nets.wm_agnostic,
            &agn_batch,
            &self.cfg.world_model,
            &mut self.opt_wm_agn,
            &mut self.rng,
        ) {
            self.means.wm_agn.0 += rep.total;
            self.means.wm_agn.1 += 1.0;
        }

        // TD step with recomputed intrinsic rewards.
        let batch: Vec<EpisodeRecord> = self
            .buffer
            .sample(self.cfg.batch_size, &mut self.rng)
            .into_iter()
            .cloned()
            .collect();
        let refs: Vec<&EpisodeRecord> = batch.iter().collect();
        let (r_int, pol_mean, dyn_mean) = self.intrinsic_rewards(&refs);
        self.means.r_pol.0 += pol_mean;
        self.means.r_pol.1 += 1.0;
        self.means.r_dyn.0 += dyn_mean;
        self.means.r_dyn.1 += 1.0;

        let alpha = match self.variant {
            Variant::NoIntrinsic => 0.0,
            _ => self.cfg.intrinsic.alpha,
        };
        let lr = lr_at(&self.cfg, self.env_steps, total_steps);
        let report = td_update(
            &mut self.nets,
            &self.targets,
            &refs,
            &r_int,
            alpha,
            &self.cfg,
            lr,
            &mut self.opt_td,
        );
        self.means.td.0 += report.loss;
        self.means.td.1 += 1.0;

        // Target maintenance.
        match self.cfg.target_update_interval {
            Some(interval) => {
                if self.q_updates % interval == 0 {
                    let online = self.nets.td_tensors();
                    let mut tgt = self.targets.tensors_mut();
                    soft_update_target(&online, &mut tgt, 1.0);
                }
            }
            None => {
                let online = self.nets.td_tensors();
                let mut tgt = self.targets.tensors_mut();
                soft_update_target(&online, &mut tgt, self.cfg.target_momentum);
            }
        }
    }

    /// K-means per sampled timestep, momentum update, one contrastive step.
    fn contrastive_update(&mut self) -> f64 {
        momentum_update(&self.nets.encoder.theta_r, &mut self.nets.encoder.theta_r_key, self.cfg.zeta)
            .expect("zeta validated");
        let episodes: Vec<EpisodeRecord> = self
            .buffer
            .sample(self.cfg.batch_size.min(self.buffer.len()), &mut self.rng)
            .into_iter()
            .cloned()
            .collect();

        let mut tape = Tape::new();
        let head_vars = self.nets.encoder.theta_r.mount(&mut tape);
        let w = tape.leaf(self.nets.bilinear.w.clone());
        let mut terms: Vec<Var> = Vec::new();
        for ep in &episodes {
            for t in 0..ep.len() {
                let e = &ep.embeddings[t];
                let seed: u64 = self.rng.gen();
                let assignment = kmeans(e, self.cfg.cluster_count, seed);
                let pos = positive_mask(&assignment.matrix);
                if pos.iter().all(|&m| m > 0.0) {
                    // No negatives at this timestep: zero contribution.
                    continue;
                }
                let keys = self.nets.encoder.theta_r_key.forward_frozen(e);
                let e_leaf = tape.leaf(e.clone());
                let queries = head_vars.forward(&mut tape, e_leaf);
                let term = contrastive_loss_graph(&mut tape, queries, w, &keys, &pos);
                terms.push(term);
            }
        }
        if terms.is_empty() {
            return 0.0;
        }
        let stacked = tape.concat_cols(&terms);
        let total = tape.sum_all(stacked);
        let loss = tape.scale(total, 1.0 / terms.len() as f64);
        let grads = tape.backward(loss);
        let mut vars = head_vars.var_list();
        vars.push(w);
        let grad_list = collect_grads(&grads, &vars);
        let mut params = self.nets.encoder.theta_r.tensors_mut();
        params.push(&mut self.nets.bilinear.w);
        self.opt_cl.step(&mut params, &grad_list, self.cfg.contrastive_lr);
        tape.scalar(loss)
    }

    /// Per-(episode, step) total intrinsic rewards for a batch, plus means
    /// of the per-agent policy and dynamics components.
    ///
    /// All episodes are padded to the longest one and stacked as rows
    /// `ep * n_agents + agent`, so both world models roll out once per batch
    /// and every per-step evaluation is a single matrix pass.
    fn intrinsic_rewards(&mut self, batch: &[&EpisodeRecord]) -> (Array2<f64>, f64, f64) {
        let n = self.env.spec.n_agents;
        let bsz = batch.len();
        let t_max = batch.iter().map(|e| e.len()).max().unwrap_or(0);
        let mut r_int = Array2::zeros((bsz, t_max));
        if t_max == 0 {
            return (r_int, 0.0, 0.0);
        }
        let rows = bsz * n;
        let obs_dim = batch[0].obs[0].ncols();
        let role_dim = batch[0].roles[0].ncols();
        let embed_dim = batch[0].embeddings[0].ncols();
        let k = self.cfg.intrinsic.k;
        let intr = self.cfg.intrinsic.clone();

        let mut obs_t = vec![Array2::zeros((rows, obs_dim)); t_max];
        let mut act_t = vec![Array2::zeros((rows, N_ACTIONS)); t_max];
        let mut emb_t = vec![Array2::zeros((rows, embed_dim)); t_max];
        let mut roles_t = vec![Array2::zeros((rows, role_dim)); t_max];
        let mut avail_t = vec![Array2::from_elem((rows, N_ACTIONS), 1.0); t_max];
        for (ep_idx, ep) in batch.iter().enumerate() {
            for t in 0..ep.len() {
                for i in 0..n {
                    let row = ep_idx * n + i;
                    obs_t[t].row_mut(row).assign(&ep.obs[t].row(i));
                    act_t[t][(row, ep.actions[t][i])] = 1.0;
                    emb_t[t].row_mut(row).assign(&ep.embeddings[t].row(i));
                    roles_t[t].row_mut(row).assign(&ep.roles[t].row(i));
                    avail_t[t].row_mut(row).assign(&ep.avail[t].row(i));
                }
            }
        }

        let role_steps: Vec<RolloutStep> =
            rollout_posteriors(&self.nets.wm_role, &obs_t, &act_t, &mut self.rng);
        let agn_steps: Vec<RolloutStep> =
            rollout_posteriors(&self.nets.wm_agnostic, &obs_t, &act_t, &mut self.rng);

        let mut pol_sum = 0.0;
        let mut dyn_sum = 0.0;
        let mut count = 0.0;
        let mut r_pol_rows = Array2::zeros((rows, t_max));
        let mut r_dyn_rows = Array2::zeros((rows, t_max));
        for t in 0..t_max {
            for l in t..(t + k).min(t_max) {
                // Policy term at l (needs step l); dynamics term needs l + 1.
                if n >= 2 {
                    let kl = policy_kl_rows(&self.nets.q_head, &emb_t[l], &roles_t[t], n, &avail_t[l]);
                    for (row, v) in kl.into_iter().enumerate() {
                        let len = batch[row / n].len();
                        if t < len && l < len {
                            r_pol_rows[(row, t)] += v;
                        }
                    }
                }
                if l + 1 < t_max {
                    let terms = crate::intrinsic::dynamics_terms_rows(
                        &self.nets.wm_role,
                        &self.nets.wm_agnostic,
                        &role_steps[l + 1].state,
                        &agn_steps[l + 1].state,
                        &obs_t[l + 1],
                        &roles_t[t],
                        intr.beta1,
                        intr.beta2,
                    );
                    for (row, v) in terms.into_iter().enumerate() {
                        let len = batch[row / n].len();
                        if t < len && l + 1 < len {
                            r_dyn_rows[(row, t)] += v;
                        }
                    }
                }
            }
        }
        for (ep_idx, ep) in batch.iter().enumerate() {
            for t in 0..ep.len() {
                let r_pol: Vec<f64> = (0..n).map(|i| r_pol_rows[(ep_idx * n + i, t)]).collect();
                let r_dyn: Vec<f64> = (0..n).map(|i| r_dyn_rows[(ep_idx * n + i, t)]).collect();
                pol_sum += r_pol.iter().sum::<f64>();
                dyn_sum += r_dyn.iter().sum::<f64>();
                count += n as f64;
                r_int[(ep_idx, t)] = total_intrinsic(&r_pol, &r_dyn, intr.beta3, intr.clip);
            }
        }
        let denom = count.max(1.0);
        (r_int, pol_sum / denom, dyn_sum / denom)
    }

    fn eval_row(&mut self, step_mark: u64) -> MetricsRow {
        let (success_rate, mean_return) = self.evaluate();
        let row = MetricsRow {
            step: step_mark,
            episode: self.episodes,
            success_rate,
            mean_return,
            td_loss: RunningMeans::mean(self.means.td),
            cl_loss: RunningMeans::mean(self.means.cl),
            wm_role_loss: RunningMeans::mean(self.means.wm_role),
            wm_agnostic_loss: RunningMeans::mean(self.means.wm_agn),
            r_pol_mean: RunningMeans::mean(self.means.r_pol),
            r_dyn_mean: RunningMeans::mean(self.means.r_dyn),
            epsilon: epsilon_at(&self.cfg, step_mark),
        };
        self.means = RunningMeans::default();
        row
    }
}

fn obs_matrix(obs: &[crate::env::Observation]) -> Array2<f64> {
    let n = obs.len();
    let d = obs[0].values.len();
    let mut m = Array2::zeros((n, d));
    for (i, o) in obs.iter().enumerate() {
        for (j, &v) in o.values.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

/// Stack a batch of episodes into per-timestep matrices for world-model
/// training. Rows are (episode, agent) pairs: row `ep * n + i`.
pub fn episodes_to_wm_batch(batch: &[&EpisodeRecord], with_roles: bool) -> WmBatch {
    let b = batch.len();
    if b == 0 {
        return WmBatch { obs: vec![], actions: vec![], roles: None, mask: Array2::zeros((0, 0)) };
    }
    let n = batch[0].obs[0].nrows();
    let obs_dim = batch[0].obs[0].ncols();
    let role_dim = batch[0].roles[0].ncols();
    let t_max = batch.iter().map(|e| e.len()).max().unwrap();
    let rows = b * n;

    let mut obs = vec![Array2::zeros((rows, obs_dim)); t_max];
    let mut actions = vec![Array2::zeros((rows, N_ACTIONS)); t_max];
    let mut roles = vec![Array2::zeros((rows, role_dim)); t_max];
    let mut mask = Array2::zeros((rows, t_max));

    for (ep_idx, ep) in batch.iter().enumerate() {
        for t in 0..ep.len() {
            for i in 0..n {
                let row = ep_idx * n + i;
                obs[t].row_mut(row).assign(&ep.obs[t].row(i));
                actions[t][(row, ep.actions[t][i])] = 1.0;
                roles[t].row_mut(row).assign(&ep.roles[t].row(i));
                mask[(row, t)] = 1.0;
            }
        }
    }
    WmBatch { obs, actions, roles: with_roles.then_some(roles), mask }
}

/// Diagnostics from one TD step.
pub struct TdReport {
    pub loss: f64,
    /// B x T online mixed values (padded entries zero).
    pub q_tot: Array2<f64>,
    /// B x T bootstrapped targets (padded entries zero).
    pub targets: Array2<f64>,
    pub grad_norm: f64,
}

/// Apply one TD optimizer step on a batch.
pub fn td_update(
    nets: &mut Nets,
    targets: &TargetNets,
    batch: &[&EpisodeRecord],
    r_int: &Array2<f64>,
    alpha: f64,
    cfg: &RunConfig,
    lr: f64,
    opt: &mut Adam,
) -> TdReport {
    let (tape, loss, vars, mut report) = build_td_graph(nets, targets, batch, r_int, alpha, cfg);
    let grads = tape.backward(loss);
    let mut grad_list = collect_grads(&grads, &vars);
    clip_grads(&mut grad_list, cfg.grad_clip_q);
    report.grad_norm = crate::nn::global_grad_norm(&grad_list);
    let mut params = nets.td_tensors_mut();
    opt.step(&mut params, &grad_list, lr);
    report
}

/// Forward-only TD diagnostics (no optimizer step).
pub fn td_loss(
    nets: &Nets,
    targets: &TargetNets,
    batch: &[&EpisodeRecord],
    r_int: &Array2<f64>,
    alpha: f64,
    cfg: &RunConfig,
) -> TdReport {
    build_td_graph(nets, targets, batch, r_int, alpha, cfg).3
}

/// Build the full TD graph.
///
/// The target `y_t = r_t + alpha * r_int_t + gamma * (1 - done_t) *
/// Q_tot^-(s_{t+1}, argmax per-agent target utilities)` is computed with
/// frozen target parameters and enters the graph as a constant; the squared
/// error is averaged over real steps.
fn build_td_graph(
    nets: &Nets,
    targets: &TargetNets,
    batch: &[&EpisodeRecord],
    r_int: &Array2<f64>,
    alpha: f64,
    cfg: &RunConfig,
) -> (Tape, Var, Vec<Var>, TdReport) {
    let b = batch.len();
    assert!(b > 0, "td update needs a non-empty batch");
    let n = batch[0].obs[0].nrows();
    let t_max = batch.iter().map(|e| e.len()).max().unwrap();
    let obs_dim = batch[0].obs[0].ncols();
    let state_len = batch[0].states[0].len();

    // Per-step constants.
    let mut mask = Array2::zeros((b, t_max));
    let mut rewards = Array2::zeros((b, t_max));
    let mut terminal = Array2::zeros((b, t_max));
    for (ep_idx, ep) in batch.iter().enumerate() {
        for t in 0..ep.len() {
            mask[(ep_idx, t)] = 1.0;
            rewards[(ep_idx, t)] = ep.rewards[t];
            terminal[(ep_idx, t)] = if ep.dones[t] { 1.0 } else { 0.0 };
        }
    }

    // Agent-major per-step inputs with rows = episodes.
    let per_agent_input = |agent: usize, t: usize| -> Array2<f64> {
        let mut m = Array2::zeros((b, obs_dim + N_ACTIONS));
        for (ep_idx, ep) in batch.iter().enumerate() {
            if t < ep.len() {
                for j in 0..obs_dim {
                    m[(ep_idx, j)] = ep.obs[t][(agent, j)];
                }
                if t > 0 {
                    m[(ep_idx, obs_dim + ep.actions[t - 1][agent])] = 1.0;
                }
            }
        }
        m
    };
    let per_agent_avail = |agent: usize, t: usize| -> Array2<f64> {
        let mut m = Array2::from_elem((b, N_ACTIONS), 1.0);
        for (ep_idx, ep) in batch.iter().enumerate() {
            if t < ep.len() {
                for a in 0..N_ACTIONS {
                    m[(ep_idx, a)] = ep.avail[t][(agent, a)];
                }
            }
        }
        m
    };
    let per_agent_action_onehot = |agent: usize, t: usize| -> Array2<f64> {
        let mut m = Array2::zeros((b, N_ACTIONS));
        for (ep_idx, ep) in batch.iter().enumerate() {
            if t < ep.len() {
                m[(ep_idx, ep.actions[t][agent])] = 1.0;
            }
        }
        m
    };
    let state_matrix = |t: usize| -> Array2<f64> {
        let mut m = Array2::zeros((b, state_len));
        for (ep_idx, ep) in batch.iter().enumerate() {
            if t < ep.len() {
                for (j, &v) in ep.states[t].iter().enumerate() {
                    m[(ep_idx, j)] = v;
                }
            }
        }
        m
    };

    // Target pass (frozen): per-step greedy target q_tot.
    let mut target_qtot = Array2::zeros((b, t_max));
    {
        let mut tape = Tape::new();
        let enc = targets.theta_e.mount(&mut tape);
        let role = targets.theta_r.mount(&mut tape);
        let qh = targets.q_head.mount(&mut tape);
        let mixer = targets.mixer.mount(&mut tape);
        let state_enc = targets.mixer.state_encoder.mount(&mut tape);

        let mut hs: Vec<Var> =
            (0..n).map(|_| tape.leaf(Array2::zeros((b, cfg.agent_embedding_dim)))).collect();
        let mut state_h = tape.leaf(Array2::zeros((b, cfg.state_embedding_dim)));
        for t in 0..t_max {
            let mut chosen_cols = Vec::with_capacity(n);
            let mut role_vars = Vec::with_capacity(n);
            for (agent, h_slot) in hs.iter_mut().enumerate() {
                let x = tape.leaf(per_agent_input(agent, t));
                let h = enc.forward(&mut tape, x, *h_slot);
                *h_slot = h;
                let z = role.forward(&mut tape, h);
                role_vars.push(z);
                let avail = per_agent_avail(agent, t);
                let q = qh.forward(&mut tape, h, z, &avail);
                // Greedy chosen value = max over available actions.
                let q_val = tape.value(q).clone();
                let greedy = greedy_joint_action(&q_val, &avail);
                let mut onehot = Array2::zeros((b, N_ACTIONS));
                for (ep_idx, _) in batch.iter().enumerate() {
                    onehot[(ep_idx, greedy.actions[ep_idx])] = 1.0;
                }
                let sel = tape.leaf(onehot);
                let picked = tape.mul(q, sel);
                chosen_cols.push(tape.sum_cols(picked));
            }
            let q_chosen = tape.concat_cols(&chosen_cols);
            let state_raw = tape.leaf(state_matrix(t));
            state_h = state_enc.forward(&mut tape, state_raw, state_h);
            let out = mixer.forward(&mut tape, q_chosen, &role_vars, state_h, state_raw);
            let col = tape.value(out.q_tot);
            for ep_idx in 0..b {
                target_qtot[(ep_idx, t)] = col[(ep_idx, 0)];
            }
        }
    }

    // Bootstrapped targets.
    let mut y = Array2::zeros((b, t_max));
    for (ep_idx, ep) in batch.iter().enumerate() {
        for t in 0..ep.len() {
            let bootstrap = if ep.dones[t] || t + 1 >= ep.len() {
                0.0
            } else {
                cfg.gamma * target_qtot[(ep_idx, t + 1)]
            };
            y[(ep_idx, t)] = ep.rewards[t] + alpha * r_int[(ep_idx, t)] + bootstrap;
        }
    }

    // Online pass.
    let mut tape = Tape::new();
    let enc = nets.encoder.theta_e.mount(&mut tape);
    let role = nets.encoder.theta_r.mount(&mut tape);
    let qh = nets.q_head.mount(&mut tape);
    let mixer = nets.mixer.mount(&mut tape);
    let state_enc = nets.mixer.state_encoder.mount(&mut tape);
    let mut vars: Vec<Var> = Vec::new();
    vars.extend(enc.var_list());
    vars.extend(role.var_list());
    vars.extend(qh.var_list());
    vars.extend(mixer_all_vars(&mixer, &state_enc));

    let mut hs: Vec<Var> =
        (0..n).map(|_| tape.leaf(Array2::zeros((b, cfg.agent_embedding_dim)))).collect();
    let mut state_h = tape.leaf(Array2::zeros((b, cfg.state_embedding_dim)));
    let mut qtot_cols = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let mut chosen_cols = Vec::with_capacity(n);
        let mut role_vars = Vec::with_capacity(n);
        for (agent, h_slot) in hs.iter_mut().enumerate() {
            let x = tape.leaf(per_agent_input(agent, t));
            let h = enc.forward(&mut tape, x, *h_slot);
            *h_slot = h;
            let z_raw = role.forward(&mut tape, h);
            let z = if cfg.detach_role_for_q { tape.stop_grad(z_raw) } else { z_raw };
            role_vars.push(z);
            let avail = per_agent_avail(agent, t);
            let q = qh.forward(&mut tape, h, z, &avail);
            let sel = tape.leaf(per_agent_action_onehot(agent, t));
            let picked = tape.mul(q, sel);
            chosen_cols.push(tape.sum_cols(picked));
        }
        let q_chosen = tape.concat_cols(&chosen_cols);
        let state_raw = tape.leaf(state_matrix(t));
        state_h = state_enc.forward(&mut tape, state_raw, state_h);
        let out = mixer.forward(&mut tape, q_chosen, &role_vars, state_h, state_raw);
        qtot_cols.push(out.q_tot);
    }

    let qtot = tape.concat_cols(&qtot_cols); // B x T
    let y_leaf = tape.leaf(y.clone());
    let diff = tape.sub(y_leaf, qtot);
    let sq = tape.mul(diff, diff);
    let mask_leaf = tape.leaf(mask.clone());
    let masked = tape.mul(sq, mask_leaf);
    let total = tape.sum_all(masked);
    let mask_total: f64 = mask.sum();
    let loss = tape.scale(total, 1.0 / mask_total);

    let report = TdReport {
        loss: tape.scalar(loss),
        q_tot: tape.value(qtot) * &mask,
        targets: y * &mask,
        grad_norm: 0.0,
    };
    (tape, loss, vars, report)
}

fn mixer_all_vars(mixer: &crate::qmixer::MixerVars, state_enc: &crate::encoders::TrajectoryEncoderVars) -> Vec<Var> {
    // Keep the order aligned with Mixer::tensors(): state encoder first.
    let mut v = state_enc.var_list();
    v.extend(mixer.var_list());
    v
}

/// Collect one greedy (evaluation-mode) episode with frozen parameters.
pub fn greedy_episode(
    env: &TwinFires,
    encoder: &EncoderParams,
    q_head: &QHead,
    rng: &mut ChaCha20Rng,
) -> EpisodeRecord {
    let snap = PolicySnapshot { encoder: encoder.clone(), q_head: q_head.clone() };
    let mut steps = 0u64;
    Trainer::collect_episode(env, &snap, &RunConfig::default(), rng, &mut steps, u64::MAX, true)
        .expect("greedy episodes always terminate")
}

/// Run one full training configuration.
pub fn train_run(
    spec: EnvSpec,
    cfg: RunConfig,
    total_steps: u64,
    seed: u64,
    variant: Variant,
) -> Result<RunArtifacts> {
    train_run_with(spec, cfg, total_steps, seed, variant, |_, _, _, _| {})
}

/// `train_run` with an evaluation callback (used for checkpointing).
pub fn train_run_with(
    spec: EnvSpec,
    cfg: RunConfig,
    total_steps: u64,
    seed: u64,
    variant: Variant,
    on_eval: impl FnMut(&MetricsRow, &Nets, &TargetNets, &RunConfig),
) -> Result<RunArtifacts> {
    let mut trainer = Trainer::new(spec, cfg, seed, variant)?;
    let metrics = trainer.run(total_steps, on_eval);
    let final_success = metrics.last().map(|r| r.success_rate).unwrap_or(0.0);
    Ok(RunArtifacts { metrics, final_success, nets: trainer.nets, targets: trainer.targets })
}

/// Median of a sample (mean of the two central order statistics when even).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Per-variant outcome of an ablation sweep.
pub struct AblationReport {
    /// (variant, per-seed final success, median).
    pub results: Vec<(Variant, Vec<f64>, f64)>,
}

/// Train every variant on identical seeds and budgets.
pub fn run_ablation(
    spec: &EnvSpec,
    cfg: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    total_steps: u64,
) -> Result<AblationReport> {
    let mut results = Vec::new();
    for &variant in variants {
        let mut finals = Vec::new();
        for &seed in seeds {
            let run = train_run(spec.clone(), cfg.clone(), total_steps, seed, variant)?;
            finals.push(run.final_success);
        }
        let med = if finals.is_empty() { 0.0 } else { median(&finals) };
        results.push((variant, finals, med));
    }
    Ok(AblationReport { results })
}
