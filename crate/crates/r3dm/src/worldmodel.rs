//! Recurrent state-space world models over flat observations.
//!
//! Two structurally identical models are trained: a role-conditioned one
//! (its dynamics predictor and decoder see the agent's role embedding) and a
//! role-agnostic one. Each model has a sequence GRU, an observation encoder
//! producing discrete categorical latents (with unimix smoothing), a
//! single-layer dynamics predictor, and an observation decoder with a
//! diagonal unit-variance Gaussian likelihood.

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::config::WorldModelConfig;
use crate::nn::{
    categorical_kl_groups, clip_grads, collect_grads, gaussian_loglik_rows, unimix, Adam, Dense,
    DenseVars, GruCell, GruVars,
};
use crate::tape::{Tape, Var};

/// Static dimensions of one model.
#[derive(Debug, Clone, Copy)]
pub struct RssmDims {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub hidden: usize,
    pub units: usize,
    pub latent_vars: usize,
    pub latent_classes: usize,
    pub unimix_ratio: f64,
    /// `Some(dim)` for the role-conditioned model, `None` for the agnostic one.
    pub role_dim: Option<usize>,
}

impl RssmDims {
    pub fn latent_flat(&self) -> usize {
        self.latent_vars * self.latent_classes
    }

    pub fn from_config(cfg: &WorldModelConfig, obs_dim: usize, n_actions: usize, role_dim: Option<usize>) -> Self {
        RssmDims {
            obs_dim,
            n_actions,
            hidden: cfg.hidden_dim,
            units: cfg.hidden_dim,
            latent_vars: cfg.latent_vars,
            latent_classes: cfg.latent_classes,
            unimix_ratio: cfg.unimix_ratio,
            role_dim,
        }
    }
}

/// Deterministic hidden state plus discrete stochastic latent
/// (class probabilities and a straight-through sample).
#[derive(Debug, Clone)]
pub struct RssmState {
    /// B x hidden.
    pub h: Array2<f64>,
    /// B x (vars * classes) probabilities, each class row summing to 1.
    pub d_probs: Array2<f64>,
    /// B x (vars * classes) hard one-hot sample.
    pub d_sample: Array2<f64>,
}

/// One recurrent state-space model.
#[derive(Debug, Clone)]
pub struct Rssm {
    pub dims: RssmDims,
    pub seq_proj: Dense,
    pub seq_gru: GruCell,
    pub enc_l1: Dense,
    pub enc_l2: Dense,
    pub enc_out: Dense,
    pub dyn_out: Dense,
    pub dec_l1: Dense,
    pub dec_l2: Dense,
    pub dec_out: Dense,
    /// Learned initial hidden state (1 x hidden).
    pub h0: Array2<f64>,
}

impl Rssm {
    pub fn new<R: Rng>(rng: &mut R, dims: RssmDims) -> Self {
        let role = dims.role_dim.unwrap_or(0);
        let seq_in = dims.latent_flat() + dims.n_actions + dims.obs_dim;
        let dec_in = dims.hidden + dims.latent_flat() + role;
        Rssm {
            dims,
            seq_proj: Dense::new(rng, seq_in, dims.hidden),
            seq_gru: GruCell::new(rng, dims.hidden, dims.hidden),
            enc_l1: Dense::new(rng, dims.hidden + dims.obs_dim, dims.units),
            enc_l2: Dense::new(rng, dims.units, dims.units),
            enc_out: Dense::new(rng, dims.units, dims.latent_flat()),
            dyn_out: Dense::new(rng, dims.hidden + role, dims.latent_flat()),
            dec_l1: Dense::new(rng, dec_in, dims.units),
            dec_l2: Dense::new(rng, dims.units, dims.units),
            dec_out: Dense::new(rng, dims.units, dims.obs_dim),
            h0: Array2::zeros((1, dims.hidden)),
        }
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = Vec::new();
        v.extend(self.seq_proj.tensors());
        v.extend(self.seq_gru.tensors());
        for d in [&self.enc_l1, &self.enc_l2, &self.enc_out, &self.dyn_out, &self.dec_l1, &self.dec_l2, &self.dec_out] {
            v.extend(d.tensors());
        }
        v.push(&self.h0);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = Vec::new();
        v.extend(self.seq_proj.tensors_mut());
        v.extend(self.seq_gru.tensors_mut());
        for d in [
            &mut self.enc_l1,
            &mut self.enc_l2,
            &mut self.enc_out,
            &mut self.dyn_out,
            &mut self.dec_l1,
            &mut self.dec_l2,
            &mut self.dec_out,
        ] {
            v.extend(d.tensors_mut());
        }
        v.push(&mut self.h0);
        v
    }

    pub fn tensor_names() -> Vec<String> {
        let mut names = vec!["seq_proj.w".into(), "seq_proj.b".into()];
        for n in ["gru.w_ih", "gru.w_hh", "gru.b_ih", "gru.b_hh"] {
            names.push(format!("seq_{n}"));
        }
        for part in ["enc_l1", "enc_l2", "enc_out", "dyn_out", "dec_l1", "dec_l2", "dec_out"] {
            names.push(format!("{part}.w"));
            names.push(format!("{part}.b"));
        }
        names.push("h0".into());
        names
    }

    pub fn mount(&self, tape: &mut Tape) -> RssmVars {
        RssmVars {
            dims: self.dims,
            seq_proj: self.seq_proj.mount(tape),
            seq_gru: self.seq_gru.mount(tape),
            enc_l1: self.enc_l1.mount(tape),
            enc_l2: self.enc_l2.mount(tape),
            enc_out: self.enc_out.mount(tape),
            dyn_out: self.dyn_out.mount(tape),
            dec_l1: self.dec_l1.mount(tape),
            dec_l2: self.dec_l2.mount(tape),
            dec_out: self.dec_out.mount(tape),
            h0: tape.leaf(self.h0.clone()),
        }
    }
}

/// Mounted model.
#[derive(Debug, Clone, Copy)]
pub struct RssmVars {
    pub dims: RssmDims,
    seq_proj: DenseVars,
    seq_gru: GruVars,
    enc_l1: DenseVars,
    enc_l2: DenseVars,
    enc_out: DenseVars,
    dyn_out: DenseVars,
    dec_l1: DenseVars,
    dec_l2: DenseVars,
    dec_out: DenseVars,
    pub h0: Var,
}

impl RssmVars {
    pub fn var_list(&self) -> Vec<Var> {
        let mut v = Vec::new();
        v.extend(self.seq_proj.var_list());
        v.extend(self.seq_gru.var_list());
        for d in [&self.enc_l1, &self.enc_l2, &self.enc_out, &self.dyn_out, &self.dec_l1, &self.dec_l2, &self.dec_out] {
            v.extend(d.var_list());
        }
        v.push(self.h0);
        v
    }

    /// Broadcast the learned initial hidden state to a batch of B rows.
    pub fn initial_h(&self, tape: &mut Tape, rows: usize) -> Var {
        let ones = tape.leaf(Array2::from_elem((rows, 1), 1.0));
        tape.matmul(ones, self.h0)
    }

    /// `h_next = GRU(h, silu(proj([d_prev, a_prev, o_prev])))`.
    pub fn sequence_step(&self, tape: &mut Tape, h: Var, d_prev: Var, a_prev: Var, o_prev: Var) -> Var {
        let x = tape.concat_cols(&[d_prev, a_prev, o_prev]);
        let p = self.seq_proj.forward(tape, x);
        let a = tape.silu(p);
        self.seq_gru.forward(tape, a, h)
    }

    /// Posterior class probabilities from the hidden state and observation.
    pub fn encode_obs(&self, tape: &mut Tape, h: Var, obs: Var) -> Var {
        let x = tape.concat_cols(&[h, obs]);
        let a1 = self.enc_l1.forward(tape, x);
        let s1 = tape.silu(a1);
        let a2 = self.enc_l2.forward(tape, s1);
        let s2 = tape.silu(a2);
        let logits = self.enc_out.forward(tape, s2);
        let probs = tape.softmax_groups(logits, self.dims.latent_classes);
        unimix(tape, probs, self.dims.unimix_ratio, self.dims.latent_classes)
    }

    /// Prior class probabilities from the hidden state (and role, when the
    /// model is role-conditioned). Passing a role to a role-agnostic model
    /// (or omitting it on a conditioned one) is a contract violation.
    pub fn predict_dynamics(&self, tape: &mut Tape, h: Var, role: Option<Var>) -> Var {
        assert_eq!(
            role.is_some(),
            self.dims.role_dim.is_some(),
            "role argument must match the model's conditioning"
        );
        let x = match role {
            Some(z) => tape.concat_cols(&[h, z]),
            None => h,
        };
        let logits = self.dyn_out.forward(tape, x);
        let probs = tape.softmax_groups(logits, self.dims.latent_classes);
        unimix(tape, probs, self.dims.unimix_ratio, self.dims.latent_classes)
    }

    /// Reconstructed observation mean.
    pub fn decode_obs(&self, tape: &mut Tape, h: Var, d_sample: Var, role: Option<Var>) -> Var {
        assert_eq!(
            role.is_some(),
            self.dims.role_dim.is_some(),
            "role argument must match the model's conditioning"
        );
        let x = match role {
            Some(z) => tape.concat_cols(&[h, d_sample, z]),
            None => tape.concat_cols(&[h, d_sample]),
        };
        let a1 = self.dec_l1.forward(tape, x);
        let s1 = tape.silu(a1);
        let a2 = self.dec_l2.forward(tape, s1);
        let s2 = tape.silu(a2);
        self.dec_out.forward(tape, s2)
    }
}

/// A batch of equal-length (padded) sequences for world-model training.
/// Rows are sequences (episode x agent); `mask[(row, t)]` is 1 for real steps.
#[derive(Debug, Clone)]
pub struct WmBatch {
    /// Per timestep: rows x obs_dim.
    pub obs: Vec<Array2<f64>>,
    /// Per timestep: rows x n_actions one-hot of the action taken at t.
    pub actions: Vec<Array2<f64>>,
    /// Per timestep: rows x role_dim (required iff the model is conditioned).
    pub roles: Option<Vec<Array2<f64>>>,
    pub mask: Array2<f64>,
}

impl WmBatch {
    pub fn steps(&self) -> usize {
        self.obs.len()
    }

    pub fn rows(&self) -> usize {
        self.mask.nrows()
    }
}

/// Per-term means of one training step.
#[derive(Debug, Clone, Copy, Default)]
pub struct WmLossReport {
    pub total: f64,
    pub recon_nll: f64,
    pub kl_dyn: f64,
    pub kl_rep: f64,
    pub grad_norm: f64,
}

/// One optimizer step on the batch. Returns `None` for an empty batch.
///
/// Loss per real step: `recon_scale * nll + dyn_scale * relu(KL(sg(post)||prior) - free_nats)
/// + rep_scale * relu(KL(post||sg(prior)) - free_nats)`, averaged over real
/// steps, with a global gradient-norm clip before Adam.
pub fn train_world_model<R: Rng>(
    model: &mut Rssm,
    batch: &WmBatch,
    cfg: &WorldModelConfig,
    opt: &mut Adam,
    rng: &mut R,
) -> Option<WmLossReport> {
    if batch.rows() == 0 || batch.steps() == 0 {
        return None;
    }
    let (loss_var, report, tape, vars) = world_model_loss(model, batch, cfg, rng)?;
    let grads = tape.backward(loss_var);
    let mut grad_list = collect_grads(&grads, &vars.var_list());
    clip_grads(&mut grad_list, cfg.grad_clip);
    let grad_norm = crate::nn::global_grad_norm(&grad_list);
    let mut params = model.tensors_mut();
    opt.step(&mut params, &grad_list, cfg.learning_rate);
    Some(WmLossReport { grad_norm, ..report })
}

/// Build the training graph; exposed separately so tests can inspect
/// gradients without stepping the optimizer.
pub fn world_model_loss<R: Rng>(
    model: &Rssm,
    batch: &WmBatch,
    cfg: &WorldModelConfig,
    rng: &mut R,
) -> Option<(Var, WmLossReport, Tape, RssmVars)> {
    if batch.rows() == 0 || batch.steps() == 0 {
        return None;
    }
    assert_eq!(
        batch.roles.is_some(),
        model.dims.role_dim.is_some(),
        "batch role data must match the model's conditioning"
    );
    let rows = batch.rows();
    let steps = batch.steps();
    let classes = model.dims.latent_classes;

    let mut tape = Tape::new();
    let vars = model.mount(&mut tape);

    let mut h = vars.initial_h(&mut tape, rows);
    let mut prev_sample: Option<Var> = None;
    let mut nll_cols = Vec::with_capacity(steps);
    let mut kld_cols = Vec::with_capacity(steps);
    let mut klr_cols = Vec::with_capacity(steps);
    let mut raw_kl_sum = (0.0, 0.0);

    for t in 0..steps {
        if t > 0 {
            let a_prev = tape.leaf(batch.actions[t - 1].clone());
            let o_prev = tape.leaf(batch.obs[t - 1].clone());
            h = vars.sequence_step(&mut tape, h, prev_sample.unwrap(), a_prev, o_prev);
        }
        let obs = tape.leaf(batch.obs[t].clone());
        let post = vars.encode_obs(&mut tape, h, obs);
        let role = batch.roles.as_ref().map(|r| tape.leaf(r[t].clone()));
        let prior = vars.predict_dynamics(&mut tape, h, role);
        let sample = tape.st_sample(post, classes, rng);
        let recon = vars.decode_obs(&mut tape, h, sample, role);

        let ll = gaussian_loglik_rows(&mut tape, obs, recon);
        let nll = tape.scale(ll, -1.0);
        nll_cols.push(nll);

        let post_sg = tape.stop_grad(post);
        let prior_sg = tape.stop_grad(prior);
        let kl_dyn_vars = categorical_kl_groups(&mut tape, post_sg, prior, classes);
        let kl_dyn = tape.sum_cols(kl_dyn_vars);
        let kl_rep_vars = categorical_kl_groups(&mut tape, post, prior_sg, classes);
        let kl_rep = tape.sum_cols(kl_rep_vars);
        raw_kl_sum.0 += masked_mean(tape.value(kl_dyn), &batch.mask, t);
        raw_kl_sum.1 += masked_mean(tape.value(kl_rep), &batch.mask, t);

        let dyn_over = tape.add_scalar(kl_dyn, -cfg.free_nats);
        kld_cols.push(tape.relu(dyn_over));
        let rep_over = tape.add_scalar(kl_rep, -cfg.free_nats);
        klr_cols.push(tape.relu(rep_over));

        prev_sample = Some(sample);
    }

    let mask_total: f64 = batch.mask.sum();
    if mask_total == 0.0 {
        return None;
    }
    let mask = tape.leaf(batch.mask.clone());
    let masked_term = |tape: &mut Tape, cols: &[Var], scale: f64| -> (Var, f64) {
        let stacked = tape.concat_cols(cols); // rows x steps
        let masked = tape.mul(stacked, mask);
        let sum = tape.sum_all(masked);
        let mean = tape.scale(sum, scale / mask_total);
        let value = tape.scalar(sum) / mask_total;
        (mean, value)
    };
    let (nll_term, nll_mean) = masked_term(&mut tape, &nll_cols, cfg.recon_scale);
    let (kld_term, _) = masked_term(&mut tape, &kld_cols, cfg.dyn_scale);
    let (klr_term, _) = masked_term(&mut tape, &klr_cols, cfg.rep_scale);
    let partial = tape.add(nll_term, kld_term);
    let loss = tape.add(partial, klr_term);

    let report = WmLossReport {
        total: tape.scalar(loss),
        recon_nll: nll_mean,
        kl_dyn: raw_kl_sum.0 / steps as f64,
        kl_rep: raw_kl_sum.1 / steps as f64,
        grad_norm: 0.0,
    };
    Some((loss, report, tape, vars))
}

fn masked_mean(col: &Array2<f64>, mask: &Array2<f64>, t: usize) -> f64 {
    let m = mask.index_axis(Axis(1), t);
    let total: f64 = m.sum();
    if total == 0.0 {
        return 0.0;
    }
    col.column(0).iter().zip(m.iter()).map(|(v, w)| v * w).sum::<f64>() / total
}

/// Hidden states, posteriors and samples from teacher-forced inference over
/// one batch of sequences. Everything is detached.
#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub state: RssmState,
}

/// Run the model over observed sequences without gradients, sampling the
/// posterior at each step.
pub fn rollout_posteriors<R: Rng>(
    model: &Rssm,
    obs: &[Array2<f64>],
    actions: &[Array2<f64>],
    rng: &mut R,
) -> Vec<RolloutStep> {
    let steps = obs.len();
    assert_eq!(actions.len(), steps);
    let mut out = Vec::with_capacity(steps);
    if steps == 0 {
        return out;
    }
    let rows = obs[0].nrows();
    let mut tape = Tape::new();
    let vars = model.mount(&mut tape);
    let mut h = vars.initial_h(&mut tape, rows);
    let mut prev_sample: Option<Var> = None;
    for t in 0..steps {
        if t > 0 {
            let a_prev = tape.leaf(actions[t - 1].clone());
            let o_prev = tape.leaf(obs[t - 1].clone());
            h = vars.sequence_step(&mut tape, h, prev_sample.unwrap(), a_prev, o_prev);
        }
        let o = tape.leaf(obs[t].clone());
        let post = vars.encode_obs(&mut tape, h, o);
        let sample = tape.st_sample(post, model.dims.latent_classes, rng);
        out.push(RolloutStep {
            state: RssmState {
                h: tape.value(h).clone(),
                d_probs: tape.value(post).clone(),
                d_sample: tape.value(sample).clone(),
            },
        });
        prev_sample = Some(sample);
    }
    out
}

/// Frozen decoder log-likelihood `log p(obs | h, d, z)` per row.
pub fn decode_loglik(
    model: &Rssm,
    h: &Array2<f64>,
    d_sample: &Array2<f64>,
    role: Option<&Array2<f64>>,
    obs: &Array2<f64>,
) -> Array2<f64> {
    let mut tape = Tape::new();
    let vars = model.mount(&mut tape);
    let hv = tape.leaf(h.clone());
    let dv = tape.leaf(d_sample.clone());
    let rv = role.map(|r| tape.leaf(r.clone()));
    let mean = vars.decode_obs(&mut tape, hv, dv, rv);
    let ov = tape.leaf(obs.clone());
    let ll = gaussian_loglik_rows(&mut tape, ov, mean);
    tape.value(ll).clone()
}

/// Frozen dynamics log-likelihood `log p(d_sample | h, z)` per row.
pub fn dynamics_loglik(
    model: &Rssm,
    h: &Array2<f64>,
    d_sample: &Array2<f64>,
    role: Option<&Array2<f64>>,
) -> Array2<f64> {
    let mut tape = Tape::new();
    let vars = model.mount(&mut tape);
    let hv = tape.leaf(h.clone());
    let rv = role.map(|r| tape.leaf(r.clone()));
    let prior = vars.predict_dynamics(&mut tape, hv, rv);
    let lp = tape.log(prior);
    let onehot = tape.leaf(d_sample.clone());
    let picked = tape.mul(onehot, lp);
    let ll = tape.sum_cols(picked);
    tape.value(ll).clone()
}

/// Frozen posterior probabilities for one step.
pub fn posterior_probs(model: &Rssm, h: &Array2<f64>, obs: &Array2<f64>) -> Array2<f64> {
    let mut tape = Tape::new();
    let vars = model.mount(&mut tape);
    let hv = tape.leaf(h.clone());
    let ov = tape.leaf(obs.clone());
    let post = vars.encode_obs(&mut tape, hv, ov);
    tape.value(post).clone()
}

/// Deterministic 1-D drift fixture: `o_{t+1} = o_t + 0.1`, one action.
pub fn drift_batch(rows: usize, steps: usize, seed: u64) -> WmBatch {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut obs = vec![Array2::zeros((rows, 1)); steps];
    for r in 0..rows {
        let start: f64 = rng.gen_range(-1.0..1.0);
        for (t, o) in obs.iter_mut().enumerate() {
            o[(r, 0)] = start + 0.1 * t as f64;
        }
    }
    let actions = vec![Array2::from_elem((rows, 1), 1.0); steps];
    WmBatch { obs, actions, roles: None, mask: Array2::from_elem((rows, steps), 1.0) }
}

/// Train a small role-agnostic model on the drift fixture and report the
/// final one-step reconstruction MSE on a fresh batch.
pub struct DriftReport {
    pub losses: Vec<f64>,
    pub final_recon_mse: f64,
}

pub fn train_on_drift_fixture(updates: usize, seed: u64) -> DriftReport {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let dims = RssmDims {
        obs_dim: 1,
        n_actions: 1,
        hidden: 48,
        units: 48,
        latent_vars: 8,
        latent_classes: 8,
        unimix_ratio: 0.01,
        role_dim: None,
    };
    let cfg = WorldModelConfig {
        hidden_dim: 48,
        latent_vars: 8,
        latent_classes: 8,
        learning_rate: 2e-3,
        batch_size: 16,
        ..WorldModelConfig::default()
    };
    let mut model = Rssm::new(&mut rng, dims);
    let mut opt = Adam::new();
    let mut losses = Vec::with_capacity(updates);
    for i in 0..updates {
        let batch = drift_batch(cfg.batch_size, 8, seed ^ (i as u64 + 1));
        let report = train_world_model(&mut model, &batch, &cfg, &mut opt, &mut rng)
            .expect("non-empty batch");
        losses.push(report.total);
    }
    let eval = drift_batch(cfg.batch_size, 8, seed ^ 0xDEAD);
    let rollout = rollout_posteriors(&model, &eval.obs, &eval.actions, &mut rng);
    let mut se = 0.0;
    let mut count = 0.0;
    for (t, step) in rollout.iter().enumerate() {
        let mut tape = Tape::new();
        let vars = model.mount(&mut tape);
        let h = tape.leaf(step.state.h.clone());
        let d = tape.leaf(step.state.d_sample.clone());
        let mean = vars.decode_obs(&mut tape, h, d, None);
        let recon = tape.value(mean);
        for r in 0..eval.obs[t].nrows() {
            let diff = recon[(r, 0)] - eval.obs[t][(r, 0)];
            se += diff * diff;
            count += 1.0;
        }
    }
    DriftReport { losses, final_recon_mse: se / count }
}
