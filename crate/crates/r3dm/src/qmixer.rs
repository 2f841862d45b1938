//! Individual utility heads, attention-augmented monotonic mixing, and
//! epsilon-greedy action selection.
//!
//! The mixer follows the monotonic-factorization recipe: hypernetworks read
//! the global state (augmented with attention over the agents' role
//! embeddings, queried by a recurrent global-state embedding) and emit the
//! mixing weights. Weights pass through `|w| + 1e-6`, so the mixture is
//! strictly increasing in every individual utility and per-agent argmaxes
//! are exactly the joint argmax.

use ndarray::Array2;
use rand::Rng;

use crate::encoders::TrajectoryEncoder;
use crate::env::JointAction;
use crate::nn::{apply_action_mask, Dense, DenseVars};
use crate::tape::{Tape, Var};

/// Floor added to `|w|` so mixing weights are strictly positive.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// Per-agent action values, the mixed total, and the attention weights that
/// produced it.
#[derive(Debug, Clone)]
pub struct QBundle {
    /// n_agents x n_actions; masked actions carry exactly -1e9.
    pub per_agent_q: Array2<f64>,
    pub q_tot: f64,
    /// n_agents x heads.
    pub attention_weights: Array2<f64>,
}

/// Utility head: dense-ReLU-dense over the concatenated agent and role
/// embeddings.
#[derive(Debug, Clone)]
pub struct QHead {
    pub l1: Dense,
    pub l2: Dense,
}

impl QHead {
    pub fn new<R: Rng>(rng: &mut R, embed_dim: usize, role_dim: usize, hidden: usize, n_actions: usize) -> Self {
        QHead {
            l1: Dense::new(rng, embed_dim + role_dim, hidden),
            l2: Dense::new(rng, hidden, n_actions),
        }
    }

    pub fn zeros(embed_dim: usize, role_dim: usize, hidden: usize, n_actions: usize) -> Self {
        QHead { l1: Dense::zeros(embed_dim + role_dim, hidden), l2: Dense::zeros(hidden, n_actions) }
    }

    pub fn n_actions(&self) -> usize {
        self.l2.out_dim()
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

    pub fn mount(&self, tape: &mut Tape) -> QHeadVars {
        QHeadVars { l1: self.l1.mount(tape), l2: self.l2.mount(tape) }
    }

    /// Masked action values without parameter gradients. Rows are agents.
    pub fn forward_frozen(&self, e: &Array2<f64>, z: &Array2<f64>, masks: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let vars = self.mount(&mut tape);
        let ev = tape.leaf(e.clone());
        let zv = tape.leaf(z.clone());
        let q = vars.forward(&mut tape, ev, zv, masks);
        tape.value(q).clone()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QHeadVars {
    pub l1: DenseVars,
    pub l2: DenseVars,
}

impl QHeadVars {
    /// Action values with unavailable actions overwritten by -1e9.
    pub fn forward(&self, tape: &mut Tape, e: Var, z: Var, masks: &Array2<f64>) -> Var {
        assert!(
            masks.rows().into_iter().all(|r| r.iter().any(|&m| m > 0.0)),
            "individual_q: every agent needs at least one available action"
        );
        let x = tape.concat_cols(&[e, z]);
        let h = self.l1.forward(tape, x);
        let a = tape.relu(h);
        let q = self.l2.forward(tape, a);
        apply_action_mask(tape, q, masks)
    }

    pub fn var_list(&self) -> Vec<Var> {
        [self.l1.var_list(), self.l2.var_list()].concat()
    }
}

/// Two-layer hypernetwork head.
#[derive(Debug, Clone)]
pub struct HyperNet {
    pub l1: Dense,
    pub l2: Dense,
}

impl HyperNet {
    fn new<R: Rng>(rng: &mut R, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        HyperNet { l1: Dense::new(rng, in_dim, hidden), l2: Dense::new(rng, hidden, out_dim) }
    }

    fn tensors(&self) -> Vec<&Array2<f64>> {
        [self.l1.tensors(), self.l2.tensors()].concat()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = self.l1.tensors_mut();
        v.extend(self.l2.tensors_mut());
        v
    }

    fn mount(&self, tape: &mut Tape) -> HyperNetVars {
        HyperNetVars { l1: self.l1.mount(tape), l2: self.l2.mount(tape) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HyperNetVars {
    l1: DenseVars,
    l2: DenseVars,
}

impl HyperNetVars {
    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.l1.forward(tape, x);
        let a = tape.relu(h);
        self.l2.forward(tape, a)
    }

    fn var_list(&self) -> Vec<Var> {
        [self.l1.var_list(), self.l2.var_list()].concat()
    }
}

/// Mixing network parameters: recurrent global-state encoder, multi-head
/// attention over role embeddings, and the four hypernetwork heads.
#[derive(Debug, Clone)]
pub struct Mixer {
    pub state_encoder: TrajectoryEncoder,
    pub attn_query: Dense,
    pub attn_key: Dense,
    pub attn_value: Dense,
    pub attn_out: Dense,
    pub hyper_w1: HyperNet,
    pub hyper_b1: HyperNet,
    pub hyper_w2: HyperNet,
    pub hyper_b2: HyperNet,
    pub n_agents: usize,
    pub heads: usize,
    pub mix_dim: usize,
}

/// Static dimensions the mixer is built for.
#[derive(Debug, Clone, Copy)]
pub struct MixerDims {
    pub n_agents: usize,
    pub state_len: usize,
    pub role_dim: usize,
    pub state_embed_dim: usize,
    pub attn_embed_dim: usize,
    pub attn_out_dim: usize,
    pub heads: usize,
    pub hyper_hidden: usize,
    pub mix_dim: usize,
}

impl Mixer {
    pub fn new<R: Rng>(rng: &mut R, d: MixerDims) -> Self {
        assert_eq!(d.attn_embed_dim % d.heads, 0, "attention embed must divide into heads");
        let hyper_in = d.attn_out_dim + d.state_len;
        Mixer {
            state_encoder: TrajectoryEncoder::new(rng, d.state_len, d.state_embed_dim),
            attn_query: Dense::new(rng, d.state_embed_dim, d.attn_embed_dim),
            attn_key: Dense::new(rng, d.role_dim, d.attn_embed_dim),
            attn_value: Dense::new(rng, d.role_dim, d.attn_embed_dim),
            attn_out: Dense::new(rng, d.attn_embed_dim, d.attn_out_dim),
            hyper_w1: HyperNet::new(rng, hyper_in, d.hyper_hidden, d.mix_dim * d.n_agents),
            hyper_b1: HyperNet::new(rng, hyper_in, d.hyper_hidden, d.mix_dim),
            hyper_w2: HyperNet::new(rng, hyper_in, d.hyper_hidden, d.mix_dim),
            hyper_b2: HyperNet::new(rng, hyper_in, d.hyper_hidden, 1),
            n_agents: d.n_agents,
            heads: d.heads,
            mix_dim: d.mix_dim,
        }
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = self.state_encoder.tensors();
        for d in [&self.attn_query, &self.attn_key, &self.attn_value, &self.attn_out] {
            v.extend(d.tensors());
        }
        for h in [&self.hyper_w1, &self.hyper_b1, &self.hyper_w2, &self.hyper_b2] {
            v.extend(h.tensors());
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = self.state_encoder.tensors_mut();
        for d in [
            &mut self.attn_query,
            &mut self.attn_key,
            &mut self.attn_value,
            &mut self.attn_out,
        ] {
            v.extend(d.tensors_mut());
        }
        for h in [&mut self.hyper_w1, &mut self.hyper_b1, &mut self.hyper_w2, &mut self.hyper_b2] {
            v.extend(h.tensors_mut());
        }
        v
    }

    pub fn tensor_names() -> Vec<String> {
        let mut names: Vec<String> =
            TrajectoryEncoder::tensor_names().iter().map(|n| format!("state_enc.{n}")).collect();
        for part in ["attn_q", "attn_k", "attn_v", "attn_out"] {
            names.push(format!("{part}.w"));
            names.push(format!("{part}.b"));
        }
        for part in ["hyper_w1", "hyper_b1", "hyper_w2", "hyper_b2"] {
            for layer in ["l1", "l2"] {
                names.push(format!("{part}.{layer}.w"));
                names.push(format!("{part}.{layer}.b"));
            }
        }
        names
    }

    pub fn mount(&self, tape: &mut Tape) -> MixerVars {
        MixerVars {
            attn_query: self.attn_query.mount(tape),
            attn_key: self.attn_key.mount(tape),
            attn_value: self.attn_value.mount(tape),
            attn_out: self.attn_out.mount(tape),
            hyper_w1: self.hyper_w1.mount(tape),
            hyper_b1: self.hyper_b1.mount(tape),
            hyper_w2: self.hyper_w2.mount(tape),
            hyper_b2: self.hyper_b2.mount(tape),
            n_agents: self.n_agents,
            heads: self.heads,
            mix_dim: self.mix_dim,
        }
    }
}

/// Mounted mixer (the state encoder is mounted separately because it unrolls
/// over time before mixing happens).
#[derive(Debug, Clone)]
pub struct MixerVars {
    attn_query: DenseVars,
    attn_key: DenseVars,
    attn_value: DenseVars,
    attn_out: DenseVars,
    hyper_w1: HyperNetVars,
    hyper_b1: HyperNetVars,
    hyper_w2: HyperNetVars,
    hyper_b2: HyperNetVars,
    pub n_agents: usize,
    pub heads: usize,
    pub mix_dim: usize,
}

/// Result of a mixing pass.
pub struct MixOut {
    /// Bx1 mixed value.
    pub q_tot: Var,
    /// Per head, Bxn attention weights over agents.
    pub attention: Vec<Var>,
}

impl MixerVars {
    pub fn var_list(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for d in [&self.attn_query, &self.attn_key, &self.attn_value, &self.attn_out] {
            v.extend(d.var_list());
        }
        for h in [&self.hyper_w1, &self.hyper_b1, &self.hyper_w2, &self.hyper_b2] {
            v.extend(h.var_list());
        }
        v
    }

    /// Mix chosen per-agent utilities into q_tot.
    ///
    /// `q_chosen` is Bxn, `roles[i]` is agent i's Bxrole_dim embedding,
    /// `state_hist` is the Bxstate_embed recurrent global-state embedding and
    /// `state_raw` the Bxstate_len flat state.
    pub fn forward(
        &self,
        tape: &mut Tape,
        q_chosen: Var,
        roles: &[Var],
        state_hist: Var,
        state_raw: Var,
    ) -> MixOut {
        assert_eq!(roles.len(), self.n_agents, "mixer built for {} agents", self.n_agents);
        let head_dim = {
            let w = tape.value(self.attn_query.w).ncols();
            w / self.heads
        };
        let scale = 1.0 / (head_dim as f64).sqrt();

        let q_proj = self.attn_query.forward(tape, state_hist);
        let keys: Vec<Var> = roles.iter().map(|&z| self.attn_key.forward(tape, z)).collect();
        let values: Vec<Var> = roles.iter().map(|&z| self.attn_value.forward(tape, z)).collect();

        // Per-agent, per-head raw scores: q . k / sqrt(head_dim).
        let mut per_agent_scores = Vec::with_capacity(self.n_agents);
        for &k in &keys {
            let prod = tape.mul(q_proj, k);
            let sums = tape.sum_col_groups(prod, head_dim); // B x heads
            per_agent_scores.push(tape.scale(sums, scale));
        }

        let mut attention = Vec::with_capacity(self.heads);
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols: Vec<Var> = per_agent_scores
                .iter()
                .map(|&s| tape.slice_cols(s, h, h + 1))
                .collect();
            let scores = tape.concat_cols(&cols); // B x n
            let weights = tape.softmax_groups(scores, self.n_agents);
            attention.push(weights);
            let mut acc: Option<Var> = None;
            for (i, &v) in values.iter().enumerate() {
                let vh = tape.slice_cols(v, h * head_dim, (h + 1) * head_dim);
                let wi = tape.slice_cols(weights, i, i + 1);
                let contrib = tape.mul_col(vh, wi);
                acc = Some(match acc {
                    Some(a) => tape.add(a, contrib),
                    None => contrib,
                });
            }
            head_outputs.push(acc.expect("at least one agent"));
        }
        let attn_concat = tape.concat_cols(&head_outputs);
        let attn_feat = self.attn_out.forward(tape, attn_concat);

        let hyper_in = tape.concat_cols(&[attn_feat, state_raw]);

        let w1_raw = self.hyper_w1.forward(tape, hyper_in); // B x (mix*n), block j entry i
        let w1_abs = tape.abs(w1_raw);
        let w1 = tape.add_scalar(w1_abs, WEIGHT_FLOOR);
        let b1 = self.hyper_b1.forward(tape, hyper_in); // B x mix
        let q_tiled = tape.tile_cols(q_chosen, self.mix_dim); // B x (mix*n)
        let prods = tape.mul(q_tiled, w1);
        let w1q = tape.sum_col_groups(prods, self.n_agents); // B x mix
        let pre = tape.add(w1q, b1);
        let hidden = tape.elu(pre);

        let w2_raw = self.hyper_w2.forward(tape, hyper_in); // B x mix
        let w2_abs = tape.abs(w2_raw);
        let w2 = tape.add_scalar(w2_abs, WEIGHT_FLOOR);
        let b2 = self.hyper_b2.forward(tape, hyper_in); // B x 1
        let hv = tape.mul(hidden, w2);
        let total = tape.sum_cols(hv);
        let q_tot = tape.add(total, b2);

        MixOut { q_tot, attention }
    }
}

/// Forward-only single-sample mix; also returns the attention weights.
pub fn mix_single(
    mixer: &Mixer,
    q_chosen: &[f64],
    roles: &Array2<f64>,
    state_hist: &[f64],
    state_raw: &[f64],
) -> (f64, Array2<f64>) {
    let mut tape = Tape::new();
    let vars = mixer.mount(&mut tape);
    let q = tape.leaf(Array2::from_shape_vec((1, q_chosen.len()), q_chosen.to_vec()).unwrap());
    let role_vars: Vec<Var> = (0..mixer.n_agents)
        .map(|i| tape.leaf(crate::encoders::row_to_array(roles.row(i))))
        .collect();
    let sh = tape.leaf(Array2::from_shape_vec((1, state_hist.len()), state_hist.to_vec()).unwrap());
    let sr = tape.leaf(Array2::from_shape_vec((1, state_raw.len()), state_raw.to_vec()).unwrap());
    let out = vars.forward(&mut tape, q, &role_vars, sh, sr);
    let mut attn = Array2::zeros((mixer.n_agents, mixer.heads));
    for (h, w) in out.attention.iter().enumerate() {
        for i in 0..mixer.n_agents {
            attn[(i, h)] = tape.value(*w)[(0, i)];
        }
    }
    (tape.scalar(out.q_tot), attn)
}

/// Per-agent argmax over available actions, ties to the lowest index.
pub fn greedy_joint_action(per_agent_q: &Array2<f64>, masks: &Array2<f64>) -> JointAction {
    assert_eq!(per_agent_q.dim(), masks.dim());
    let mut actions = Vec::with_capacity(per_agent_q.nrows());
    for (qrow, mrow) in per_agent_q.rows().into_iter().zip(masks.rows()) {
        assert!(mrow.iter().any(|&m| m > 0.0), "agent has no available action");
        let mut best = usize::MAX;
        let mut best_v = f64::NEG_INFINITY;
        for (a, (&q, &m)) in qrow.iter().zip(mrow.iter()).enumerate() {
            if m > 0.0 && q > best_v {
                best_v = q;
                best = a;
            }
        }
        actions.push(best);
    }
    JointAction { actions }
}

/// Per-agent epsilon-greedy: with probability epsilon, uniform over the
/// agent's available actions; otherwise greedy.
pub fn epsilon_greedy<R: Rng>(
    per_agent_q: &Array2<f64>,
    masks: &Array2<f64>,
    epsilon: f64,
    rng: &mut R,
) -> JointAction {
    assert!((0.0..=1.0).contains(&epsilon), "epsilon must lie in [0, 1]");
    let greedy = greedy_joint_action(per_agent_q, masks);
    let mut actions = Vec::with_capacity(per_agent_q.nrows());
    for (i, mrow) in masks.rows().into_iter().enumerate() {
        if rng.gen::<f64>() < epsilon {
            let avail: Vec<usize> =
                mrow.iter().enumerate().filter(|(_, &m)| m > 0.0).map(|(a, _)| a).collect();
            actions.push(avail[rng.gen_range(0..avail.len())]);
        } else {
            actions.push(greedy.actions[i]);
        }
    }
    JointAction { actions }
}

/// Convenience: evaluate the whole bundle for one timestep.
pub fn evaluate_bundle(
    head: &QHead,
    mixer: &Mixer,
    e: &Array2<f64>,
    z: &Array2<f64>,
    masks: &Array2<f64>,
    state_hist: &[f64],
    state_raw: &[f64],
) -> QBundle {
    let per_agent_q = head.forward_frozen(e, z, masks);
    let greedy = greedy_joint_action(&per_agent_q, masks);
    let chosen: Vec<f64> =
        greedy.actions.iter().enumerate().map(|(i, &a)| per_agent_q[(i, a)]).collect();
    let (q_tot, attention_weights) = mix_single(mixer, &chosen, z, state_hist, state_raw);
    QBundle { per_agent_q, q_tot, attention_weights }
}
