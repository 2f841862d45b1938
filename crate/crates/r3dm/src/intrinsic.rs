//! Intrinsic rewards linking roles to future behaviour.
//!
//! Two signals are combined: a policy term (how much an agent's
//! role-conditioned action distribution diverges from the average across all
//! agents' roles) and a dynamics term (how much better the role-conditioned
//! world model explains the next observation than the role-agnostic one).
//! Both are computed with frozen parameters at minibatch-sampling time.
//! An exact tabular decomposition oracle validates the underlying identity.

pub use crate::config::IntrinsicConfig;

use ndarray::Array2;

use crate::env::TabularMdp;
use crate::error::{R3dmError, Result};
use crate::qmixer::QHead;
use crate::worldmodel::{decode_loglik, dynamics_loglik, RolloutStep, Rssm};

/// Row-wise softmax over available actions; masked entries come out zero.
fn masked_softmax_rows(q: &Array2<f64>, masks: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(q.dim());
    for (r, (qrow, mrow)) in q.rows().into_iter().zip(masks.rows()).enumerate() {
        let max = qrow
            .iter()
            .zip(mrow.iter())
            .filter(|(_, &m)| m > 0.0)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (c, (&v, &m)) in qrow.iter().zip(mrow.iter()).enumerate() {
            if m > 0.0 {
                let e = (v - max).exp();
                out[(r, c)] = e;
                sum += e;
            }
        }
        for c in 0..q.ncols() {
            out[(r, c)] /= sum;
        }
    }
    out
}

/// Per-row policy KL at a single evaluation step.
///
/// Rows are (episode, agent) pairs in agent-major order within each episode:
/// row `ep * n_agents + i` belongs to agent i. For each row the KL is taken
/// between the agent's own role-conditioned action distribution and the mean
/// distribution over all agents' roles within the same episode.
pub fn policy_kl_rows(
    q_head: &QHead,
    embeddings: &Array2<f64>,
    roles: &Array2<f64>,
    n_agents: usize,
    masks: &Array2<f64>,
) -> Vec<f64> {
    let rows = embeddings.nrows();
    assert_eq!(rows % n_agents, 0, "rows must be a multiple of n_agents");
    assert_eq!(roles.nrows(), rows);
    if n_agents == 1 {
        return vec![0.0; rows];
    }
    let n_actions = q_head.n_actions();
    let mut mean = Array2::zeros((rows, n_actions));
    let mut own = Array2::zeros((rows, n_actions));
    for j in 0..n_agents {
        let mut zj = Array2::zeros((rows, roles.ncols()));
        for r in 0..rows {
            let ep = r / n_agents;
            zj.row_mut(r).assign(&roles.row(ep * n_agents + j));
        }
        let q = q_head.forward_frozen(embeddings, &zj, masks);
        let probs = masked_softmax_rows(&q, masks);
        mean += &probs;
        for r in 0..rows {
            if r % n_agents == j {
                own.row_mut(r).assign(&probs.row(r));
            }
        }
    }
    mean /= n_agents as f64;

    (0..rows)
        .map(|r| {
            let mut kl = 0.0;
            for c in 0..n_actions {
                let p = own[(r, c)];
                if p > 0.0 {
                    kl += p * (p / mean[(r, c)]).ln();
                }
            }
            // Rounding can push a true-zero KL a few ulps negative.
            kl.max(0.0)
        })
        .collect()
}

/// Policy intrinsic reward for every agent of one episode at base step `t`,
/// summed over the horizon. `embeddings[l]`/`masks[l]` hold the n-agent data
/// at step `t + l`; the list is already truncated at the episode end.
pub fn policy_intrinsic(
    q_head: &QHead,
    embeddings: &[Array2<f64>],
    roles_at_t: &Array2<f64>,
    masks: &[Array2<f64>],
) -> Vec<f64> {
    let n = roles_at_t.nrows();
    let mut total = vec![0.0; n];
    for (e, m) in embeddings.iter().zip(masks) {
        let kl = policy_kl_rows(q_head, e, roles_at_t, n, m);
        for (acc, v) in total.iter_mut().zip(kl) {
            *acc += v;
        }
    }
    total
}

/// Per-row value of the single-step dynamics bracket at one future index:
/// `beta1 (log q_dec + beta2 log q_dyn) - (log p_dec + beta2 log p_dyn)`,
/// with each model evaluated at its own hidden state and posterior sample.
pub fn dynamics_terms_rows(
    role_model: &Rssm,
    agnostic_model: &Rssm,
    role_state: &crate::worldmodel::RssmState,
    agnostic_state: &crate::worldmodel::RssmState,
    obs_next: &Array2<f64>,
    roles: &Array2<f64>,
    beta1: f64,
    beta2: f64,
) -> Vec<f64> {
    let rows = roles.nrows();
    let q_dec = decode_loglik(role_model, &role_state.h, &role_state.d_sample, Some(roles), obs_next);
    let p_dec = decode_loglik(agnostic_model, &agnostic_state.h, &agnostic_state.d_sample, None, obs_next);
    let mut role_term: Vec<f64> = q_dec.column(0).to_vec();
    let mut agn_term: Vec<f64> = p_dec.column(0).to_vec();
    if beta2 != 0.0 {
        let q_dyn = dynamics_loglik(role_model, &role_state.h, &role_state.d_sample, Some(roles));
        let p_dyn = dynamics_loglik(agnostic_model, &agnostic_state.h, &agnostic_state.d_sample, None);
        for i in 0..rows {
            role_term[i] += beta2 * q_dyn[(i, 0)];
            agn_term[i] += beta2 * p_dyn[(i, 0)];
        }
    }
    (0..rows).map(|i| beta1 * role_term[i] - agn_term[i]).collect()
}

/// Dynamics intrinsic reward for every agent of one episode at base step `t`.
///
/// `role_steps` / `agnostic_steps` are teacher-forced posteriors of the two
/// models over the episode (rows = agents); `obs[l]` is the real observation
/// at step l. Terms needing `obs[l + 1]` beyond the episode end are
/// truncated away.
#[allow(clippy::too_many_arguments)]
pub fn dynamics_intrinsic(
    role_model: &Rssm,
    agnostic_model: &Rssm,
    role_steps: &[RolloutStep],
    agnostic_steps: &[RolloutStep],
    obs: &[Array2<f64>],
    roles_at_t: &Array2<f64>,
    t: usize,
    cfg: &IntrinsicConfig,
) -> Vec<f64> {
    let horizon_end = (t + cfg.k).min(obs.len().saturating_sub(1));
    let n = roles_at_t.nrows();
    let mut total = vec![0.0; n];
    for l in t..horizon_end {
        let next = l + 1;
        let terms = dynamics_terms_rows(
            role_model,
            agnostic_model,
            &role_steps[next].state,
            &agnostic_steps[next].state,
            &obs[next],
            roles_at_t,
            cfg.beta1,
            cfg.beta2,
        );
        for (acc, v) in total.iter_mut().zip(terms) {
            *acc += v;
        }
    }
    total
}

/// Total intrinsic reward for one timestep: `sum_i beta3 * r_pol_i + r_dyn_i`,
/// optionally clipped symmetrically.
pub fn total_intrinsic(r_pol: &[f64], r_dyn: &[f64], beta3: f64, clip: Option<f64>) -> f64 {
    assert_eq!(r_pol.len(), r_dyn.len(), "per-agent reward lengths disagree");
    let total: f64 = r_pol.iter().zip(r_dyn).map(|(p, d)| beta3 * p + d).sum();
    match clip {
        Some(c) => total.clamp(-c, c),
        None => total,
    }
}

/// Both sides of the exact mutual-information decomposition on a tabular MDP.
///
/// The left side is `I(future trajectory; role)` computed from the joint
/// path distribution; the right side accumulates per-step log ratios of
/// role-conditioned versus posterior-marginal action and observation
/// probabilities. The two agree exactly for any valid MDP.
pub fn mi_decomposition_oracle(mdp: &TabularMdp, k: usize) -> Result<(f64, f64)> {
    mdp.validate()?;
    if k == 0 || k > 3 || mdp.n_states * mdp.n_actions > 200 {
        return Err(R3dmError::Contract(
            "mi_decomposition_oracle: instance too large to enumerate".into(),
        ));
    }
    let p_s0 = 1.0 / mdp.n_states as f64;
    let mut lhs = 0.0;
    let mut rhs = 0.0;

    // Depth-first enumeration of every (start state, role, path).
    struct Frame {
        state: usize,
        depth: usize,
        /// Path probability under the fixed role z.
        p_path_z: f64,
        /// prior(z') * p(path | s0, z') for every z'.
        joint: Vec<f64>,
        /// Accumulated per-step log-ratio terms along this path.
        terms: f64,
    }

    for s0 in 0..mdp.n_states {
        for z in 0..mdp.n_roles {
            let pz = mdp.role_prior[z];
            if pz == 0.0 {
                continue;
            }
            let mut stack = vec![Frame {
                state: s0,
                depth: 0,
                p_path_z: 1.0,
                joint: mdp.role_prior.clone(),
                terms: 0.0,
            }];
            while let Some(f) = stack.pop() {
                if f.depth == k {
                    let weight = p_s0 * pz * f.p_path_z;
                    if weight > 0.0 {
                        // joint sums to p(path | s0) = sum_z' prior(z') p(path|s0,z').
                        let marginal: f64 = f.joint.iter().sum();
                        lhs += weight * (f.p_path_z / marginal).ln();
                        rhs += weight * f.terms;
                    }
                    continue;
                }
                for a in 0..mdp.n_actions {
                    let pi_a = mdp.role_policy[z][f.state][a];
                    if pi_a == 0.0 {
                        continue;
                    }
                    // Marginal action probability under the running posterior.
                    let post_total: f64 = f.joint.iter().sum();
                    let marg_a: f64 = (0..mdp.n_roles)
                        .map(|z2| f.joint[z2] * mdp.role_policy[z2][f.state][a])
                        .sum::<f64>()
                        / post_total;
                    let action_term = (pi_a / marg_a).ln();
                    let joint_a: Vec<f64> = (0..mdp.n_roles)
                        .map(|z2| f.joint[z2] * mdp.role_policy[z2][f.state][a])
                        .collect();
                    for s_next in 0..mdp.n_states {
                        let trans = mdp.transition[f.state][a][s_next];
                        if trans == 0.0 {
                            continue;
                        }
                        // Dynamics are role-independent, so the observation
                        // ratio is P(s'|s,a) over the posterior-weighted
                        // marginal of the same kernel.
                        let joint_total: f64 = joint_a.iter().sum();
                        let marg_obs: f64 = joint_a.iter().map(|j| j * trans).sum::<f64>() / joint_total;
                        let obs_term = (trans / marg_obs).ln();
                        let joint_next: Vec<f64> = joint_a.iter().map(|j| j * trans).collect();
                        stack.push(Frame {
                            state: s_next,
                            depth: f.depth + 1,
                            p_path_z: f.p_path_z * pi_a * trans,
                            joint: joint_next,
                            terms: f.terms + action_term + obs_term,
                        });
                    }
                }
            }
        }
    }
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{enumerate_trajectory_mi, kl_oracle};
    use crate::worldmodel::{rollout_posteriors, RssmDims};
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn small_head(seed: u64, embed: usize, role: usize, actions: usize) -> QHead {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        QHead::new(&mut rng, embed, role, 8, actions)
    }

    #[test]
    fn identical_roles_give_zero_policy_reward() {
        let head = small_head(1, 4, 3, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.gen_range(2..5);
            let e = Array2::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0));
            let shared: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut roles = Array2::zeros((n, 3));
            for i in 0..n {
                for (j, &v) in shared.iter().enumerate() {
                    roles[(i, j)] = v;
                }
            }
            let masks = Array2::from_elem((n, 5), 1.0);
            let r = policy_intrinsic(&head, &[e], &roles, &[masks]);
            assert!(r.iter().all(|&v| v.abs() <= 1e-12), "{r:?}");
        }
    }

    #[test]
    fn single_agent_policy_reward_is_zero_by_construction() {
        let head = small_head(3, 4, 3, 5);
        let e = Array2::from_elem((1, 4), 0.5);
        let roles = Array2::from_elem((1, 3), 0.2);
        let masks = Array2::from_elem((1, 5), 1.0);
        let r = policy_intrinsic(&head, &[e], &roles, &[masks]);
        assert_eq!(r, vec![0.0]);
    }

    #[test]
    fn zero_temperature_limit_yields_log_two() {
        // Distribution-level arithmetic: point masses on different actions
        // average to (0.5, 0.5) and each KL against the mean is ln 2.
        let kl1 = kl_oracle(&[1.0, 0.0], &[0.5, 0.5]);
        let kl2 = kl_oracle(&[0.0, 1.0], &[0.5, 0.5]);
        assert!((kl1 - 2.0f64.ln()).abs() < 1e-12);
        assert!((kl2 - 2.0f64.ln()).abs() < 1e-12);

        // The implementation reaches the same value in the saturated-softmax
        // regime: hidden units relu(100 z) and relu(-100 z) feed q0 and q1,
        // so role +1 concentrates on action 0 and role -1 on action 1.
        let mut head = QHead::zeros(1, 1, 2, 2);
        head.l1.w[(1, 0)] = 100.0;
        head.l1.w[(1, 1)] = -100.0;
        head.l2.w[(0, 0)] = 1.0;
        head.l2.w[(1, 1)] = 1.0;
        let e = Array2::from_elem((2, 1), 0.0);
        let roles = arr2(&[[1.0], [-1.0]]);
        let masks = Array2::from_elem((2, 2), 1.0);
        let r = policy_intrinsic(&head, &[e], &roles, &[masks]);
        for v in r {
            assert!((v - 2.0f64.ln()).abs() <= 1e-9, "kl {v}");
        }
    }

    #[test]
    fn policy_reward_matches_independent_kl_summation() {
        let head = small_head(5, 4, 3, 6);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.gen_range(2..5);
            let e = Array2::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0));
            let roles = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
            let mut masks = Array2::from_elem((n, 6), 1.0);
            for i in 0..n {
                masks[(i, rng.gen_range(0..6))] = 0.0;
            }
            let got = policy_intrinsic(&head, &[e.clone()], &roles, &[masks.clone()]);

            // Independent recomputation through the KL oracle.
            let softmax = |q: &Array2<f64>, m: &Array2<f64>, row: usize| -> Vec<f64> {
                let avail: Vec<usize> = (0..6).filter(|&c| m[(row, c)] > 0.0).collect();
                let mx = avail.iter().map(|&c| q[(row, c)]).fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = avail.iter().map(|&c| (q[(row, c)] - mx).exp()).collect();
                let s: f64 = exps.iter().sum();
                let mut full = vec![0.0; 6];
                for (&c, &e) in avail.iter().zip(&exps) {
                    full[c] = e / s;
                }
                full
            };
            for i in 0..n {
                let mut dists = Vec::new();
                for j in 0..n {
                    let zj = crate::encoders::row_to_array(roles.row(j));
                    let mut ztiled = Array2::zeros((n, 3));
                    for r in 0..n {
                        ztiled.row_mut(r).assign(&zj.row(0));
                    }
                    let q = head.forward_frozen(&e, &ztiled, &masks);
                    dists.push(softmax(&q, &masks, i));
                }
                let own = &dists[i];
                let mut mean = vec![0.0; 6];
                for d in &dists {
                    for (m, v) in mean.iter_mut().zip(d) {
                        *m += v / n as f64;
                    }
                }
                let avail: Vec<usize> = (0..6).filter(|&c| masks[(i, c)] > 0.0).collect();
                let p: Vec<f64> = avail.iter().map(|&c| own[c]).collect();
                let q: Vec<f64> = avail.iter().map(|&c| mean[c]).collect();
                let want = kl_oracle(&p, &q);
                assert!((got[i] - want).abs() <= 1e-9, "agent {i}: {} vs {want}", got[i]);
            }
        }
    }

    fn tiny_wm_dims(role: Option<usize>) -> RssmDims {
        RssmDims {
            obs_dim: 3,
            n_actions: 2,
            hidden: 8,
            units: 8,
            latent_vars: 4,
            latent_classes: 4,
            unimix_ratio: 0.01,
            role_dim: role,
        }
    }

    /// A role-conditioned model that ignores its role inputs and otherwise
    /// equals the agnostic model.
    fn matched_models(seed: u64) -> (Rssm, Rssm) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let agnostic = Rssm::new(&mut rng, tiny_wm_dims(None));
        let mut role = Rssm::new(&mut ChaCha20Rng::seed_from_u64(seed), tiny_wm_dims(Some(3)));
        // Copy shared structure; zero the role columns.
        role.seq_proj = agnostic.seq_proj.clone();
        role.seq_gru = agnostic.seq_gru.clone();
        role.enc_l1 = agnostic.enc_l1.clone();
        role.enc_l2 = agnostic.enc_l2.clone();
        role.enc_out = agnostic.enc_out.clone();
        role.h0 = agnostic.h0.clone();
        // dyn: rows are inputs (hidden + role); first hidden rows copied.
        role.dyn_out.w.fill(0.0);
        for r in 0..8 {
            role.dyn_out.w.row_mut(r).assign(&agnostic.dyn_out.w.row(r));
        }
        role.dyn_out.b = agnostic.dyn_out.b.clone();
        // dec input: hidden + latent + role.
        role.dec_l1.w.fill(0.0);
        for r in 0..8 + 16 {
            role.dec_l1.w.row_mut(r).assign(&agnostic.dec_l1.w.row(r));
        }
        role.dec_l1.b = agnostic.dec_l1.b.clone();
        role.dec_l2 = agnostic.dec_l2.clone();
        role.dec_out = agnostic.dec_out.clone();
        (role, agnostic)
    }

    fn random_sequences(seed: u64, n: usize, steps: usize) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let obs = (0..steps)
            .map(|_| Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let actions = (0..steps)
            .map(|_| {
                let mut a = Array2::zeros((n, 2));
                for i in 0..n {
                    a[(i, rng.gen_range(0..2))] = 1.0;
                }
                a
            })
            .collect();
        (obs, actions)
    }

    #[test]
    fn matched_frozen_models_cancel_exactly() {
        let (role_model, agnostic) = matched_models(7);
        let (obs, actions) = random_sequences(8, 2, 5);
        let roles = Array2::from_shape_fn((2, 3), |_| 0.37);
        // Identically seeded samplers give identical posterior samples.
        let mut rng_a = ChaCha20Rng::seed_from_u64(99);
        let mut rng_b = ChaCha20Rng::seed_from_u64(99);
        let steps_role = rollout_posteriors(&role_model, &obs, &actions, &mut rng_a);
        let steps_agn = rollout_posteriors(&agnostic, &obs, &actions, &mut rng_b);
        let cfg = IntrinsicConfig { beta1: 1.0, beta2: 0.0, k: 1, ..IntrinsicConfig::default() };
        for t in 0..4 {
            let r = dynamics_intrinsic(
                &role_model,
                &agnostic,
                &steps_role,
                &steps_agn,
                &obs,
                &roles,
                t,
                &cfg,
            );
            assert!(r.iter().all(|&v| v == 0.0), "t={t}: {r:?}");
        }
    }

    #[test]
    fn beta_zero_reduces_to_pure_agnostic_surprise() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let role_model = Rssm::new(&mut rng, tiny_wm_dims(Some(3)));
        let agnostic = Rssm::new(&mut rng, tiny_wm_dims(None));
        let (obs, actions) = random_sequences(12, 2, 4);
        let roles = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let mut r1 = ChaCha20Rng::seed_from_u64(5);
        let mut r2 = ChaCha20Rng::seed_from_u64(6);
        let steps_role = rollout_posteriors(&role_model, &obs, &actions, &mut r1);
        let steps_agn = rollout_posteriors(&agnostic, &obs, &actions, &mut r2);
        let cfg = IntrinsicConfig { beta1: 0.0, beta2: 0.0, k: 2, ..IntrinsicConfig::default() };
        let t = 1;
        let got = dynamics_intrinsic(&role_model, &agnostic, &steps_role, &steps_agn, &obs, &roles, t, &cfg);
        for (i, &v) in got.iter().enumerate() {
            let mut want = 0.0;
            for l in t..(t + 2).min(obs.len() - 1) {
                let st = &steps_agn[l + 1].state;
                let ll = decode_loglik(&agnostic, &st.h, &st.d_sample, None, &obs[l + 1]);
                want -= ll[(i, 0)];
            }
            assert!((v - want).abs() <= 1e-12, "agent {i}: {v} vs {want}");
        }
    }

    #[test]
    fn horizon_truncates_at_episode_end() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let role_model = Rssm::new(&mut rng, tiny_wm_dims(Some(3)));
        let agnostic = Rssm::new(&mut rng, tiny_wm_dims(None));
        let (obs, actions) = random_sequences(14, 2, 3);
        let roles = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let mut r1 = ChaCha20Rng::seed_from_u64(1);
        let mut r2 = ChaCha20Rng::seed_from_u64(2);
        let steps_role = rollout_posteriors(&role_model, &obs, &actions, &mut r1);
        let steps_agn = rollout_posteriors(&agnostic, &obs, &actions, &mut r2);
        let cfg = IntrinsicConfig { k: 10, ..IntrinsicConfig::default() };
        // Base step at the final index: no future observation remains.
        let r = dynamics_intrinsic(
            &role_model,
            &agnostic,
            &steps_role,
            &steps_agn,
            &obs,
            &roles,
            2,
            &cfg,
        );
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn random_case_matches_standalone_formula() {
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let role_model = Rssm::new(&mut rng, tiny_wm_dims(Some(3)));
        let agnostic = Rssm::new(&mut rng, tiny_wm_dims(None));
        let (obs, actions) = random_sequences(16, 3, 5);
        let roles = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let mut r1 = ChaCha20Rng::seed_from_u64(3);
        let mut r2 = ChaCha20Rng::seed_from_u64(4);
        let steps_role = rollout_posteriors(&role_model, &obs, &actions, &mut r1);
        let steps_agn = rollout_posteriors(&agnostic, &obs, &actions, &mut r2);
        let cfg = IntrinsicConfig { beta1: 0.7, beta2: 0.3, k: 2, ..IntrinsicConfig::default() };
        let t = 1;
        let got = dynamics_intrinsic(&role_model, &agnostic, &steps_role, &steps_agn, &obs, &roles, t, &cfg);

        // Standalone reimplementation: raw MLP math on the stored tensors.
        let silu = |x: f64| x / (1.0 + (-x).exp());
        let dense = |w: &Array2<f64>, b: &Array2<f64>, x: &[f64]| -> Vec<f64> {
            (0..w.ncols())
                .map(|c| b[(0, c)] + x.iter().enumerate().map(|(r, v)| v * w[(r, c)]).sum::<f64>())
                .collect()
        };
        let dec_mean = |m: &Rssm, h: &[f64], d: &[f64], z: Option<&[f64]>| -> Vec<f64> {
            let mut x = h.to_vec();
            x.extend_from_slice(d);
            if let Some(z) = z {
                x.extend_from_slice(z);
            }
            let h1: Vec<f64> = dense(&m.dec_l1.w, &m.dec_l1.b, &x).into_iter().map(silu).collect();
            let h2: Vec<f64> = dense(&m.dec_l2.w, &m.dec_l2.b, &h1).into_iter().map(silu).collect();
            dense(&m.dec_out.w, &m.dec_out.b, &h2)
        };
        let gauss_ll = |o: &[f64], mean: &[f64]| -> f64 {
            let ssq: f64 = o.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
            -0.5 * ssq - 0.5 * o.len() as f64 * (2.0 * std::f64::consts::PI).ln()
        };
        let dyn_ll = |m: &Rssm, h: &[f64], d: &[f64], z: Option<&[f64]>| -> f64 {
            let mut x = h.to_vec();
            if let Some(z) = z {
                x.extend_from_slice(z);
            }
            let logits = dense(&m.dyn_out.w, &m.dyn_out.b, &x);
            let mut ll = 0.0;
            for g in 0..4 {
                let sl = &logits[g * 4..(g + 1) * 4];
                let mx = sl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = sl.iter().map(|v| (v - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for c in 0..4 {
                    if d[g * 4 + c] == 1.0 {
                        let p = 0.99 * exps[c] / sum + 0.01 / 4.0;
                        ll += p.ln();
                    }
                }
            }
            ll
        };

        for i in 0..3 {
            let mut want = 0.0;
            for l in t..(t + 2).min(obs.len() - 1) {
                let rs = &steps_role[l + 1].state;
                let ags = &steps_agn[l + 1].state;
                let h_r: Vec<f64> = rs.h.row(i).to_vec();
                let d_r: Vec<f64> = rs.d_sample.row(i).to_vec();
                let h_a: Vec<f64> = ags.h.row(i).to_vec();
                let d_a: Vec<f64> = ags.d_sample.row(i).to_vec();
                let z: Vec<f64> = roles.row(i).to_vec();
                let o: Vec<f64> = obs[l + 1].row(i).to_vec();
                let q_dec = gauss_ll(&o, &dec_mean(&role_model, &h_r, &d_r, Some(&z)));
                let p_dec = gauss_ll(&o, &dec_mean(&agnostic, &h_a, &d_a, None));
                let q_dyn = dyn_ll(&role_model, &h_r, &d_r, Some(&z));
                let p_dyn = dyn_ll(&agnostic, &h_a, &d_a, None);
                want += cfg.beta1 * (q_dec + cfg.beta2 * q_dyn) - (p_dec + cfg.beta2 * p_dyn);
            }
            assert!((got[i] - want).abs() <= 1e-9, "agent {i}: {} vs {want}", got[i]);
        }
    }

    #[test]
    fn total_intrinsic_is_the_weighted_sum() {
        let got = total_intrinsic(&[0.1, 0.2], &[-0.05, 0.05], 2.0, None);
        assert!((got - 0.6).abs() < 1e-12);
        assert_eq!(total_intrinsic(&[0.0, 0.0], &[0.0, 0.0], 3.0, None), 0.0);
        let r_dyn = [0.3, -0.1];
        let beta3_zero = total_intrinsic(&[9.0, 9.0], &r_dyn, 0.0, None);
        assert!((beta3_zero - 0.2).abs() < 1e-12);
        assert_eq!(total_intrinsic(&[100.0], &[0.0], 1.0, Some(10.0)), 10.0);
    }

    #[test]
    fn permuting_agents_permutes_rewards_and_preserves_the_total() {
        let head = small_head(17, 4, 3, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(18);
        let n = 3;
        let e = Array2::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0));
        let roles = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let masks = Array2::from_elem((n, 5), 1.0);
        let base = policy_intrinsic(&head, &[e.clone()], &roles, &[masks.clone()]);

        let perm = [2usize, 0, 1];
        let mut e_p = Array2::zeros((n, 4));
        let mut roles_p = Array2::zeros((n, 3));
        for (new, &old) in perm.iter().enumerate() {
            e_p.row_mut(new).assign(&e.row(old));
            roles_p.row_mut(new).assign(&roles.row(old));
        }
        let permuted = policy_intrinsic(&head, &[e_p], &roles_p, &[masks]);
        for (new, &old) in perm.iter().enumerate() {
            assert!((permuted[new] - base[old]).abs() < 1e-12);
        }
        let dyn_zero = vec![0.0; n];
        let t_base = total_intrinsic(&base, &dyn_zero, 1.5, None);
        let t_perm = total_intrinsic(&permuted, &dyn_zero, 1.5, None);
        assert!((t_base - t_perm).abs() < 1e-12);
    }

    #[test]
    fn role_independent_mdp_has_zero_mi_both_sides() {
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let mut mdp = TabularMdp::random(&mut rng, 4, 3, 3);
        // Make every role share one policy.
        let shared = mdp.role_policy[0].clone();
        for z in 1..3 {
            mdp.role_policy[z] = shared.clone();
        }
        let (lhs, rhs) = mi_decomposition_oracle(&mdp, 2).unwrap();
        assert!(lhs.abs() <= 1e-12, "lhs {lhs}");
        assert!(rhs.abs() <= 1e-12, "rhs {rhs}");
    }

    #[test]
    fn two_state_role_dependent_mdp_satisfies_the_identity() {
        let transition = vec![
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![vec![0.5, 0.5], vec![0.1, 0.9]],
        ];
        let role_policy = vec![
            vec![vec![0.95, 0.05], vec![0.7, 0.3]],
            vec![vec![0.1, 0.9], vec![0.4, 0.6]],
        ];
        let mdp = TabularMdp::new(transition, role_policy, vec![0.6, 0.4]).unwrap();
        for k in 1..=3 {
            let (lhs, rhs) = mi_decomposition_oracle(&mdp, k).unwrap();
            assert!((lhs - rhs).abs() <= 1e-9, "k={k}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn mi_is_nondecreasing_in_the_horizon() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..5 {
            let mdp = TabularMdp::random(&mut rng, 3, 2, 2);
            let (i1, _) = mi_decomposition_oracle(&mdp, 1).unwrap();
            let (i2, _) = mi_decomposition_oracle(&mdp, 2).unwrap();
            let (i3, _) = mi_decomposition_oracle(&mdp, 3).unwrap();
            assert!(i2 >= i1 - 1e-12);
            assert!(i3 >= i2 - 1e-12);
        }
    }

    #[test]
    fn oracle_agrees_with_the_independent_mi_enumeration() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        for _ in 0..10 {
            let mdp = TabularMdp::random(&mut rng, 4, 3, 3);
            let k = rng.gen_range(1..=3);
            let (lhs, rhs) = mi_decomposition_oracle(&mdp, k).unwrap();
            let independent = enumerate_trajectory_mi(&mdp, k);
            assert!((lhs - independent).abs() <= 1e-9);
            assert!((rhs - independent).abs() <= 1e-9);
        }
    }

    #[test]
    fn disjoint_deterministic_policies_saturate_at_prior_entropy() {
        // Two roles with disjoint deterministic action choices expose the
        // role after one step: MI = H(prior).
        let transition = vec![
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        ];
        let role_policy = vec![
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        ];
        let prior = vec![0.3, 0.7];
        let mdp = TabularMdp::new(transition, role_policy, prior.clone()).unwrap();
        let entropy: f64 = -prior.iter().map(|p| p * p.ln()).sum::<f64>();
        for k in 1..=2 {
            let (lhs, rhs) = mi_decomposition_oracle(&mdp, k).unwrap();
            assert!((lhs - entropy).abs() <= 1e-12, "k={k}: {lhs} vs {entropy}");
            assert!((rhs - entropy).abs() <= 1e-12);
        }
    }

    #[test]
    fn unnormalized_mdp_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let mut mdp = TabularMdp::random(&mut rng, 2, 2, 2);
        mdp.role_prior[0] += 0.25;
        assert!(mi_decomposition_oracle(&mdp, 1).is_err());
    }
}
