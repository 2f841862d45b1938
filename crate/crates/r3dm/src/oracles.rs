//! Independent brute-force reference implementations used by the test suite
//! and by `r3dm verify`.
//!
//! Everything in this module is deliberately written from first principles
//! and shares no code with the implementations it checks: plain loops over
//! slices, exhaustive enumeration, central finite differences. All oracles
//! run in 64-bit precision.

use ndarray::Array2;

use crate::env::TabularMdp;

/// KL divergence `sum p * ln(p/q)` with the `0 * ln 0 = 0` convention.
///
/// Panics if either vector is unnormalized beyond 1e-9 or if `q` has zero
/// mass where `p` does not.
pub fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "kl_oracle: length mismatch");
    assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9, "kl_oracle: p not normalized");
    assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-9, "kl_oracle: q not normalized");
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            assert!(qi > 0.0, "kl_oracle: support violation (p>0 where q=0)");
            kl += pi * (pi / qi).ln();
        }
    }
    kl
}

/// Exhaustive joint argmax of a mixed value function over a small joint
/// action space. Enumeration is lexicographic with agent 0 most significant,
/// and only strictly greater values replace the incumbent, so ties resolve
/// to the lexicographically smallest joint action.
pub fn brute_force_joint_argmax<F>(q_tot_fn: F, action_space_sizes: &[usize]) -> Vec<usize>
where
    F: Fn(&[usize]) -> f64,
{
    let total: usize = action_space_sizes.iter().product();
    assert!(total > 0 && total <= 10_000, "joint action space too large to enumerate");
    let n = action_space_sizes.len();
    let mut best = vec![0usize; n];
    let mut best_val = f64::NEG_INFINITY;
    let mut joint = vec![0usize; n];
    for flat in 0..total {
        let mut rem = flat;
        // Agent 0 most significant digit.
        for i in (0..n).rev() {
            joint[i] = rem % action_space_sizes[i];
            rem /= action_space_sizes[i];
        }
        let v = q_tot_fn(&joint);
        if v > best_val {
            best_val = v;
            best.copy_from_slice(&joint);
        }
    }
    best
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub step_size: f64,
    pub coords_checked: usize,
}

impl FiniteDiffReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `scalar_fn` evaluates the loss at the given parameter setting;
/// `params`/`analytic_grads` are parallel lists of named tensors. At most
/// `max_coords` coordinates per tensor are probed (deterministically
/// strided), with a central-difference step of 1e-5. Relative error is
/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn finite_diff_check<F>(
    mut scalar_fn: F,
    params: &[(String, Array2<f64>)],
    analytic_grads: &[(String, Array2<f64>)],
    max_coords: usize,
) -> FiniteDiffReport
where
    F: FnMut(&[(String, Array2<f64>)]) -> f64,
{
    assert_eq!(params.len(), analytic_grads.len());
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut checked = 0usize;

    for (pi, (name, tensor)) in params.iter().enumerate() {
        assert_eq!(name, &analytic_grads[pi].0, "parameter order mismatch");
        let count = tensor.len();
        let stride = (count / max_coords.max(1)).max(1);
        for flat in (0..count).step_by(stride) {
            let (rows, cols) = tensor.dim();
            let idx = (flat / cols % rows, flat % cols);
            let mut plus: Vec<(String, Array2<f64>)> = params.to_vec();
            plus[pi].1[idx] += h;
            let mut minus: Vec<(String, Array2<f64>)> = params.to_vec();
            minus[pi].1[idx] -= h;
            let numeric = (scalar_fn(&plus) - scalar_fn(&minus)) / (2.0 * h);
            let analytic = analytic_grads[pi].1[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            checked += 1;
            if rel > worst {
                worst = rel;
                worst_name = format!("{name}[{},{}]", idx.0, idx.1);
            }
        }
    }
    FiniteDiffReport {
        max_relative_error: worst,
        worst_parameter: worst_name,
        step_size: h,
        coords_checked: checked,
    }
}

/// Exact mutual information between a latent role and a length-`k` future
/// trajectory of a tabular MDP, by summing the full joint distribution.
///
/// The trajectory starts from a uniformly distributed start state; a role is
/// drawn from the role prior; each of the `k` steps draws an action from the
/// role's policy and a next state from the shared transition kernel. The MI
/// is computed directly from the joint table
/// `I = sum_{s0,z,tau} p(s0) p(z) p(tau|s0,z) ln(p(tau|s0,z) / p(tau|s0))`,
/// a different factorization from the per-step decomposition it is used to
/// check.
pub fn enumerate_trajectory_mi(mdp: &TabularMdp, k: usize) -> f64 {
    assert!(k >= 1, "horizon must be at least 1");
    assert!(
        mdp.n_states * mdp.n_actions <= 200 && k <= 3,
        "tabular MDP too large to enumerate"
    );
    let p_s0 = 1.0 / mdp.n_states as f64;
    let mut mi = 0.0;
    for s0 in 0..mdp.n_states {
        // All action/state paths of length k from s0, with per-role probabilities.
        let mut stack: Vec<(usize, usize, Vec<f64>)> = vec![(s0, 0, mdp.role_prior.clone())];
        // Depth-first over (current state, depth, per-role joint prob of path so far).
        while let Some((s, depth, probs)) = stack.pop() {
            if depth == k {
                let p_tau: f64 = probs.iter().sum();
                if p_tau > 0.0 {
                    for (z, &pz_tau) in probs.iter().enumerate() {
                        if pz_tau > 0.0 {
                            // probs[z] = prior(z) * p(tau | s0, z)
                            let p_tau_given_z = pz_tau / mdp.role_prior[z];
                            mi += p_s0 * pz_tau * (p_tau_given_z / p_tau).ln();
                        }
                    }
                }
                continue;
            }
            for a in 0..mdp.n_actions {
                for s_next in 0..mdp.n_states {
                    let trans = mdp.transition[s][a][s_next];
                    if trans == 0.0 {
                        continue;
                    }
                    let next: Vec<f64> = (0..mdp.n_roles)
                        .map(|z| probs[z] * mdp.role_policy[z][s][a] * trans)
                        .collect();
                    if next.iter().any(|&p| p > 0.0) {
                        stack.push((s_next, depth + 1, next));
                    }
                }
            }
        }
    }
    mi
}
