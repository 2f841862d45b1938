//! Layers, initializers and the optimizer used by every network in the crate.
//!
//! Layers own plain `Array2<f64>` tensors. To differentiate through a layer,
//! `mount` it on a [`Tape`] (which leafs its tensors) and run the returned
//! handle's `forward`. Tensor order in `tensors()`/`tensors_mut()`/`mount` is
//! identical everywhere, which is what ties parameters, gradients and
//! optimizer slots together.

use ndarray::Array2;
use rand::Rng;

use crate::tape::{Grads, Tape, Var};

/// Uniform fan-in initialization: entries in ±1/sqrt(fan_in).
pub fn uniform_fan_in<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Square orthogonal matrix via modified Gram-Schmidt on a Gaussian draw.
pub fn orthogonal<R: Rng>(rng: &mut R, n: usize) -> Array2<f64> {
    // Box-Muller keeps the dependency surface small.
    let mut gauss = || {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut m = Array2::from_shape_fn((n, n), |_| gauss());
    for j in 0..n {
        for k in 0..j {
            let prev = m.column(k).to_owned();
            let dot = m.column(j).dot(&prev);
            let mut col = m.column_mut(j);
            col.zip_mut_with(&prev, |c, &p| *c -= dot * p);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        assert!(norm > 1e-12, "degenerate draw during orthogonal init");
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    m
}

/// Fully connected layer `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Dense {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        Dense { w: uniform_fan_in(rng, in_dim, out_dim), b: Array2::zeros((1, out_dim)) }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense { w: Array2::zeros((in_dim, out_dim)), b: Array2::zeros((1, out_dim)) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        vec![&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn mount(&self, tape: &mut Tape) -> DenseVars {
        DenseVars { w: tape.leaf(self.w.clone()), b: tape.leaf(self.b.clone()) }
    }

    /// Forward pass without recording gradients for the layer itself.
    pub fn forward_frozen(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.leaf(self.w.clone());
        let b = tape.leaf(self.b.clone());
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

impl DenseVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let xw = tape.matmul(x, self.w);
        tape.add_row(xw, self.b)
    }

    pub fn var_list(&self) -> Vec<Var> {
        vec![self.w, self.b]
    }
}

/// Gated recurrent unit. Column blocks of the weight matrices are the
/// reset, update and candidate gates, in that order:
///
/// ```text
/// r = sigmoid(x Wi_r + bi_r + h Wh_r + bh_r)
/// z = sigmoid(x Wi_z + bi_z + h Wh_z + bh_z)
/// n = tanh(x Wi_n + bi_n + r * (h Wh_n + bh_n))
/// h' = n + z * (h - n)
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub b_ih: Array2<f64>,
    pub b_hh: Array2<f64>,
    pub hidden: usize,
}

impl GruCell {
    /// Input weights uniform fan-in, recurrent weights orthogonal per gate.
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, hidden: usize) -> Self {
        let w_ih = uniform_fan_in(rng, in_dim, 3 * hidden);
        let mut w_hh = Array2::zeros((hidden, 3 * hidden));
        for g in 0..3 {
            let q = orthogonal(rng, hidden);
            w_hh.slice_mut(ndarray::s![.., g * hidden..(g + 1) * hidden]).assign(&q);
        }
        GruCell {
            w_ih,
            w_hh,
            b_ih: Array2::zeros((1, 3 * hidden)),
            b_hh: Array2::zeros((1, 3 * hidden)),
            hidden,
        }
    }

    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        GruCell {
            w_ih: Array2::zeros((in_dim, 3 * hidden)),
            w_hh: Array2::zeros((hidden, 3 * hidden)),
            b_ih: Array2::zeros((1, 3 * hidden)),
            b_hh: Array2::zeros((1, 3 * hidden)),
            hidden,
        }
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        vec![&self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.b_ih, &mut self.b_hh]
    }

    pub fn mount(&self, tape: &mut Tape) -> GruVars {
        GruVars {
            w_ih: tape.leaf(self.w_ih.clone()),
            w_hh: tape.leaf(self.w_hh.clone()),
            b_ih: tape.leaf(self.b_ih.clone()),
            b_hh: tape.leaf(self.b_hh.clone()),
            hidden: self.hidden,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
    hidden: usize,
}

impl GruVars {
    pub fn forward(&self, tape: &mut Tape, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let xi = tape.matmul(x, self.w_ih);
        let gi = tape.add_row(xi, self.b_ih);
        let hh = tape.matmul(h, self.w_hh);
        let gh = tape.add_row(hh, self.b_hh);

        let gi_r = tape.slice_cols(gi, 0, hd);
        let gi_z = tape.slice_cols(gi, hd, 2 * hd);
        let gi_n = tape.slice_cols(gi, 2 * hd, 3 * hd);
        let gh_r = tape.slice_cols(gh, 0, hd);
        let gh_z = tape.slice_cols(gh, hd, 2 * hd);
        let gh_n = tape.slice_cols(gh, 2 * hd, 3 * hd);

        let r_pre = tape.add(gi_r, gh_r);
        let r = tape.sigmoid(r_pre);
        let z_pre = tape.add(gi_z, gh_z);
        let z = tape.sigmoid(z_pre);
        let gated = tape.mul(r, gh_n);
        let n_pre = tape.add(gi_n, gated);
        let n = tape.tanh(n_pre);

        let diff = tape.sub(h, n);
        let z_diff = tape.mul(z, diff);
        tape.add(n, z_diff)
    }

    pub fn var_list(&self) -> Vec<Var> {
        vec![self.w_ih, self.w_hh, self.b_ih, self.b_hh]
    }
}

/// Adam with bias correction. Slots are positional: callers must always pass
/// parameters in the same order.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "adam: param/grad count mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array2::zeros(p.dim())).collect();
            self.v = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            assert_eq!(p.dim(), g.dim(), "adam: tensor {i} shape mismatch");
            self.m[i].zip_mut_with(g, |m, &gv| *m = self.beta1 * *m + (1.0 - self.beta1) * gv);
            self.v[i].zip_mut_with(g, |v, &gv| *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv);
            ndarray::Zip::from(&mut **p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|pv, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *pv -= lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

/// Pull gradients for a mounted var list in tensor order.
pub fn collect_grads(grads: &Grads, vars: &[Var]) -> Vec<Array2<f64>> {
    vars.iter().map(|&v| grads.get(v).clone()).collect()
}

pub fn global_grad_norm(grads: &[Array2<f64>]) -> f64 {
    grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`.
pub fn clip_grads(grads: &mut [Array2<f64>], max_norm: f64) {
    let norm = global_grad_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
}

/// Overwrite unavailable actions with exactly -1e9.
pub const MASK_VALUE: f64 = -1e9;

/// `q * mask + (1 - mask) * MASK_VALUE`, with `mask` entries in {0,1}.
pub fn apply_action_mask(tape: &mut Tape, q: Var, mask: &Array2<f64>) -> Var {
    let m = tape.leaf(mask.clone());
    let fill = tape.leaf(mask.mapv(|v| (1.0 - v) * MASK_VALUE));
    let kept = tape.mul(q, m);
    tape.add(kept, fill)
}

/// Row-wise softmax over available actions only. Masked entries come out as
/// exactly zero probability.
pub fn masked_softmax(tape: &mut Tape, q: Var, mask: &Array2<f64>) -> Var {
    let masked = apply_action_mask(tape, q, mask);
    tape.softmax_groups(masked, mask.ncols())
}

/// Per-group KL(p || q) for positive probability tensors: (B, G*K) -> (B, K).
pub fn categorical_kl_groups(tape: &mut Tape, p: Var, q: Var, group: usize) -> Var {
    let lp = tape.log(p);
    let lq = tape.log(q);
    let diff = tape.sub(lp, lq);
    let elem = tape.mul(p, diff);
    tape.sum_col_groups(elem, group)
}

/// Diagonal unit-variance Gaussian log-likelihood per row:
/// `-0.5 * ||target - mean||^2 - (dim / 2) * ln(2 pi)`.
pub fn gaussian_loglik_rows(tape: &mut Tape, target: Var, mean: Var) -> Var {
    let dim = tape.value(mean).ncols() as f64;
    let diff = tape.sub(target, mean);
    let sq = tape.mul(diff, diff);
    let ssq = tape.sum_cols(sq);
    let half = tape.scale(ssq, -0.5);
    tape.add_scalar(half, -0.5 * dim * (2.0 * std::f64::consts::PI).ln())
}

/// Mix each class distribution with the uniform: `p <- (1-ratio) p + ratio/classes`.
pub fn unimix(tape: &mut Tape, probs: Var, ratio: f64, classes: usize) -> Var {
    let scaled = tape.scale(probs, 1.0 - ratio);
    tape.add_scalar(scaled, ratio / classes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gru_halves_the_hidden_state() {
        let cell = GruCell::zeros(3, 4);
        let mut tape = Tape::new();
        let vars = cell.mount(&mut tape);
        let x = tape.leaf(arr2(&[[1.0, -2.0, 0.5]]));
        let h = tape.leaf(arr2(&[[2.0, -4.0, 6.0, 0.0]]));
        let out = vars.forward(&mut tape, x, h);
        let got = tape.value(out);
        assert_eq!(got, &arr2(&[[1.0, -2.0, 3.0, 0.0]]));
    }

    #[test]
    fn zero_dense_outputs_bias() {
        let mut layer = Dense::zeros(3, 2);
        layer.b[(0, 1)] = 0.7;
        let mut tape = Tape::new();
        let vars = layer.mount(&mut tape);
        let x = tape.leaf(arr2(&[[1.0, 2.0, 3.0]]));
        let out = vars.forward(&mut tape, x);
        assert_eq!(tape.value(out), &arr2(&[[0.0, 0.7]]));
    }

    #[test]
    fn orthogonal_init_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = orthogonal(&mut rng, 16);
        let prod = q.t().dot(&q);
        for i in 0..16 {
            for j in 0..16 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gru_unroll_gradients_match_finite_differences() {
        use crate::oracles::finite_diff_check;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = GruCell::new(&mut rng, 2, 3);
        let xs = [
            arr2(&[[0.3, -0.5], [1.0, 0.2]]),
            arr2(&[[-0.1, 0.7], [0.4, -0.9]]),
            arr2(&[[0.6, 0.6], [-0.3, 0.1]]),
        ];
        let target = arr2(&[[0.2, -0.4, 0.5], [0.0, 0.3, -0.2]]);

        let run = |tensors: &[(String, Array2<f64>)]| -> f64 {
            let cell = GruCell {
                w_ih: tensors[0].1.clone(),
                w_hh: tensors[1].1.clone(),
                b_ih: tensors[2].1.clone(),
                b_hh: tensors[3].1.clone(),
                hidden: 3,
            };
            let mut tape = Tape::new();
            let vars = cell.mount(&mut tape);
            let mut h = tape.leaf(Array2::zeros((2, 3)));
            for x in &xs {
                let xi = tape.leaf(x.clone());
                h = vars.forward(&mut tape, xi, h);
            }
            let t = tape.leaf(target.clone());
            let d = tape.sub(h, t);
            let sq = tape.mul(d, d);
            let loss = tape.mean_all(sq);
            tape.scalar(loss)
        };

        let names = ["w_ih", "w_hh", "b_ih", "b_hh"];
        let params: Vec<(String, Array2<f64>)> = names
            .iter()
            .zip(cell.tensors())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();

        // Analytic gradients from the tape.
        let mut tape = Tape::new();
        let vars = cell.mount(&mut tape);
        let mut h = tape.leaf(Array2::zeros((2, 3)));
        for x in &xs {
            let xi = tape.leaf(x.clone());
            h = vars.forward(&mut tape, xi, h);
        }
        let t = tape.leaf(target.clone());
        let d = tape.sub(h, t);
        let sq = tape.mul(d, d);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        let analytic: Vec<(String, Array2<f64>)> = names
            .iter()
            .zip(vars.var_list())
            .map(|(n, v)| (n.to_string(), grads.get(v).clone()))
            .collect();

        let report = finite_diff_check(run, &params, &analytic, 60);
        assert!(report.max_relative_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = arr2(&[[5.0, -3.0]]);
        let mut opt = Adam::new();
        for _ in 0..2000 {
            let g = x.clone();
            opt.step(&mut [&mut x], &[g], 0.01);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn grad_clip_rescales_to_the_limit_exactly() {
        let mut grads = vec![Array2::from_elem((1, 1), 1200.0), Array2::from_elem((1, 1), 1600.0)];
        // norm = 2000
        clip_grads(&mut grads, 1000.0);
        assert!((global_grad_norm(&grads) - 1000.0).abs() < 1e-9);
        assert!((grads[0][(0, 0)] - 600.0).abs() < 1e-9);
        assert!((grads[1][(0, 0)] - 800.0).abs() < 1e-9);
    }

    #[test]
    fn masked_softmax_zeroes_unavailable_actions() {
        let mut tape = Tape::new();
        let q = tape.leaf(arr2(&[[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]]));
        let mask = arr2(&[[1.0, 0.0, 1.0], [1.0, 1.0, 1.0]]);
        let p = masked_softmax(&mut tape, q, &mask);
        let got = tape.value(p);
        assert_eq!(got[(0, 1)], 0.0);
        assert!((got.row(0).sum() - 1.0).abs() < 1e-12);
        assert!((got[(1, 0)] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_loglik_at_mean_matches_closed_form() {
        let mut tape = Tape::new();
        let o = tape.leaf(arr2(&[[0.1, 0.2, 0.3, 0.4]]));
        let ll = gaussian_loglik_rows(&mut tape, o, o);
        let want = -2.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((tape.value(ll)[(0, 0)] - want).abs() < 1e-12);
    }

    #[test]
    fn gaussian_loglik_is_translation_invariant() {
        let mut tape = Tape::new();
        let o = tape.leaf(arr2(&[[0.1, -0.2]]));
        let m = tape.leaf(arr2(&[[0.4, 0.3]]));
        let base = gaussian_loglik_rows(&mut tape, o, m);
        let o2 = tape.leaf(arr2(&[[0.1 + 7.5, -0.2 + 7.5]]));
        let m2 = tape.leaf(arr2(&[[0.4 + 7.5, 0.3 + 7.5]]));
        let shifted = gaussian_loglik_rows(&mut tape, o2, m2);
        assert!((tape.value(base)[(0, 0)] - tape.value(shifted)[(0, 0)]).abs() < 1e-12);
    }
}
