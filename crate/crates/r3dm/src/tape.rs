//! Reverse-mode automatic differentiation over 2-D `f64` tensors.
//!
//! A [`Tape`] is an append-only arena of operations. Values are computed
//! eagerly when an op is recorded; [`Tape::backward`] walks the arena in
//! reverse and accumulates gradients for every node. Rows are the batch
//! dimension throughout. The engine is deliberately small: it supports
//! exactly the ops the networks in this crate need.

use ndarray::{s, Array2, Axis};
use rand::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// (B,D) + (1,D) row broadcast.
    AddRow(Var, Var),
    /// (B,D) * (B,1) column broadcast.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, #[allow(dead_code)] f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Elu(Var),
    Silu(Var),
    Abs(Var),
    Log(Var),
    Exp(Var),
    /// Row-wise softmax within consecutive column groups of the given width.
    SoftmaxGroups(Var, usize),
    /// (B, G*K) -> (B, K), summing each contiguous group of G columns.
    SumColGroups(Var, usize),
    /// (B, D) -> (B, D*r), repeating the columns r times.
    TileCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SumAll(Var),
    MeanAll(Var),
    StopGrad(#[allow(dead_code)] Var),
    /// Straight-through categorical sample per column group: forward is a
    /// hard one-hot draw, backward passes the gradient to the probabilities.
    StSample(Var),
}

/// Arena of recorded operations and their forward values.
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Array2<f64>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), vals: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.vals[v.0]
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.vals[v.0];
        assert_eq!(a.dim(), (1, 1), "scalar() on non-scalar node");
        a[(0, 0)]
    }

    fn push(&mut self, op: Op, val: Array2<f64>) -> Var {
        self.ops.push(op);
        self.vals.push(val);
        Var(self.ops.len() - 1)
    }

    pub fn leaf(&mut self, val: Array2<f64>) -> Var {
        self.push(Op::Leaf, val)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0].dot(&self.vals[b.0]);
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].dim(), self.vals[b.0].dim(), "add shape mismatch");
        let v = &self.vals[a.0] + &self.vals[b.0];
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].dim(), self.vals[b.0].dim(), "sub shape mismatch");
        let v = &self.vals[a.0] - &self.vals[b.0];
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].dim(), self.vals[b.0].dim(), "mul shape mismatch");
        let v = &self.vals[a.0] * &self.vals[b.0];
        self.push(Op::Mul(a, b), v)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.vals[row.0].nrows(), 1, "add_row expects a 1xD row");
        assert_eq!(self.vals[x.0].ncols(), self.vals[row.0].ncols(), "add_row width mismatch");
        let v = &self.vals[x.0] + &self.vals[row.0].row(0);
        self.push(Op::AddRow(x, row), v)
    }

    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        assert_eq!(self.vals[col.0].ncols(), 1, "mul_col expects a Bx1 column");
        assert_eq!(self.vals[x.0].nrows(), self.vals[col.0].nrows(), "mul_col height mismatch");
        let v = &self.vals[x.0] * &self.vals[col.0].column(0).insert_axis(Axis(1));
        self.push(Op::MulCol(x, col), v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = &self.vals[x.0] * c;
        self.push(Op::Scale(x, c), v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = &self.vals[x.0] + c;
        self.push(Op::AddScalar(x, c), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(|t| 1.0 / (1.0 + (-t).exp()));
        self.push(Op::Sigmoid(x), v)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(f64::tanh);
        self.push(Op::Tanh(x), v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(|t| t.max(0.0));
        self.push(Op::Relu(x), v)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(|t| if t > 0.0 { t } else { t.exp() - 1.0 });
        self.push(Op::Elu(x), v)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(|t| t / (1.0 + (-t).exp()));
        self.push(Op::Silu(x), v)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(f64::abs);
        self.push(Op::Abs(x), v)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(f64::ln);
        self.push(Op::Log(x), v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].mapv(f64::exp);
        self.push(Op::Exp(x), v)
    }

    pub fn softmax_groups(&mut self, x: Var, group: usize) -> Var {
        let src = &self.vals[x.0];
        assert!(group > 0 && src.ncols() % group == 0, "softmax group width must divide columns");
        let mut v = src.clone();
        for mut row in v.rows_mut() {
            for g in 0..row.len() / group {
                let sl = &mut row.as_slice_mut().unwrap()[g * group..(g + 1) * group];
                let m = sl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for t in sl.iter_mut() {
                    *t = (*t - m).exp();
                    sum += *t;
                }
                for t in sl.iter_mut() {
                    *t /= sum;
                }
            }
        }
        self.push(Op::SoftmaxGroups(x, group), v)
    }

    pub fn sum_col_groups(&mut self, x: Var, group: usize) -> Var {
        let src = &self.vals[x.0];
        assert!(group > 0 && src.ncols() % group == 0, "sum group width must divide columns");
        let k = src.ncols() / group;
        let mut v = Array2::zeros((src.nrows(), k));
        for (i, row) in src.rows().into_iter().enumerate() {
            for (j, &t) in row.iter().enumerate() {
                v[(i, j / group)] += t;
            }
        }
        self.push(Op::SumColGroups(x, group), v)
    }

    /// Sum over all columns, yielding a Bx1 column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let w = self.vals[x.0].ncols();
        self.sum_col_groups(x, w)
    }

    pub fn tile_cols(&mut self, x: Var, reps: usize) -> Var {
        let src = &self.vals[x.0];
        let d = src.ncols();
        let mut v = Array2::zeros((src.nrows(), d * reps));
        for r in 0..reps {
            v.slice_mut(s![.., r * d..(r + 1) * d]).assign(src);
        }
        self.push(Op::TileCols(x, reps), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.vals[parts[0].0].nrows();
        let total: usize = parts.iter().map(|p| self.vals[p.0].ncols()).sum();
        let mut v = Array2::zeros((rows, total));
        let mut at = 0;
        for p in parts {
            let src = &self.vals[p.0];
            assert_eq!(src.nrows(), rows, "concat_cols row mismatch");
            v.slice_mut(s![.., at..at + src.ncols()]).assign(src);
            at += src.ncols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let src = &self.vals[x.0];
        assert!(start < end && end <= src.ncols(), "slice_cols out of range");
        let v = src.slice(s![.., start..end]).to_owned();
        self.push(Op::SliceCols(x, start, end), v)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.vals[x.0].sum());
        self.push(Op::SumAll(x), v)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.vals[x.0].len() as f64;
        let v = Array2::from_elem((1, 1), self.vals[x.0].sum() / n);
        self.push(Op::MeanAll(x), v)
    }

    pub fn stop_grad(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].clone();
        self.push(Op::StopGrad(x), v)
    }

    /// Straight-through hard sample from per-group categorical probabilities.
    pub fn st_sample<R: Rng>(&mut self, probs: Var, group: usize, rng: &mut R) -> Var {
        let src = &self.vals[probs.0];
        assert!(group > 0 && src.ncols() % group == 0, "sample group width must divide columns");
        let mut v = Array2::zeros(src.dim());
        for (i, row) in src.rows().into_iter().enumerate() {
            for g in 0..row.len() / group {
                let sl = &row.as_slice().unwrap()[g * group..(g + 1) * group];
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = group - 1;
                for (c, &p) in sl.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = c;
                        break;
                    }
                }
                v[(i, g * group + pick)] = 1.0;
            }
        }
        self.push(Op::StSample(probs), v)
    }

    /// Reverse pass from a 1x1 root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.vals[root.0].dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.ops.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads {
            by_var: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.unwrap_or_else(|| Array2::zeros(self.vals[i].dim())))
                .collect(),
        }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        {
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.vals[b.0].t());
                    let db = self.vals[a.0].t().dot(g);
                    accum(grads, *a, da);
                    accum(grads, *b, db);
                }
                Op::Add(a, b) => {
                    accum(grads, *a, g.clone());
                    accum(grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accum(grads, *a, g.clone());
                    accum(grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    accum(grads, *a, g * &self.vals[b.0]);
                    accum(grads, *b, g * &self.vals[a.0]);
                }
                Op::AddRow(x, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accum(grads, *x, g.clone());
                    accum(grads, *row, dr);
                }
                Op::MulCol(x, col) => {
                    let c = self.vals[col.0].column(0).insert_axis(Axis(1));
                    accum(grads, *x, g * &c);
                    let dc = (g * &self.vals[x.0]).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accum(grads, *col, dc);
                }
                Op::Scale(x, c) => accum(grads, *x, g * *c),
                Op::AddScalar(x, _) => accum(grads, *x, g.clone()),
                Op::Sigmoid(x) => {
                    let y = &self.vals[idx];
                    accum(grads, *x, g * &(y * &(1.0 - y)));
                }
                Op::Tanh(x) => {
                    let y = &self.vals[idx];
                    accum(grads, *x, g * &(1.0 - y * y));
                }
                Op::Relu(x) => {
                    let m = self.vals[x.0].mapv(|t| if t > 0.0 { 1.0 } else { 0.0 });
                    accum(grads, *x, g * &m);
                }
                Op::Elu(x) => {
                    let y = &self.vals[idx];
                    let src = &self.vals[x.0];
                    let mut d = y + 1.0;
                    d.zip_mut_with(src, |di, &xi| {
                        if xi > 0.0 {
                            *di = 1.0;
                        }
                    });
                    accum(grads, *x, g * &d);
                }
                Op::Silu(x) => {
                    let d = self.vals[x.0].mapv(|t| {
                        let s = 1.0 / (1.0 + (-t).exp());
                        s * (1.0 + t * (1.0 - s))
                    });
                    accum(grads, *x, g * &d);
                }
                Op::Abs(x) => {
                    let sgn = self.vals[x.0].mapv(|t| {
                        if t > 0.0 {
                            1.0
                        } else if t < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accum(grads, *x, g * &sgn);
                }
                Op::Log(x) => accum(grads, *x, g / &self.vals[x.0]),
                Op::Exp(x) => accum(grads, *x, g * &self.vals[idx]),
                Op::SoftmaxGroups(x, group) => {
                    let y = &self.vals[idx];
                    let mut dx = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        for gi in 0..y.ncols() / group {
                            let r = gi * group..(gi + 1) * group;
                            let mut dot = 0.0;
                            for c in r.clone() {
                                dot += g[(i, c)] * y[(i, c)];
                            }
                            for c in r {
                                dx[(i, c)] = y[(i, c)] * (g[(i, c)] - dot);
                            }
                        }
                    }
                    accum(grads, *x, dx);
                }
                Op::SumColGroups(x, group) => {
                    let w = self.vals[x.0].ncols();
                    let mut dx = Array2::zeros((g.nrows(), w));
                    for i in 0..g.nrows() {
                        for c in 0..w {
                            dx[(i, c)] = g[(i, c / group)];
                        }
                    }
                    accum(grads, *x, dx);
                }
                Op::TileCols(x, reps) => {
                    let d = self.vals[x.0].ncols();
                    let mut dx = Array2::zeros((g.nrows(), d));
                    for r in 0..*reps {
                        dx += &g.slice(s![.., r * d..(r + 1) * d]);
                    }
                    accum(grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.vals[p.0].ncols();
                        let dp = g.slice(s![.., at..at + w]).to_owned();
                        accum(grads, *p, dp);
                        at += w;
                    }
                }
                Op::SliceCols(x, start, end) => {
                    let mut dx = Array2::zeros(self.vals[x.0].dim());
                    dx.slice_mut(s![.., *start..*end]).assign(g);
                    accum(grads, *x, dx);
                }
                Op::SumAll(x) => {
                    let dx = Array2::from_elem(self.vals[x.0].dim(), g[(0, 0)]);
                    accum(grads, *x, dx);
                }
                Op::MeanAll(x) => {
                    let n = self.vals[x.0].len() as f64;
                    let dx = Array2::from_elem(self.vals[x.0].dim(), g[(0, 0)] / n);
                    accum(grads, *x, dx);
                }
                Op::StopGrad(_) => {}
                Op::StSample(p) => accum(grads, *p, g.clone()),
            }
        }
    }
}

fn accum(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    by_var: Vec<Array2<f64>>,
}

impl Grads {
    /// Gradient of the root with respect to `v` (zeros if unreachable).
    pub fn get(&self, v: Var) -> &Array2<f64> {
        &self.by_var[v.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(leaf) for an arbitrary graph.
    fn check_grad<F>(build: F, leaf_val: &Array2<f64>, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let leaf = tape.leaf(leaf_val.clone());
        let root = build(&mut tape, leaf);
        let grads = tape.backward(root);
        let analytic = grads.get(leaf).clone();

        let h = 1e-6;
        for i in 0..leaf_val.nrows() {
            for j in 0..leaf_val.ncols() {
                let mut plus = leaf_val.clone();
                plus[(i, j)] += h;
                let mut minus = leaf_val.clone();
                minus[(i, j)] -= h;
                let eval = |arr: Array2<f64>| {
                    let mut t = Tape::new();
                    let l = t.leaf(arr);
                    let r = build(&mut t, l);
                    t.scalar(r)
                };
                let num = (eval(plus) - eval(minus)) / (2.0 * h);
                let a = analytic[(i, j)];
                let denom = a.abs().max(num.abs()).max(1e-8);
                assert!(
                    ((a - num) / denom).abs() < tol,
                    "grad mismatch at ({i},{j}): analytic={a}, numeric={num}"
                );
            }
        }
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let x = arr2(&[[0.3, -1.2, 0.5], [2.0, 0.1, -0.4]]);
        check_grad(
            |t, l| {
                let w = t.leaf(arr2(&[[0.2, -0.7], [1.1, 0.4], [-0.3, 0.9]]));
                let h = t.matmul(l, w);
                let a = t.tanh(h);
                t.mean_all(a)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn softmax_log_pipeline_matches_finite_differences() {
        let x = arr2(&[[0.5, -0.2, 1.3, 0.0], [2.0, 1.0, -1.0, 0.3]]);
        check_grad(
            |t, l| {
                let p = t.softmax_groups(l, 2);
                let lp = t.log(p);
                let q = t.mul(p, lp);
                t.sum_all(q)
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn broadcast_tile_slice_ops_match_finite_differences() {
        let x = arr2(&[[0.5, -0.2], [1.5, 0.7], [-0.9, 0.1]]);
        check_grad(
            |t, l| {
                let tiled = t.tile_cols(l, 3);
                let col = t.sum_cols(l);
                let scaled = t.mul_col(tiled, col);
                let part = t.slice_cols(scaled, 1, 5);
                let act = t.elu(part);
                let grouped = t.sum_col_groups(act, 2);
                let sq = t.mul(grouped, grouped);
                t.mean_all(sq)
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn activations_match_finite_differences() {
        let x = arr2(&[[0.5, -0.7, 0.01, -2.5, 1.7]]);
        for f in [Tape::sigmoid, Tape::tanh, Tape::silu, Tape::elu, Tape::exp]
            as [fn(&mut Tape, Var) -> Var; 5]
        {
            check_grad(
                move |t, l| {
                    let y = f(t, l);
                    t.sum_all(y)
                },
                &x,
                1e-5,
            );
        }
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut tape = Tape::new();
        let leaf = tape.leaf(arr2(&[[2.0]]));
        let frozen = tape.stop_grad(leaf);
        let prod = tape.mul(leaf, frozen);
        let root = tape.sum_all(prod);
        let grads = tape.backward(root);
        // d(x * sg(x))/dx = sg(x) = 2, not 2x = 4.
        assert_eq!(grads.get(leaf)[(0, 0)], 2.0);
    }

    #[test]
    fn straight_through_sample_is_hard_onehot_with_identity_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let probs = tape.leaf(arr2(&[[0.1, 0.2, 0.7, 0.25, 0.5, 0.25]]));
        let sample = tape.st_sample(probs, 3, &mut rng);
        let v = tape.value(sample).clone();
        for g in 0..2 {
            let group = v.slice(s![0, g * 3..(g + 1) * 3]);
            assert_eq!(group.sum(), 1.0);
            assert!(group.iter().all(|&t| t == 0.0 || t == 1.0));
        }
        let weights = tape.leaf(arr2(&[[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]));
        let prod = tape.mul(sample, weights);
        let root = tape.sum_all(prod);
        let grads = tape.backward(root);
        // Straight-through: gradient w.r.t. probs equals the downstream weights.
        assert_eq!(grads.get(probs), tape.value(weights));
    }

    #[test]
    fn repeated_input_accumulates_gradient() {
        let mut tape = Tape::new();
        let leaf = tape.leaf(arr2(&[[3.0]]));
        let cat = tape.concat_cols(&[leaf, leaf]);
        let root = tape.sum_all(cat);
        let grads = tape.backward(root);
        assert_eq!(grads.get(leaf)[(0, 0)], 2.0);
    }
}
