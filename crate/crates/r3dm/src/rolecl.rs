//! Role discovery: periodic K-means over agent embeddings and the
//! contrastive loss that shapes the role encoder.
//!
//! Agents sharing a cluster provide each other's positive keys; keys are
//! produced by the frozen momentum encoder, queries by the online role
//! encoder. Scores are bilinear: `g(z, k) = exp(z W k)`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::encoders::{RoleHead, RoleHeadVars};
use crate::nn::{uniform_fan_in, Adam};
use crate::tape::{Tape, Var};

/// Hard cluster assignment of `n` agents into `k` clusters.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    /// Cluster id per agent.
    pub labels: Vec<usize>,
    /// n x k one-hot matrix; each row sums to exactly 1.
    pub matrix: Array2<f64>,
    /// k x d centroids. Empty clusters keep their last centroid.
    pub centroids: Array2<f64>,
    /// Clusters that ended up without any member (only when k > n).
    pub empty_clusters: Vec<usize>,
}

/// Learnable bilinear score matrix.
#[derive(Debug, Clone)]
pub struct BilinearScore {
    pub w: Array2<f64>,
}

impl BilinearScore {
    pub fn new<R: Rng>(rng: &mut R, role_dim: usize) -> Self {
        BilinearScore { w: uniform_fan_in(rng, role_dim, role_dim) }
    }

    pub fn zeros(role_dim: usize) -> Self {
        BilinearScore { w: Array2::zeros((role_dim, role_dim)) }
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding, deterministic in
/// `(embeddings, k, seed)`.
///
/// Ties during assignment prefer the point's current cluster (then the
/// lowest cluster index), which keeps degenerate duplicate inputs stable.
/// Empty clusters are reseeded to the point farthest from its own centroid.
/// With `k > n` every point gets its own cluster and the surplus clusters
/// are flagged empty.
pub fn kmeans(embeddings: &Array2<f64>, k: usize, seed: u64) -> ClusterAssignment {
    let n = embeddings.nrows();
    let d = embeddings.ncols();
    assert!(n >= 1 && k >= 1, "kmeans needs at least one point and one cluster");

    if k >= n {
        let labels: Vec<usize> = (0..n).collect();
        let mut centroids = Array2::zeros((k, d));
        for i in 0..n {
            centroids.row_mut(i).assign(&embeddings.row(i));
        }
        return finish(labels, centroids, n, k, (n..k).collect());
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids = Array2::zeros((k, d));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&embeddings.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(embeddings.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&embeddings.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(embeddings.row(i), centroids.row(c)));
        }
    }

    let mut labels = vec![0usize; n];
    for (i, mut_label) in labels.iter_mut().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let dist = sq_dist(embeddings.row(i), centroids.row(c));
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        *mut_label = best;
    }

    for _iter in 0..100 {
        reseed_empty_clusters(embeddings, &mut labels, &centroids, k);

        let mut next = Array2::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            let mut row = next.row_mut(c);
            row += &embeddings.row(i);
            counts[c] += 1;
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if counts[c] > 0 {
                let mut row = next.row_mut(c);
                row.mapv_inplace(|v| v / counts[c] as f64);
            } else {
                next.row_mut(c).assign(&centroids.row(c));
            }
            shift = shift.max(sq_dist(next.row(c), centroids.row(c)).sqrt());
        }
        centroids = next;

        // Assignment with sticky ties: keep the current cluster on equal
        // distance so duplicate points cannot oscillate.
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = *label;
            let mut best_d = sq_dist(embeddings.row(i), centroids.row(*label));
            for c in 0..k {
                let dist = sq_dist(embeddings.row(i), centroids.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            *label = best;
        }

        if shift < 1e-8 {
            break;
        }
    }
    reseed_empty_clusters(embeddings, &mut labels, &centroids, k);

    let mut final_centroids = Array2::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        let mut row = final_centroids.row_mut(c);
        row += &embeddings.row(i);
        counts[c] += 1;
    }
    let mut empty = Vec::new();
    for c in 0..k {
        if counts[c] > 0 {
            let mut row = final_centroids.row_mut(c);
            row.mapv_inplace(|v| v / counts[c] as f64);
        } else {
            final_centroids.row_mut(c).assign(&centroids.row(c));
            empty.push(c);
        }
    }
    finish(labels, final_centroids, n, k, empty)
}

/// Move the farthest point (from its own centroid) into each empty cluster,
/// never emptying a singleton donor.
fn reseed_empty_clusters(
    embeddings: &Array2<f64>,
    labels: &mut [usize],
    centroids: &Array2<f64>,
    k: usize,
) {
    let n = labels.len();
    for c in 0..k {
        if labels.iter().any(|&l| l == c) {
            continue;
        }
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let mut donor = None;
        let mut donor_d = f64::NEG_INFINITY;
        for i in 0..n {
            if counts[labels[i]] <= 1 {
                continue;
            }
            let dist = sq_dist(embeddings.row(i), centroids.row(labels[i]));
            if dist > donor_d {
                donor_d = dist;
                donor = Some(i);
            }
        }
        if let Some(i) = donor {
            labels[i] = c;
        }
    }
}

fn finish(
    labels: Vec<usize>,
    centroids: Array2<f64>,
    n: usize,
    k: usize,
    empty_clusters: Vec<usize>,
) -> ClusterAssignment {
    let mut matrix = Array2::zeros((n, k));
    for (i, &c) in labels.iter().enumerate() {
        matrix[(i, c)] = 1.0;
    }
    ClusterAssignment { labels, matrix, centroids, empty_clusters }
}

/// n x n positive mask: `pos[(i, j)] = 1` when i and j share a cluster
/// (including i itself).
pub fn positive_mask(assignment: &Array2<f64>) -> Array2<f64> {
    assignment.dot(&assignment.t())
}

/// Core contrastive pipeline on a tape. `queries` (n x r) and `w` (r x r)
/// may carry gradients; `keys` (n x r) and the mask are constants.
///
/// Per query i the loss term is
/// `-ln( sum_{j in pos(i)} exp(z_i W k_j) / sum_j exp(z_i W k_j) )`,
/// stabilized by subtracting the per-row max score (a constant shift the
/// ratio is invariant to). Returns the mean over queries.
pub fn contrastive_loss_graph(
    tape: &mut Tape,
    queries: Var,
    w: Var,
    keys: &Array2<f64>,
    pos_mask: &Array2<f64>,
) -> Var {
    let n = keys.nrows();
    assert!(n >= 2, "contrastive loss needs at least two agents");
    assert_eq!(pos_mask.dim(), (n, n));

    let keys_t = tape.leaf(keys.t().to_owned());
    let zw = tape.matmul(queries, w);
    let scores = tape.matmul(zw, keys_t); // n x n

    let shift_rows: Vec<f64> = tape
        .value(scores)
        .rows()
        .into_iter()
        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = tape.leaf(Array2::from_shape_vec((n, 1), shift_rows).unwrap());
    let shift_wide = tape.tile_cols(shift, n);
    let shifted = tape.sub(scores, shift_wide);
    let exps = tape.exp(shifted);

    let mask = tape.leaf(pos_mask.clone());
    let pos = tape.mul(exps, mask);
    let pos_sum = tape.sum_cols(pos);
    let all_sum = tape.sum_cols(exps);
    let log_pos = tape.log(pos_sum);
    let log_all = tape.log(all_sum);
    let per_query = tape.sub(log_pos, log_all);
    let mean = tape.mean_all(per_query);
    tape.scale(mean, -1.0)
}

/// Result of a forward contrastive-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveLoss {
    pub loss: f64,
    /// True when every agent's positive set spans all agents, so no negative
    /// keys exist and the loss is identically zero.
    pub no_negatives: bool,
}

/// Forward-only contrastive loss from precomputed queries.
///
/// Keys are `theta_r_key(e_j)` for every agent j; positives are the keys of
/// agents sharing the query agent's cluster, the query's own key included.
pub fn contrastive_loss(
    queries: &Array2<f64>,
    key_embeddings: &Array2<f64>,
    assignment: &Array2<f64>,
    key_encoder: &RoleHead,
    score: &BilinearScore,
) -> ContrastiveLoss {
    let n = queries.nrows();
    assert!(n >= 2, "contrastive loss needs at least two agents");
    assert_eq!(key_embeddings.nrows(), n);
    assert_eq!(assignment.nrows(), n);
    assert!(
        assignment.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-12),
        "assignment rows must be one-hot"
    );
    let keys = key_encoder.forward_frozen(key_embeddings);
    let pos = positive_mask(assignment);
    let no_negatives = pos.iter().all(|&m| m > 0.0);
    let mut tape = Tape::new();
    let q = tape.leaf(queries.clone());
    let w = tape.leaf(score.w.clone());
    let loss = contrastive_loss_graph(&mut tape, q, w, &keys, &pos);
    ContrastiveLoss { loss: tape.scalar(loss), no_negatives }
}

/// Outcome of the trained similarity-structure check.
#[derive(Debug, Clone)]
pub struct ScoreCheckReport {
    /// Mean positive-pair score divided by mean negative-pair score.
    pub ratio: f64,
    pub no_negatives: bool,
    pub passed: bool,
}

/// Train the role head and bilinear matrix on a synthetic task whose cluster
/// identity determines the agent embedding, then compare mean positive and
/// negative pair scores.
pub fn optimal_score_check(
    n_clusters: usize,
    agents_per_cluster: usize,
    steps: usize,
    seed: u64,
) -> ScoreCheckReport {
    let embed_dim = 16;
    let role_dim = 8;
    let zeta = 0.005;
    let n = n_clusters * agents_per_cluster;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // One fixed embedding per cluster.
    let prototypes = Array2::from_shape_fn((n_clusters, embed_dim), |_| rng.gen_range(-1.0..1.0));
    let mut embeddings = Array2::zeros((n, embed_dim));
    let mut labels = vec![0usize; n];
    for i in 0..n {
        let c = i / agents_per_cluster;
        labels[i] = c;
        embeddings.row_mut(i).assign(&prototypes.row(c));
    }
    let mut assignment = Array2::zeros((n, n_clusters));
    for (i, &c) in labels.iter().enumerate() {
        assignment[(i, c)] = 1.0;
    }
    let pos = positive_mask(&assignment);
    let no_negatives = pos.iter().all(|&m| m > 0.0);

    let mut theta_r = RoleHead::new(&mut rng, embed_dim, role_dim);
    let mut theta_r_key = theta_r.clone();
    let mut score = BilinearScore::zeros(role_dim);
    let mut opt = Adam::new();

    if !no_negatives {
        for _ in 0..steps {
            crate::encoders::momentum_update(&theta_r, &mut theta_r_key, zeta)
                .expect("zeta in range");
            let keys = theta_r_key.forward_frozen(&embeddings);
            let mut tape = Tape::new();
            let head_vars: RoleHeadVars = theta_r.mount(&mut tape);
            let e = tape.leaf(embeddings.clone());
            let queries = head_vars.forward(&mut tape, e);
            let w = tape.leaf(score.w.clone());
            let loss = contrastive_loss_graph(&mut tape, queries, w, &keys, &pos);
            let grads = tape.backward(loss);
            let mut vars = head_vars.var_list();
            vars.push(w);
            let grad_list = crate::nn::collect_grads(&grads, &vars);
            let mut params = theta_r.tensors_mut();
            params.push(&mut score.w);
            opt.step(&mut params, &grad_list, 8e-4);
        }
    }

    if no_negatives {
        return ScoreCheckReport { ratio: f64::INFINITY, no_negatives: true, passed: true };
    }
    let queries = theta_r.forward_frozen(&embeddings);
    let keys = theta_r_key.forward_frozen(&embeddings);
    let (pos_mean, neg_mean) = mean_scores(&queries, &keys, &score.w, &pos);
    let ratio = pos_mean / neg_mean;
    ScoreCheckReport { ratio, no_negatives: false, passed: ratio >= 2.0 }
}

/// Mean exp-score over positive and negative pairs.
pub fn mean_scores(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    w: &Array2<f64>,
    pos: &Array2<f64>,
) -> (f64, f64) {
    let raw = queries.dot(w).dot(&keys.t()).mapv(f64::exp);
    let mut acc = [(0.0f64, 0.0f64), (0.0, 0.0)];
    for ((i, j), &s) in raw.indexed_iter() {
        let slot = if pos[(i, j)] > 0.0 { 0 } else { 1 };
        acc[slot].0 += s;
        acc[slot].1 += 1.0;
    }
    (acc[0].0 / acc[0].1.max(1.0), acc[1].0 / acc[1].1.max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::finite_diff_check;
    use ndarray::arr2;

    #[test]
    fn duplicate_points_with_two_clusters_get_one_point_each() {
        let e = arr2(&[[1.0, 2.0], [1.0, 2.0]]);
        let a = kmeans(&e, 2, 0);
        assert_ne!(a.labels[0], a.labels[1]);
        assert!(a.empty_clusters.is_empty());
        for row in a.matrix.rows() {
            assert_eq!(row.sum(), 1.0);
        }
    }

    #[test]
    fn single_cluster_takes_everyone() {
        let e = arr2(&[[1.0, 0.0], [5.0, 2.0], [-3.0, 1.0]]);
        let a = kmeans(&e, 1, 7);
        assert_eq!(a.labels, vec![0, 0, 0]);
    }

    #[test]
    fn more_clusters_than_points_flags_surplus_empty() {
        let e = arr2(&[[0.0, 0.0], [1.0, 1.0]]);
        let a = kmeans(&e, 4, 3);
        assert_eq!(a.labels, vec![0, 1]);
        assert_eq!(a.empty_clusters, vec![2, 3]);
    }

    #[test]
    fn well_separated_blobs_recover_labels_over_fifty_seeds() {
        let mut rng = ChaCha20Rng::seed_from_u64(123);
        for seed in 0..50u64 {
            let mut points = Array2::zeros((16, 3));
            let mut truth = vec![0usize; 16];
            for i in 0..16 {
                let blob = i % 2;
                truth[i] = blob;
                let center = if blob == 0 { -5.0 } else { 5.0 };
                for j in 0..3 {
                    points[(i, j)] = center + 0.5 * rng.gen_range(-1.0..1.0);
                }
            }
            let a = kmeans(&points, 2, seed);
            let direct = truth.iter().zip(&a.labels).all(|(t, l)| t == l);
            let flipped = truth.iter().zip(&a.labels).all(|(t, l)| *t == 1 - l);
            assert!(direct || flipped, "seed {seed}: {:?}", a.labels);
        }
    }

    #[test]
    fn kmeans_is_deterministic_in_inputs_and_seed() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let e = Array2::from_shape_fn((10, 4), |_| rng.gen_range(-1.0..1.0));
        let a = kmeans(&e, 3, 99);
        let b = kmeans(&e, 3, 99);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn zero_score_two_clusters_gives_log_two() {
        let queries = arr2(&[[0.3, 0.4], [0.1, -0.2]]);
        let e = arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let c = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let key_enc = RoleHead::zeros(3, 2);
        let w = BilinearScore::zeros(2);
        let out = contrastive_loss(&queries, &e, &c, &key_enc, &w);
        assert!(!out.no_negatives);
        assert!((out.loss - 2.0f64.ln()).abs() <= 1e-12, "loss {}", out.loss);
    }

    #[test]
    fn all_agents_one_cluster_is_zero_loss_with_warning() {
        let queries = arr2(&[[0.3, 0.4], [0.1, -0.2], [0.9, 0.0]]);
        let e = Array2::zeros((3, 3));
        let c = arr2(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        let key_enc = RoleHead::zeros(3, 2);
        let w = BilinearScore::zeros(2);
        let out = contrastive_loss(&queries, &e, &c, &key_enc, &w);
        assert!(out.no_negatives);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn w_zero_closed_form_matches_positive_set_fractions() {
        // 3 agents, clusters {0,1} and {2}: terms -ln(2/3), -ln(2/3), -ln(1/3).
        let queries = arr2(&[[0.5, -0.1], [0.2, 0.3], [0.0, 1.0]]);
        let e = Array2::from_shape_fn((3, 3), |(i, j)| (i + j) as f64 * 0.1);
        let c = arr2(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let key_enc = RoleHead::new(&mut rng, 3, 2);
        let w = BilinearScore::zeros(2);
        let out = contrastive_loss(&queries, &e, &c, &key_enc, &w);
        let want = -((2.0f64 / 3.0).ln() + (2.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln()) / 3.0;
        assert!((out.loss - want).abs() <= 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_on_random_draws() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = rng.gen_range(2..7);
            let k = rng.gen_range(1..4);
            let queries = Array2::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0));
            let e = Array2::from_shape_fn((n, 5), |_| rng.gen_range(-1.0..1.0));
            let mut c = Array2::zeros((n, k));
            for i in 0..n {
                c[(i, rng.gen_range(0..k))] = 1.0;
            }
            let key_enc = RoleHead::new(&mut rng, 5, 4);
            let w = BilinearScore { w: Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0)) };
            let out = contrastive_loss(&queries, &e, &c, &key_enc, &w);
            assert!(out.loss >= -1e-12, "negative loss {}", out.loss);
        }
    }

    #[test]
    fn loss_is_invariant_to_cluster_relabeling() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let queries = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let e = Array2::from_shape_fn((5, 6), |_| rng.gen_range(-1.0..1.0));
        let key_enc = RoleHead::new(&mut rng, 6, 4);
        let w = BilinearScore::new(&mut rng, 4);
        let c = arr2(&[
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
        ]);
        let mut permuted = c.clone();
        for i in 0..5 {
            permuted[(i, 0)] = c[(i, 2)];
            permuted[(i, 2)] = c[(i, 0)];
        }
        let a = contrastive_loss(&queries, &e, &c, &key_enc, &w);
        let b = contrastive_loss(&queries, &e, &permuted, &key_enc, &w);
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn gradients_wrt_w_and_queries_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let n = 5;
        let r = 4;
        let queries0 = Array2::from_shape_fn((n, r), |_| rng.gen_range(-1.0..1.0));
        let w0 = Array2::from_shape_fn((r, r), |_| rng.gen_range(-0.5..0.5));
        let keys = Array2::from_shape_fn((n, r), |_| rng.gen_range(-1.0..1.0));
        let mut c = Array2::zeros((n, 2));
        for i in 0..n {
            c[(i, i % 2)] = 1.0;
        }
        let pos = positive_mask(&c);

        let run = |tensors: &[(String, Array2<f64>)]| -> f64 {
            let mut tape = Tape::new();
            let q = tape.leaf(tensors[0].1.clone());
            let w = tape.leaf(tensors[1].1.clone());
            let loss = contrastive_loss_graph(&mut tape, q, w, &keys, &pos);
            tape.scalar(loss)
        };

        let mut tape = Tape::new();
        let q = tape.leaf(queries0.clone());
        let w = tape.leaf(w0.clone());
        let loss = contrastive_loss_graph(&mut tape, q, w, &keys, &pos);
        let grads = tape.backward(loss);

        let report = finite_diff_check(
            run,
            &[("queries".into(), queries0), ("w".into(), w0)],
            &[("queries".into(), grads.get(q).clone()), ("w".into(), grads.get(w).clone())],
            200,
        );
        assert!(report.max_relative_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn trained_scores_separate_positive_and_negative_pairs() {
        let report = optimal_score_check(3, 8, 2000, 4);
        assert!(!report.no_negatives);
        assert!(report.passed, "ratio {}", report.ratio);
    }

    #[test]
    fn untrained_zero_w_has_unit_ratio() {
        let report = optimal_score_check(3, 8, 0, 4);
        assert!((report.ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_check_passes_vacuously() {
        let report = optimal_score_check(1, 6, 10, 4);
        assert!(report.no_negatives);
        assert!(report.passed);
    }
}
