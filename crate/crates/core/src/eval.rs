//! Downstream evaluation: nearest-neighbour retrieval, linear probing,
//! stream averaging, and cluster-quality metrics on hard assignments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{factor_labels, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_cols, matmul_tn, Matrix};

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];

/// Recall at k for each requested k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub recall_at: BTreeMap<usize, f64>,
}

impl RetrievalReport {
    pub fn r1(&self) -> f64 {
        self.recall_at.get(&1).copied().unwrap_or(f64::NAN)
    }
}

/// Cosine similarity of every test column against every train column
/// (queries × train).
pub fn cosine_similarity(train: &Matrix, test: &Matrix) -> Result<Matrix> {
    if train.rows() != test.rows() {
        return Err(Error::ShapeMismatch { op: "cosine_similarity", left: train.shape(), right: test.shape() });
    }
    matmul_tn(&l2_normalize_cols(test)?, &l2_normalize_cols(train)?)
}

/// R@k from a precomputed similarity matrix (queries × train).
/// Ties are broken towards the lower training index.
pub fn retrieval_from_similarity(
    sim: &Matrix,
    train_labels: &[usize],
    test_labels: &[usize],
    ks: &[usize],
) -> Result<RetrievalReport> {
    let n_train = train_labels.len();
    if sim.shape() != (test_labels.len(), n_train) {
        return Err(Error::ShapeMismatch { op: "retrieval", left: (test_labels.len(), n_train), right: sim.shape() });
    }
    let k_max = ks.iter().copied().max().unwrap_or(0);
    if k_max > n_train || ks.contains(&0) {
        return Err(Error::InvalidArgument(format!("k must lie in 1..={n_train}, got {ks:?}")));
    }
    if test_labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    // first_hit[q] = rank (0-based) of the first same-class neighbour within k_max.
    let mut first_hit = Vec::with_capacity(test_labels.len());
    let mut order: Vec<usize> = Vec::with_capacity(n_train);
    for (q, &label) in test_labels.iter().enumerate() {
        let row = sim.row(q);
        order.clear();
        order.extend(0..n_train);
        let by_sim = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if k_max < n_train {
            order.select_nth_unstable_by(k_max - 1, by_sim);
            order.truncate(k_max);
        }
        order.sort_unstable_by(by_sim);
        first_hit.push(order.iter().take(k_max).position(|&i| train_labels[i] == label));
    }
    let recall_at = ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|h| h.is_some_and(|r| r < k)).count();
            (k, hits as f64 / test_labels.len() as f64)
        })
        .collect();
    Ok(RetrievalReport { recall_at })
}

/// Nearest-neighbour retrieval with cosine similarity.
pub fn knn_retrieval(
    train_feats: &Matrix,
    train_labels: &[usize],
    test_feats: &Matrix,
    test_labels: &[usize],
    ks: &[usize],
) -> Result<RetrievalReport> {
    let sim = cosine_similarity(train_feats, test_feats)?;
    retrieval_from_similarity(&sim, train_labels, test_labels, ks)
}

/// Element-wise mean of two streams' similarity or probability matrices.
pub fn combine_streams(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.same_shape(b, "combine_streams")?;
    Ok(a.add(b)?.scale(0.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub reg: f64,
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { reg: 1e-3, max_iters: 1000, tolerance: 1e-6 }
    }
}

/// A fitted multinomial logistic regression on standardised features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    inv_sd: Vec<f64>,
    /// classes × (dim + 1); the last column is the bias.
    weights: Matrix,
    pub iterations: usize,
}

fn standardize(x: &Matrix, mean: &[f64], inv_sd: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows() + 1, x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            out.set(r, c, (x.get(r, c) - mean[r]) * inv_sd[r]);
        }
    }
    for c in 0..x.cols() {
        out.set(x.rows(), c, 1.0);
    }
    out
}

fn class_probs(w: &Matrix, x: &Matrix) -> Result<Matrix> {
    crate::numerics::softmax_cols(&crate::numerics::matmul(w, x)?, 1.0)
}

/// Objective gradient: mean cross-entropy plus `reg/2 |W|²` (bias excluded).
fn probe_gradient(w: &Matrix, x: &Matrix, labels: &[usize], reg: f64) -> Result<Matrix> {
    let mut p = class_probs(w, x)?;
    for (c, &y) in labels.iter().enumerate() {
        p.set(y, c, p.get(y, c) - 1.0);
    }
    let mut g = crate::numerics::matmul_nt(&p, x)?.scale(1.0 / labels.len() as f64);
    let bias = w.cols() - 1;
    for r in 0..w.rows() {
        for c in 0..bias {
            g.set(r, c, g.get(r, c) + reg * w.get(r, c));
        }
    }
    Ok(g)
}

impl LinearProbe {
    /// Fits with Nesterov-accelerated gradient descent.
    pub fn fit(feats: &Matrix, labels: &[usize], cfg: &ProbeConfig) -> Result<Self> {
        if feats.cols() != labels.len() || labels.is_empty() {
            return Err(Error::ShapeMismatch { op: "linear_probe", left: feats.shape(), right: (labels.len(), 1) });
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let distinct = {
            let mut seen = vec![false; classes];
            labels.iter().for_each(|&l| seen[l] = true);
            seen.iter().filter(|&&s| s).count()
        };
        if distinct < 2 {
            return Err(Error::InvalidArgument("linear probe needs at least two classes in training".into()));
        }
        let n = feats.cols() as f64;
        let mean: Vec<f64> = feats.row_sums().iter().map(|s| s / n).collect();
        let inv_sd: Vec<f64> = (0..feats.rows())
            .map(|r| {
                let var = feats.row(r).iter().map(|x| (x - mean[r]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 { 1.0 / var.sqrt() } else { 0.0 }
            })
            .collect();
        let x = standardize(feats, &mean, &inv_sd);
        // Softmax cross-entropy Hessian is bounded by ½ E[xxᵀ] per class block.
        let lipschitz = 0.5 * x.data().iter().map(|v| v * v).sum::<f64>() / n + cfg.reg;
        let step = 1.0 / lipschitz;

        let mut w = Matrix::zeros(classes, x.rows());
        let mut prev = w.clone();
        let mut iterations = 0;
        for it in 1..=cfg.max_iters {
            iterations = it;
            let momentum = (it as f64 - 1.0) / (it as f64 + 2.0);
            let mut look = w.clone();
            look.axpy(momentum, &w.sub(&prev)?)?;
            let g = probe_gradient(&look, &x, labels, cfg.reg)?;
            prev = w;
            w = look;
            w.axpy(-step, &g)?;
            if g.frobenius_norm() < cfg.tolerance {
                break;
            }
        }
        Ok(Self { mean, inv_sd, weights: w, iterations })
    }

    /// Class probabilities (classes × samples).
    pub fn predict_proba(&self, feats: &Matrix) -> Result<Matrix> {
        if feats.rows() != self.mean.len() {
            return Err(Error::ShapeMismatch { op: "probe predict", left: (self.mean.len(), 0), right: feats.shape() });
        }
        class_probs(&self.weights, &standardize(feats, &self.mean, &self.inv_sd))
    }

    /// Training objective value; exposed for convergence checks.
    pub fn objective(&self, feats: &Matrix, labels: &[usize], reg: f64) -> Result<f64> {
        let p = self.predict_proba(feats)?;
        let ce = labels.iter().enumerate().map(|(c, &y)| -p.get(y, c).ln()).sum::<f64>() / labels.len() as f64;
        let bias = self.weights.cols() - 1;
        let mut sq = 0.0;
        for r in 0..self.weights.rows() {
            for c in 0..bias {
                sq += self.weights.get(r, c).powi(2);
            }
        }
        Ok(ce + 0.5 * reg * sq)
    }
}

/// Top-1 accuracy of argmax over probability columns.
pub fn accuracy_from_probs(probs: &Matrix, labels: &[usize]) -> f64 {
    let pred = crate::sinkhorn::argmax_cols(probs);
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len().max(1) as f64
}

/// Trains a probe on frozen features and returns top-1 test accuracy.
pub fn linear_probe(
    train_feats: &Matrix,
    train_labels: &[usize],
    test_feats: &Matrix,
    test_labels: &[usize],
    reg: f64,
) -> Result<f64> {
    let probe = LinearProbe::fit(train_feats, train_labels, &ProbeConfig { reg, ..Default::default() })?;
    let mut probs = probe.predict_proba(test_feats)?;
    pad_rows(&mut probs, test_labels);
    Ok(accuracy_from_probs(&probs, test_labels))
}

/// Test labels beyond the training classes can never be predicted; extend
/// the probability matrix with zero rows so indexing stays valid.
fn pad_rows(probs: &mut Matrix, labels: &[usize]) {
    let needed = labels.iter().max().map_or(0, |m| m + 1);
    if needed > probs.rows() {
        let extra = Matrix::zeros(needed - probs.rows(), probs.cols());
        *probs = Matrix::vcat(&[probs, &extra]).expect("same column count");
    }
}

/// Optimal assignment minimising total cost. Returns `perm` with row `i`
/// matched to column `perm[i]`.
pub fn hungarian(cost: &Matrix) -> Result<Vec<usize>> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::ShapeMismatch { op: "hungarian", left: cost.shape(), right: (n, n) });
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite { op: "hungarian" });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // Shortest augmenting path with row/column potentials, 1-based with a
    // virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[matched_row[j] - 1] = j - 1;
    }
    Ok(perm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub mean_entropy: f64,
    pub max_purity: f64,
}

fn entropy(counts: &[usize], total: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

fn pairs(n: usize) -> f64 {
    n as f64 * (n as f64 - 1.0) / 2.0
}

/// Agreement between hard cluster ids and ground-truth labels.
///
/// NMI is normalised by `sqrt(H(U) H(V))`. Empty clusters are skipped in the
/// per-cluster entropy and purity means. Entropies use the natural log.
pub fn cluster_eval(assign_hard: &[usize], labels: &[usize], k_eval: usize) -> Result<ClusterReport> {
    if assign_hard.len() != labels.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch { op: "cluster_eval", left: (assign_hard.len(), 1), right: (labels.len(), 1) });
    }
    if let Some(&bad) = assign_hard.iter().find(|&&a| a >= k_eval) {
        return Err(Error::InvalidArgument(format!("cluster id {bad} outside 0..{k_eval}")));
    }
    let n = labels.len();
    let m = labels.iter().max().map_or(0, |x| x + 1);
    let mut table = vec![vec![0usize; m]; k_eval];
    for (&a, &y) in assign_hard.iter().zip(labels) {
        table[a][y] += 1;
    }
    let cluster_sizes: Vec<usize> = table.iter().map(|row| row.iter().sum()).collect();
    let label_sizes: Vec<usize> = (0..m).map(|j| table.iter().map(|row| row[j]).sum()).collect();

    let side = k_eval.max(m);
    let mut cost = Matrix::zeros(side, side);
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            cost.set(i, j, -(c as f64));
        }
    }
    let perm = hungarian(&cost)?;
    let matched: usize = (0..k_eval).filter(|&i| perm[i] < m).map(|i| table[i][perm[i]]).sum();
    let acc = matched as f64 / n as f64;

    let h_u = entropy(&cluster_sizes, n);
    let h_v = entropy(&label_sizes, n);
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let nij = c as f64;
                mi += nij / n as f64 * (n as f64 * nij / (cluster_sizes[i] as f64 * label_sizes[j] as f64)).ln();
            }
        }
    }
    let nmi = if h_u > 0.0 && h_v > 0.0 {
        (mi / (h_u * h_v).sqrt()).clamp(0.0, 1.0)
    } else if h_u == 0.0 && h_v == 0.0 {
        1.0
    } else {
        0.0
    };

    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let sum_a: f64 = cluster_sizes.iter().map(|&c| pairs(c)).sum();
    let sum_b: f64 = label_sizes.iter().map(|&c| pairs(c)).sum();
    let expected = sum_a * sum_b / pairs(n).max(f64::MIN_POSITIVE);
    let max_index = 0.5 * (sum_a + sum_b);
    let ari = if (max_index - expected).abs() < 1e-12 { if index == expected { 1.0 } else { 0.0 } } else { (index - expected) / (max_index - expected) };

    let non_empty: Vec<usize> = (0..k_eval).filter(|&i| cluster_sizes[i] > 0).collect();
    let mean_entropy = non_empty.iter().map(|&i| entropy(&table[i], cluster_sizes[i])).sum::<f64>() / non_empty.len() as f64;
    let max_purity = non_empty
        .iter()
        .map(|&i| *table[i].iter().max().expect("non-empty") as f64 / cluster_sizes[i] as f64)
        .sum::<f64>()
        / non_empty.len() as f64;

    Ok(ClusterReport { acc, nmi, ari, mean_entropy, max_purity })
}

/// Raw-view linear-probe accuracy on each stream's own and other factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSeparability {
    pub own: f64,
    pub other: f64,
}

impl FactorSeparability {
    pub fn gap(&self) -> f64 {
        self.own - self.other
    }
}

/// Probes each raw view for factor `a` and factor `b`. Stream 1 owns `a`,
/// stream 2 owns `b`.
pub fn factor_separability(ds: &Dataset, split: (usize, usize), reg: f64) -> Result<[FactorSeparability; 2]> {
    let (train_a, train_b) = factor_labels(&ds.train.labels, split);
    let (test_a, test_b) = factor_labels(&ds.test.labels, split);
    let probe = |s: usize, train: &[usize], test: &[usize]| linear_probe(&ds.train.views[s], train, &ds.test.views[s], test, reg);
    Ok([
        FactorSeparability { own: probe(0, &train_a, &test_a)?, other: probe(0, &train_b, &test_b)? },
        FactorSeparability { own: probe(1, &train_b, &test_b)?, other: probe(1, &train_a, &test_a)? },
    ])
}
