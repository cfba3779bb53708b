//! Entropic assignment of features to prototypes under an equipartition
//! constraint, solved by alternate row/column rescaling.
//!
//! The plan is `Q = Diag(alpha) exp(S / eps) Diag(beta)` where `S = Cᵀ Z` is
//! the K×B score matrix. Target marginals are rows summing to `1/K` and
//! columns summing to `1/B`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Largest admissible exponent before `exp` leaves the comfortable f64 range.
const MAX_EXPONENT: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub iterations: usize,
    pub include_queue: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, iterations: 3, include_queue: true }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("sinkhorn iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Renormalisation vectors of the plan.
#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornState {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// A soft K×B transport plan on (approximately) the equipartition polytope.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix {
    q: Matrix,
}

impl AssignmentMatrix {
    /// Wraps a plan. Entries must be non-negative.
    pub fn from_plan(q: Matrix) -> Result<Self> {
        if let Some(&value) = q.data().iter().find(|&&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::NegativeEntry { value });
        }
        Ok(Self { q })
    }

    /// Builds a plan from per-sample probability columns (each summing to one).
    pub fn from_targets(targets: &Matrix) -> Result<Self> {
        let b = targets.cols() as f64;
        Self::from_plan(targets.scale(1.0 / b))
    }

    pub fn plan(&self) -> &Matrix {
        &self.q
    }

    pub fn prototypes(&self) -> usize {
        self.q.rows()
    }

    pub fn samples(&self) -> usize {
        self.q.cols()
    }

    /// Per-sample distributions over prototypes: the plan rescaled by B.
    pub fn targets(&self) -> Matrix {
        self.q.scale(self.q.cols() as f64)
    }

    /// Index of the largest entry in each column (lowest index on ties).
    pub fn hard_assignments(&self) -> Vec<usize> {
        argmax_cols(&self.q)
    }
}

pub fn argmax_cols(m: &Matrix) -> Vec<usize> {
    (0..m.cols())
        .map(|c| {
            let mut best = 0;
            for r in 1..m.rows() {
                if m.get(r, c) > m.get(best, c) {
                    best = r;
                }
            }
            best
        })
        .collect()
}

/// Solves the assignment for every column of `scores`.
pub fn assign(scores: &Matrix, cfg: &SinkhornConfig) -> Result<AssignmentMatrix> {
    solve(scores, cfg).map(|(q, _)| q)
}

/// Like [`assign`] but also returns the renormalisation vectors.
pub fn solve(scores: &Matrix, cfg: &SinkhornConfig) -> Result<(AssignmentMatrix, SinkhornState)> {
    cfg.validate()?;
    let (k, b) = scores.shape();
    if k < 2 || b < 1 {
        return Err(Error::InvalidArgument(format!("need K >= 2 and B >= 1, got K={k}, B={b}")));
    }
    if !scores.is_finite() {
        return Err(Error::NonFinite { op: "sinkhorn" });
    }
    let max_abs = scores.max_abs();
    if max_abs / cfg.epsilon > MAX_EXPONENT {
        return Err(Error::ScoreOverflow { max_abs, epsilon: cfg.epsilon });
    }

    let mut q = scores.map(|s| (s / cfg.epsilon).exp());
    let kernel_total: f64 = q.data().iter().sum();
    let mut alpha = vec![1.0; k];
    let mut beta = vec![1.0 / kernel_total; b];
    q.scale_cols(&beta);

    let row_target = 1.0 / k as f64;
    let col_target = 1.0 / b as f64;
    for _ in 0..cfg.iterations {
        let row_scale: Vec<f64> = q.row_sums().iter().map(|s| row_target / s).collect();
        q.scale_rows(&row_scale);
        for (a, s) in alpha.iter_mut().zip(&row_scale) {
            *a *= s;
        }
        let col_scale: Vec<f64> = q.col_sums().iter().map(|s| col_target / s).collect();
        q.scale_cols(&col_scale);
        for (be, s) in beta.iter_mut().zip(&col_scale) {
            *be *= s;
        }
    }
    if !q.is_finite() || alpha.iter().chain(&beta).any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::ScoreOverflow { max_abs, epsilon: cfg.epsilon });
    }
    Ok((AssignmentMatrix { q }, SinkhornState { alpha, beta }))
}

/// Assigns a batch, optionally pooling queued feature scores into the
/// marginal statistics. Only the leading batch columns are returned,
/// rescaled so each column sums to exactly `1/B`.
pub fn assign_batch(
    batch_scores: &Matrix,
    queue_scores: Option<&Matrix>,
    cfg: &SinkhornConfig,
) -> Result<AssignmentMatrix> {
    let queue = match queue_scores {
        Some(qs) if cfg.include_queue && qs.cols() > 0 => qs,
        _ => return assign(batch_scores, cfg),
    };
    if queue.rows() != batch_scores.rows() {
        return Err(Error::ShapeMismatch {
            op: "assign_batch",
            left: batch_scores.shape(),
            right: queue.shape(),
        });
    }
    let all = Matrix::hcat(&[batch_scores, queue])?;
    let full = assign(&all, cfg)?;
    let b = batch_scores.cols();
    let mut kept = full.q.col_range(0, b);
    let inv: Vec<f64> = kept.col_sums().iter().map(|s| 1.0 / (b as f64 * s)).collect();
    kept.scale_cols(&inv);
    Ok(AssignmentMatrix { q: kept })
}

/// `-Σ q log q` with `0 log 0 = 0`.
pub fn assignment_entropy(q: &AssignmentMatrix) -> Result<f64> {
    entropy_of(q.plan())
}

pub(crate) fn entropy_of(q: &Matrix) -> Result<f64> {
    let mut h = 0.0;
    for &x in q.data() {
        if x < 0.0 {
            return Err(Error::NegativeEntry { value: x });
        }
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    Ok(h)
}
