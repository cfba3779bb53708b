//! Training objectives with analytic gradients.
//!
//! Every prototype objective is a weighted sum of cross-entropies
//! `l(z, q) = -mean_b Σ_k q[k,b] log softmax_k(Cᵀz_b / τ)` where the target
//! `q` is a per-sample distribution held constant (no gradient flows into it).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeatureMatrix, PrototypeBank};
use crate::numerics::{log_softmax_cols, matmul, matmul_nt, matmul_tn, Matrix};
use crate::sinkhorn::AssignmentMatrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    SingleStream,
    #[default]
    CrossStream,
    InfonceBaseline,
}

/// Which views predict each assignment in the cross-stream objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionViews {
    #[default]
    AllOthers,
    OtherStreamOnly,
}

/// Which views' assignments are predicted in the cross-stream objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentViews {
    #[default]
    BothStreams,
    OtherStreamOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub mode: LossMode,
    pub prediction_views: PredictionViews,
    pub assignment_views: AssignmentViews,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            mode: LossMode::default(),
            prediction_views: PredictionViews::default(),
            assignment_views: AssignmentViews::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    /// One gradient per input feature matrix, in argument order. Views that
    /// receive no gradient (frozen stream) carry zeros.
    pub grad_z: Vec<Matrix>,
    /// Gradient for the prototype bank; `None` for objectives without one.
    pub grad_c: Option<Matrix>,
    /// Number of cross-entropy terms that entered the value.
    pub terms: usize,
}

/// One weighted cross-entropy: `weight * l(views[predictor], targets[target])`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Term {
    pub predictor: usize,
    pub target: usize,
    pub weight: f64,
}

fn check_targets(q: &Matrix) -> Result<()> {
    for (col, sum) in q.col_sums().into_iter().enumerate() {
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::TargetNotNormalized { col, sum });
        }
    }
    if let Some(&value) = q.data().iter().find(|&&x| x < 0.0) {
        return Err(Error::NegativeEntry { value });
    }
    Ok(())
}

/// Evaluates a weighted set of prototype cross-entropies.
///
/// `trainable[v]` selects which views receive a feature gradient; all views
/// that predict contribute to the prototype gradient.
pub fn prototype_terms(
    views: &[&FeatureMatrix],
    trainable: &[bool],
    bank: &PrototypeBank,
    targets: &[Matrix],
    terms: &[Term],
    temperature: f64,
) -> Result<LossOutput> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let batch = views.first().map_or(0, |v| v.len());
    for v in views {
        if v.len() != batch || v.dim() != bank.dim() {
            return Err(Error::ShapeMismatch { op: "prototype loss", left: (bank.dim(), batch), right: v.matrix().shape() });
        }
    }
    for q in targets {
        if q.shape() != (bank.k(), batch) {
            return Err(Error::ShapeMismatch { op: "prototype loss targets", left: (bank.k(), batch), right: q.shape() });
        }
        check_targets(q)?;
    }

    let mut log_probs: Vec<Option<Matrix>> = vec![None; views.len()];
    let mut grad_logits: Vec<Option<Matrix>> = vec![None; views.len()];
    let inv_b = 1.0 / batch as f64;
    let mut value = 0.0;
    for t in terms {
        if log_probs[t.predictor].is_none() {
            let scores = matmul_tn(&bank.c, views[t.predictor].matrix())?;
            log_probs[t.predictor] = Some(log_softmax_cols(&scores, temperature)?);
        }
        let lp = log_probs[t.predictor].as_ref().expect("computed above");
        let q = &targets[t.target];
        value -= t.weight * inv_b * q.frobenius_dot(lp);
        // d/dlogits of -Σ q log softmax = softmax * Σq - q, with Σq = 1.
        let g = grad_logits[t.predictor].get_or_insert_with(|| Matrix::zeros(bank.k(), batch));
        let scale = t.weight * inv_b / temperature;
        for ((gv, &l), &qv) in g.data_mut().iter_mut().zip(lp.data()).zip(q.data()) {
            *gv += scale * (l.exp() - qv);
        }
    }

    let mut grad_c = Matrix::zeros(bank.dim(), bank.k());
    let mut grad_z = Vec::with_capacity(views.len());
    for (v, g) in grad_logits.iter().enumerate() {
        match g {
            Some(g) => {
                grad_c.axpy(1.0, &matmul_nt(views[v].matrix(), g)?)?;
                grad_z.push(if trainable[v] { matmul(&bank.c, g)? } else { Matrix::zeros(bank.dim(), batch) });
            }
            None => grad_z.push(Matrix::zeros(bank.dim(), batch)),
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "prototype loss" });
    }
    Ok(LossOutput { value, grad_z, grad_c: Some(grad_c), terms: terms.len() })
}

/// A single cross-entropy `l(z, q)` with gradients.
pub fn prediction_loss(z: &FeatureMatrix, bank: &PrototypeBank, q: &AssignmentMatrix, temperature: f64) -> Result<LossOutput> {
    prototype_terms(&[z], &[true], bank, &[q.targets()], &[Term { predictor: 0, target: 0, weight: 1.0 }], temperature)
}

/// Two-view swapped prediction: `½[l(z_j, q_i) + l(z_i, q_j)]`.
pub fn single_stream_loss(
    z_i: &FeatureMatrix,
    z_j: &FeatureMatrix,
    bank: &PrototypeBank,
    q_i: &AssignmentMatrix,
    q_j: &AssignmentMatrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let terms = [Term { predictor: 1, target: 0, weight: 0.5 }, Term { predictor: 0, target: 1, weight: 0.5 }];
    prototype_terms(&[z_i, z_j], &[true, true], bank, &[q_i.targets(), q_j.targets()], &terms, cfg.temperature)
}

/// View slots of the cross-stream objective.
pub const S_I: usize = 0;
pub const S_J: usize = 1;
pub const T_I: usize = 2;
pub const T_J: usize = 3;

fn stream_of(view: usize) -> usize {
    view / 2
}

/// The weighted term list of the cross-stream objective.
///
/// Each selected assignment is predicted by every other view (or only the
/// other stream's two views), and the result is averaged first over the
/// predictors of one assignment and then over assignments.
pub fn cross_stream_terms(cfg: &LossConfig) -> Vec<Term> {
    let targets: &[usize] = match cfg.assignment_views {
        AssignmentViews::BothStreams => &[S_I, S_J, T_I, T_J],
        AssignmentViews::OtherStreamOnly => &[T_I, T_J],
    };
    let mut terms = Vec::new();
    for &target in targets {
        let predictors: Vec<usize> = (0..4)
            .filter(|&v| v != target)
            .filter(|&v| match cfg.prediction_views {
                PredictionViews::AllOthers => true,
                PredictionViews::OtherStreamOnly => stream_of(v) != stream_of(target),
            })
            .collect();
        let weight = 1.0 / (targets.len() * predictors.len()) as f64;
        terms.extend(predictors.into_iter().map(|predictor| Term { predictor, target, weight }));
    }
    terms
}

/// Cross-stream prediction loss for the optimised stream `s`.
///
/// `views` and `assignments` are ordered `[s_i, s_j, t_i, t_j]`; all four
/// assignments are against `bank` (the prototypes of stream `s`). The
/// stream-`t` views come from the frozen encoder and get zero gradient.
pub fn cross_stream_loss(
    views: [&FeatureMatrix; 4],
    bank: &PrototypeBank,
    assignments: [&AssignmentMatrix; 4],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let targets: Vec<Matrix> = assignments.iter().map(|q| q.targets()).collect();
    prototype_terms(&views, &[true, true, false, false], bank, &targets, &cross_stream_terms(cfg), cfg.temperature)
}

/// Symmetric cross-view InfoNCE.
///
/// For anchor `b` of view `i`, the candidates are every column of view `j`
/// (the positive `j_b` and the other-sample negatives); the mirrored
/// direction uses view `i` as candidates. Both directions are averaged.
pub fn infonce(z_i: &FeatureMatrix, z_j: &FeatureMatrix, temperature: f64) -> Result<LossOutput> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    if z_i.matrix().shape() != z_j.matrix().shape() {
        return Err(Error::ShapeMismatch { op: "infonce", left: z_i.matrix().shape(), right: z_j.matrix().shape() });
    }
    let b = z_i.len();
    if b < 2 {
        return Err(Error::InvalidArgument("infonce needs at least two samples for negatives".into()));
    }
    // sim[a, c] = z_i[a] · z_j[c]
    let sim = matmul_tn(z_i.matrix(), z_j.matrix())?;
    // Column-wise log-softmax over the transpose gives the row direction.
    let lp_rows = log_softmax_cols(&sim.transpose(), temperature)?; // [c, a]: anchor a from view i
    let lp_cols = log_softmax_cols(&sim, temperature)?; // [a, c]: anchor c from view j
    let mut value = 0.0;
    for a in 0..b {
        value -= lp_rows.get(a, a) + lp_cols.get(a, a);
    }
    value /= 2.0 * b as f64;

    let scale = 1.0 / (2.0 * b as f64 * temperature);
    let mut d_sim = Matrix::zeros(b, b);
    for a in 0..b {
        for c in 0..b {
            let eye = if a == c { 1.0 } else { 0.0 };
            let g = (lp_rows.get(c, a).exp() - eye) + (lp_cols.get(a, c).exp() - eye);
            d_sim.set(a, c, scale * g);
        }
    }
    let grad_i = matmul_nt(z_j.matrix(), &d_sim)?;
    let grad_j = matmul(z_i.matrix(), &d_sim)?;
    Ok(LossOutput { value, grad_z: vec![grad_i, grad_j], grad_c: None, terms: 2 * b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{softmax_cols, Rng};
    use crate::sinkhorn::{assign, SinkhornConfig};

    fn unit(rng: &mut Rng, d: usize, b: usize) -> FeatureMatrix {
        FeatureMatrix::normalized(&rng.gaussian_matrix(d, b, 1.0)).unwrap()
    }

    /// Direct per-pair InfoNCE.
    fn infonce_oracle(zi: &Matrix, zj: &Matrix, tau: f64) -> f64 {
        let b = zi.cols();
        let dot = |x: &Matrix, p: usize, y: &Matrix, q: usize| (0..x.rows()).map(|r| x.get(r, p) * y.get(r, q)).sum::<f64>();
        let mut total = 0.0;
        for (anchor, cand) in [(zi, zj), (zj, zi)] {
            for a in 0..b {
                let pos = (dot(anchor, a, cand, a) / tau).exp();
                let den: f64 = (0..b).map(|c| (dot(anchor, a, cand, c) / tau).exp()).sum();
                total += -(pos / den).ln();
            }
        }
        total / (2.0 * b as f64)
    }

    /// Scalar cross-entropy oracle for one (z, q) pair.
    fn ce_oracle(z: &Matrix, c: &Matrix, q: &Matrix, tau: f64) -> f64 {
        let (k, b) = q.shape();
        let mut total = 0.0;
        for s in 0..b {
            let logits: Vec<f64> = (0..k).map(|p| (0..z.rows()).map(|r| z.get(r, s) * c.get(r, p)).sum::<f64>() / tau).collect();
            let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
            for p in 0..k {
                total -= q.get(p, s) * (logits[p] - lse);
            }
        }
        total / b as f64
    }

    #[test]
    fn infonce_two_orthogonal_columns() {
        let z = FeatureMatrix::new(Matrix::identity(2)).unwrap();
        let out = infonce(&z, &z, 1.0).unwrap();
        let want = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((out.value - want).abs() < 1e-15);
        assert!((out.value - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn infonce_limit_and_oracle() {
        let zi = FeatureMatrix::new(Matrix::from_rows(&[&[1.0, -1.0]])).unwrap();
        assert!(infonce(&zi, &zi, 0.01).unwrap().value < 1e-80);
        let mut rng = Rng::new(21);
        let (a, b) = (unit(&mut rng, 5, 6), unit(&mut rng, 5, 6));
        let out = infonce(&a, &b, 0.1).unwrap();
        assert!((out.value - infonce_oracle(a.matrix(), b.matrix(), 0.1)).abs() < 1e-10);
        let one = unit(&mut rng, 5, 1);
        assert!(infonce(&one, &one, 0.1).is_err());
    }

    #[test]
    fn single_stream_perfect_prediction_limit() {
        let bank = PrototypeBank::new(Matrix::identity(3)).unwrap();
        let z = FeatureMatrix::new(Matrix::from_rows(&[&[1.0], &[0.0], &[0.0]])).unwrap();
        let q = AssignmentMatrix::from_targets(&Matrix::from_rows(&[&[1.0], &[0.0], &[0.0]])).unwrap();
        let cfg = LossConfig { temperature: 0.01, ..Default::default() };
        let out = single_stream_loss(&z, &z, &bank, &q, &q, &cfg).unwrap();
        assert!(out.value < 1e-40);
    }

    #[test]
    fn uniform_target_and_scores_give_log_k() {
        let k = 5;
        let mut c = Matrix::zeros(2, k);
        for p in 0..k {
            c.set(0, p, 1.0);
        }
        let bank = PrototypeBank::new(c).unwrap();
        let z = FeatureMatrix::new(Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]])).unwrap();
        let q = AssignmentMatrix::from_targets(&Matrix::filled(k, 2, 1.0 / k as f64)).unwrap();
        let out = single_stream_loss(&z, &z, &bank, &q, &q, &LossConfig::default()).unwrap();
        assert!((out.value - (k as f64).ln()).abs() < 1e-12);
        let cross = cross_stream_loss([&z, &z, &z, &z], &bank, [&q, &q, &q, &q], &LossConfig::default()).unwrap();
        assert!((cross.value - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_targets() {
        let mut rng = Rng::new(1);
        let bank = PrototypeBank::init(3, 4, &mut rng).unwrap();
        let z = unit(&mut rng, 3, 2);
        let bad = AssignmentMatrix::from_plan(Matrix::filled(4, 2, 0.2)).unwrap();
        let err = single_stream_loss(&z, &z, &bank, &bad, &bad, &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::TargetNotNormalized { .. }));
    }

    #[test]
    fn single_stream_matches_scalar_oracle() {
        let mut rng = Rng::new(2);
        let bank = PrototypeBank::init(6, 9, &mut rng).unwrap();
        let (zi, zj) = (unit(&mut rng, 6, 5), unit(&mut rng, 6, 5));
        let sk = SinkhornConfig::default();
        let qi = assign(&crate::model::prototype_scores(&zi, &bank).unwrap(), &sk).unwrap();
        let qj = assign(&crate::model::prototype_scores(&zj, &bank).unwrap(), &sk).unwrap();
        let out = single_stream_loss(&zi, &zj, &bank, &qi, &qj, &LossConfig::default()).unwrap();
        let want = 0.5
            * (ce_oracle(zj.matrix(), &bank.c, &qi.targets(), 0.1) + ce_oracle(zi.matrix(), &bank.c, &qj.targets(), 0.1));
        assert!((out.value - want).abs() < 1e-10);
        assert_eq!(out.terms, 2);
    }

    #[test]
    fn term_counts_per_ablation() {
        let count = |p, a| cross_stream_terms(&LossConfig { prediction_views: p, assignment_views: a, ..Default::default() });
        let full = count(PredictionViews::AllOthers, AssignmentViews::BothStreams);
        assert_eq!(full.len(), 12);
        assert!(full.iter().all(|t| t.predictor != t.target && (t.weight - 1.0 / 12.0).abs() < 1e-15));
        assert_eq!(count(PredictionViews::OtherStreamOnly, AssignmentViews::BothStreams).len(), 8);
        let other = count(PredictionViews::AllOthers, AssignmentViews::OtherStreamOnly);
        assert_eq!(other.len(), 6);
        assert!(other.iter().all(|t| t.target >= T_I));
        assert_eq!(count(PredictionViews::OtherStreamOnly, AssignmentViews::OtherStreamOnly).len(), 4);
    }

    #[test]
    fn identical_views_reduce_to_one_cross_entropy() {
        let mut rng = Rng::new(3);
        let bank = PrototypeBank::init(4, 6, &mut rng).unwrap();
        let z = unit(&mut rng, 4, 3);
        let q = AssignmentMatrix::from_targets(&softmax_cols(&rng.gaussian_matrix(6, 3, 1.0), 1.0).unwrap()).unwrap();
        let cross = cross_stream_loss([&z, &z, &z, &z], &bank, [&q, &q, &q, &q], &LossConfig::default()).unwrap();
        let single = prediction_loss(&z, &bank, &q, 0.1).unwrap();
        assert!((cross.value - single.value).abs() < 1e-12);
    }

    #[test]
    fn frozen_views_get_zero_gradient_but_feed_prototypes() {
        let mut rng = Rng::new(4);
        let bank = PrototypeBank::init(4, 6, &mut rng).unwrap();
        let views: Vec<FeatureMatrix> = (0..4).map(|_| unit(&mut rng, 4, 3)).collect();
        let qs: Vec<AssignmentMatrix> = views
            .iter()
            .map(|v| assign(&crate::model::prototype_scores(v, &bank).unwrap(), &SinkhornConfig::default()).unwrap())
            .collect();
        let cfg = LossConfig::default();
        let out = cross_stream_loss([&views[0], &views[1], &views[2], &views[3]], &bank, [&qs[0], &qs[1], &qs[2], &qs[3]], &cfg).unwrap();
        assert_eq!(out.grad_z[T_I].max_abs(), 0.0);
        assert_eq!(out.grad_z[T_J].max_abs(), 0.0);
        assert!(out.grad_z[S_I].max_abs() > 0.0);
        // Removing the frozen views' contribution changes the prototype gradient.
        let own: Vec<Term> = cross_stream_terms(&cfg).into_iter().filter(|t| t.predictor < 2).collect();
        let targets: Vec<Matrix> = qs.iter().map(|q| q.targets()).collect();
        let partial = prototype_terms(&[&views[0], &views[1], &views[2], &views[3]], &[true, true, false, false], &bank, &targets, &own, 0.1).unwrap();
        assert!(partial.grad_c.unwrap().sub(out.grad_c.as_ref().unwrap()).unwrap().max_abs() > 1e-6);
    }
}
