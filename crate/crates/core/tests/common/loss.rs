use xstream_core::loss::{cross_stream_loss, cross_stream_terms, AssignmentViews, LossConfig, PredictionViews};
use xstream_core::model::{FeatureMatrix, PrototypeBank};
use xstream_core::numerics::{matmul_tn, Matrix, Rng};
use xstream_core::sinkhorn::{assign, AssignmentMatrix, SinkhornConfig};

pub struct Instance {
    pub views: Vec<FeatureMatrix>,
    pub bank: PrototypeBank,
    pub q: Vec<AssignmentMatrix>,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = Rng::new(seed);
    let b = 2 + rng.below(7);
    let d = 2 + rng.below(5);
    let k = 2 + rng.below(9);
    let bank = PrototypeBank::new(rng.gaussian_matrix(d, k, 1.0)).unwrap();
    let views: Vec<FeatureMatrix> = (0..4).map(|_| FeatureMatrix::normalized(&rng.gaussian_matrix(d, b, 1.0)).unwrap()).collect();
    let q = views
        .iter()
        .map(|z| assign(&matmul_tn(&bank.c, z.matrix()).unwrap(), &SinkhornConfig::default()).unwrap())
        .collect();
    Instance { views, bank, q }
}

/// `-mean_b Σ_k target[k,b] log softmax(Cᵀz_b / τ)_k`, written with plain loops.
pub fn scalar_ce(z: &Matrix, c: &Matrix, plan: &Matrix, tau: f64) -> f64 {
    let (d, k, b) = (c.rows(), c.cols(), z.cols());
    let mut total = 0.0;
    for s in 0..b {
        let logits: Vec<f64> = (0..k).map(|j| (0..d).map(|r| c.get(r, j) * z.get(r, s)).sum::<f64>() / tau).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for j in 0..k {
            total -= b as f64 * plan.get(j, s) * (logits[j] - lse);
        }
    }
    total / b as f64
}

/// Enumerates every (assignment, predictor) pair allowed by the view rules.
pub fn enumerated_loss(inst: &Instance, cfg: &LossConfig) -> (f64, usize) {
    let stream = |v: usize| v / 2;
    let targets: Vec<usize> = match cfg.assignment_views {
        AssignmentViews::BothStreams => vec![0, 1, 2, 3],
        AssignmentViews::OtherStreamOnly => vec![2, 3],
    };
    let mut value = 0.0;
    let mut count = 0;
    for &t in &targets {
        let preds: Vec<usize> = (0..4)
            .filter(|&p| p != t)
            .filter(|&p| cfg.prediction_views == PredictionViews::AllOthers || stream(p) != stream(t))
            .collect();
        for &p in &preds {
            value += scalar_ce(inst.views[p].matrix(), &inst.bank.c, inst.q[t].plan(), cfg.temperature)
                / (targets.len() * preds.len()) as f64;
            count += 1;
        }
    }
    (value, count)
}

pub fn all_configs() -> Vec<LossConfig> {
    let mut out = Vec::new();
    for prediction_views in [PredictionViews::AllOthers, PredictionViews::OtherStreamOnly] {
        for assignment_views in [AssignmentViews::BothStreams, AssignmentViews::OtherStreamOnly] {
            out.push(LossConfig { prediction_views, assignment_views, ..LossConfig::default() });
        }
    }
    out
}

/// Largest deviation of the loss from the enumeration over `instances`
/// random instances and every view configuration.
pub fn max_enumeration_deviation(instances: u64) -> Result<f64, String> {
    let mut worst = 0.0_f64;
    for seed in 0..instances {
        let inst = instance(seed);
        for cfg in all_configs() {
            let v = &inst.views;
            let q = &inst.q;
            let out = cross_stream_loss([&v[0], &v[1], &v[2], &v[3]], &inst.bank, [&q[0], &q[1], &q[2], &q[3]], &cfg).map_err(|e| e.to_string())?;
            let (oracle, count) = enumerated_loss(&inst, &cfg);
            if out.terms != count {
                return Err(format!("seed {seed}: {} terms, enumeration has {count}", out.terms));
            }
            worst = worst.max((out.value - oracle).abs());
        }
    }
    Ok(worst)
}

/// Term counts of the full loss and the two ablations.
pub fn term_counts() -> [usize; 3] {
    let count = |p, a| cross_stream_terms(&LossConfig { prediction_views: p, assignment_views: a, ..LossConfig::default() }).len();
    [
        count(PredictionViews::AllOthers, AssignmentViews::BothStreams),
        count(PredictionViews::OtherStreamOnly, AssignmentViews::BothStreams),
        count(PredictionViews::AllOthers, AssignmentViews::OtherStreamOnly),
    ]
}
