//! Central finite-difference checks of every analytic gradient: encoder
//! parameters through the output normalisation, and the prototypes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{self, AssignmentViews, LossConfig, LossMode, PredictionViews};
use crate::model::{prototype_scores, EncoderParams, FeatureMatrix, PrototypeBank};
use crate::numerics::{Matrix, Rng};
use crate::sinkhorn::{self, AssignmentMatrix, SinkhornConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMode {
    Infonce,
    SingleStream,
    CrossStream,
}

impl CheckMode {
    pub const ALL: [CheckMode; 3] = [CheckMode::Infonce, CheckMode::SingleStream, CheckMode::CrossStream];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub modes: Vec<CheckMode>,
    pub seeds: Vec<u64>,
    /// Hidden-layer counts to exercise.
    pub depths: Vec<usize>,
    pub tolerance: f64,
    pub step: f64,
    /// Negates the first analytic tensor so the check must fail.
    pub sign_flip: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { modes: CheckMode::ALL.to_vec(), seeds: (0..10).collect(), depths: vec![0, 1, 2], tolerance: 1e-4, step: 1e-5, sign_flip: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub mode: CheckMode,
    pub seed: u64,
    pub depth: usize,
    pub tensor: String,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub results: Vec<CheckResult>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|)` over whole tensors; zero when both vanish.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = analytic.sub(numeric).map_or(f64::INFINITY, |d| d.frobenius_norm());
    let scale = analytic.frobenius_norm().max(numeric.frobenius_norm());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// A small random problem for one check.
struct Problem {
    enc: EncoderParams,
    other: EncoderParams,
    bank: PrototypeBank,
    x: [Matrix; 4],
    targets: Vec<AssignmentMatrix>,
    loss: LossConfig,
}

const INPUT: usize = 5;
const EMBED: usize = 4;
const PROTOTYPES: usize = 6;
const BATCH: usize = 4;

fn random_encoder(depth: usize, rng: &mut Rng) -> EncoderParams {
    let hidden: Vec<usize> = [6, 5].iter().copied().take(depth).collect();
    let mut enc = EncoderParams::init(INPUT, &hidden, EMBED, rng);
    // Non-zero biases so their gradients are exercised too.
    for layer in &mut enc.layers {
        layer.bias = rng.gaussian_matrix(layer.bias.rows(), 1, 0.1);
    }
    enc
}

impl Problem {
    fn new(mode: CheckMode, seed: u64, depth: usize) -> Result<Self> {
        let mut rng = Rng::derive(seed, 0x6772_6164 + depth as u64);
        let enc = random_encoder(depth, &mut rng);
        let other = random_encoder(depth, &mut rng);
        let bank = PrototypeBank::init(EMBED, PROTOTYPES, &mut rng)?;
        let x = [0, 1, 2, 3].map(|_| rng.gaussian_matrix(INPUT, BATCH, 1.0));
        let loss = LossConfig {
            temperature: 0.1,
            mode: LossMode::CrossStream,
            prediction_views: PredictionViews::AllOthers,
            assignment_views: AssignmentViews::BothStreams,
        };
        let mut p = Self { enc, other, bank, x, targets: Vec::new(), loss };
        // Targets are computed once at the base point and then held fixed.
        if mode != CheckMode::Infonce {
            let z = p.views(&p.enc)?;
            let sk = SinkhornConfig::default();
            p.targets = z.iter().map(|v| sinkhorn::assign(&prototype_scores(v, &p.bank)?, &sk)).collect::<Result<_>>()?;
        }
        Ok(p)
    }

    fn views(&self, enc: &EncoderParams) -> Result<Vec<FeatureMatrix>> {
        Ok(vec![
            enc.forward(&self.x[0])?.0,
            enc.forward(&self.x[1])?.0,
            self.other.forward(&self.x[2])?.0,
            self.other.forward(&self.x[3])?.0,
        ])
    }

    fn evaluate(&self, mode: CheckMode, enc: &EncoderParams, bank: &PrototypeBank) -> Result<loss::LossOutput> {
        let z = self.views(enc)?;
        match mode {
            CheckMode::Infonce => loss::infonce(&z[0], &z[1], self.loss.temperature),
            CheckMode::SingleStream => loss::single_stream_loss(&z[0], &z[1], bank, &self.targets[0], &self.targets[1], &self.loss),
            CheckMode::CrossStream => {
                let t = &self.targets;
                loss::cross_stream_loss([&z[0], &z[1], &z[2], &z[3]], bank, [&t[0], &t[1], &t[2], &t[3]], &self.loss)
            }
        }
    }

    /// Analytic gradients, named, in a fixed order.
    fn analytic(&self, mode: CheckMode) -> Result<Vec<(String, Matrix)>> {
        let out = self.evaluate(mode, &self.enc, &self.bank)?;
        let (_, tape_i) = self.enc.forward(&self.x[0])?;
        let (_, tape_j) = self.enc.forward(&self.x[1])?;
        let gi = self.enc.backward(&tape_i, &out.grad_z[0])?.params;
        let gj = self.enc.backward(&tape_j, &out.grad_z[1])?.params;
        let mut named: Vec<(String, Matrix)> =
            gi.iter().zip(&gj).enumerate().map(|(k, (a, b))| Ok((param_name(k), a.add(b)?))).collect::<Result<_>>()?;
        if let Some(gc) = out.grad_c {
            named.push(("prototypes".into(), gc));
        }
        Ok(named)
    }

    fn numeric(&self, mode: CheckMode, which: usize, h: f64) -> Result<Matrix> {
        let n_params = self.enc.params().len();
        let shape = if which < n_params { self.enc.params()[which].shape() } else { self.bank.c.shape() };
        let mut out = Matrix::zeros(shape.0, shape.1);
        for idx in 0..shape.0 * shape.1 {
            let at = |delta: f64| -> Result<f64> {
                let mut enc = self.enc.clone();
                let mut bank = self.bank.clone();
                let m: &mut Matrix = if which < n_params { enc.params_mut().swap_remove(which) } else { &mut bank.c };
                m.data_mut()[idx] += delta;
                Ok(self.evaluate(mode, &enc, &bank)?.value)
            };
            out.data_mut()[idx] = (at(h)? - at(-h)?) / (2.0 * h);
        }
        Ok(out)
    }
}

fn param_name(k: usize) -> String {
    format!("layer{}.{}", k / 2, if k.is_multiple_of(2) { "weight" } else { "bias" })
}

pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0 && cfg.tolerance > 0.0) {
        return Err(Error::InvalidArgument("grad-check step and tolerance must be positive".into()));
    }
    if cfg.depths.iter().any(|&d| d > 2) {
        return Err(Error::InvalidArgument("grad-check supports depths 0 to 2".into()));
    }
    let mut results = Vec::new();
    for &mode in &cfg.modes {
        for &seed in &cfg.seeds {
            for &depth in &cfg.depths {
                let p = Problem::new(mode, seed, depth)?;
                let mut analytic = p.analytic(mode)?;
                if cfg.sign_flip {
                    if let Some((_, g)) = analytic.first_mut() {
                        *g = g.scale(-1.0);
                    }
                }
                for (which, (name, g)) in analytic.iter().enumerate() {
                    let rel_error = relative_error(g, &p.numeric(mode, which, cfg.step)?);
                    results.push(CheckResult { mode, seed, depth, tensor: name.clone(), rel_error, passed: rel_error <= cfg.tolerance });
                }
            }
        }
    }
    let max_rel_error = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let passed = results.iter().all(|r| r.passed);
    Ok(GradCheckReport { results, max_rel_error, passed })
}
