//! Per-stream encoder (rectified-linear MLP with a linear projection and
//! l2-normalised output) and the trainable prototype bank.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_cols, matmul, matmul_nt, matmul_tn, Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Widths of the rectified-linear hidden layers.
    pub hidden: Vec<usize>,
    /// Embedding (and prototype) dimension.
    pub embed_dim: usize,
    /// Number of prototypes per stream.
    pub prototypes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], embed_dim: 128, prototypes: 300 }
    }
}

/// Unit-norm embedding columns, one per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix(Matrix);

impl FeatureMatrix {
    /// Wraps a matrix whose columns are already unit-norm (to 1e-10).
    pub fn new(z: Matrix) -> Result<Self> {
        if let Some(col) = z.col_norms().iter().position(|n| (n - 1.0).abs() > 1e-10) {
            return Err(Error::InvalidArgument(format!("feature column {col} is not unit-norm")));
        }
        Ok(Self(z))
    }

    pub fn normalized(m: &Matrix) -> Result<Self> {
        l2_normalize_cols(m).map(Self)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn len(&self) -> usize {
        self.0.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.0.cols() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// out × in
    pub weight: Matrix,
    /// out × 1
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    input_dim: usize,
    pub layers: Vec<Layer>,
}

/// Which activations an evaluation reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Last hidden activation, i.e. the output before the projection layer.
    #[default]
    PreHead,
    /// Normalised projection output.
    Head,
}

/// Cached intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    /// Input to each layer; `inputs[0]` is the raw batch.
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix>,
    /// Output before normalisation.
    raw: Matrix,
    z: Matrix,
}

impl ForwardTape {
    pub fn raw_output(&self) -> &Matrix {
        &self.raw
    }

    /// Input to the final (projection) layer.
    pub fn pre_head(&self) -> &Matrix {
        self.inputs.last().unwrap_or(&self.raw)
    }
}

/// Gradients in parameter order `[w0, b0, w1, b1, ...]` plus the input gradient.
#[derive(Clone, Debug)]
pub struct EncoderGrads {
    pub params: Vec<Matrix>,
    pub input: Matrix,
}

fn add_bias(a: &mut Matrix, bias: &Matrix) {
    let cols = a.cols();
    for r in 0..a.rows() {
        let b = bias.get(r, 0);
        for x in &mut a.data_mut()[r * cols..(r + 1) * cols] {
            *x += b;
        }
    }
}

impl EncoderParams {
    /// He-initialised hidden layers followed by a linear projection.
    pub fn init(input_dim: usize, hidden: &[usize], embed_dim: usize, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &width in hidden.iter().chain(std::iter::once(&embed_dim)) {
            let sd = if layers.len() < hidden.len() { (2.0 / fan_in as f64).sqrt() } else { (1.0 / fan_in as f64).sqrt() };
            layers.push(Layer { weight: rng.gaussian_matrix(width, fan_in, sd), bias: Matrix::zeros(width, 1) });
            fan_in = width;
        }
        Self { input_dim, layers }
    }

    /// Encoder with no layers: output is the normalised input.
    pub fn identity(input_dim: usize) -> Self {
        Self { input_dim, layers: Vec::new() }
    }

    pub fn from_layers(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut fan_in = input_dim;
        for l in &layers {
            if l.weight.cols() != fan_in || l.bias.shape() != (l.weight.rows(), 1) {
                return Err(Error::ShapeMismatch { op: "encoder layers", left: (fan_in, 1), right: l.weight.shape() });
            }
            fan_in = l.weight.rows();
        }
        Ok(Self { input_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.weight.rows())
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Marks which parameter tensors are weights (subject to weight decay).
    pub fn weight_mask(&self) -> Vec<bool> {
        self.layers.iter().flat_map(|_| [true, false]).collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(FeatureMatrix, ForwardTape)> {
        if x.rows() != self.input_dim {
            return Err(Error::ShapeMismatch { op: "encoder forward", left: (self.input_dim, 0), right: x.shape() });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut a = matmul(&layer.weight, &h)?;
            add_bias(&mut a, &layer.bias);
            inputs.push(h);
            h = if i + 1 < self.layers.len() { a.map(|v| v.max(0.0)) } else { a.clone() };
            pre.push(a);
        }
        let raw = h;
        let z = l2_normalize_cols(&raw)?;
        let tape = ForwardTape { inputs, pre, raw, z: z.clone() };
        Ok((FeatureMatrix(z), tape))
    }

    /// Features for evaluation.
    pub fn embed(&self, x: &Matrix, source: FeatureSource) -> Result<Matrix> {
        let (z, tape) = self.forward(x)?;
        Ok(match source {
            FeatureSource::Head => z.into_matrix(),
            FeatureSource::PreHead if self.layers.len() >= 2 => tape.pre_head().clone(),
            FeatureSource::PreHead => z.into_matrix(),
        })
    }

    /// Backpropagates `grad_z` (gradient w.r.t. the normalised output)
    /// through the normalisation and every layer.
    pub fn backward(&self, tape: &ForwardTape, grad_z: &Matrix) -> Result<EncoderGrads> {
        if grad_z.shape() != tape.z.shape() || tape.pre.len() != self.layers.len() {
            return Err(Error::ShapeMismatch { op: "encoder backward", left: tape.z.shape(), right: grad_z.shape() });
        }
        // d(v/|v|)/dv = (I - z zᵀ) / |v|
        let norms = tape.raw.col_norms();
        let mut dots = vec![0.0; grad_z.cols()];
        for r in 0..grad_z.rows() {
            for (c, d) in dots.iter_mut().enumerate() {
                *d += tape.z.get(r, c) * grad_z.get(r, c);
            }
        }
        let mut g = Matrix::zeros(grad_z.rows(), grad_z.cols());
        for r in 0..g.rows() {
            for c in 0..g.cols() {
                g.set(r, c, (grad_z.get(r, c) - tape.z.get(r, c) * dots[c]) / norms[c]);
            }
        }

        let mut params = vec![Matrix::zeros(0, 0); 2 * self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                let pre = &tape.pre[i];
                for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
                    if p <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            params[2 * i] = matmul_nt(&g, &tape.inputs[i])?;
            params[2 * i + 1] = Matrix::new(g.rows(), 1, g.row_sums())?;
            g = matmul_tn(&layer.weight, &g)?;
        }
        Ok(EncoderGrads { params, input: g })
    }
}

/// K unit-norm prototype columns in the embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub c: Matrix,
    pub frozen: bool,
}

impl PrototypeBank {
    pub fn init(dim: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        let c = l2_normalize_cols(&rng.gaussian_matrix(dim, k, 1.0))?;
        Ok(Self { c, frozen: false })
    }

    pub fn new(c: Matrix) -> Result<Self> {
        Ok(Self { c: l2_normalize_cols(&c)?, frozen: false })
    }

    pub fn k(&self) -> usize {
        self.c.cols()
    }

    pub fn dim(&self) -> usize {
        self.c.rows()
    }

    pub fn renormalize(&mut self) -> Result<()> {
        self.c = l2_normalize_cols(&self.c)?;
        Ok(())
    }
}

/// `Cᵀ Z`: entry (k, b) is the cosine similarity of prototype k and sample b.
pub fn prototype_scores(z: &FeatureMatrix, bank: &PrototypeBank) -> Result<Matrix> {
    if z.dim() != bank.dim() {
        return Err(Error::ShapeMismatch { op: "prototype_scores", left: bank.c.shape(), right: z.0.shape() });
    }
    matmul_tn(&bank.c, &z.0)
}
