//! Synthetic two-view data, augmentations, and dataset files.
//!
//! Each class is a pair of factors `(a, b)`. Stream 1 sees factor `a`
//! amplified and factor `b` attenuated; stream 2 sees the opposite. Both
//! views share a per-sample latent, so each stream carries information the
//! other needs but exposes it only weakly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const DATASET_MAGIC: [u8; 4] = *b"VCCD";
pub const DATASET_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// `(M1, M2)` with `M1 * M2 = num_classes`.
    pub factor_split: (usize, usize),
    pub samples_per_class: usize,
    pub test_per_class: usize,
    /// Latent dimensions per factor.
    pub latent_dim: usize,
    pub view_dims: [usize; 2],
    /// Per-sample noise added in view space (independent across streams).
    pub view_noise_sd: f64,
    pub nuisance_dims: [usize; 2],
    pub nuisance_sd: f64,
    /// Per-sample latent noise shared by both streams; scaled by the
    /// factor gains together with the class codes.
    pub latent_noise_sd: f64,
    /// Extra latent noise drawn independently for the alternate clip.
    pub clip_noise_sd: f64,
    /// Gain applied to a stream's own factor code.
    pub strong_gain: f64,
    /// Per stream, the gain applied to the other stream's factor code.
    pub weak_gain: [f64; 2],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            factor_split: (4, 2),
            samples_per_class: 256,
            test_per_class: 64,
            latent_dim: 8,
            view_dims: [32, 32],
            view_noise_sd: 0.5,
            nuisance_dims: [16, 16],
            nuisance_sd: 0.1,
            latent_noise_sd: 0.3,
            clip_noise_sd: 0.3,
            strong_gain: 1.0,
            weak_gain: [0.2, 0.35],
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (m1, m2) = self.factor_split;
        if m1 * m2 != self.num_classes || m1 == 0 || m2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "factor split {m1}x{m2} does not factor {} classes",
                self.num_classes
            )));
        }
        if self.latent_dim == 0 || self.view_dims.contains(&0) || self.samples_per_class == 0 {
            return Err(Error::InvalidArgument("dimensions and sample counts must be at least 1".into()));
        }
        let sds = [
            self.view_noise_sd,
            self.nuisance_sd,
            self.latent_noise_sd,
            self.clip_noise_sd,
            self.strong_gain,
            self.weak_gain[0],
            self.weak_gain[1],
        ];
        if sds.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("noise levels and gains must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn input_dims(&self) -> [usize; 2] {
        [self.view_dims[0] + self.nuisance_dims[0], self.view_dims[1] + self.nuisance_dims[1]]
    }
}

/// One split: per-stream sample matrices (dim × N), an optional alternate
/// clip per sample, and class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub views: [Matrix; 2],
    pub alt_views: Option<[Matrix; 2]>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.views[0].cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    fn select(&self, idx: &[usize]) -> Split {
        Split {
            views: [self.views[0].select_cols(idx), self.views[1].select_cols(idx)],
            alt_views: self.alt_views.as_ref().map(|a| [a[0].select_cols(idx), a[1].select_cols(idx)]),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn input_dims(&self) -> [usize; 2] {
        [self.train.views[0].rows(), self.train.views[1].rows()]
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes().max(self.test.num_classes())
    }
}

fn round_f32(m: Matrix) -> Matrix {
    m.map(|x| x as f32 as f64)
}

/// Draws the factorised two-view dataset described by `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (m1, m2) = spec.factor_split;
    let l = spec.latent_dim;
    let mut rng = Rng::derive(spec.seed, 0x6461_7461);

    let codes_a = rng.gaussian_matrix(l, m1, 1.0);
    let codes_b = rng.gaussian_matrix(l, m2, 1.0);
    // Mixing matrices: view_dim × 2l, one per stream.
    let mixing: Vec<Matrix> = (0..2)
        .map(|s| rng.gaussian_matrix(spec.view_dims[s], 2 * l, (1.0 / (2 * l) as f64).sqrt()))
        .collect();
    let gains = [
        [spec.strong_gain, spec.weak_gain[0]],
        [spec.weak_gain[1], spec.strong_gain],
    ];

    let make = |per_class: usize, rng: &mut Rng| -> Result<Split> {
        let n = per_class * spec.num_classes;
        let dims = spec.input_dims();
        let mut views = [Matrix::zeros(dims[0], n), Matrix::zeros(dims[1], n)];
        let mut alts = [Matrix::zeros(dims[0], n), Matrix::zeros(dims[1], n)];
        let mut labels = Vec::with_capacity(n);
        let mut col = 0;
        for class in 0..spec.num_classes {
            let (a, b) = (class / m2, class % m2);
            for _ in 0..per_class {
                let mut code = vec![0.0; 2 * l];
                for d in 0..l {
                    code[d] = codes_a.get(d, a);
                    code[l + d] = codes_b.get(d, b);
                }
                // Instance noise is shared by both streams.
                let noise: Vec<f64> = (0..2 * l).map(|_| spec.latent_noise_sd * rng.normal()).collect();
                let clips: Vec<Vec<f64>> = (0..2)
                    .map(|clip| {
                        if clip == 0 {
                            noise.clone()
                        } else {
                            noise.iter().map(|u| u + spec.clip_noise_sd * rng.normal()).collect()
                        }
                    })
                    .collect();
                for s in 0..2 {
                    let view_noise: Vec<f64> = (0..spec.view_dims[s]).map(|_| spec.view_noise_sd * rng.normal()).collect();
                    let nuisance: Vec<f64> = (0..spec.nuisance_dims[s]).map(|_| spec.nuisance_sd * rng.normal()).collect();
                    for (clip, xi) in clips.iter().enumerate() {
                        let target = if clip == 0 { &mut views[s] } else { &mut alts[s] };
                        for r in 0..spec.view_dims[s] {
                            let mut v = view_noise[r];
                            for d in 0..2 * l {
                                let gain = gains[s][d / l];
                                v += mixing[s].get(r, d) * gain * (code[d] + xi[d]);
                            }
                            target.set(r, col, v);
                        }
                        for (j, &x) in nuisance.iter().enumerate() {
                            target.set(spec.view_dims[s] + j, col, x);
                        }
                    }
                }
                labels.push(class);
                col += 1;
            }
        }
        let [v0, v1] = views;
        let [a0, a1] = alts;
        Ok(Split {
            views: [round_f32(v0), round_f32(v1)],
            alt_views: Some([round_f32(a0), round_f32(a1)]),
            labels,
        })
    };
    let train = make(spec.samples_per_class, &mut rng)?;
    let test = make(spec.test_per_class, &mut rng)?;
    Ok(Dataset { train, test })
}

/// Per-sample `(a, b)` factor labels for a class id under `split`.
pub fn factor_labels(labels: &[usize], split: (usize, usize)) -> (Vec<usize>, Vec<usize>) {
    labels.iter().map(|&c| (c / split.1, c % split.1)).unzip()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub additive_noise_sd: f64,
    /// Probability of zeroing each coordinate.
    pub mask_prob: f64,
    /// Per-sample scale drawn from `[1 - scale_jitter, 1 + scale_jitter]`.
    pub scale_jitter: f64,
    /// Probability that the second view comes from the alternate clip.
    pub temporal_prob: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self { additive_noise_sd: 0.3, mask_prob: 0.1, scale_jitter: 0.2, temporal_prob: 0.5 }
    }
}

impl AugmentationSpec {
    pub fn none() -> Self {
        Self { additive_noise_sd: 0.0, mask_prob: 0.0, scale_jitter: 0.0, temporal_prob: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.mask_prob, self.temporal_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("augmentation probabilities must lie in [0, 1]".into()));
        }
        if !(self.additive_noise_sd >= 0.0) || !(0.0..=1.0).contains(&self.scale_jitter) {
            return Err(Error::InvalidArgument("noise sd must be >= 0 and scale jitter in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Random scale, coordinate dropout, and additive noise; a fresh draw per call.
pub fn augment(x: &Matrix, spec: &AugmentationSpec, rng: &mut Rng) -> Matrix {
    let mut out = x.clone();
    for c in 0..x.cols() {
        let scale = if spec.scale_jitter > 0.0 { rng.uniform_range(1.0 - spec.scale_jitter, 1.0 + spec.scale_jitter) } else { 1.0 };
        for r in 0..x.rows() {
            let v = if spec.mask_prob > 0.0 && rng.bernoulli(spec.mask_prob) {
                0.0
            } else {
                let noise = if spec.additive_noise_sd > 0.0 { spec.additive_noise_sd * rng.normal() } else { 0.0 };
                scale * x.get(r, c) + noise
            };
            out.set(r, c, v);
        }
    }
    out
}

/// Paired augmented views of one mini-batch. Column `b` of every matrix
/// originates from the same underlying sample.
#[derive(Clone, Debug)]
pub struct TwoStreamBatch {
    pub x1_i: Matrix,
    pub x1_j: Matrix,
    pub x2_i: Matrix,
    pub x2_j: Matrix,
    pub labels: Vec<usize>,
}

impl TwoStreamBatch {
    pub fn stream(&self, s: usize) -> (&Matrix, &Matrix) {
        if s == 0 {
            (&self.x1_i, &self.x1_j)
        } else {
            (&self.x2_i, &self.x2_j)
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Builds one augmented batch from the samples at `idx`.
pub fn make_batch(split: &Split, idx: &[usize], aug: &AugmentationSpec, rng: &mut Rng) -> TwoStreamBatch {
    let part = split.select(idx);
    // The temporal choice is per sample and shared by both streams.
    let use_alt: Vec<bool> = (0..idx.len()).map(|_| part.alt_views.is_some() && rng.bernoulli(aug.temporal_prob)).collect();
    let second = |s: usize| -> Matrix {
        match &part.alt_views {
            Some(alt) if use_alt.iter().any(|&u| u) => {
                let mut m = part.views[s].clone();
                for (c, _) in use_alt.iter().enumerate().filter(|(_, &u)| u) {
                    m.set_col(c, &alt[s].col(c));
                }
                m
            }
            _ => part.views[s].clone(),
        }
    };
    let (second0, second1) = (second(0), second(1));
    TwoStreamBatch {
        x1_i: augment(&part.views[0], aug, rng),
        x1_j: augment(&second0, aug, rng),
        x2_i: augment(&part.views[1], aug, rng),
        x2_j: augment(&second1, aug, rng),
        labels: part.labels,
    }
}

/// Shuffled batch index lists for one epoch; a trailing partial batch is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let bs = batch_size.clamp(1, n);
    let perm = rng.permutation(n);
    Ok(perm.chunks_exact(bs).map(<[usize]>::to_vec).collect())
}

// --- VCCD files -----------------------------------------------------------
//
// magic "VCCD" | u16 version | u32 streams | u32 samples | u32 dim per stream
// | u32 label_count | u32 train_count | u32 clips | f32 blocks (clip-major,
// then stream, then sample-major) | u32 labels. All little-endian.

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::DimOverflow(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_dataset(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    let n_train = ds.train.len();
    let n = n_train + ds.test.len();
    let dims = ds.input_dims();
    let clips = if ds.train.alt_views.is_some() && ds.test.alt_views.is_some() { 2 } else { 1 };
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    put_u32(w, 2)?;
    put_u32(w, n)?;
    put_u32(w, dims[0])?;
    put_u32(w, dims[1])?;
    put_u32(w, n)?;
    put_u32(w, n_train)?;
    put_u32(w, clips)?;
    for clip in 0..clips {
        for s in 0..2 {
            for split in [&ds.train, &ds.test] {
                let m = if clip == 0 { &split.views[s] } else { &split.alt_views.as_ref().expect("clips checked")[s] };
                for c in 0..m.cols() {
                    for r in 0..m.rows() {
                        w.write_all(&(m.get(r, c) as f32).to_le_bytes())?;
                    }
                }
            }
        }
    }
    for split in [&ds.train, &ds.test] {
        for &l in &split.labels {
            put_u32(w, l)?;
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic { expected: DATASET_MAGIC, found: magic });
    }
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let streams = r.u32("header")? as usize;
    if streams != 2 {
        return Err(Error::Malformed(format!("expected 2 streams, found {streams}")));
    }
    let n = r.u32("header")? as usize;
    let dims = [r.u32("header")? as usize, r.u32("header")? as usize];
    let label_count = r.u32("header")? as usize;
    let n_train = r.u32("header")? as usize;
    let clips = r.u32("header")? as usize;
    if label_count != n || n_train > n || !(1..=2).contains(&clips) {
        return Err(Error::Malformed(format!(
            "inconsistent header: samples={n} labels={label_count} train={n_train} clips={clips}"
        )));
    }
    let floats = (dims[0] + dims[1])
        .checked_mul(n)
        .and_then(|x| x.checked_mul(clips))
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(4 * label_count))
        .ok_or_else(|| Error::DimOverflow(format!("{n} samples of dims {dims:?}")))?;
    if floats > r.remaining() {
        return Err(Error::Truncated("sample data"));
    }

    let mut blocks: Vec<[Matrix; 2]> = Vec::with_capacity(clips);
    for _ in 0..clips {
        let mut pair = [Matrix::zeros(dims[0], n), Matrix::zeros(dims[1], n)];
        for (s, m) in pair.iter_mut().enumerate() {
            for c in 0..n {
                for row in 0..dims[s] {
                    let v = f32::from_le_bytes(r.take(4, "sample data")?.try_into().expect("4 bytes"));
                    if !v.is_finite() {
                        return Err(Error::Malformed("non-finite sample value".into()));
                    }
                    m.set(row, c, v as f64);
                }
            }
        }
        blocks.push(pair);
    }
    let labels = (0..n).map(|_| r.u32("labels").map(|l| l as usize)).collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }

    let split = |range: std::ops::Range<usize>| -> Split {
        let idx: Vec<usize> = range.clone().collect();
        let pick = |p: &[Matrix; 2]| [p[0].select_cols(&idx), p[1].select_cols(&idx)];
        Split {
            views: pick(&blocks[0]),
            alt_views: blocks.get(1).map(pick),
            labels: labels[range].to_vec(),
        }
    };
    Ok(Dataset { train: split(0..n_train), test: split(n_train..n) })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_dataset(&bytes)
}

/// Reads a hand-made CSV fixture. Header: `stream,x0,...,x{n-1},label`.
/// Rows carry `stream` 1 or 2; a stream's dimension is its number of
/// non-empty value fields. The i-th stream-1 row pairs with the i-th
/// stream-2 row. Everything lands in the training split.
pub fn import_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_path(path)?;
    let mut cols: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut labels: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let bad = |what: &str| Error::Malformed(format!("csv line {:?}: {what}", record.position().map(|p| p.line())));
        let stream: usize = field(0).parse().map_err(|_| bad("stream must be 1 or 2"))?;
        if !(1..=2).contains(&stream) {
            return Err(bad("stream must be 1 or 2"));
        }
        let last = record.len() - 1;
        let label: usize = field(last).parse().map_err(|_| bad("bad label"))?;
        let values = (1..last)
            .map(field)
            .filter(|f| !f.is_empty())
            .map(|f| f.parse::<f64>().map_err(|_| bad("bad value")))
            .collect::<Result<Vec<_>>>()?;
        cols[stream - 1].push(values);
        labels[stream - 1].push(label);
    }
    if cols[0].is_empty() {
        return Err(Error::EmptyDataset);
    }
    if labels[0] != labels[1] {
        return Err(Error::Malformed("stream 1 and stream 2 rows do not pair up".into()));
    }
    let views = [Matrix::from_cols(&cols[0])?, Matrix::from_cols(&cols[1])?];
    let [l0, _] = labels;
    let test = Split {
        views: [Matrix::zeros(views[0].rows(), 0), Matrix::zeros(views[1].rows(), 0)],
        alt_views: None,
        labels: Vec::new(),
    };
    Ok(Dataset { train: Split { views, alt_views: None, labels: l0 }, test })
}
