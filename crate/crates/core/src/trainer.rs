//! Two-stage training: each stream alone, then alternating cross-stream
//! phases where one encoder learns from the other's frozen views.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Tensor;
use crate::data::{epoch_batches, make_batch, AugmentationSpec, Dataset, Split, TwoStreamBatch};
use crate::error::{Error, Result};
use crate::eval::{self, ClusterReport, LinearProbe, ProbeConfig, RetrievalReport};
use crate::loss::{self, LossConfig, LossMode, LossOutput};
use crate::model::{prototype_scores, EncoderParams, FeatureMatrix, FeatureSource, ForwardTape, ModelConfig, PrototypeBank};
use crate::numerics::{matmul_tn, softmax_cols, Matrix, Rng};
use crate::sinkhorn::{self, argmax_cols, AssignmentMatrix, SinkhornConfig};

/// How per-sample targets are produced from prototype scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Equipartitioned Sinkhorn assignments.
    #[default]
    Sinkhorn,
    /// Column softmax of the scores at the Sinkhorn temperature, with no
    /// equipartition constraint.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub features: FeatureSource,
    pub ks: Vec<usize>,
    /// Number of evaluation prototypes; defaults to the class count.
    pub k_eval: Option<usize>,
    pub cluster_epochs: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { features: FeatureSource::PreHead, ks: eval::DEFAULT_KS.to_vec(), k_eval: None, cluster_epochs: 10, probe: ProbeConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub cycle_epochs: usize,
    pub cycles: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub final_lr_fraction: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Stage-1 epochs during which prototypes stay fixed.
    pub proto_freeze_epochs: usize,
    pub queue_len: usize,
    /// Per stream.
    pub queue_start_epoch_stage1: [usize; 2],
    pub queue_start_epoch_stage2: usize,
    pub seed: u64,
    pub fresh_prototypes: bool,
    pub targets: TargetMode,
    /// Worker threads for view forwards; 1 is fully sequential.
    pub threads: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub sinkhorn: SinkhornConfig,
    pub augment: AugmentationSpec,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 60,
            cycle_epochs: 20,
            cycles: 2,
            batch_size: 128,
            lr: 0.3,
            final_lr_fraction: 1e-3,
            weight_decay: 1e-6,
            momentum: 0.9,
            proto_freeze_epochs: 10,
            queue_len: 512,
            queue_start_epoch_stage1: [30, 40],
            queue_start_epoch_stage2: 5,
            seed: 7,
            fresh_prototypes: false,
            targets: TargetMode::Sinkhorn,
            threads: 1,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            augment: AugmentationSpec::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad(format!("final_lr_fraction must lie in (0, 1], got {}", self.final_lr_fraction));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight_decay must be >= 0 and momentum in [0, 1)".into());
        }
        if self.batch_size == 0 || self.threads == 0 {
            return bad("batch_size and threads must be positive".into());
        }
        if self.model.prototypes < 2 || self.model.embed_dim == 0 {
            return bad("need at least two prototypes and a positive embedding size".into());
        }
        if self.eval.ks.is_empty() {
            return bad("eval.ks must not be empty".into());
        }
        self.loss.validate()?;
        self.sinkhorn.validate()?;
        self.augment.validate()
    }

    /// Learning rate at step `t` of a phase with `total` steps.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        cosine_lr(self.lr, self.lr * self.final_lr_fraction, t, total)
    }
}

/// Cosine decay from `start` at step 0 to `end` at step `total - 1`.
pub fn cosine_lr(start: f64, end: f64, t: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let frac = t.min(total - 1) as f64 / (total - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (PI * frac).cos())
}

/// `v ← momentum·v + g + wd·p; p ← p − lr·v` for each tensor.
pub fn sgd_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    velocity: &mut [Matrix],
    lr: f64,
    momentum: f64,
    weight_decay: &[f64],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() || params.len() != weight_decay.len() {
        return Err(Error::InvalidArgument(format!(
            "sgd_step got {} params, {} grads, {} velocities, {} decay factors",
            params.len(),
            grads.len(),
            velocity.len(),
            weight_decay.len()
        )));
    }
    for (((p, g), v), &wd) in params.iter_mut().zip(grads).zip(velocity.iter_mut()).zip(weight_decay) {
        p.same_shape(g, "sgd_step")?;
        p.same_shape(v, "sgd_step")?;
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Which stream a phase optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    First,
    Second,
}

impl Stream {
    pub const BOTH: [Stream; 2] = [Stream::First, Stream::Second];

    pub fn index(self) -> usize {
        match self {
            Stream::First => 0,
            Stream::Second => 1,
        }
    }

    pub fn other(self) -> Stream {
        match self {
            Stream::First => Stream::Second,
            Stream::Second => Stream::First,
        }
    }

    /// 1-based number used in labels.
    pub fn number(self) -> usize {
        self.index() + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Stage1(Stream),
    Cycle { cycle: usize, stream: Stream },
}

impl Phase {
    pub fn stream(self) -> Stream {
        match self {
            Phase::Stage1(s) | Phase::Cycle { stream: s, .. } => s,
        }
    }

    pub fn label(self) -> String {
        match self {
            Phase::Stage1(s) => format!("stage1_s{}", s.number()),
            Phase::Cycle { cycle, stream } => format!("cycle{}_s{}", cycle, stream.number()),
        }
    }

    /// Position in the full schedule; used to derive per-phase RNG streams.
    pub fn ordinal(self) -> u64 {
        match self {
            Phase::Stage1(s) => s.index() as u64,
            Phase::Cycle { cycle, stream } => 2 * cycle as u64 + stream.index() as u64,
        }
    }
}

/// Stage 1 for both streams followed by `cycles` alternations.
pub fn phase_sequence(cycles: usize) -> Vec<Phase> {
    let mut phases = vec![Phase::Stage1(Stream::First), Phase::Stage1(Stream::Second)];
    for cycle in 1..=cycles {
        phases.extend(Stream::BOTH.map(|stream| Phase::Cycle { cycle, stream }));
    }
    phases
}

/// Bounded FIFO of feature columns. Each column carries the insertion tag
/// it was pushed with.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    columns: VecDeque<(u64, Vec<f64>)>,
    next_tag: u64,
}

impl FeatureQueue {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, columns: VecDeque::with_capacity(capacity), next_tag: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn push(&mut self, feats: &Matrix) {
        for c in 0..feats.cols() {
            let tag = self.next_tag;
            self.next_tag += 1;
            if self.capacity == 0 {
                continue;
            }
            if self.columns.len() == self.capacity {
                self.columns.pop_front();
            }
            self.columns.push_back((tag, feats.col(c)));
        }
    }

    /// Tags in storage order, oldest first.
    pub fn tags(&self) -> Vec<u64> {
        self.columns.iter().map(|(t, _)| *t).collect()
    }

    /// Stored features as columns, oldest first.
    pub fn matrix(&self) -> Option<Matrix> {
        if self.columns.is_empty() {
            return None;
        }
        let cols: Vec<Vec<f64>> = self.columns.iter().map(|(_, c)| c.clone()).collect();
        Matrix::from_cols(&cols).ok()
    }

    pub fn clear(&mut self) {
        self.columns.clear();
    }
}

/// One stream's encoder, prototypes and optimiser buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamModel {
    pub encoder: EncoderParams,
    pub bank: PrototypeBank,
    pub encoder_velocity: Vec<Matrix>,
    pub bank_velocity: Matrix,
    /// Set once Stage 1 has run for this stream.
    pub initialized: bool,
}

impl StreamModel {
    fn new(encoder: EncoderParams, bank: PrototypeBank) -> Self {
        let encoder_velocity = encoder.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        let bank_velocity = Matrix::zeros(bank.dim(), bank.k());
        Self { encoder, bank, encoder_velocity, bank_velocity, initialized: false }
    }

    fn reset_velocity(&mut self) {
        self.encoder_velocity.iter_mut().for_each(|v| v.data_mut().fill(0.0));
        self.bank_velocity.data_mut().fill(0.0);
    }

    /// Bit pattern checksum of the encoder and prototypes.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for m in self.encoder.params().into_iter().chain(std::iter::once(&self.bank.c)) {
            for x in m.data() {
                for byte in x.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn update(&mut self, grads: &[Matrix], grad_c: Option<&Matrix>, lr: f64, cfg: &TrainConfig) -> Result<()> {
        let decay: Vec<f64> = self.encoder.weight_mask().iter().map(|&w| if w { cfg.weight_decay } else { 0.0 }).collect();
        let mut params = self.encoder.params_mut();
        sgd_step(&mut params, grads, &mut self.encoder_velocity, lr, cfg.momentum, &decay)?;
        if let (Some(g), false) = (grad_c, self.bank.frozen) {
            sgd_step(&mut [&mut self.bank.c], std::slice::from_ref(g), std::slice::from_mut(&mut self.bank_velocity), lr, cfg.momentum, &[0.0])?;
            self.bank.renormalize()?;
        }
        Ok(())
    }
}

/// Retrieval R@1 after a phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseEval {
    pub r1_stream1: f64,
    pub r1_stream2: f64,
    pub r1_combined: f64,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queue_fill: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proto_entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<PhaseEval>,
}

pub fn write_metric_log(records: &[MetricRecord], w: &mut impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub streams: [StreamModel; 2],
    pub queues: [FeatureQueue; 2],
    /// Epoch within the current phase.
    pub epoch: usize,
    /// Optimiser steps over all phases.
    pub step: u64,
    pub phases_done: usize,
    pub phase: Option<Phase>,
}

type Job<'a, T> = Box<dyn FnOnce() -> T + Send + 'a>;

fn run_parallel<T: Send>(jobs: Vec<Job<'_, T>>, threads: usize) -> Vec<T> {
    if threads <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs.into_iter().map(|j| scope.spawn(j)).collect();
        handles.into_iter().map(|h| h.join().expect("forward worker panicked")).collect()
    })
}

fn forward_all(jobs: &[(&EncoderParams, &Matrix)], threads: usize) -> Result<Vec<(FeatureMatrix, ForwardTape)>> {
    let work: Vec<Job<'_, Result<(FeatureMatrix, ForwardTape)>>> =
        jobs.iter().map(|&(enc, x)| Box::new(move || enc.forward(x)) as Job<'_, _>).collect();
    run_parallel(work, threads).into_iter().collect()
}

fn make_targets(scores: &Matrix, queue_scores: Option<&Matrix>, cfg: &TrainConfig) -> Result<AssignmentMatrix> {
    match cfg.targets {
        TargetMode::Sinkhorn => sinkhorn::assign_batch(scores, queue_scores, &cfg.sinkhorn),
        TargetMode::Softmax => AssignmentMatrix::from_targets(&softmax_cols(scores, cfg.sinkhorn.epsilon)?),
    }
}

fn queue_scores(queue: &FeatureQueue, bank: &PrototypeBank, engaged: bool) -> Result<Option<Matrix>> {
    match (engaged, queue.matrix()) {
        (true, Some(q)) => Ok(Some(matmul_tn(&bank.c, &q)?)),
        _ => Ok(None),
    }
}

fn sum_grads(encoder: &EncoderParams, pairs: &[(&ForwardTape, &Matrix)]) -> Result<Vec<Matrix>> {
    let mut total: Option<Vec<Matrix>> = None;
    for (tape, g) in pairs {
        let grads = encoder.backward(tape, g)?.params;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&grads) {
                    a.axpy(1.0, b)?;
                }
            }
        }
    }
    total.ok_or_else(|| Error::InvalidArgument("no gradients to sum".into()))
}

impl TrainState {
    /// Independent seed-derived initialisation of both streams.
    pub fn init(input_dims: [usize; 2], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let make = |s: Stream| -> Result<StreamModel> {
            let mut rng = Rng::derive(cfg.seed, 1 + s.index() as u64);
            let enc = EncoderParams::init(input_dims[s.index()], &cfg.model.hidden, cfg.model.embed_dim, &mut rng);
            let bank = PrototypeBank::init(cfg.model.embed_dim, cfg.model.prototypes, &mut rng)?;
            Ok(StreamModel::new(enc, bank))
        };
        Ok(Self {
            streams: [make(Stream::First)?, make(Stream::Second)?],
            queues: [FeatureQueue::new(cfg.queue_len), FeatureQueue::new(cfg.queue_len)],
            epoch: 0,
            step: 0,
            phases_done: 0,
            phase: None,
        })
    }

    pub fn stream(&self, s: Stream) -> &StreamModel {
        &self.streams[s.index()]
    }

    /// One Stage-1 step on `batch`. Returns the loss value.
    pub fn single_stream_step(
        &mut self,
        s: Stream,
        batch: &TwoStreamBatch,
        lr: f64,
        cfg: &TrainConfig,
        queue_engaged: bool,
    ) -> Result<f64> {
        let (x_i, x_j) = batch.stream(s.index());
        let model = &self.streams[s.index()];
        let mut fwd = forward_all(&[(&model.encoder, x_i), (&model.encoder, x_j)], cfg.threads)?.into_iter();
        let (z_i, tape_i) = fwd.next().expect("two forwards");
        let (z_j, tape_j) = fwd.next().expect("two forwards");

        let out = match cfg.loss.mode {
            LossMode::InfonceBaseline => loss::infonce(&z_i, &z_j, cfg.loss.temperature)?,
            LossMode::SingleStream | LossMode::CrossStream => {
                let qs = queue_scores(&self.queues[s.index()], &model.bank, queue_engaged)?;
                let q_i = make_targets(&prototype_scores(&z_i, &model.bank)?, qs.as_ref(), cfg)?;
                let q_j = make_targets(&prototype_scores(&z_j, &model.bank)?, qs.as_ref(), cfg)?;
                loss::single_stream_loss(&z_i, &z_j, &model.bank, &q_i, &q_j, &cfg.loss)?
            }
        };
        let grads = sum_grads(&model.encoder, &[(&tape_i, &out.grad_z[0]), (&tape_j, &out.grad_z[1])])?;
        self.streams[s.index()].update(&grads, out.grad_c.as_ref(), lr, cfg)?;
        if queue_engaged {
            let q = &mut self.queues[s.index()];
            q.push(z_i.matrix());
            q.push(z_j.matrix());
        }
        self.step += 1;
        Ok(out.value)
    }

    /// One cross-stream step optimising stream `s` against the frozen other
    /// stream. Returns the loss value.
    pub fn cross_stream_step(
        &mut self,
        s: Stream,
        batch: &TwoStreamBatch,
        lr: f64,
        cfg: &TrainConfig,
        queue_engaged: bool,
    ) -> Result<f64> {
        let t = s.other();
        let (xs_i, xs_j) = batch.stream(s.index());
        let (xt_i, xt_j) = batch.stream(t.index());
        let (own, other) = (&self.streams[s.index()], &self.streams[t.index()]);
        let mut fwd = forward_all(
            &[(&own.encoder, xs_i), (&own.encoder, xs_j), (&other.encoder, xt_i), (&other.encoder, xt_j)],
            cfg.threads,
        )?
        .into_iter();
        let (zs_i, tape_i) = fwd.next().expect("four forwards");
        let (zs_j, tape_j) = fwd.next().expect("four forwards");
        let (zt_i, _) = fwd.next().expect("four forwards");
        let (zt_j, _) = fwd.next().expect("four forwards");

        let bank = &own.bank;
        let out: LossOutput = match cfg.loss.mode {
            LossMode::InfonceBaseline => loss::infonce(&zs_i, &zs_j, cfg.loss.temperature)?,
            LossMode::SingleStream => {
                let qs = queue_scores(&self.queues[s.index()], bank, queue_engaged)?;
                let q_i = make_targets(&prototype_scores(&zs_i, bank)?, qs.as_ref(), cfg)?;
                let q_j = make_targets(&prototype_scores(&zs_j, bank)?, qs.as_ref(), cfg)?;
                loss::single_stream_loss(&zs_i, &zs_j, bank, &q_i, &q_j, &cfg.loss)?
            }
            LossMode::CrossStream => {
                let qs_own = queue_scores(&self.queues[s.index()], bank, queue_engaged)?;
                let qs_other = queue_scores(&self.queues[t.index()], bank, queue_engaged)?;
                let q = [
                    make_targets(&prototype_scores(&zs_i, bank)?, qs_own.as_ref(), cfg)?,
                    make_targets(&prototype_scores(&zs_j, bank)?, qs_own.as_ref(), cfg)?,
                    make_targets(&prototype_scores(&zt_i, bank)?, qs_other.as_ref(), cfg)?,
                    make_targets(&prototype_scores(&zt_j, bank)?, qs_other.as_ref(), cfg)?,
                ];
                loss::cross_stream_loss([&zs_i, &zs_j, &zt_i, &zt_j], bank, [&q[0], &q[1], &q[2], &q[3]], &cfg.loss)?
            }
        };
        let grads = sum_grads(&own.encoder, &[(&tape_i, &out.grad_z[0]), (&tape_j, &out.grad_z[1])])?;
        self.streams[s.index()].update(&grads, out.grad_c.as_ref(), lr, cfg)?;
        if queue_engaged {
            self.queues[s.index()].push(zs_i.matrix());
            self.queues[s.index()].push(zs_j.matrix());
            self.queues[t.index()].push(zt_i.matrix());
            self.queues[t.index()].push(zt_j.matrix());
        }
        self.step += 1;
        Ok(out.value)
    }

    fn run_phase(&mut self, phase: Phase, data: &Dataset, cfg: &TrainConfig, log: &mut Vec<MetricRecord>) -> Result<()> {
        cfg.validate()?;
        let split = &data.train;
        if split.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let s = phase.stream();
        let cross = matches!(phase, Phase::Cycle { .. });
        if cross && !self.streams.iter().all(|m| m.initialized) {
            return Err(Error::Uninitialized("cross-stream phase needs both streams trained by Stage 1"));
        }
        let (epochs, freeze_epochs, queue_start) = if cross {
            (cfg.cycle_epochs, 0, cfg.queue_start_epoch_stage2)
        } else {
            (cfg.stage1_epochs, cfg.proto_freeze_epochs, cfg.queue_start_epoch_stage1[s.index()])
        };
        if cross && cfg.fresh_prototypes {
            let mut rng = Rng::derive(cfg.seed, 200 + phase.ordinal());
            let m = &mut self.streams[s.index()];
            m.bank = PrototypeBank::init(m.bank.dim(), m.bank.k(), &mut rng)?;
            m.bank_velocity = Matrix::zeros(m.bank.dim(), m.bank.k());
        }
        self.streams[s.index()].reset_velocity();
        self.queues.iter_mut().for_each(FeatureQueue::clear);
        self.phase = Some(phase);

        let mut rng = Rng::derive(cfg.seed, 100 + phase.ordinal());
        let per_epoch = split.len() / cfg.batch_size.clamp(1, split.len());
        let total = epochs * per_epoch;
        let mut t = 0;
        for epoch in 0..epochs {
            self.epoch = epoch;
            self.streams[s.index()].bank.frozen = epoch < freeze_epochs;
            let engaged = cfg.sinkhorn.include_queue && epoch >= queue_start;
            let mut loss_sum = 0.0;
            let mut lr = cfg.lr;
            let batches = epoch_batches(split.len(), cfg.batch_size, &mut rng)?;
            for idx in &batches {
                let batch = make_batch(split, idx, &cfg.augment, &mut rng);
                lr = cfg.lr_at(t, total);
                loss_sum += if cross {
                    self.cross_stream_step(s, &batch, lr, cfg, engaged)?
                } else {
                    self.single_stream_step(s, &batch, lr, cfg, engaged)?
                };
                t += 1;
            }
            let proto_entropy = match cfg.loss.mode {
                LossMode::InfonceBaseline => None,
                _ if data.test.is_empty() => None,
                _ => Some(prototype_usage_entropy(self.stream(s), &data.test, s, cfg)?),
            };
            log.push(MetricRecord {
                phase: phase.label(),
                epoch: Some(epoch),
                loss: Some(loss_sum / batches.len() as f64),
                lr: Some(lr),
                queue_fill: Some(self.queues[s.index()].len()),
                proto_entropy,
                eval: None,
            });
        }
        self.streams[s.index()].bank.frozen = false;
        if !cross {
            self.streams[s.index()].initialized = true;
        }
        self.phases_done += 1;
        // Held-out metrics need a test split; CSV fixtures have none.
        if data.test.is_empty() {
            return Ok(());
        }
        let eval = phase_eval(self, data, cfg)?;
        log.push(MetricRecord { phase: phase.label(), epoch: None, loss: None, lr: None, queue_fill: None, proto_entropy: None, eval: Some(eval) });
        Ok(())
    }

    pub fn train_single_stream(&mut self, s: Stream, data: &Dataset, cfg: &TrainConfig, log: &mut Vec<MetricRecord>) -> Result<()> {
        self.run_phase(Phase::Stage1(s), data, cfg, log)
    }

    pub fn train_cross_stream_phase(
        &mut self,
        cycle: usize,
        s: Stream,
        data: &Dataset,
        cfg: &TrainConfig,
        log: &mut Vec<MetricRecord>,
    ) -> Result<()> {
        self.run_phase(Phase::Cycle { cycle, stream: s }, data, cfg, log)
    }

    /// Stage 1 on both streams only.
    pub fn run_stage1(&mut self, data: &Dataset, cfg: &TrainConfig, log: &mut Vec<MetricRecord>) -> Result<()> {
        for s in Stream::BOTH {
            self.train_single_stream(s, data, cfg, log)?;
        }
        Ok(())
    }

    /// All cross-stream cycles, starting from Stage-1 weights.
    pub fn run_cycles(&mut self, data: &Dataset, cfg: &TrainConfig, log: &mut Vec<MetricRecord>) -> Result<()> {
        for phase in phase_sequence(cfg.cycles).into_iter().skip(2) {
            self.run_phase(phase, data, cfg, log)?;
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        for (si, m) in self.streams.iter().enumerate() {
            let p = format!("s{}", si + 1);
            out.push(Tensor::new(format!("{p}.input_dim"), vec![1], vec![m.encoder.input_dim() as f64])?);
            for (li, layer) in m.encoder.layers.iter().enumerate() {
                out.push(matrix_tensor(format!("{p}.layer{li}.weight"), &layer.weight)?);
                out.push(matrix_tensor(format!("{p}.layer{li}.bias"), &layer.bias)?);
            }
            out.push(matrix_tensor(format!("{p}.prototypes"), &m.bank.c)?);
            for (vi, v) in m.encoder_velocity.iter().enumerate() {
                out.push(matrix_tensor(format!("{p}.velocity{vi}"), v)?);
            }
            out.push(matrix_tensor(format!("{p}.prototype_velocity"), &m.bank_velocity)?);
            out.push(Tensor::new(format!("{p}.initialized"), vec![1], vec![f64::from(u8::from(m.initialized))])?);
        }
        out.push(Tensor::new("step", vec![1], vec![self.step as f64])?);
        out.push(Tensor::new("phases_done", vec![1], vec![self.phases_done as f64])?);
        Ok(out)
    }

    pub fn from_tensors(tensors: &[Tensor], cfg: &TrainConfig) -> Result<Self> {
        let find = |name: &str| -> Result<&Tensor> {
            tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::Malformed(format!("checkpoint lacks tensor {name}")))
        };
        let scalar = |name: &str| -> Result<f64> { find(name)?.data.first().copied().ok_or_else(|| Error::Malformed(format!("{name} is empty"))) };
        let matrix = |name: &str| -> Result<Matrix> {
            let t = find(name)?;
            match t.dims[..] {
                [r, c] => Matrix::new(r, c, t.data.clone()),
                _ => Err(Error::Malformed(format!("{name} has rank {}", t.dims.len()))),
            }
        };
        let mut streams = Vec::new();
        for si in 1..=2 {
            let p = format!("s{si}");
            let mut layers = Vec::new();
            while tensors.iter().any(|t| t.name == format!("{p}.layer{}.weight", layers.len())) {
                let li = layers.len();
                layers.push(crate::model::Layer {
                    weight: matrix(&format!("{p}.layer{li}.weight"))?,
                    bias: matrix(&format!("{p}.layer{li}.bias"))?,
                });
            }
            let encoder = EncoderParams::from_layers(scalar(&format!("{p}.input_dim"))? as usize, layers)?;
            let bank = PrototypeBank { c: matrix(&format!("{p}.prototypes"))?, frozen: false };
            let encoder_velocity = (0..encoder.params().len()).map(|vi| matrix(&format!("{p}.velocity{vi}"))).collect::<Result<Vec<_>>>()?;
            streams.push(StreamModel {
                encoder,
                bank,
                encoder_velocity,
                bank_velocity: matrix(&format!("{p}.prototype_velocity"))?,
                initialized: scalar(&format!("{p}.initialized"))? != 0.0,
            });
        }
        let second = streams.pop().expect("two streams");
        let first = streams.pop().expect("two streams");
        Ok(Self {
            streams: [first, second],
            queues: [FeatureQueue::new(cfg.queue_len), FeatureQueue::new(cfg.queue_len)],
            epoch: 0,
            step: scalar("step")? as u64,
            phases_done: scalar("phases_done")? as usize,
            phase: None,
        })
    }
}

fn matrix_tensor(name: String, m: &Matrix) -> Result<Tensor> {
    Tensor::new(name, vec![m.rows(), m.cols()], m.data().to_vec())
}

/// Trains both stages from a fresh initialisation and returns the final
/// state plus the metric log.
pub fn run_full_pipeline(cfg: &TrainConfig, data: &Dataset) -> Result<(TrainState, Vec<MetricRecord>)> {
    let mut state = TrainState::init(data.input_dims(), cfg)?;
    let mut log = Vec::new();
    state.run_stage1(data, cfg, &mut log)?;
    state.run_cycles(data, cfg, &mut log)?;
    Ok((state, log))
}

/// Entropy (natural log) of the prototype-usage histogram: argmax of the
/// training-mode targets over `split`, scored batch by batch.
pub fn prototype_usage_entropy(model: &StreamModel, split: &Split, s: Stream, cfg: &TrainConfig) -> Result<f64> {
    let x = &split.views[s.index()];
    let k = model.bank.k();
    let mut counts = vec![0usize; k];
    let bs = cfg.batch_size.max(1);
    let mut start = 0;
    while start < x.cols() {
        let end = (start + bs).min(x.cols());
        let (z, _) = model.encoder.forward(&x.col_range(start, end))?;
        let q = make_targets(&prototype_scores(&z, &model.bank)?, None, cfg)?;
        for a in q.hard_assignments() {
            counts[a] += 1;
        }
        start = end;
    }
    let n = x.cols() as f64;
    Ok(counts.iter().filter(|&&c| c > 0).map(|&c| -(c as f64 / n) * (c as f64 / n).ln()).sum())
}

/// Which encoders an evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamSelection {
    First,
    Second,
    Both,
}

fn stream_features(state: &TrainState, split: &Split, s: Stream, source: FeatureSource) -> Result<Matrix> {
    state.stream(s).encoder.embed(&split.views[s.index()], source)
}

fn similarity(state: &TrainState, data: &Dataset, s: Stream, source: FeatureSource) -> Result<Matrix> {
    eval::cosine_similarity(&stream_features(state, &data.train, s, source)?, &stream_features(state, &data.test, s, source)?)
}

/// Test queries against the training gallery; `Both` averages the two
/// streams' similarity matrices.
pub fn evaluate_retrieval(state: &TrainState, data: &Dataset, sel: StreamSelection, source: FeatureSource, ks: &[usize]) -> Result<RetrievalReport> {
    let sim = match sel {
        StreamSelection::First => similarity(state, data, Stream::First, source)?,
        StreamSelection::Second => similarity(state, data, Stream::Second, source)?,
        StreamSelection::Both => {
            eval::combine_streams(&similarity(state, data, Stream::First, source)?, &similarity(state, data, Stream::Second, source)?)?
        }
    };
    eval::retrieval_from_similarity(&sim, &data.train.labels, &data.test.labels, ks)
}

fn phase_eval(state: &TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<PhaseEval> {
    let src = cfg.eval.features;
    let s1 = similarity(state, data, Stream::First, src)?;
    let s2 = similarity(state, data, Stream::Second, src)?;
    let both = eval::combine_streams(&s1, &s2)?;
    let r1 = |sim: &Matrix| eval::retrieval_from_similarity(sim, &data.train.labels, &data.test.labels, &[1]).map(|r| r.r1());
    Ok(PhaseEval { r1_stream1: r1(&s1)?, r1_stream2: r1(&s2)?, r1_combined: r1(&both)? })
}

/// Linear-probe top-1 accuracy; `Both` averages the two probes' class
/// probabilities.
pub fn evaluate_probe(state: &TrainState, data: &Dataset, sel: StreamSelection, cfg: &TrainConfig) -> Result<f64> {
    let src = cfg.eval.features;
    let probs = |s: Stream| -> Result<Matrix> {
        let probe = LinearProbe::fit(&stream_features(state, &data.train, s, src)?, &data.train.labels, &cfg.eval.probe)?;
        probe.predict_proba(&stream_features(state, &data.test, s, src)?)
    };
    let p = match sel {
        StreamSelection::First => probs(Stream::First)?,
        StreamSelection::Second => probs(Stream::Second)?,
        StreamSelection::Both => eval::combine_streams(&probs(Stream::First)?, &probs(Stream::Second)?)?,
    };
    Ok(eval::accuracy_from_probs(&p, &data.test.labels))
}

fn head_features(state: &TrainState, sel: StreamSelection, xs: [&Matrix; 2]) -> Result<FeatureMatrix> {
    let head = |s: Stream| -> Result<Matrix> { Ok(state.stream(s).encoder.forward(xs[s.index()])?.0.into_matrix()) };
    match sel {
        StreamSelection::First => FeatureMatrix::new(head(Stream::First)?),
        StreamSelection::Second => FeatureMatrix::new(head(Stream::Second)?),
        StreamSelection::Both => {
            let joint = Matrix::vcat(&[&head(Stream::First)?, &head(Stream::Second)?])?;
            FeatureMatrix::new(joint.scale(std::f64::consts::FRAC_1_SQRT_2))
        }
    }
}

/// Fits a fresh `k_eval`-prototype bank on frozen head features with the
/// Stage-1 objective, then scores hard test assignments against labels.
pub fn evaluate_clusters(state: &TrainState, data: &Dataset, sel: StreamSelection, cfg: &TrainConfig) -> Result<ClusterReport> {
    let k_eval = cfg.eval.k_eval.unwrap_or_else(|| data.num_classes());
    if k_eval < 2 {
        return Err(Error::InvalidArgument(format!("k_eval must be at least 2, got {k_eval}")));
    }
    let dim = match sel {
        StreamSelection::Both => 2 * cfg.model.embed_dim,
        _ => cfg.model.embed_dim,
    };
    let mut rng = Rng::derive(cfg.seed, 300);
    let mut bank = StreamModel::new(EncoderParams::identity(1), PrototypeBank::init(dim, k_eval, &mut rng)?);
    let split = &data.train;
    let per_epoch = split.len() / cfg.batch_size.clamp(1, split.len());
    let total = cfg.eval.cluster_epochs * per_epoch;
    let proto_cfg = TrainConfig { targets: TargetMode::Sinkhorn, ..cfg.clone() };
    let mut t = 0;
    for _ in 0..cfg.eval.cluster_epochs {
        for idx in epoch_batches(split.len(), cfg.batch_size, &mut rng)? {
            let batch = make_batch(split, &idx, &cfg.augment, &mut rng);
            let z_i = head_features(state, sel, [&batch.x1_i, &batch.x2_i])?;
            let z_j = head_features(state, sel, [&batch.x1_j, &batch.x2_j])?;
            let q_i = make_targets(&prototype_scores(&z_i, &bank.bank)?, None, &proto_cfg)?;
            let q_j = make_targets(&prototype_scores(&z_j, &bank.bank)?, None, &proto_cfg)?;
            let out = loss::single_stream_loss(&z_i, &z_j, &bank.bank, &q_i, &q_j, &cfg.loss)?;
            let g = out.grad_c.as_ref().expect("prototype loss yields a prototype gradient");
            let lr = cfg.lr_at(t, total);
            sgd_step(&mut [&mut bank.bank.c], std::slice::from_ref(g), std::slice::from_mut(&mut bank.bank_velocity), lr, cfg.momentum, &[0.0])?;
            bank.bank.renormalize()?;
            t += 1;
        }
    }
    let z = head_features(state, sel, [&data.test.views[0], &data.test.views[1]])?;
    let q = sinkhorn::assign(&prototype_scores(&z, &bank.bank)?, &cfg.sinkhorn)?;
    eval::cluster_eval(&argmax_cols(q.plan()), &data.test.labels, k_eval)
}
