//! Contrastive training of the projector and reference encoder.
//!
//! Each query owns a fixed random partition of its candidate pool into `M`
//! subsets, computed once per run together with each subset's raw centroid
//! vector (centroids do not depend on trainable parameters). At every step a
//! query draws one subset uniformly, the projector turns that subset's
//! centroids into a conditioning vector, and the InfoNCE loss over the
//! positive and the sampled negatives is minimized with AdamW.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::{
    aggregate, random_partition, Mode, Partition, ProjectorGrads, ProjectorParams, ProjectorTape,
};
use crate::clustering::KMeansConfig;
use crate::encoder::{EncoderGrads, RefEncoderParams, RefEncoderShape};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::seed;
use crate::store::{read_tensor_f64, write_tensor_f64, EmbeddingMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub num_splits: usize,
    pub negatives_per_query: usize,
    pub grad_clip_norm: f64,
    pub warmup_fraction: f64,
    /// Replace every conditioning vector with zeros (ablation).
    pub zero_conditioning: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.15,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            epochs: 15,
            batch_size: 20,
            num_splits: 10,
            negatives_per_query: 64,
            grad_clip_norm: 0.5,
            warmup_fraction: 0.1,
            zero_conditioning: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(self.lr >= 0.0) {
            return bad("lr must be >= 0");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must be in (0, 1)");
        }
        if self.batch_size == 0 || self.num_splits == 0 || self.negatives_per_query == 0 {
            return bad("batch_size, num_splits and negatives_per_query must be positive");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be > 0");
        }
        Ok(())
    }
}

/// Linear warm-up to `peak` over the first `warmup_fraction` of steps, then
/// cosine decay to zero at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, peak: f64, warmup_fraction: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let warmup = (warmup_fraction * total).ceil().max(1.0);
    let s = step as f64;
    if s < warmup {
        return peak * s / warmup;
    }
    let progress = ((s - warmup) / (total - warmup).max(1.0)).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// InfoNCE value plus the temperature-scaled scores (positive first) and
/// their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
}

/// `-log softmax(s)[0]` with `s = <h_q, h> / τ` over `[h_pos, h_negs...]`,
/// using the max-shifted log-sum-exp.
pub fn infonce_loss(
    h_q: &[f64],
    h_pos: &[f64],
    h_negs: &[&[f64]],
    temperature: f64,
) -> Result<InfoNce> {
    if h_negs.is_empty() {
        return Err(Error::InvalidArgument(
            "InfoNCE needs at least one negative".into(),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    let d = h_q.len();
    let mut scores = Vec::with_capacity(h_negs.len() + 1);
    for h in std::iter::once(h_pos).chain(h_negs.iter().copied()) {
        if h.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                actual: h.len(),
            });
        }
        scores.push(dot(h_q, h) / temperature);
    }
    Ok(infonce_from_scores(scores))
}

fn infonce_from_scores(scores: Vec<f64>) -> InfoNce {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = ((max - scores[0]) + z.ln()).max(0.0);
    let probs = exps.iter().map(|e| e / z).collect();
    InfoNce {
        loss,
        scores,
        probs,
    }
}

/// One training query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub id: String,
    pub features: Vec<f64>,
    pub positive: usize,
    pub negatives: Vec<usize>,
    /// Candidate universe of this query (store row indices).
    pub pool: Vec<usize>,
}

impl TrainExample {
    pub fn validate(&self, store: &EmbeddingMatrix) -> Result<()> {
        let n = store.count();
        if self.negatives.is_empty() {
            return Err(Error::Data(format!("query {} has no negatives", self.id)));
        }
        if self.negatives.contains(&self.positive) {
            return Err(Error::Data(format!(
                "query {}: positive listed as negative",
                self.id
            )));
        }
        if self.pool.is_empty() {
            return Err(Error::Data(format!("query {} has an empty pool", self.id)));
        }
        for &c in std::iter::once(&self.positive)
            .chain(&self.negatives)
            .chain(&self.pool)
        {
            if c >= n {
                return Err(Error::Data(format!(
                    "query {}: candidate {c} missing from store",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub projector: ProjectorParams,
    pub encoder: RefEncoderParams,
}

/// Borrowed view of one parameter tensor.
pub struct Block<'a> {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    /// Subject to decoupled weight decay (weights only).
    pub decay: bool,
    pub data: &'a mut Vec<f64>,
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        self.projector.validate()?;
        self.encoder.validate()?;
        if self.projector.out_dim != self.encoder.cond_dim {
            return Err(Error::Config(format!(
                "projector out_dim {} != encoder cond_dim {}",
                self.projector.out_dim, self.encoder.cond_dim
            )));
        }
        Ok(())
    }

    /// Trainable tensors in a fixed order.
    pub fn blocks_mut(&mut self) -> Vec<Block<'_>> {
        let p = &mut self.projector;
        let (i, h, o) = (p.in_dim, p.hidden_dim, p.out_dim);
        let mut v = vec![
            Block {
                name: "W1",
                rows: h,
                cols: i,
                decay: true,
                data: &mut p.w1,
            },
            Block {
                name: "b1",
                rows: 1,
                cols: h,
                decay: false,
                data: &mut p.b1,
            },
            Block {
                name: "norm_gain",
                rows: 1,
                cols: h,
                decay: false,
                data: &mut p.norm_gain,
            },
            Block {
                name: "norm_bias",
                rows: 1,
                cols: h,
                decay: false,
                data: &mut p.norm_bias,
            },
            Block {
                name: "W2",
                rows: o,
                cols: h,
                decay: true,
                data: &mut p.w2,
            },
            Block {
                name: "b2",
                rows: 1,
                cols: o,
                decay: false,
                data: &mut p.b2,
            },
        ];
        let e = &mut self.encoder;
        if let Some(hd) = e.hidden.as_mut() {
            let (r, c) = (hd.rows, hd.cols);
            v.push(Block {
                name: "Wh",
                rows: r,
                cols: c,
                decay: true,
                data: &mut hd.w,
            });
            v.push(Block {
                name: "bh",
                rows: 1,
                cols: r,
                decay: false,
                data: &mut hd.b,
            });
        }
        let (r, c) = (e.output.rows, e.output.cols);
        v.push(Block {
            name: "Wq",
            rows: r,
            cols: c,
            decay: true,
            data: &mut e.output.w,
        });
        v.push(Block {
            name: "bq",
            rows: 1,
            cols: r,
            decay: false,
            data: &mut e.output.b,
        });
        if let Some(cd) = e.candidate.as_mut() {
            let (r, c) = (cd.rows, cd.cols);
            v.push(Block {
                name: "Wc",
                rows: r,
                cols: c,
                decay: true,
                data: &mut cd.w,
            });
        }
        v
    }

    pub fn num_params(&mut self) -> usize {
        self.blocks_mut().iter().map(|b| b.data.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub projector: ProjectorGrads,
    pub encoder: EncoderGrads,
}

impl ModelGrads {
    /// Gradient tensors in the same order as [`Model::blocks_mut`].
    pub fn flat_blocks(&self) -> Vec<(&'static str, &[f64])> {
        let p = &self.projector;
        let mut v: Vec<(&'static str, &[f64])> = vec![
            ("W1", &p.w1),
            ("b1", &p.b1),
            ("norm_gain", &p.norm_gain),
            ("norm_bias", &p.norm_bias),
            ("W2", &p.w2),
            ("b2", &p.b2),
        ];
        if let Some((w, b)) = &self.encoder.hidden {
            v.push(("Wh", w));
            v.push(("bh", b));
        }
        v.push(("Wq", &self.encoder.output_w));
        v.push(("bq", &self.encoder.output_b));
        if let Some(w) = &self.encoder.candidate_w {
            v.push(("Wc", w));
        }
        v
    }

    fn scale(&mut self, s: f64) {
        let p = &mut self.projector;
        for t in [
            &mut p.w1,
            &mut p.b1,
            &mut p.norm_gain,
            &mut p.norm_bias,
            &mut p.w2,
            &mut p.b2,
        ] {
            t.iter_mut().for_each(|x| *x *= s);
        }
        let e = &mut self.encoder;
        if let Some((w, b)) = e.hidden.as_mut() {
            w.iter_mut().chain(b.iter_mut()).for_each(|x| *x *= s);
        }
        e.output_w
            .iter_mut()
            .chain(e.output_b.iter_mut())
            .for_each(|x| *x *= s);
        if let Some(w) = e.candidate_w.as_mut() {
            w.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.flat_blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn check_finite(&self) -> Result<()> {
        for (name, b) in self.flat_blocks() {
            if b.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        Ok(())
    }
}

/// One query of a batch: base features, the raw centroid vector of the
/// sampled subset, and candidate row indices.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub features: &'a [f64],
    pub raw_g: &'a [f64],
    pub positive: usize,
    pub negatives: &'a [usize],
}

struct Forward {
    loss: f64,
    proj_tape: ProjectorTape,
    enc_tapes: Vec<crate::encoder::EncoderTape>,
    h_q: Vec<Vec<f64>>,
    cand: Vec<Vec<Vec<f64>>>,
    probs: Vec<Vec<f64>>,
}

fn forward(
    model: &Model,
    items: &[BatchItem<'_>],
    store: &EmbeddingMatrix,
    temperature: f64,
    zero_cond: bool,
) -> Result<Forward> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let enc = &model.encoder;
    let gs: Vec<Vec<f64>> = items.iter().map(|it| it.raw_g.to_vec()).collect();
    let (mut conds, proj_tape) = model.projector.forward_batch(&gs, Mode::Train)?;
    if zero_cond {
        conds
            .iter_mut()
            .for_each(|c| c.iter_mut().for_each(|v| *v = 0.0));
    }
    let mut f = Forward {
        loss: 0.0,
        proj_tape,
        enc_tapes: Vec::with_capacity(items.len()),
        h_q: Vec::with_capacity(items.len()),
        cand: Vec::with_capacity(items.len()),
        probs: Vec::with_capacity(items.len()),
    };
    for (it, cond) in items.iter().zip(conds) {
        if it.features.len() != enc.base_dim {
            return Err(Error::DimMismatch {
                expected: enc.base_dim,
                actual: it.features.len(),
            });
        }
        let mut x = Vec::with_capacity(enc.base_dim + enc.cond_dim);
        x.extend_from_slice(it.features);
        x.extend_from_slice(&cond);
        let (h_q, tape) = enc.forward_tape(x);
        let cand: Vec<Vec<f64>> = std::iter::once(it.positive)
            .chain(it.negatives.iter().copied())
            .map(|c| enc.encode_candidate_row(store.row(c)))
            .collect();
        let negs: Vec<&[f64]> = cand[1..].iter().map(|v| v.as_slice()).collect();
        let nce = infonce_loss(&h_q, &cand[0], &negs, temperature)?;
        f.loss += nce.loss;
        f.enc_tapes.push(tape);
        f.h_q.push(h_q);
        f.cand.push(cand);
        f.probs.push(nce.probs);
    }
    f.loss /= items.len() as f64;
    Ok(f)
}

/// Mean InfoNCE loss of a batch. Pure: running statistics are not updated.
pub fn batch_loss(
    model: &Model,
    items: &[BatchItem<'_>],
    store: &EmbeddingMatrix,
    temperature: f64,
) -> Result<f64> {
    forward(model, items, store, temperature, false).map(|f| f.loss)
}

/// Mean batch loss and its analytic gradient with respect to every
/// trainable tensor. Candidate embeddings themselves receive no gradient.
pub fn loss_gradients(
    model: &Model,
    items: &[BatchItem<'_>],
    store: &EmbeddingMatrix,
    temperature: f64,
) -> Result<(f64, ModelGrads, ProjectorTape)> {
    loss_gradients_with(model, items, store, temperature, false)
}

/// [`loss_gradients`], optionally with the conditioning forced to zero (the
/// projector then receives a zero gradient).
pub fn loss_gradients_with(
    model: &Model,
    items: &[BatchItem<'_>],
    store: &EmbeddingMatrix,
    temperature: f64,
    zero_cond: bool,
) -> Result<(f64, ModelGrads, ProjectorTape)> {
    let f = forward(model, items, store, temperature, zero_cond)?;
    let enc = &model.encoder;
    let mut eg = EncoderGrads::zeros(enc);
    let inv_b = 1.0 / items.len() as f64;
    let mut d_cond = Vec::with_capacity(items.len());

    for (s, it) in items.iter().enumerate() {
        let probs = &f.probs[s];
        let mut d_hq = vec![0.0; enc.out_dim];
        for (c, h_c) in f.cand[s].iter().enumerate() {
            let y = if c == 0 { 1.0 } else { 0.0 };
            let ds = (probs[c] - y) * inv_b / temperature;
            if ds == 0.0 {
                continue;
            }
            for (d, &v) in d_hq.iter_mut().zip(h_c) {
                *d += ds * v;
            }
            if let (Some(gw), Some(cmap)) = (eg.candidate_w.as_mut(), enc.candidate.as_ref()) {
                let id = if c == 0 {
                    it.positive
                } else {
                    it.negatives[c - 1]
                };
                let row = store.row(id);
                for (o, grow) in gw.chunks_exact_mut(cmap.cols).enumerate() {
                    let coef = ds * f.h_q[s][o];
                    for (g, &e) in grow.iter_mut().zip(row) {
                        *g += coef * e as f64;
                    }
                }
            }
        }
        let d_x = enc.backward(&f.enc_tapes[s], &d_hq, &mut eg);
        if zero_cond {
            d_cond.push(vec![0.0; enc.cond_dim]);
        } else {
            d_cond.push(d_x[enc.base_dim..].to_vec());
        }
    }
    let pg = model.projector.backward(&f.proj_tape, &d_cond);
    let grads = ModelGrads {
        projector: pg,
        encoder: eg,
    };
    grads.check_finite()?;
    Ok((f.loss, grads, f.proj_tape))
}

/// Partition every query's pool into `m` subsets, fixed for the run.
pub fn precompute_splits(
    examples: &[TrainExample],
    m: usize,
    root_seed: u64,
) -> Result<Vec<Vec<Vec<usize>>>> {
    if m == 0 {
        return Err(Error::InvalidArgument("num_splits must be >= 1".into()));
    }
    examples
        .iter()
        .enumerate()
        .map(|(q, ex)| {
            let p: Partition = random_partition(
                ex.pool.len(),
                m,
                seed::derive(root_seed, "splits", &[q as u64]),
            )?;
            Ok(p.map_onto(&ex.pool))
        })
        .collect()
}

/// AdamW moments for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &mut Model) -> Self {
        let sizes: Vec<usize> = model.blocks_mut().iter().map(|b| b.data.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One AdamW step with decoupled weight decay on weight matrices.
    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let gblocks = grads.flat_blocks();
        for (bi, block) in model.blocks_mut().into_iter().enumerate() {
            let g = gblocks[bi].1;
            let (m, v) = (&mut self.m[bi], &mut self.v[bi]);
            for j in 0..block.data.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                if block.decay {
                    block.data[j] -= lr * cfg.weight_decay * block.data[j];
                }
                block.data[j] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// CSV `epoch,step,loss,lr`.
pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("epoch,step,loss,lr\n");
    for r in log {
        s.push_str(&format!("{},{},{:e},{:e}\n", r.epoch, r.step, r.loss, r.lr));
    }
    s
}

/// Mean loss per epoch, in epoch order.
pub fn epoch_means(log: &[LossRecord]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in log {
        match out.last_mut() {
            Some(last) if last.0 == r.epoch => {
                last.1 += r.loss;
                last.2 += 1;
            }
            _ => out.push((r.epoch, r.loss, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

/// How the reference encoder is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInit {
    /// Uniform `±init_scale/sqrt(fan_in)` everywhere.
    Random,
    /// Random, except that the query-feature path starts as the identity
    /// (see [`RefEncoderParams::identity_init`]).
    Identity,
}

/// Model shape used when starting from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub clusters: usize,
    pub store_dim: usize,
    pub projector_hidden: usize,
    pub encoder: RefEncoderShape,
    pub init: EncoderInit,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            clusters: 4,
            store_dim: 32,
            projector_hidden: 32,
            encoder: RefEncoderShape::default(),
            init: EncoderInit::Random,
        }
    }
}

impl Model {
    pub fn init(shape: &ModelShape, seed: u64) -> Result<Self> {
        let projector = ProjectorParams::init(
            shape.clusters * shape.store_dim,
            shape.projector_hidden,
            shape.encoder.cond_dim,
            seed::derive(seed, "projector", &[]),
        );
        let enc_seed = seed::derive(seed, "encoder", &[]);
        let encoder = match shape.init {
            EncoderInit::Random => RefEncoderParams::init(&shape.encoder, enc_seed),
            EncoderInit::Identity => RefEncoderParams::identity_init(&shape.encoder, enc_seed)?,
        };
        let m = Self { projector, encoder };
        m.validate()?;
        m.encoder.check_store_dim(shape.store_dim)?;
        Ok(m)
    }
}

/// Training driver. Holds data, model, optimizer and the step cursor.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub kmeans: KMeansConfig,
    store: &'a EmbeddingMatrix,
    examples: &'a [TrainExample],
    /// `[query][split]` raw centroid vectors.
    split_vectors: Vec<Vec<Vec<f64>>>,
    pub model: Model,
    pub opt: AdamState,
    pub step: u64,
    pub log: Vec<LossRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: Model,
        store: &'a EmbeddingMatrix,
        examples: &'a [TrainExample],
        cfg: TrainConfig,
        kmeans: KMeansConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        model.encoder.check_store_dim(store.dim())?;
        if examples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if model.projector.in_dim != kmeans.k * store.dim() {
            return Err(Error::Config(format!(
                "projector in_dim {} != k {} x store dim {}",
                model.projector.in_dim,
                kmeans.k,
                store.dim()
            )));
        }
        for ex in examples {
            ex.validate(store)?;
        }
        let splits = precompute_splits(examples, cfg.num_splits, cfg.seed)?;
        let split_vectors = splits
            .par_iter()
            .map(|subsets| {
                subsets
                    .iter()
                    .map(|s| aggregate(s, store, &kmeans))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = model;
        let opt = AdamState::new(&mut model);
        Ok(Self {
            cfg,
            kmeans,
            store,
            examples,
            split_vectors,
            model,
            opt,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.examples.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn batch_for(&self, step: u64) -> (usize, Vec<usize>) {
        let spe = self.steps_per_epoch();
        let epoch = (step / spe) as usize;
        let pos = (step % spe) as usize;
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut seed::derived_rng(
            self.cfg.seed,
            "epoch-order",
            &[epoch as u64],
        ));
        let start = pos * self.cfg.batch_size;
        let end = (start + self.cfg.batch_size).min(order.len());
        (epoch, order[start..end].to_vec())
    }

    /// Run one optimization step. Returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.step;
        let (epoch, queries) = self.batch_for(step);
        let mut negs_owned: Vec<Vec<usize>> = Vec::with_capacity(queries.len());
        let mut picks = Vec::with_capacity(queries.len());
        for &q in &queries {
            let ex = &self.examples[q];
            let splits = &self.split_vectors[q];
            let r = seed::derived_rng(self.cfg.seed, "split-pick", &[step, q as u64])
                .random_range(0..splits.len());
            picks.push(r);
            let k = self.cfg.negatives_per_query;
            let negs = if ex.negatives.len() > k {
                let mut rng = seed::derived_rng(self.cfg.seed, "negatives", &[step, q as u64]);
                let mut sel: Vec<usize> = index::sample(&mut rng, ex.negatives.len(), k)
                    .into_iter()
                    .map(|i| ex.negatives[i])
                    .collect();
                sel.sort_unstable();
                sel
            } else {
                ex.negatives.clone()
            };
            negs_owned.push(negs);
        }
        let items: Vec<BatchItem<'_>> = queries
            .iter()
            .zip(&picks)
            .zip(&negs_owned)
            .map(|((&q, &r), negs)| BatchItem {
                features: &self.examples[q].features,
                raw_g: &self.split_vectors[q][r],
                positive: self.examples[q].positive,
                negatives: negs,
            })
            .collect();

        let (loss, mut grads, tape) = loss_gradients_with(
            &self.model,
            &items,
            self.store,
            self.cfg.temperature,
            self.cfg.zero_conditioning,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let norm = grads.global_norm();
        if norm > self.cfg.grad_clip_norm {
            grads.scale(self.cfg.grad_clip_norm / norm);
        }
        let lr = lr_at(
            step,
            self.total_steps(),
            self.cfg.lr,
            self.cfg.warmup_fraction,
        );
        self.opt.step(&mut self.model, &grads, lr, &self.cfg);
        self.model.projector.update_running(&tape);
        self.log.push(LossRecord {
            epoch,
            step,
            loss,
            lr,
        });
        self.step += 1;
        Ok(loss)
    }

    /// Train until done, or until `max_steps` more steps have run.
    pub fn run(&mut self, max_steps: Option<u64>) -> Result<()> {
        let stop = match max_steps {
            Some(n) => (self.step + n).min(self.total_steps()),
            None => self.total_steps(),
        };
        while self.step < stop {
            self.train_step()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            opt: self.opt.clone(),
            step: self.step,
            train: self.cfg.clone(),
            kmeans: self.kmeans.clone(),
            log: self.log.clone(),
        }
    }

    /// Continue from a checkpoint; data must be the same as the original run.
    pub fn resume(
        ckpt: Checkpoint,
        store: &'a EmbeddingMatrix,
        examples: &'a [TrainExample],
    ) -> Result<Self> {
        let mut t = Self::new(ckpt.model, store, examples, ckpt.train, ckpt.kmeans)?;
        t.opt = ckpt.opt;
        t.step = ckpt.step;
        t.log = ckpt.log;
        Ok(t)
    }
}

/// Everything needed to resume training or to run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub opt: AdamState,
    pub step: u64,
    pub train: TrainConfig,
    pub kmeans: KMeansConfig,
    pub log: Vec<LossRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    format: u32,
    step: u64,
    /// Hex of the root seed and step cursor; every per-step generator is
    /// derived from these two values.
    rng_state: String,
    train: TrainConfig,
    kmeans: KMeansConfig,
    projector: ProjectorMeta,
    encoder: RefEncoderShape,
    tensors: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProjectorMeta {
    in_dim: usize,
    hidden_dim: usize,
    out_dim: usize,
    momentum: f64,
    eps: f64,
}

fn tensor_path(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("{name}.lrke"))
}

/// Directory layout: `meta.json`, one store-format tensor per parameter
/// (`W1.lrke`, ...), running statistics, AdamW moments (`adam_m.*`,
/// `adam_v.*`) and `loss.csv`.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut model = ckpt.model.clone();
    let mut names = Vec::new();
    for (bi, b) in model.blocks_mut().into_iter().enumerate() {
        write_tensor_f64(tensor_path(dir, b.name), b.rows, b.cols, b.data)?;
        write_tensor_f64(
            tensor_path(dir, &format!("adam_m.{}", b.name)),
            b.rows,
            b.cols,
            &ckpt.opt.m[bi],
        )?;
        write_tensor_f64(
            tensor_path(dir, &format!("adam_v.{}", b.name)),
            b.rows,
            b.cols,
            &ckpt.opt.v[bi],
        )?;
        names.push(b.name.to_string());
    }
    let p = &ckpt.model.projector;
    write_tensor_f64(
        tensor_path(dir, "running_mean"),
        1,
        p.hidden_dim,
        &p.running_mean,
    )?;
    write_tensor_f64(
        tensor_path(dir, "running_var"),
        1,
        p.hidden_dim,
        &p.running_var,
    )?;
    let meta = Meta {
        format: 1,
        step: ckpt.step,
        rng_state: format!("{:016x}{:016x}", ckpt.train.seed, ckpt.step),
        train: ckpt.train.clone(),
        kmeans: ckpt.kmeans.clone(),
        projector: ProjectorMeta {
            in_dim: p.in_dim,
            hidden_dim: p.hidden_dim,
            out_dim: p.out_dim,
            momentum: p.momentum,
            eps: p.eps,
        },
        encoder: ckpt.model.encoder.shape(),
        tensors: names,
    };
    let mp = dir.join("meta.json");
    fs::write(&mp, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&mp, e))?;
    let lp = dir.join("loss.csv");
    fs::write(&lp, loss_log_csv(&ckpt.log)).map_err(|e| Error::io(&lp, e))?;
    Ok(())
}

fn parse_loss_csv(text: &str) -> Result<Vec<LossRecord>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Data(format!("bad loss log line {l:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(LossRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                step: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
                lr: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let mp = dir.join("meta.json");
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: Meta = serde_json::from_str(&text)?;
    if meta.format != 1 {
        return Err(Error::Data(format!(
            "unsupported checkpoint format {}",
            meta.format
        )));
    }
    let pm = &meta.projector;
    let mut projector = ProjectorParams::init(pm.in_dim, pm.hidden_dim, pm.out_dim, 0);
    projector.momentum = pm.momentum;
    projector.eps = pm.eps;
    projector.running_mean = read_tensor_f64(tensor_path(dir, "running_mean"))?.2;
    projector.running_var = read_tensor_f64(tensor_path(dir, "running_var"))?.2;
    let encoder = RefEncoderParams::init(&meta.encoder, 0);
    let mut model = Model { projector, encoder };
    let mut opt = AdamState::new(&mut model);
    opt.t = meta.step;
    let blocks = model.blocks_mut();
    if blocks.len() != meta.tensors.len() {
        return Err(Error::Data(
            "checkpoint tensor list does not match model shape".into(),
        ));
    }
    for (bi, b) in blocks.into_iter().enumerate() {
        let load = |name: &str| -> Result<Vec<f64>> {
            let (r, c, d) = read_tensor_f64(tensor_path(dir, name))?;
            if (r, c) != (b.rows, b.cols) {
                return Err(Error::Data(format!(
                    "tensor {name}: shape {r}x{c}, expected {}x{}",
                    b.rows, b.cols
                )));
            }
            Ok(d)
        };
        *b.data = load(b.name)?;
        opt.m[bi] = load(&format!("adam_m.{}", b.name))?;
        opt.v[bi] = load(&format!("adam_v.{}", b.name))?;
    }
    model.validate()?;
    let lp = dir.join("loss.csv");
    let log = match fs::read_to_string(&lp) {
        Ok(t) => parse_loss_csv(&t)?,
        Err(_) => Vec::new(),
    };
    Ok(Checkpoint {
        model,
        opt,
        step: meta.step,
        train: meta.train,
        kmeans: meta.kmeans,
        log,
    })
}
