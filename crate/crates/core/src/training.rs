//! Boundary, relevance and contrastive losses, and the AdamW training loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use genspan_tensor::{adam_step, AdamConfig, Graph, OptimState, ParamSet, Precision, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{save_checkpoint, Checkpoint, Corpus, DataError, Split};
use crate::model::{forward_graph, Bound, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("span [{start}, {end}] outside 1..={len}")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("probability {value} at clip {index} outside (0, 1)")]
    ProbOutOfRange { index: usize, value: f64 },
    #[error("contrastive loss needs at least one negative")]
    NoNegatives,
    #[error("non-finite loss part {0}")]
    NonFiniteValue(&'static str),
    #[error("label length {labels} does not match sequence length {len}")]
    LabelMismatch { labels: usize, len: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corpus has no training queries")]
    NoTrainingQueries,
    #[error("no prior for query '{0}'")]
    MissingPrior(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("trace I/O at {path}: {message}")]
    Trace { path: String, message: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_bound: f64,
    pub lambda_rel: f64,
    pub lambda_cont: f64,
    pub tau: f64,
    pub negatives: usize,
    /// Chance that a contrastive negative comes from the positive video
    /// (a non-overlapping span) rather than the sampled negative video.
    pub same_video_negative_prob: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_bound: 1.0,
            lambda_rel: 0.5,
            lambda_cont: 0.1,
            tau: 0.07,
            negatives: 15,
            same_video_negative_prob: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let l = [self.lambda_bound, self.lambda_rel, self.lambda_cont];
        if l.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(TrainError::InvalidConfig(format!("loss weights {l:?} must be finite and >= 0")));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("tau {} must be positive", self.tau)));
        }
        if self.negatives == 0 {
            return Err(TrainError::InvalidConfig("need at least one contrastive negative".into()));
        }
        if !(0.0..=1.0).contains(&self.same_video_negative_prob) {
            return Err(TrainError::InvalidConfig("same_video_negative_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scalar values of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub bound: f64,
    pub rel: f64,
    pub cont: f64,
}

/// λ-weighted sum of already computed parts.
pub fn combine_parts(parts: &LossParts, cfg: &LossConfig) -> Result<f64, LossError> {
    for (name, v) in [("bound", parts.bound), ("rel", parts.rel), ("cont", parts.cont)] {
        if !v.is_finite() {
            return Err(LossError::NonFiniteValue(name));
        }
    }
    Ok(cfg.lambda_bound * parts.bound + cfg.lambda_rel * parts.rel + cfg.lambda_cont * parts.cont)
}

/// One-hot or span labels as an L×1 column.
fn column(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::new(&[n, 1], values).expect("finite labels")
}

fn check_span(span: (usize, usize), len: usize) -> Result<(), LossError> {
    let (s, e) = span;
    if s < 1 || s > e || e > len {
        return Err(LossError::SpanOutOfBounds { start: s, end: e, len });
    }
    Ok(())
}

/// Mean BCE of logits `z` (L×1) against labels, in the stable
/// `softplus(z) − y·z` form.
pub fn bce_with_logits(g: &mut Graph, z: Var, labels: &[f64]) -> Result<Var, LossError> {
    let len = g.dims(z)[0];
    if labels.len() != len {
        return Err(LossError::LabelMismatch { labels: labels.len(), len });
    }
    let y = g.constant(column(labels.to_vec()));
    let sp = g.softplus(z)?;
    let yz = g.mul(y, z)?;
    let per = g.sub(sp, yz)?;
    Ok(g.mean(per)?)
}

/// BCE on start and end logits against one-hot targets at the 1-based span ends.
pub fn loss_bound(g: &mut Graph, p_s: Var, p_e: Var, span: (usize, usize)) -> Result<Var, LossError> {
    let len = g.dims(p_s)[0];
    check_span(span, len)?;
    let mut ds = vec![0.0; len];
    ds[span.0 - 1] = 1.0;
    let mut de = vec![0.0; len];
    de[span.1 - 1] = 1.0;
    let a = bce_with_logits(g, p_s, &ds)?;
    let b = bce_with_logits(g, p_e, &de)?;
    Ok(g.add(a, b)?)
}

/// Relevance labels: ones inside the 1-based span, all zeros without one.
pub fn rel_labels(len: usize, span: Option<(usize, usize)>) -> Vec<f64> {
    let mut y = vec![0.0; len];
    if let Some((s, e)) = span {
        for v in &mut y[s - 1..e] {
            *v = 1.0;
        }
    }
    y
}

/// `−mean[y log r + (1−y) log(1−r)]` on probabilities strictly inside (0, 1).
pub fn loss_rel(g: &mut Graph, r: Var, labels: &[f64]) -> Result<Var, LossError> {
    let len = g.dims(r)[0];
    if labels.len() != len {
        return Err(LossError::LabelMismatch { labels: labels.len(), len });
    }
    if let Some((index, &value)) = g.value(r).data().iter().enumerate().find(|(_, v)| !(**v > 0.0 && **v < 1.0)) {
        return Err(LossError::ProbOutOfRange { index, value });
    }
    let y = g.constant(column(labels.to_vec()));
    let one_minus_y = g.constant(column(labels.iter().map(|v| 1.0 - v).collect()));
    let lr = g.log(r)?;
    let neg = g.scale(r, -1.0)?;
    let one_minus_r = g.add_scalar(neg, 1.0)?;
    let l1r = g.log(one_minus_r)?;
    let a = g.mul(y, lr)?;
    let b = g.mul(one_minus_y, l1r)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    Ok(g.scale(m, -1.0)?)
}

/// Same loss evaluated from logits; used in training where σ may saturate.
pub fn loss_rel_logits(g: &mut Graph, r_logit: Var, labels: &[f64]) -> Result<Var, LossError> {
    bce_with_logits(g, r_logit, labels)
}

/// InfoNCE with cosine similarity: the positive is index 0 among
/// `[positive, negatives...]`. All inputs are 1×d rows.
pub fn loss_cont(g: &mut Graph, anchor: Var, positive: Var, negatives: &[Var], tau: f64) -> Result<Var, LossError> {
    if negatives.is_empty() {
        return Err(LossError::NoNegatives);
    }
    let mut rows = Vec::with_capacity(negatives.len() + 1);
    rows.push(positive);
    rows.extend_from_slice(negatives);
    let cands = g.concat_rows(&rows)?;
    let d = g.dims(anchor)[1];
    let a = g.expand(anchor, [rows.len(), d])?;
    let sims = g.cosine_rows(cands, a)?;
    let logits = g.scale(sims, 1.0 / tau)?;
    let lse = g.logsumexp(logits, 0)?;
    let pos = g.slice_rows(logits, 0, 1)?;
    Ok(g.sub(lse, pos)?)
}

/// Graph-level λ-weighted total.
pub fn total_loss(g: &mut Graph, bound: Var, rel: Var, cont: Var, cfg: &LossConfig) -> Result<Var, LossError> {
    let a = g.scale(bound, cfg.lambda_bound)?;
    let b = g.scale(rel, cfg.lambda_rel)?;
    let c = g.scale(cont, cfg.lambda_cont)?;
    let ab = g.add(a, b)?;
    let t = g.add(ab, c)?;
    if !g.value(t).item().is_finite() {
        return Err(LossError::NonFiniteValue("total"));
    }
    Ok(t)
}

fn mean_rows(g: &mut Graph, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
    let s = g.slice_rows(x, start, end)?;
    g.mean_axis(s, 0)
}

/// One training example: a query with its positive video and prior, plus a
/// negative video used for all-zero relevance labels and contrastive spans.
pub struct Sample<'a> {
    pub video: &'a Tensor,
    pub query: &'a Tensor,
    /// The query's own prior; the contrastive anchor.
    pub prior: &'a Tensor,
    /// Prior fed to the model instead of `prior` (prior dropout).
    pub input_prior: Option<&'a Tensor>,
    /// 1-based inclusive.
    pub span: (usize, usize),
    pub negative_video: Option<&'a Tensor>,
}

/// Builds the full per-sample loss graph. Returns the total and the parts.
pub fn sample_loss(
    g: &mut Graph,
    b: &Bound,
    model: &ModelConfig,
    loss: &LossConfig,
    sample: &Sample<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossParts), TrainError> {
    let v = g.constant(sample.video.clone());
    let q = g.constant(sample.query.clone());
    let p = g.constant(sample.prior.clone());
    let p_in = match sample.input_prior {
        Some(t) => g.constant(t.clone()),
        None => p,
    };
    let out = forward_graph(g, b, model, v, q, p_in)?;
    let len = sample.video.rows();
    let lb = loss_bound(g, out.p_s, out.p_e, sample.span)?;
    let pos_rel = loss_rel_logits(g, out.r_logit, &rel_labels(len, Some(sample.span)))?;

    let (s, e) = (sample.span.0 - 1, sample.span.1);
    let m = e - s;
    let neg_x = match sample.negative_video {
        Some(nv) => {
            let nvar = g.constant(nv.clone());
            let nout = forward_graph(g, b, model, nvar, q, p_in)?;
            let neg_rel = loss_rel_logits(g, nout.r_logit, &rel_labels(nv.rows(), None))?;
            Some((nout.x, nv.rows(), neg_rel))
        }
        None => None,
    };
    let lrel = match &neg_x {
        Some((_, _, neg_rel)) => {
            let sum = g.add(pos_rel, *neg_rel)?;
            g.scale(sum, 0.5)?
        }
        None => pos_rel,
    };

    let anchor = g.mean_axis(p, 0)?;
    let positive = mean_rows(g, out.x, s, e)?;
    let same_video: Vec<usize> = (0..=len - m).filter(|&a| a + m <= s || a >= e).collect();
    let mut negs = Vec::with_capacity(loss.negatives);
    for _ in 0..loss.negatives {
        let want_same = rng.random_bool(loss.same_video_negative_prob);
        if (want_same || neg_x.is_none()) && !same_video.is_empty() {
            let a = same_video[rng.random_range(0..same_video.len())];
            negs.push(mean_rows(g, out.x, a, a + m)?);
        } else if let Some((nx, nl, _)) = &neg_x {
            let mn = m.min(*nl);
            let a = rng.random_range(0..=nl - mn);
            negs.push(mean_rows(g, *nx, a, a + mn)?);
        }
    }
    let lc = loss_cont(g, anchor, positive, &negs, loss.tau)?;
    let total = total_loss(g, lb, lrel, lc, loss)?;
    let parts = LossParts {
        bound: g.value(lb).item(),
        rel: g.value(lrel).item(),
        cont: g.value(lc).item(),
    };
    Ok((total, parts))
}

/// Arithmetic width of training graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionSetting {
    F32,
    #[default]
    F64,
}

impl PrecisionSetting {
    pub fn precision(self) -> Precision {
        match self {
            PrecisionSetting::F32 => Precision::F32,
            PrecisionSetting::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub precision: PrecisionSetting,
    /// Probability that a training sample is fed another query's prior,
    /// so the model also learns to localise when the prior is wrong.
    pub prior_dropout: f64,
    pub loss: LossConfig,
}

/// Defaults to the desk recipe, matching the desk-scale model defaults.
impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-scale recipe: AdamW, lr 1e-4, 20 epochs, batch 32.
    pub fn full_scale() -> Self {
        let a = AdamConfig::default();
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            seed: 0,
            precision: PrecisionSetting::F64,
            prior_dropout: 0.0,
            loss: LossConfig::default(),
        }
    }

    /// Small-corpus recipe: 32 training queries give only one step per epoch
    /// at batch 32, so use single-sample steps and a larger learning rate.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 1,
            lr: 3e-3,
            precision: PrecisionSetting::F32,
            ..Self::full_scale()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig(format!("lr {} / weight_decay {}", self.lr, self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(TrainError::InvalidConfig("betas must be in [0, 1) and eps positive".into()));
        }
        if !(0.0..=1.0).contains(&self.prior_dropout) {
            return Err(TrainError::InvalidConfig(format!("prior_dropout {} outside [0, 1]", self.prior_dropout)));
        }
        self.loss.validate()
    }
}

/// One row of the loss trace: batch means after each optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: usize,
    #[serde(rename = "L_bound")]
    pub bound: f64,
    #[serde(rename = "L_rel")]
    pub rel: f64,
    #[serde(rename = "L_cont")]
    pub cont: f64,
    pub total: f64,
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<(), TrainError> {
    let err = |e: &dyn std::fmt::Display| TrainError::Trace {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| err(&e))?;
    }
    let bytes = w.into_inner().map_err(|e| err(&e))?;
    crate::data::write_atomic(path, &bytes)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub step: u64,
    pub trace: Vec<TraceRow>,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Per-epoch checkpoint files, when an output directory was given.
    pub checkpoints: Vec<PathBuf>,
}

struct Resolved<'a> {
    video: usize,
    query: &'a Tensor,
    prior: &'a Tensor,
    span: (usize, usize),
}

/// Trains on the corpus's `Train` split. With `out_dir`, writes
/// `epoch_XXX.gsck` after each epoch and `train_trace.csv` at the end.
pub fn train(
    corpus: &Corpus,
    model: &ModelConfig,
    cfg: &TrainConfig,
    init: ParamSet,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model.validate()?;
    let precision = cfg.precision.precision();
    let mut items = Vec::new();
    for q in corpus.queries_in(Split::Train) {
        let video = corpus
            .video_index(&q.gt_video_id)
            .ok_or_else(|| DataError::DanglingReference {
                kind: "query",
                id: q.query_id.clone(),
                target: "video",
                missing: q.gt_video_id.clone(),
            })?;
        let prior = corpus
            .prior_for(&q.query_id, &q.gt_video_id)
            .ok_or_else(|| TrainError::MissingPrior(q.query_id.clone()))?;
        items.push(Resolved {
            video,
            query: &q.embedding,
            prior: &prior.features,
            span: q.gt_span,
        });
    }
    if items.is_empty() {
        return Err(TrainError::NoTrainingQueries);
    }

    let mut params = init;
    let mut state = OptimState::new(cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    let nv = corpus.videos.len();
    let mut order: Vec<usize> = (0..items.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut mean = LossParts::default();
            let mut mean_total = 0.0;
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let it = &items[i];
                let negative_video = if nv > 1 {
                    let mut n = rng.random_range(0..nv - 1);
                    if n >= it.video {
                        n += 1;
                    }
                    Some(&corpus.videos[n].features)
                } else {
                    None
                };
                // No draw at rate 0, so the stream matches runs without dropout.
                let input_prior = if cfg.prior_dropout > 0.0 && items.len() > 1 && rng.random_bool(cfg.prior_dropout) {
                    let mut j = rng.random_range(0..items.len() - 1);
                    if j >= i {
                        j += 1;
                    }
                    Some(items[j].prior)
                } else {
                    None
                };
                let sample = Sample {
                    video: &corpus.videos[it.video].features,
                    query: it.query,
                    prior: it.prior,
                    input_prior,
                    span: it.span,
                    negative_video,
                };
                let mut g = Graph::with_precision(precision);
                let b = Bound::new(&mut g, &params, true);
                let (total, parts) = sample_loss(&mut g, &b, model, &cfg.loss, &sample, &mut rng)?;
                let grads = g.backward(total)?;
                for (name, t) in params.iter() {
                    let gr = grads.wrt(b.get(name)?).expect("trainable leaf");
                    let slot = acc.entry(name.clone()).or_insert_with(|| vec![0.0; t.len()]);
                    for (x, y) in slot.iter_mut().zip(gr.data()) {
                        *x += inv * y;
                    }
                }
                mean.bound += inv * parts.bound;
                mean.rel += inv * parts.rel;
                mean.cont += inv * parts.cont;
                mean_total += inv * g.value(total).item();
            }
            let grads: BTreeMap<String, Tensor> = acc
                .into_iter()
                .map(|(n, v)| {
                    let dims = params.get(&n).expect("known param").dims().to_vec();
                    Ok((n, Tensor::new(&dims, v)?))
                })
                .collect::<Result<_, TensorError>>()?;
            adam_step(&mut params, &grads, &mut state)?;
            if !mean_total.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: state.step });
            }
            trace.push(TraceRow {
                step: state.step,
                epoch: epoch + 1,
                bound: mean.bound,
                rel: mean.rel,
                cont: mean.cont,
                total: mean_total,
            });
            epoch_total += mean_total;
            batches += 1;
        }
        epoch_losses.push(epoch_total / batches as f64);
        if let Some(dir) = out_dir {
            let path = dir.join(format!("epoch_{:03}.gsck", epoch + 1));
            save_checkpoint(
                &path,
                &Checkpoint {
                    params: params.clone(),
                    config: *model,
                    step: state.step,
                },
            )?;
            checkpoints.push(path);
        }
    }
    if let Some(dir) = out_dir {
        write_trace(&dir.join("train_trace.csv"), &trace)?;
    }
    Ok(TrainOutcome {
        params,
        step: state.step,
        trace,
        epoch_losses,
        checkpoints,
    })
}
