//! Span enumeration, ψ scoring, NMS and corpus ranking for the three task
//! modes.

use std::cmp::Ordering;
use std::path::Path;

use genspan_tensor::{ParamSet, Precision};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{write_atomic, Corpus, DataError, QuerySample};
use crate::model::{forward, ModelConfig, ModelError, ModelOutput};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("unknown video '{0}'")]
    UnknownVideo(String),
    #[error("no prior for query '{query_id}' on video '{video_id}'")]
    MissingPrior { query_id: String, video_id: String },
    #[error("invalid rank config: {0}")]
    InvalidConfig(String),
    #[error("ranked-list export failed: {0}")]
    Export(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

/// A scored (video, span) tuple; `t_s`/`t_e` are 1-based inclusive clips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentCandidate {
    pub video: usize,
    pub t_s: usize,
    pub t_e: usize,
    pub psi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    #[default]
    Vcmr,
    Vmr,
    Vr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankConfig {
    pub max_span: usize,
    pub nms_threshold: f64,
    /// Videos localized after the video-level pass.
    pub top_videos: usize,
    /// Length cap of a ranked list.
    pub max_results: usize,
    pub ks: Vec<usize>,
    pub iou_thresholds: Vec<f64>,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            max_span: 24,
            nms_threshold: 0.5,
            top_videos: 10,
            max_results: 100,
            ks: vec![1, 5, 10, 100],
            iou_thresholds: vec![0.5, 0.7],
        }
    }
}

impl RankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_span == 0 || self.top_videos == 0 || self.max_results == 0 {
            return Err(RetrievalError::InvalidConfig("max_span, top_videos and max_results must be positive".into()));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return Err(RetrievalError::InvalidConfig(format!("nms threshold {} outside (0, 1]", self.nms_threshold)));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    genspan_tensor::kernels::sigmoid(x)
}

/// Every span up to `max_span` clips, in (t_s, t_e) order. The span mean of
/// `r` is a running sum from each start, so each value is exactly the
/// left-to-right sum over the span.
pub fn score_spans(video: usize, p_s: &[f64], p_e: &[f64], r: &[f64], max_span: usize) -> Vec<MomentCandidate> {
    let l = p_s.len();
    let ss: Vec<f64> = p_s.iter().map(|&v| sigmoid(v)).collect();
    let se: Vec<f64> = p_e.iter().map(|&v| sigmoid(v)).collect();
    let mut out = Vec::with_capacity(l * max_span.min(l));
    for a in 0..l {
        let mut acc = 0.0;
        for b in a..l.min(a + max_span) {
            acc += r[b];
            let mean = acc / (b - a + 1) as f64;
            out.push(MomentCandidate {
                video,
                t_s: a + 1,
                t_e: b + 1,
                psi: ss[a] * se[b] * mean,
            });
        }
    }
    out
}

/// Clip-count IoU of inclusive spans.
pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

fn by_psi_then_span(x: &MomentCandidate, y: &MomentCandidate) -> Ordering {
    y.psi.total_cmp(&x.psi).then(x.t_s.cmp(&y.t_s)).then(x.t_e.cmp(&y.t_e))
}

/// Greedy suppression: best ψ first (ties by earlier start, end, then input
/// order); drops anything overlapping a kept span with IoU > `threshold`.
pub fn nms(candidates: &[MomentCandidate], threshold: f64) -> Vec<MomentCandidate> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| by_psi_then_span(&candidates[i], &candidates[j]).then(i.cmp(&j)));
    let mut kept: Vec<MomentCandidate> = Vec::new();
    for i in order {
        let c = candidates[i];
        if kept.iter().all(|k| temporal_iou((k.t_s, k.t_e), (c.t_s, c.t_e)) <= threshold) {
            kept.push(c);
        }
    }
    kept
}

/// Global order: ψ desc, then video index, start, end.
pub fn global_order(x: &MomentCandidate, y: &MomentCandidate) -> Ordering {
    y.psi
        .total_cmp(&x.psi)
        .then(x.video.cmp(&y.video))
        .then(x.t_s.cmp(&y.t_s))
        .then(x.t_e.cmp(&y.t_e))
}

/// All pre-NMS candidates for one query, per video (in corpus order).
#[derive(Debug, Clone)]
pub struct QueryScores {
    pub per_video: Vec<Vec<MomentCandidate>>,
}

impl QueryScores {
    /// Max pre-NMS ψ of a video (its VR score).
    pub fn video_score(&self, video: usize) -> f64 {
        self.per_video[video].iter().map(|c| c.psi).fold(f64::NEG_INFINITY, f64::max)
    }

    fn best_of(&self, video: usize) -> MomentCandidate {
        let mut v = self.per_video[video].clone();
        v.sort_by(by_psi_then_span);
        v[0]
    }

    /// Videos by VR score, ties to the lower index; each carries its argmax span.
    pub fn rank_videos(&self) -> Vec<MomentCandidate> {
        let mut out: Vec<MomentCandidate> = (0..self.per_video.len())
            .filter(|&n| !self.per_video[n].is_empty())
            .map(|n| self.best_of(n))
            .collect();
        out.sort_by(global_order);
        out
    }

    pub fn rank_in_video(&self, video: usize, cfg: &RankConfig) -> Vec<MomentCandidate> {
        let mut out = nms(&self.per_video[video], cfg.nms_threshold);
        out.truncate(cfg.max_results);
        out
    }

    /// Shortlist the best videos, suppress within each, merge globally.
    pub fn rank_corpus(&self, cfg: &RankConfig) -> Vec<MomentCandidate> {
        let mut merged: Vec<MomentCandidate> = self
            .rank_videos()
            .iter()
            .take(cfg.top_videos)
            .flat_map(|c| nms(&self.per_video[c.video], cfg.nms_threshold))
            .collect();
        merged.sort_by(global_order);
        merged.truncate(cfg.max_results);
        merged
    }

    pub fn rank(&self, mode: TaskMode, gt_video: Option<usize>, cfg: &RankConfig) -> Result<Vec<MomentCandidate>> {
        Ok(match mode {
            TaskMode::Vcmr => self.rank_corpus(cfg),
            TaskMode::Vmr => {
                let v = gt_video.ok_or_else(|| RetrievalError::UnknownVideo("<none>".into()))?;
                if v >= self.per_video.len() {
                    return Err(RetrievalError::UnknownVideo(format!("#{v}")));
                }
                self.rank_in_video(v, cfg)
            }
            TaskMode::Vr => {
                let mut v = self.rank_videos();
                v.truncate(cfg.max_results);
                v
            }
        })
    }
}

/// Forward pass of one query against one video, with its resolved prior.
pub fn forward_pair(
    params: &ParamSet,
    model: &ModelConfig,
    corpus: &Corpus,
    query: &QuerySample,
    video: usize,
    precision: Precision,
) -> Result<ModelOutput> {
    let v = &corpus.videos[video];
    let prior = corpus
        .prior_for(&query.query_id, &v.video_id)
        .ok_or_else(|| RetrievalError::MissingPrior {
            query_id: query.query_id.clone(),
            video_id: v.video_id.clone(),
        })?;
    Ok(forward(params, model, &v.features, &query.embedding, &prior.features, precision)?)
}

/// Scores the given videos (in parallel, results in input order).
pub fn score_videos(
    params: &ParamSet,
    model: &ModelConfig,
    corpus: &Corpus,
    query: &QuerySample,
    videos: &[usize],
    cfg: &RankConfig,
    precision: Precision,
) -> Result<QueryScores> {
    cfg.validate()?;
    let scored: Vec<(usize, Vec<MomentCandidate>)> = videos
        .par_iter()
        .map(|&n| {
            let out = forward_pair(params, model, corpus, query, n, precision)?;
            Ok((n, score_spans(n, &out.p_s, &out.p_e, &out.r, cfg.max_span)))
        })
        .collect::<Result<_>>()?;
    let mut per_video = vec![Vec::new(); corpus.videos.len()];
    for (n, c) in scored {
        per_video[n] = c;
    }
    Ok(QueryScores { per_video })
}

pub fn score_corpus(
    params: &ParamSet,
    model: &ModelConfig,
    corpus: &Corpus,
    query: &QuerySample,
    cfg: &RankConfig,
    precision: Precision,
) -> Result<QueryScores> {
    let all: Vec<usize> = (0..corpus.videos.len()).collect();
    score_videos(params, model, corpus, query, &all, cfg, precision)
}

/// Ranked list for one query. VMR scores only the ground-truth video.
pub fn rank_query(
    params: &ParamSet,
    model: &ModelConfig,
    corpus: &Corpus,
    query: &QuerySample,
    mode: TaskMode,
    cfg: &RankConfig,
    precision: Precision,
) -> Result<Vec<MomentCandidate>> {
    let gt = corpus.video_index(&query.gt_video_id);
    let scores = match mode {
        TaskMode::Vmr => {
            let v = gt.ok_or_else(|| RetrievalError::UnknownVideo(query.gt_video_id.clone()))?;
            score_videos(params, model, corpus, query, &[v], cfg, precision)?
        }
        _ => score_corpus(params, model, corpus, query, cfg, precision)?,
    };
    scores.rank(mode, gt, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRow {
    pub rank: usize,
    pub query_id: String,
    pub video_id: String,
    pub t_s: usize,
    pub t_e: usize,
    pub psi: f64,
}

pub fn ranked_rows(corpus: &Corpus, query_id: &str, list: &[MomentCandidate]) -> Vec<RankedRow> {
    list.iter()
        .enumerate()
        .map(|(i, c)| RankedRow {
            rank: i + 1,
            query_id: query_id.into(),
            video_id: corpus.videos[c.video].video_id.clone(),
            t_s: c.t_s,
            t_e: c.t_e,
            psi: c.psi,
        })
        .collect()
}

/// Writes `rank,query_id,video_id,t_s,t_e,psi` rows.
pub fn write_ranked_csv(path: &Path, rows: &[RankedRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| RetrievalError::Export(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| RetrievalError::Export(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}
