//! Recall@K at temporal IoU for the three tasks, verb-count buckets, and the
//! per-clip relevance-map export.

use std::fmt::Write as _;
use std::path::Path;

use genspan_tensor::{ParamSet, Precision};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{write_atomic, Corpus, DataError, QuerySample};
use crate::model::ModelConfig;
use crate::retrieval::{score_corpus, temporal_iou, MomentCandidate, RankConfig, RetrievalError, TaskMode};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no queries to evaluate")]
    EmptyQuerySet,
    #[error("K must be at least 1")]
    InvalidK,
    #[error("query '{0}' has no sub_event_count annotation")]
    MissingAnnotation(String),
    #[error("ground-truth video '{0}' not in corpus")]
    UnknownVideo(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Ground truth of one query: video index and 1-based inclusive span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundTruth {
    pub video: usize,
    pub span: (usize, usize),
}

/// Whether the top-`k` of `list` answers the query for `task`.
pub fn is_hit(list: &[MomentCandidate], gt: &GroundTruth, k: usize, mu: f64, task: TaskMode) -> bool {
    list.iter().take(k).any(|c| match task {
        TaskMode::Vr => c.video == gt.video,
        TaskMode::Vcmr | TaskMode::Vmr => c.video == gt.video && temporal_iou((c.t_s, c.t_e), gt.span) >= mu,
    })
}

pub fn recall_at_k(lists: &[Vec<MomentCandidate>], gts: &[GroundTruth], k: usize, mu: f64, task: TaskMode) -> Result<f64> {
    if lists.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    let hits = lists.iter().zip(gts).filter(|(l, g)| is_hit(l, g, k, mu, task)).count();
    Ok(hits as f64 / lists.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VerbBucket {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = ">=3")]
    ThreePlus,
}

impl VerbBucket {
    pub const ALL: [VerbBucket; 3] = [VerbBucket::One, VerbBucket::Two, VerbBucket::ThreePlus];

    pub fn of(count: u32) -> VerbBucket {
        match count {
            0 | 1 => VerbBucket::One,
            2 => VerbBucket::Two,
            _ => VerbBucket::ThreePlus,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            VerbBucket::One => "1",
            VerbBucket::Two => "2",
            VerbBucket::ThreePlus => ">=3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub task: TaskMode,
    pub k: usize,
    pub iou: f64,
    pub recall: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketEntry {
    pub bucket: VerbBucket,
    pub task: TaskMode,
    pub k: usize,
    pub iou: f64,
    /// None for an empty bucket.
    pub recall: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub num_queries: usize,
    pub recalls: Vec<RecallEntry>,
    pub buckets: Vec<BucketEntry>,
}

impl MetricsReport {
    pub fn recall(&self, task: TaskMode, k: usize, iou: f64) -> Option<f64> {
        self.recalls
            .iter()
            .find(|e| e.task == task && e.k == k && (e.iou - iou).abs() < 1e-12)
            .map(|e| e.recall)
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<6} {:>5} {:>5} {:>8}  (n={})", "task", "K", "IoU", "recall", self.num_queries);
        for e in &self.recalls {
            let _ = writeln!(s, "{:<6} {:>5} {:>5.2} {:>8.4}", format!("{:?}", e.task).to_uppercase(), e.k, e.iou, e.recall);
        }
        if !self.buckets.is_empty() {
            let _ = writeln!(s, "\n{:<6} {:<6} {:>5} {:>5} {:>8} {:>6}", "verbs", "task", "K", "IoU", "recall", "n");
            for b in &self.buckets {
                let r = b.recall.map_or("-".to_string(), |r| format!("{r:.4}"));
                let _ = writeln!(
                    s,
                    "{:<6} {:<6} {:>5} {:>5.2} {:>8} {:>6}",
                    b.bucket.label(),
                    format!("{:?}", b.task).to_uppercase(),
                    b.k,
                    b.iou,
                    r,
                    b.count
                );
            }
        }
        s
    }
}

/// Per-bucket recalls; every query must carry `sub_event_count`.
pub fn verb_breakdown(
    queries: &[&QuerySample],
    lists: &[Vec<MomentCandidate>],
    gts: &[GroundTruth],
    task: TaskMode,
    ks: &[usize],
    mus: &[f64],
) -> Result<Vec<BucketEntry>> {
    let mut buckets = Vec::with_capacity(queries.len());
    for q in queries {
        let c = q.sub_event_count.ok_or_else(|| EvalError::MissingAnnotation(q.query_id.clone()))?;
        buckets.push(VerbBucket::of(c));
    }
    let mut out = Vec::new();
    for bucket in VerbBucket::ALL {
        let members: Vec<usize> = (0..queries.len()).filter(|&i| buckets[i] == bucket).collect();
        for &k in ks {
            for &mu in mus {
                if k == 0 {
                    return Err(EvalError::InvalidK);
                }
                let hits = members.iter().filter(|&&i| is_hit(&lists[i], &gts[i], k, mu, task)).count();
                out.push(BucketEntry {
                    bucket,
                    task,
                    k,
                    iou: mu,
                    recall: (!members.is_empty()).then(|| hits as f64 / members.len() as f64),
                    count: members.len(),
                });
            }
        }
    }
    Ok(out)
}

/// Ranked lists of one query under all three tasks.
#[derive(Debug, Clone)]
pub struct QueryRanking {
    pub query_id: String,
    pub vcmr: Vec<MomentCandidate>,
    pub vmr: Vec<MomentCandidate>,
    pub vr: Vec<MomentCandidate>,
}

pub fn ground_truth(corpus: &Corpus, q: &QuerySample) -> Result<GroundTruth> {
    let video = corpus
        .video_index(&q.gt_video_id)
        .ok_or_else(|| EvalError::UnknownVideo(q.gt_video_id.clone()))?;
    Ok(GroundTruth { video, span: q.gt_span })
}

/// Scores every video once per query and derives the three rankings.
pub fn rank_queries(
    params: &ParamSet,
    model: &ModelConfig,
    corpus: &Corpus,
    queries: &[&QuerySample],
    cfg: &RankConfig,
    precision: Precision,
) -> Result<Vec<QueryRanking>> {
    queries
        .iter()
        .map(|q| {
            let gt = ground_truth(corpus, q)?;
            let scores = score_corpus(params, model, corpus, q, cfg, precision)?;
            Ok(QueryRanking {
                query_id: q.query_id.clone(),
                vcmr: scores.rank(TaskMode::Vcmr, Some(gt.video), cfg)?,
                vmr: scores.rank(TaskMode::Vmr, Some(gt.video), cfg)?,
                vr: scores.rank(TaskMode::Vr, Some(gt.video), cfg)?,
            })
        })
        .collect()
}

/// Full report over the given queries. Verb buckets are included only when
/// every query is annotated.
pub fn metrics_report(corpus: &Corpus, queries: &[&QuerySample], rankings: &[QueryRanking], cfg: &RankConfig) -> Result<MetricsReport> {
    if queries.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    let gts: Vec<GroundTruth> = queries.iter().map(|q| ground_truth(corpus, q)).collect::<Result<_>>()?;
    let mut report = MetricsReport {
        num_queries: queries.len(),
        ..Default::default()
    };
    let annotated = queries.iter().all(|q| q.sub_event_count.is_some());
    for task in [TaskMode::Vcmr, TaskMode::Vmr, TaskMode::Vr] {
        let lists: Vec<Vec<MomentCandidate>> = rankings
            .iter()
            .map(|r| match task {
                TaskMode::Vcmr => r.vcmr.clone(),
                TaskMode::Vmr => r.vmr.clone(),
                TaskMode::Vr => r.vr.clone(),
            })
            .collect();
        // Span thresholds are meaningless for video retrieval.
        let mus: Vec<f64> = if task == TaskMode::Vr { vec![0.0] } else { cfg.iou_thresholds.clone() };
        for &k in &cfg.ks {
            for &mu in &mus {
                report.recalls.push(RecallEntry {
                    task,
                    k,
                    iou: mu,
                    recall: recall_at_k(&lists, &gts, k, mu, task)?,
                    count: queries.len(),
                });
            }
        }
        if annotated {
            report.buckets.extend(verb_breakdown(queries, &lists, &gts, task, &cfg.ks, &mus)?);
        }
    }
    Ok(report)
}

pub fn evaluate(
    params: &ParamSet,
    model: &ModelConfig,
    corpus: &Corpus,
    queries: &[&QuerySample],
    cfg: &RankConfig,
    precision: Precision,
) -> Result<(MetricsReport, Vec<QueryRanking>)> {
    let rankings = rank_queries(params, model, corpus, queries, cfg, precision)?;
    let report = metrics_report(corpus, queries, &rankings, cfg)?;
    Ok((report, rankings))
}

// ---------------------------------------------------------------------------
// relevance maps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelevanceVariant {
    Full,
    NoSubtitle,
    TextOnly,
    NoSelector,
}

impl RelevanceVariant {
    pub const ALL: [RelevanceVariant; 4] = [
        RelevanceVariant::Full,
        RelevanceVariant::NoSubtitle,
        RelevanceVariant::TextOnly,
        RelevanceVariant::NoSelector,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RelevanceVariant::Full => "full",
            RelevanceVariant::NoSubtitle => "no-subtitle",
            RelevanceVariant::TextOnly => "text-only",
            RelevanceVariant::NoSelector => "no-selector",
        }
    }

    fn uses_selector(self) -> bool {
        matches!(self, RelevanceVariant::Full | RelevanceVariant::NoSubtitle)
    }
}

/// Min-max to [0, 1]; a constant row maps to all 0.5.
pub fn minmax(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// One map row. `selector_scores` are raw selector outputs s_t; `relevance`
/// is the sigmoid clip relevance r_t.
pub fn relevance_row(variant: RelevanceVariant, selector_scores: &[f64], relevance: &[f64]) -> Vec<f64> {
    if variant.uses_selector() {
        let s: Vec<f64> = selector_scores.iter().map(|&x| genspan_tensor::kernels::sigmoid(x)).collect();
        let prod: Vec<f64> = minmax(&s).iter().zip(minmax(relevance)).map(|(a, b)| a * b).collect();
        minmax(&prod)
    } else {
        minmax(relevance)
    }
}

pub const RELEVANCE_HEADER: &str = "# relevance r_t = sigmoid clip scores (not logits); full/no-subtitle rows multiply by min-max(sigmoid(selector score))";

/// CSV with a comment line, then `variant,1,..,L`, one row per variant.
pub fn export_relevance_map(path: &Path, rows: &[(RelevanceVariant, Vec<f64>)]) -> Result<()> {
    let len = rows.iter().map(|(_, r)| r.len()).max().unwrap_or(0);
    let mut out = String::new();
    out.push_str(RELEVANCE_HEADER);
    out.push('\n');
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["variant".to_string()];
    header.extend((1..=len).map(|i| i.to_string()));
    w.write_record(&header).expect("in-memory csv");
    for (v, r) in rows {
        let mut rec = vec![v.name().to_string()];
        rec.extend(r.iter().map(|x| x.to_string()));
        w.write_record(&rec).expect("in-memory csv");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv"));
    write_atomic(path, out.as_bytes())?;
    Ok(())
}
