//! Corpus types, the binary feature format, manifests and checkpoints.
//!
//! Clip spans are 1-based and inclusive wherever they cross a file boundary
//! (manifests, CSVs); in-memory model arrays are 0-based.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use genspan_tensor::{ParamSet, Precision, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;

pub const FEATURE_MAGIC: &[u8; 4] = b"GSPF";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic bytes")]
    BadMagic { path: String },
    #[error("{path}: unsupported format version {version}")]
    VersionUnsupported { path: String, version: u32 },
    #[error("{path}: truncated payload (need {expected} bytes, found {found})")]
    TruncatedPayload { path: String, expected: usize, found: usize },
    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingData { path: String, extra: usize },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("feature sequences need at least one clip and one dimension")]
    EmptySequence,
    #[error("{kind} '{id}' references unknown {target} '{missing}'")]
    DanglingReference {
        kind: &'static str,
        id: String,
        target: &'static str,
        missing: String,
    },
    #[error("query '{query_id}': span ({start}, {end}) outside 1..={len}")]
    SpanOutOfBounds {
        query_id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("video '{video_id}': subtitle {index} spans [{start_s}, {end_s}] outside [0, {limit_s}]")]
    InvalidSubtitle {
        video_id: String,
        index: usize,
        start_s: f64,
        end_s: f64,
        limit_s: f64,
    },
    #[error("{kind} '{id}': feature dim {found}, corpus declares {expected}")]
    DimensionMismatch {
        kind: &'static str,
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate {kind} id '{id}'")]
    DuplicateId { kind: &'static str, id: String },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("checkpoint parameters do not match the model: {0}")]
    NameMismatch(String),
    #[error("checkpoint parameter '{name}': dims {found:?}, model expects {expected:?}")]
    DimMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes via a uniquely named sibling temp file and a rename, so readers
/// never observe a partial file and concurrent writers of the same path are safe.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}-{n}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// feature files

/// Serializes an L×d sequence: magic, version, L, d, then L·d f32 LE.
pub fn encode_features(seq: &Tensor) -> Result<Vec<u8>> {
    if seq.rank() != 2 || seq.is_empty() {
        return Err(DataError::EmptySequence);
    }
    let (l, d) = (seq.rows(), seq.cols());
    let mut out = Vec::with_capacity(16 + 4 * l * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(l as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in seq.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_features(bytes: &[u8], label: &str) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(DataError::BadMagic { path: label.into() });
    }
    if bytes.len() < 16 {
        return Err(DataError::TruncatedPayload {
            path: label.into(),
            expected: 16,
            found: bytes.len(),
        });
    }
    let version = read_u32(bytes, 4);
    if version != FEATURE_VERSION {
        return Err(DataError::VersionUnsupported { path: label.into(), version });
    }
    let (l, d) = (read_u32(bytes, 8) as usize, read_u32(bytes, 12) as usize);
    if l == 0 || d == 0 {
        return Err(DataError::EmptySequence);
    }
    let expected = 16 + 4 * l * d;
    if bytes.len() < expected {
        return Err(DataError::TruncatedPayload {
            path: label.into(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingData {
            path: label.into(),
            extra: bytes.len() - expected,
        });
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::with_precision(&[l, d], data, Precision::F64)?)
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_features(&bytes, &path.display().to_string())
}

pub fn write_features(path: &Path, seq: &Tensor) -> Result<()> {
    write_atomic(path, &encode_features(seq)?)
}

// ---------------------------------------------------------------------------
// domain types

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtitle {
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusVideo {
    pub video_id: String,
    /// L×d clip features.
    pub features: Tensor,
    pub subtitles: Vec<Subtitle>,
    pub clip_duration_s: f64,
}

impl CorpusVideo {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySample {
    pub query_id: String,
    pub text: String,
    /// Verb / sub-event count; an annotation, never inferred.
    pub sub_event_count: Option<u32>,
    pub gt_video_id: String,
    /// 1-based inclusive clip span.
    pub gt_span: (usize, usize),
    /// 1×d text embedding standing in for an encoded query.
    pub embedding: Tensor,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PriorQuality {
    Correct,
    Positive,
    WeakPositive,
    Hallucination,
}

impl PriorQuality {
    pub const ALL: [PriorQuality; 4] = [
        PriorQuality::Correct,
        PriorQuality::Positive,
        PriorQuality::WeakPositive,
        PriorQuality::Hallucination,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPrior {
    pub query_id: String,
    /// `None` marks a query-level prior shared by every candidate video.
    pub video_id: Option<String>,
    /// L_g×d generated features.
    pub features: Tensor,
    /// Known only for synthetic priors.
    pub quality: Option<PriorQuality>,
    pub prompt_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub d: usize,
    pub videos: Vec<CorpusVideo>,
    pub queries: Vec<QuerySample>,
    pub priors: Vec<GeneratedPrior>,
}

impl Corpus {
    pub fn video_index(&self, video_id: &str) -> Option<usize> {
        self.videos.iter().position(|v| v.video_id == video_id)
    }

    pub fn video(&self, video_id: &str) -> Option<&CorpusVideo> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    pub fn query(&self, query_id: &str) -> Option<&QuerySample> {
        self.queries.iter().find(|q| q.query_id == query_id)
    }

    /// Prior for a (query, video) pair, falling back to the query-level prior.
    pub fn prior_for(&self, query_id: &str, video_id: &str) -> Option<&GeneratedPrior> {
        self.priors
            .iter()
            .find(|p| p.query_id == query_id && p.video_id.as_deref() == Some(video_id))
            .or_else(|| self.priors.iter().find(|p| p.query_id == query_id && p.video_id.is_none()))
    }

    pub fn queries_in(&self, split: Split) -> impl Iterator<Item = &QuerySample> {
        self.queries.iter().filter(move |q| q.split == split)
    }

    /// Replaces all priors of a query (e.g. after running the prior pipeline).
    pub fn set_priors(&mut self, priors: Vec<GeneratedPrior>) {
        self.priors = priors;
    }
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestDoc {
    version: u32,
    d: usize,
    videos: Vec<VideoEntry>,
    queries: Vec<QueryEntry>,
    #[serde(default)]
    priors: Vec<PriorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VideoEntry {
    video_id: String,
    features: String,
    clip_duration_s: f64,
    #[serde(default)]
    subtitles: Vec<Subtitle>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QueryEntry {
    query_id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sub_event_count: Option<u32>,
    gt_video_id: String,
    gt_span: [usize; 2],
    embedding: String,
    #[serde(default)]
    split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PriorEntry {
    query_id: String,
    #[serde(default)]
    video_id: Option<String>,
    features: String,
    #[serde(default)]
    quality: Option<PriorQuality>,
    #[serde(default)]
    prompt_text: String,
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_dim(kind: &'static str, id: &str, t: &Tensor, d: usize) -> Result<()> {
    if t.cols() != d {
        return Err(DataError::DimensionMismatch {
            kind,
            id: id.into(),
            expected: d,
            found: t.cols(),
        });
    }
    Ok(())
}

/// Loads and fully cross-checks a corpus; any inconsistency is a typed error.
pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let doc: ManifestDoc = serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if doc.version != MANIFEST_VERSION {
        return Err(DataError::VersionUnsupported {
            path: path.display().to_string(),
            version: doc.version,
        });
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let d = doc.d;

    let mut video_ids = HashMap::new();
    let mut videos = Vec::with_capacity(doc.videos.len());
    for v in doc.videos {
        if video_ids.insert(v.video_id.clone(), videos.len()).is_some() {
            return Err(DataError::DuplicateId { kind: "video", id: v.video_id });
        }
        let features = read_features(&resolve(base, &v.features))?;
        check_dim("video", &v.video_id, &features, d)?;
        let limit_s = features.rows() as f64 * v.clip_duration_s;
        for (i, s) in v.subtitles.iter().enumerate() {
            if !(0.0 <= s.start_s && s.start_s <= s.end_s && s.end_s <= limit_s) {
                return Err(DataError::InvalidSubtitle {
                    video_id: v.video_id,
                    index: i,
                    start_s: s.start_s,
                    end_s: s.end_s,
                    limit_s,
                });
            }
        }
        videos.push(CorpusVideo {
            video_id: v.video_id,
            features,
            subtitles: v.subtitles,
            clip_duration_s: v.clip_duration_s,
        });
    }

    let mut query_ids = BTreeSet::new();
    let mut queries = Vec::with_capacity(doc.queries.len());
    for q in doc.queries {
        if !query_ids.insert(q.query_id.clone()) {
            return Err(DataError::DuplicateId { kind: "query", id: q.query_id });
        }
        let Some(&vi) = video_ids.get(&q.gt_video_id) else {
            return Err(DataError::DanglingReference {
                kind: "query",
                id: q.query_id,
                target: "video",
                missing: q.gt_video_id,
            });
        };
        let len = videos[vi].len();
        let [s, e] = q.gt_span;
        if !(1 <= s && s <= e && e <= len) {
            return Err(DataError::SpanOutOfBounds { query_id: q.query_id, start: s, end: e, len });
        }
        if q.sub_event_count == Some(0) {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                message: format!("query '{}': sub_event_count must be >= 1", q.query_id),
            });
        }
        let embedding = read_features(&resolve(base, &q.embedding))?;
        check_dim("query", &q.query_id, &embedding, d)?;
        if embedding.rows() != 1 {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                message: format!("query '{}': embedding must be a single row", q.query_id),
            });
        }
        queries.push(QuerySample {
            query_id: q.query_id,
            text: q.text,
            sub_event_count: q.sub_event_count,
            gt_video_id: q.gt_video_id,
            gt_span: (s, e),
            embedding,
            split: q.split,
        });
    }

    let mut priors = Vec::with_capacity(doc.priors.len());
    for p in doc.priors {
        if !query_ids.contains(&p.query_id) {
            return Err(DataError::DanglingReference {
                kind: "prior",
                id: p.features,
                target: "query",
                missing: p.query_id,
            });
        }
        if let Some(v) = &p.video_id {
            if !video_ids.contains_key(v) {
                return Err(DataError::DanglingReference {
                    kind: "prior",
                    id: p.features,
                    target: "video",
                    missing: v.clone(),
                });
            }
        }
        let features = read_features(&resolve(base, &p.features))?;
        check_dim("prior", &p.query_id, &features, d)?;
        priors.push(GeneratedPrior {
            query_id: p.query_id,
            video_id: p.video_id,
            features,
            quality: p.quality,
            prompt_text: p.prompt_text,
        });
    }

    Ok(Corpus { d, videos, queries, priors })
}

fn prior_file_name(p: &GeneratedPrior) -> String {
    match &p.video_id {
        Some(v) => format!("priors/{}__{}.gspf", p.query_id, v),
        None => format!("priors/{}.gspf", p.query_id),
    }
}

/// Writes `manifest.json` plus feature files under `dir`; returns the manifest path.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf> {
    let mut doc = ManifestDoc {
        version: MANIFEST_VERSION,
        d: corpus.d,
        videos: vec![],
        queries: vec![],
        priors: vec![],
    };
    for v in &corpus.videos {
        let rel = format!("features/{}.gspf", v.video_id);
        write_features(&dir.join(&rel), &v.features)?;
        doc.videos.push(VideoEntry {
            video_id: v.video_id.clone(),
            features: rel,
            clip_duration_s: v.clip_duration_s,
            subtitles: v.subtitles.clone(),
        });
    }
    for q in &corpus.queries {
        let rel = format!("queries/{}.gspf", q.query_id);
        write_features(&dir.join(&rel), &q.embedding)?;
        doc.queries.push(QueryEntry {
            query_id: q.query_id.clone(),
            text: q.text.clone(),
            sub_event_count: q.sub_event_count,
            gt_video_id: q.gt_video_id.clone(),
            gt_span: [q.gt_span.0, q.gt_span.1],
            embedding: rel,
            split: q.split,
        });
    }
    for p in &corpus.priors {
        let rel = prior_file_name(p);
        write_features(&dir.join(&rel), &p.features)?;
        doc.priors.push(PriorEntry {
            query_id: p.query_id.clone(),
            video_id: p.video_id.clone(),
            features: rel,
            quality: p.quality,
            prompt_text: p.prompt_text.clone(),
        });
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    write_atomic(&path, json.as_bytes())?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// checkpoints

/// Parameters plus the config echo and training step they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub config: ModelConfig,
    pub step: u64,
}

const META_STEP: &str = "meta.step";
const META_CONFIG: &str = "meta.config";

fn push_entry(out: &mut Vec<u8>, name: &str, dims: &[usize], data: impl Iterator<Item = f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a checkpoint. Step and config travel as two reserved `meta.*`
/// entries so the container stays a flat list of named f32 tensors.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&((ck.params.len() + 2) as u32).to_le_bytes());
    // 24-bit limbs keep every value exactly representable in f32.
    let step = [(ck.step & 0xFF_FFFF) as f32, ((ck.step >> 24) & 0xFF_FFFF) as f32, (ck.step >> 48) as f32];
    push_entry(&mut out, META_STEP, &[3], step.into_iter());
    let cfg = ck.config.encode();
    push_entry(&mut out, META_CONFIG, &[cfg.len()], cfg.into_iter());
    for (name, t) in ck.params.iter() {
        push_entry(&mut out, name, t.dims(), t.data().iter().map(|&v| v as f32));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    label: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::TruncatedPayload {
                path: self.label.into(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], label: &str) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, label };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(DataError::BadMagic { path: label.into() });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::VersionUnsupported { path: label.into(), version });
    }
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    let mut step = None;
    let mut config = None;
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| DataError::Parse {
            path: label.into(),
            message: e.to_string(),
        })?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data: Vec<f64> = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let dup = match name.as_str() {
            META_STEP => {
                let v: Vec<u64> = data.iter().map(|&x| x as u64).collect();
                step.replace(v.first().copied().unwrap_or(0) | v.get(1).copied().unwrap_or(0) << 24 | v.get(2).copied().unwrap_or(0) << 48)
                    .is_some()
            }
            META_CONFIG => config.replace(ModelConfig::decode(&data).ok_or_else(|| DataError::Parse {
                path: label.into(),
                message: "unreadable config echo".into(),
            })?)
            .is_some(),
            _ => params
                .insert(name.clone(), Tensor::with_precision(&dims, data, Precision::F32)?)
                .is_some(),
        };
        if dup {
            return Err(DataError::NameMismatch(format!("'{name}' appears more than once")));
        }
    }
    if r.pos != bytes.len() {
        return Err(DataError::TrailingData {
            path: label.into(),
            extra: bytes.len() - r.pos,
        });
    }
    let (Some(step), Some(config)) = (step, config) else {
        return Err(DataError::Parse {
            path: label.into(),
            message: "missing meta.step or meta.config".into(),
        });
    };
    Ok(Checkpoint { params, config, step })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
