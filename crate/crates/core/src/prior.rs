//! Query decomposition, subtitle relevance filtering, prompt composition and
//! cached prior generation, all behind swappable clients.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use genspan_tensor::{Precision, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{decode_features, encode_features, write_atomic, DataError, GeneratedPrior, PriorQuality, Subtitle};

pub const DEFAULT_ETA: f64 = 0.5;
pub const DEFAULT_PRIOR_LEN: usize = 8;
pub const DIALOGUE_JOINER: &str = "as described in dialogue:";

/// Fixed generation preamble: roles, ordered steps, motion detail, and a
/// caution against unsupported visual assumptions.
pub const PROMPT_PREAMBLE: &str = "Roles: the people named in the query. \
Ordered steps: perform the actions strictly in the stated order. \
Motion details: emphasise body movement for each step. \
Uncertain visual priors: keep scene, clothing, room layout and camera angle unspecified. \
Event: ";

pub const DECOMPOSE_TEMPLATE: &str = "Decompose the query '{q}' into sub-events by verbs, inferring intermediate actions while keeping the core meaning intact. Output as a list of phrases.";
pub const SCORE_TEMPLATE: &str = "Assess if subtitle '{s}' relates to query sub-event '{q}'. Output a score from 0 (irrelevant) to 1 (highly relevant) and a brief reason.";

/// Verbs the mock decomposer splits on. The synthetic corpus names its
/// motifs with the first entries.
pub const VERB_LEXICON: &[&str] = &[
    "walks", "hands", "opens", "sits", "picks", "turns", "laughs", "points", "runs", "jumps", "waves", "drinks",
    "reads", "throws", "pushes", "pulls", "grabs", "kisses", "hugs", "closes", "stands", "looks", "smiles", "leaves",
];

const COORDINATORS: &[&str] = &["and", "then", "while", "before", "after", "or", "but"];

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("client failure: {0}")]
    ClientFailure(String),
    #[error("query decomposed into no usable sub-queries")]
    EmptyDecomposition,
    #[error("threshold {0} outside [0, 1)")]
    InvalidThreshold(f64),
    #[error("corrupted cache entry {path}: {reason}")]
    CacheCorruption { path: String, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, PriorError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decomposition {
    pub query: String,
    pub verbs: Vec<String>,
    pub sub_queries: Vec<String>,
}

/// Raw scorer reply; `value` must parse as a decimal number.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReply {
    pub value: String,
    pub rationale: Option<String>,
}

pub trait ScorerClient: Send + Sync {
    fn decompose(&self, query: &str) -> Result<Decomposition>;
    fn score(&self, sub_query: &str, subtitle: &str) -> Result<ScoreReply>;
    /// Fuses subtitles (already in timestamp order) into a narrative that
    /// contains the query.
    fn fuse(&self, query: &str, subtitles: &[&Subtitle]) -> Result<String>;
}

pub trait PriorGeneratorClient: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<Tensor>;
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Jaccard overlap of token sets; two empty sets count as identical.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let sa: BTreeSet<String> = tokenize(a).into_iter().collect();
    let sb: BTreeSet<String> = tokenize(b).into_iter().collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    inter as f64 / union as f64
}

/// Deterministic in-process scorer: lexicon-based verb splitting, Jaccard
/// relevance, and joiner-based fusion.
#[derive(Debug, Clone)]
pub struct MockScorer {
    lexicon: Vec<String>,
}

impl Default for MockScorer {
    fn default() -> Self {
        MockScorer {
            lexicon: VERB_LEXICON.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl MockScorer {
    pub fn with_lexicon(lexicon: &[&str]) -> Self {
        MockScorer {
            lexicon: lexicon.iter().map(|s| s.to_lowercase()).collect(),
        }
    }
}

impl ScorerClient for MockScorer {
    fn decompose(&self, query: &str) -> Result<Decomposition> {
        let tokens = tokenize(query);
        let pos: Vec<usize> = (0..tokens.len()).filter(|&i| self.lexicon.contains(&tokens[i])).collect();
        let verbs: Vec<String> = pos.iter().map(|&i| tokens[i].clone()).collect();
        if pos.len() < 2 {
            return Ok(Decomposition {
                query: query.into(),
                verbs,
                sub_queries: vec![query.trim().to_string()],
            });
        }
        // The subject phrase before the first verb is shared by every sub-event.
        let subject = &tokens[..pos[0]];
        let mut subs = Vec::with_capacity(pos.len());
        for (k, &p) in pos.iter().enumerate() {
            let end = pos.get(k + 1).copied().unwrap_or(tokens.len());
            let mut seg: Vec<&str> = tokens[p..end].iter().map(|s| s.as_str()).collect();
            while seg.len() > 1 && COORDINATORS.contains(seg.last().unwrap()) {
                seg.pop();
            }
            let mut words: Vec<&str> = subject.iter().map(|s| s.as_str()).collect();
            words.extend(seg);
            subs.push(words.join(" "));
        }
        Ok(Decomposition {
            query: query.into(),
            verbs,
            sub_queries: subs,
        })
    }

    fn score(&self, sub_query: &str, subtitle: &str) -> Result<ScoreReply> {
        Ok(ScoreReply {
            value: format!("{}", jaccard(sub_query, subtitle)),
            rationale: Some("token overlap".into()),
        })
    }

    fn fuse(&self, query: &str, subtitles: &[&Subtitle]) -> Result<String> {
        let texts: Vec<&str> = subtitles.iter().map(|s| s.text.as_str()).collect();
        Ok(format!("{query} {DIALOGUE_JOINER} {}", texts.join(" ")))
    }
}

/// Seeded pseudo-random unit-norm features keyed by the prompt hash.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    pub d: usize,
    pub len: usize,
    pub seed: u64,
}

impl MockGenerator {
    pub fn new(d: usize, seed: u64) -> Self {
        MockGenerator { d, len: DEFAULT_PRIOR_LEN, seed }
    }
}

impl PriorGeneratorClient for MockGenerator {
    fn generate(&self, prompt: &str) -> Result<Tensor> {
        let h = Sha256::digest(prompt.as_bytes());
        let key = u64::from_le_bytes(h[..8].try_into().unwrap()) ^ self.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let mut data = Vec::with_capacity(self.len * self.d);
        for _ in 0..self.len {
            let row: Vec<f64> = (0..self.d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            data.extend(row.iter().map(|v| v / n));
        }
        Tensor::with_precision(&[self.len, self.d], data, Precision::F64).map_err(|e| PriorError::ClientFailure(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// HTTP-backed clients

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(60)))
        .build()
        .into()
}

#[derive(Serialize)]
struct PromptBody<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct TextReply {
    text: String,
}

#[derive(Deserialize)]
struct ScoreBody {
    score: serde_json::Value,
    #[serde(default)]
    text: Option<String>,
}

#[derive(Deserialize)]
struct FeatureReply {
    features: Vec<Vec<f64>>,
}

fn post<T: serde::de::DeserializeOwned>(agent: &ureq::Agent, url: &str, prompt: &str) -> Result<T> {
    let fail = |e: ureq::Error| PriorError::ClientFailure(format!("{url}: {e}"));
    let resp = agent.post(url).send_json(PromptBody { prompt }).map_err(fail)?;
    resp.into_body().read_json::<T>().map_err(fail)
}

/// Scorer backed by three JSON endpoints: `/decompose`, `/score`, `/fuse`.
/// Requests are `{"prompt": ...}`; replies carry `text` and, for scores, `score`.
pub struct HttpScorer {
    base: String,
    agent: ureq::Agent,
}

impl HttpScorer {
    pub fn new(base: impl Into<String>) -> Self {
        HttpScorer {
            base: base.into().trim_end_matches('/').to_string(),
            agent: agent(),
        }
    }
}

impl ScorerClient for HttpScorer {
    fn decompose(&self, query: &str) -> Result<Decomposition> {
        let prompt = DECOMPOSE_TEMPLATE.replace("{q}", query);
        let reply: TextReply = post(&self.agent, &format!("{}/decompose", self.base), &prompt)?;
        let subs: Vec<String> = reply
            .text
            .lines()
            .map(|l| l.trim().trim_start_matches(['-', '*', ' ']).trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        let verbs = subs.iter().filter_map(|s| tokenize(s).into_iter().next()).collect();
        Ok(Decomposition {
            query: query.into(),
            verbs,
            sub_queries: subs,
        })
    }

    fn score(&self, sub_query: &str, subtitle: &str) -> Result<ScoreReply> {
        let prompt = SCORE_TEMPLATE.replace("{s}", subtitle).replace("{q}", sub_query);
        let reply: ScoreBody = post(&self.agent, &format!("{}/score", self.base), &prompt)?;
        let value = match reply.score {
            serde_json::Value::String(s) => s,
            v => v.to_string(),
        };
        Ok(ScoreReply { value, rationale: reply.text })
    }

    fn fuse(&self, query: &str, subtitles: &[&Subtitle]) -> Result<String> {
        let lines: Vec<String> = subtitles
            .iter()
            .map(|s| format!("[{:.1}-{:.1}] {}{}", s.start_s, s.end_s, s.speaker.as_deref().map(|p| format!("{p}: ")).unwrap_or_default(), s.text))
            .collect();
        let prompt = format!("Query: {query}\nSubtitles:\n{}", lines.join("\n"));
        let reply: TextReply = post(&self.agent, &format!("{}/fuse", self.base), &prompt)?;
        Ok(reply.text)
    }
}

/// Generator endpoint `/generate`: `{"prompt"}` → `{"features": [[f32; d]; L_g]}`.
pub struct HttpGenerator {
    base: String,
    agent: ureq::Agent,
}

impl HttpGenerator {
    pub fn new(base: impl Into<String>) -> Self {
        HttpGenerator {
            base: base.into().trim_end_matches('/').to_string(),
            agent: agent(),
        }
    }
}

impl PriorGeneratorClient for HttpGenerator {
    fn generate(&self, prompt: &str) -> Result<Tensor> {
        let reply: FeatureReply = post(&self.agent, &format!("{}/generate", self.base), prompt)?;
        Tensor::from_rows(&reply.features).map_err(|e| PriorError::ClientFailure(format!("bad feature payload: {e}")))
    }
}

// ---------------------------------------------------------------------------
// pipeline steps

pub fn decompose_query(query: &str, client: &dyn ScorerClient) -> Result<Decomposition> {
    if query.trim().is_empty() {
        return Err(PriorError::EmptyDecomposition);
    }
    let d = client.decompose(query)?;
    if d.sub_queries.is_empty() || d.sub_queries.iter().any(|s| s.trim().is_empty()) {
        return Err(PriorError::EmptyDecomposition);
    }
    Ok(d)
}

/// Parses a raw score and clamps it to [0, 1]; anything unparseable is a
/// client failure rather than a silent zero.
pub fn parse_score(raw: &str) -> Result<f64> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| PriorError::ClientFailure(format!("unparseable score '{raw}'")))?;
    if v.is_nan() {
        return Err(PriorError::ClientFailure(format!("unparseable score '{raw}'")));
    }
    Ok(v.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceJudgment {
    pub index: usize,
    /// Clamped score per sub-query.
    pub scores: Vec<f64>,
    /// Max over sub-queries.
    pub relevance: f64,
    /// Opaque audit trail from the scorer.
    pub rationales: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubtitleMatch {
    /// Indices of kept subtitles (r_j > η), in input order.
    pub selected: Vec<usize>,
    pub judgments: Vec<RelevanceJudgment>,
}

pub fn judge_subtitles(decomp: &Decomposition, subtitles: &[Subtitle], client: &dyn ScorerClient) -> Result<Vec<RelevanceJudgment>> {
    subtitles
        .iter()
        .enumerate()
        .map(|(j, sub)| {
            let mut scores = Vec::with_capacity(decomp.sub_queries.len());
            let mut rationales = Vec::with_capacity(decomp.sub_queries.len());
            for q in &decomp.sub_queries {
                let reply = client.score(q, &sub.text)?;
                scores.push(parse_score(&reply.value)?);
                rationales.push(reply.rationale);
            }
            let relevance = scores.iter().copied().fold(0.0, f64::max);
            Ok(RelevanceJudgment {
                index: j,
                scores,
                relevance,
                rationales,
            })
        })
        .collect()
}

/// Keeps judged subtitles strictly above `eta`.
pub fn filter_judgments(judgments: &[RelevanceJudgment], eta: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&eta) {
        return Err(PriorError::InvalidThreshold(eta));
    }
    Ok(judgments.iter().filter(|j| j.relevance > eta).map(|j| j.index).collect())
}

pub fn match_subtitles(decomp: &Decomposition, subtitles: &[Subtitle], eta: f64, client: &dyn ScorerClient) -> Result<SubtitleMatch> {
    if !(0.0..1.0).contains(&eta) {
        return Err(PriorError::InvalidThreshold(eta));
    }
    let judgments = judge_subtitles(decomp, subtitles, client)?;
    let selected = filter_judgments(&judgments, eta)?;
    Ok(SubtitleMatch { selected, judgments })
}

/// `preamble + query` with no evidence; otherwise the preamble followed by the
/// fused narrative (subtitles in timestamp order).
pub fn compose_prompt(query: &str, selected: &[&Subtitle], client: &dyn ScorerClient) -> Result<String> {
    if selected.is_empty() {
        return Ok(format!("{PROMPT_PREAMBLE}{query}"));
    }
    let mut ordered = selected.to_vec();
    ordered.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    let fused = client.fuse(query, &ordered)?;
    if fused.contains(query) {
        Ok(format!("{PROMPT_PREAMBLE}{fused}"))
    } else {
        Ok(format!("{PROMPT_PREAMBLE}{query} {DIALOGUE_JOINER} {fused}"))
    }
}

// ---------------------------------------------------------------------------
// cache

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Sidecar {
    query_id: String,
    video_id: Option<String>,
    prompt_text: String,
    quality: Option<PriorQuality>,
}

/// One feature file plus a JSON sidecar per key under `root`.
#[derive(Debug, Clone)]
pub struct PriorCache {
    root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Generated,
}

impl PriorCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        PriorCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key(query_id: &str, video_id: Option<&str>, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(query_id.as_bytes());
        h.update([0x1f]);
        h.update(video_id.unwrap_or("").as_bytes());
        h.update([0x1f]);
        h.update(prompt.as_bytes());
        hex::encode(h.finalize())
    }

    fn paths(&self, key: &str) -> (PathBuf, PathBuf) {
        (self.root.join(format!("{key}.gspf")), self.root.join(format!("{key}.json")))
    }

    pub fn get(&self, query_id: &str, video_id: Option<&str>, prompt: &str) -> Result<Option<GeneratedPrior>> {
        let key = Self::key(query_id, video_id, prompt);
        let (fp, jp) = self.paths(&key);
        let corrupt = |p: &Path, reason: String| PriorError::CacheCorruption {
            path: p.display().to_string(),
            reason,
        };
        match (fp.exists(), jp.exists()) {
            (false, false) => return Ok(None),
            (true, false) => return Err(corrupt(&jp, "sidecar missing".into())),
            (false, true) => return Err(corrupt(&fp, "feature file missing".into())),
            _ => {}
        }
        let bytes = fs::read(&fp).map_err(|e| corrupt(&fp, e.to_string()))?;
        let features = decode_features(&bytes, &fp.display().to_string()).map_err(|e| corrupt(&fp, e.to_string()))?;
        let text = fs::read_to_string(&jp).map_err(|e| corrupt(&jp, e.to_string()))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| corrupt(&jp, e.to_string()))?;
        if side.query_id != query_id || side.video_id.as_deref() != video_id || side.prompt_text != prompt {
            return Err(corrupt(&jp, "sidecar does not match its key".into()));
        }
        Ok(Some(GeneratedPrior {
            query_id: side.query_id,
            video_id: side.video_id,
            features,
            quality: side.quality,
            prompt_text: side.prompt_text,
        }))
    }

    pub fn put(&self, prior: &GeneratedPrior) -> Result<()> {
        let key = Self::key(&prior.query_id, prior.video_id.as_deref(), &prior.prompt_text);
        let (fp, jp) = self.paths(&key);
        write_atomic(&fp, &encode_features(&prior.features)?)?;
        let side = Sidecar {
            query_id: prior.query_id.clone(),
            video_id: prior.video_id.clone(),
            prompt_text: prior.prompt_text.clone(),
            quality: prior.quality,
        };
        write_atomic(&jp, serde_json::to_string_pretty(&side).expect("sidecar serializes").as_bytes())?;
        Ok(())
    }
}

/// Cache lookup, else generation + persist. Generated features are rounded
/// through the on-disk f32 format so hits and misses return identical values.
pub fn build_prior(
    query_id: &str,
    video_id: Option<&str>,
    prompt: &str,
    d: usize,
    generator: &dyn PriorGeneratorClient,
    cache: &PriorCache,
) -> Result<(GeneratedPrior, CacheOutcome)> {
    if let Some(p) = cache.get(query_id, video_id, prompt)? {
        return Ok((p, CacheOutcome::Hit));
    }
    let raw = generator.generate(prompt)?;
    if raw.rank() != 2 || raw.cols() != d {
        return Err(PriorError::ClientFailure(format!("generator returned dims {:?}, corpus d = {d}", raw.dims())));
    }
    let features = decode_features(&encode_features(&raw)?, "generated")?;
    let prior = GeneratedPrior {
        query_id: query_id.into(),
        video_id: video_id.map(|s| s.into()),
        features,
        quality: None,
        prompt_text: prompt.into(),
    };
    cache.put(&prior)?;
    Ok((prior, CacheOutcome::Generated))
}

/// Everything one (query, video) pipeline run produced.
#[derive(Debug, Clone)]
pub struct PipelineRecord {
    pub decomposition: Decomposition,
    pub matched: SubtitleMatch,
    pub prompt: String,
    pub prior: GeneratedPrior,
    pub outcome: CacheOutcome,
}

#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    query_id: &str,
    query_text: &str,
    video_id: Option<&str>,
    subtitles: &[Subtitle],
    eta: f64,
    d: usize,
    scorer: &dyn ScorerClient,
    generator: &dyn PriorGeneratorClient,
    cache: &PriorCache,
) -> Result<PipelineRecord> {
    let decomposition = decompose_query(query_text, scorer)?;
    let matched = match_subtitles(&decomposition, subtitles, eta, scorer)?;
    let kept: Vec<&Subtitle> = matched.selected.iter().map(|&j| &subtitles[j]).collect();
    let prompt = compose_prompt(query_text, &kept, scorer)?;
    let (prior, outcome) = build_prior(query_id, video_id, &prompt, d, generator, cache)?;
    Ok(PipelineRecord {
        decomposition,
        matched,
        prompt,
        prior,
        outcome,
    })
}
