//! Synthetic corpora with planted, ordered motif sequences and
//! quality-controlled priors.
//!
//! Each video plants its own query's motifs (2–3 clips per motif) at a random
//! offset; distractors copy permuted or truncated motif sequences of other
//! queries into other videos. Everything is a pure function of the spec.

use genspan_tensor::{Precision, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Corpus, CorpusVideo, GeneratedPrior, PriorQuality, QuerySample, Split, Subtitle};
use crate::prior::VERB_LEXICON;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis spec: {0}")]
    SpecInvalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_videos: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub d: usize,
    /// Size of the motif vocabulary.
    pub num_motifs: usize,
    pub motifs_min: usize,
    pub motifs_max: usize,
    pub prior_len: usize,
    pub noise: f64,
    /// Fractions of queries per class, in `PriorQuality::ALL` order.
    pub quality_mix: [f64; 4],
    pub distractors: usize,
    pub clip_duration_s: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            num_videos: 64,
            len_min: 32,
            len_max: 64,
            d: 32,
            num_motifs: 16,
            motifs_min: 1,
            motifs_max: 4,
            prior_len: 8,
            noise: 0.05,
            quality_mix: [1.0, 0.0, 0.0, 0.0],
            distractors: 8,
            clip_duration_s: 2.0,
        }
    }
}

const MAX_RUN: usize = 3;
const MIN_RUN: usize = 2;
const DISTRACTOR_RUN: usize = 2;

impl SynthSpec {
    pub fn with_quality(mut self, q: PriorQuality) -> Self {
        self.quality_mix = [0.0; 4];
        self.quality_mix[PriorQuality::ALL.iter().position(|&c| c == q).unwrap()] = 1.0;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::SpecInvalid(m));
        if self.num_videos == 0 {
            return bad("num_videos must be positive".into());
        }
        if self.d == 0 || self.num_motifs == 0 || self.num_motifs > self.d {
            return bad(format!("need 0 < num_motifs ({}) <= d ({})", self.num_motifs, self.d));
        }
        if self.num_motifs > VERB_LEXICON.len() {
            return bad(format!("at most {} motifs have verb names", VERB_LEXICON.len()));
        }
        if self.motifs_min == 0 || self.motifs_min > self.motifs_max || self.motifs_max > self.num_motifs {
            return bad(format!("motif count range {}..={} invalid", self.motifs_min, self.motifs_max));
        }
        if self.len_min > self.len_max || self.len_min < MAX_RUN * self.motifs_max {
            return bad(format!(
                "length range {}..={} cannot hold {} motifs",
                self.len_min, self.len_max, self.motifs_max
            ));
        }
        if self.prior_len == 0 || self.prior_len > self.len_min {
            return bad(format!("prior_len {} must be in 1..={}", self.prior_len, self.len_min));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be finite and non-negative", self.noise));
        }
        if self.quality_mix.iter().any(|p| !(*p >= 0.0)) || (self.quality_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("quality mix {:?} must be non-negative and sum to 1", self.quality_mix));
        }
        if !(self.clip_duration_s > 0.0) {
            return bad("clip_duration_s must be positive".into());
        }
        Ok(())
    }
}

/// Ground-truth bookkeeping for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPlan {
    pub motifs: Vec<usize>,
    pub run_lens: Vec<usize>,
    /// 0-based inclusive span in the query's own video.
    pub start: usize,
    pub end: usize,
    pub quality: PriorQuality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    /// num_motifs × d, orthonormal rows.
    pub motifs: Tensor,
    pub plans: Vec<QueryPlan>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes the components along each (orthonormal) motif.
fn project_out(v: &[f64], motifs: &[Vec<f64>]) -> Vec<f64> {
    let mut r = v.to_vec();
    for m in motifs {
        let p = dot(&r, m);
        for (ri, mi) in r.iter_mut().zip(m) {
            *ri -= p * mi;
        }
    }
    r
}

fn orthonormal_motifs(rng: &mut ChaCha8Rng, v: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(v);
    while out.len() < v {
        let mut x = normal_vec(rng, d);
        for m in &out {
            let p = dot(&x, m);
            for (xi, mi) in x.iter_mut().zip(m) {
                *xi -= p * mi;
            }
        }
        let n = dot(&x, &x).sqrt();
        if n > 1e-6 {
            out.push(x.iter().map(|y| y / n).collect());
        }
    }
    out
}

/// Exact per-class counts by largest remainder; ties go to the earlier class.
pub fn quality_counts(mix: &[f64; 4], n: usize) -> [usize; 4] {
    let mut counts = [0usize; 4];
    let mut rema = [(0.0f64, 0usize); 4];
    for k in 0..4 {
        let exact = mix[k] * n as f64;
        counts[k] = (exact + 1e-9).floor() as usize;
        rema[k] = (exact - counts[k] as f64, k);
    }
    let mut left = n.saturating_sub(counts.iter().sum());
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, k) in rema.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Class of each query index: contiguous blocks in `PriorQuality::ALL` order.
pub fn assign_qualities(mix: &[f64; 4], n: usize) -> Vec<PriorQuality> {
    let counts = quality_counts(mix, n);
    let mut out = Vec::with_capacity(n);
    for (k, &c) in counts.iter().enumerate() {
        out.extend(std::iter::repeat_n(PriorQuality::ALL[k], c));
    }
    out
}

pub fn query_text(motifs: &[usize]) -> String {
    let verbs: Vec<&str> = motifs.iter().map(|&k| VERB_LEXICON[k]).collect();
    format!("a person {}", verbs.join(" then "))
}

const VERB_LINES: &[&str] = &["a person {v}", "look the person {v}", "person {v} now", "{v} again", "did you see how she {v}"];
const CHATTER: &[&str] = &[
    "what time is it",
    "i told you already",
    "we should get going",
    "that is not what i meant",
    "are you hungry",
    "call me tomorrow",
    "nobody asked you",
    "this place is quiet",
];

fn round_f32(v: &mut [f64]) {
    Precision::F32.round_slice(v);
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let mut data: Vec<f64> = rows.iter().flatten().copied().collect();
    round_f32(&mut data);
    Tensor::new(&[rows.len(), rows[0].len()], data).expect("finite synthetic features")
}

struct VideoDraft {
    feats: Vec<Vec<f64>>,
    /// Clips already carrying planted content, padded by one clip on each side.
    busy: Vec<bool>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let d = spec.d;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let motifs = orthonormal_motifs(&mut rng, spec.num_motifs, d);
    let qualities = assign_qualities(&spec.quality_mix, spec.num_videos);

    let mut drafts = Vec::with_capacity(spec.num_videos);
    let mut plans = Vec::with_capacity(spec.num_videos);
    let span_c = spec.motifs_max - spec.motifs_min + 1;
    for n in 0..spec.num_videos {
        let l = rng.random_range(spec.len_min..=spec.len_max);
        // Backgrounds live in the motif complement, so a planted clip has
        // cosine exactly 1/√2 with its motif and a background clip has 0.
        let mut feats: Vec<Vec<f64>> = (0..l).map(|_| unit(&project_out(&normal_vec(&mut rng, d), &motifs))).collect();
        // Queries alternate train/test, so consecutive pairs share a motif
        // count and both splits cover every count.
        let c = spec.motifs_min + (n / 2) % span_c;
        let ks: Vec<usize> = rand::seq::index::sample(&mut rng, spec.num_motifs, c).into_vec();
        let lens: Vec<usize> = (0..c).map(|_| rng.random_range(MIN_RUN..=MAX_RUN)).collect();
        let m: usize = lens.iter().sum();
        let s = rng.random_range(0..=l - m);
        let mut t = s;
        for (&k, &ln) in ks.iter().zip(&lens) {
            for _ in 0..ln {
                feats[t] = unit(&add(&motifs[k], &feats[t]));
                t += 1;
            }
        }
        let mut busy = vec![false; l];
        for b in busy.iter_mut().take((s + m + 1).min(l)).skip(s.saturating_sub(1)) {
            *b = true;
        }
        drafts.push(VideoDraft { feats, busy });
        plans.push(QueryPlan {
            motifs: ks,
            run_lens: lens,
            start: s,
            end: s + m - 1,
            quality: qualities[n],
        });
    }

    for _ in 0..spec.distractors {
        let qi = rng.random_range(0..spec.num_videos);
        let host = rng.random_range(0..spec.num_videos);
        let src = &plans[qi].motifs;
        if src.len() < 2 || host == qi {
            continue;
        }
        let ks: Vec<usize> = if rng.random_bool(0.5) {
            let mut p = src.clone();
            p.shuffle(&mut rng);
            if &p == src {
                p.reverse();
            }
            p
        } else {
            src[..src.len() - 1].to_vec()
        };
        // Containing the host's own sequence would plant a second true moment.
        let own = &plans[host].motifs;
        if own.len() <= ks.len() && ks.windows(own.len()).any(|w| w == own.as_slice()) {
            continue;
        }
        let m = DISTRACTOR_RUN * ks.len();
        let v = &mut drafts[host];
        let l = v.feats.len();
        if m > l {
            continue;
        }
        let free: Vec<usize> = (0..=l - m).filter(|&p| !v.busy[p..p + m].iter().any(|&b| b)).collect();
        if free.is_empty() {
            continue;
        }
        let p = free[rng.random_range(0..free.len())];
        for (j, &k) in ks.iter().enumerate() {
            for r in 0..DISTRACTOR_RUN {
                let t = p + DISTRACTOR_RUN * j + r;
                v.feats[t] = unit(&add(&motifs[k], &v.feats[t]));
            }
        }
        for b in v.busy.iter_mut().take((p + m + 1).min(l)).skip(p.saturating_sub(1)) {
            *b = true;
        }
    }

    let mut videos = Vec::with_capacity(spec.num_videos);
    let mut video_rows = Vec::with_capacity(spec.num_videos);
    for (n, v) in drafts.into_iter().enumerate() {
        let mut rows = v.feats;
        for row in rows.iter_mut() {
            for x in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += spec.noise * z;
            }
            round_f32(row);
        }
        let subtitles = subtitles_for(&mut rng, &plans[n], rows.len(), spec.clip_duration_s);
        videos.push(CorpusVideo {
            video_id: format!("v{n:04}"),
            features: to_tensor(&rows),
            subtitles,
            clip_duration_s: spec.clip_duration_s,
        });
        video_rows.push(rows);
    }

    let mut queries = Vec::with_capacity(spec.num_videos);
    let mut priors = Vec::with_capacity(spec.num_videos);
    for (n, plan) in plans.iter().enumerate() {
        let mut qrng = ChaCha8Rng::seed_from_u64(spec.seed);
        qrng.set_stream(1 + n as u64);
        let noise = normal_vec(&mut qrng, d);
        let mut eq = noise.iter().map(|z| 0.1 * z).collect::<Vec<_>>();
        for &k in &plan.motifs {
            eq = add(&eq, &motifs[k]);
        }
        let mut eq = unit(&eq);
        round_f32(&mut eq);
        let set = PriorSet::draw(&mut qrng, spec, &motifs, plan, &video_rows[n]);
        let qid = format!("q{n:04}");
        queries.push(QuerySample {
            query_id: qid.clone(),
            text: query_text(&plan.motifs),
            sub_event_count: Some(plan.motifs.len() as u32),
            gt_video_id: format!("v{n:04}"),
            gt_span: (plan.start + 1, plan.end + 1),
            embedding: Tensor::new(&[1, d], eq).expect("finite embedding"),
            split: if n % 2 == 0 { Split::Train } else { Split::Test },
        });
        priors.push(GeneratedPrior {
            query_id: qid,
            video_id: None,
            features: to_tensor(set.get(plan.quality)),
            quality: Some(plan.quality),
            prompt_text: format!("{}{}", crate::prior::PROMPT_PREAMBLE, query_text(&plan.motifs)),
        });
    }

    let motif_rows: Vec<f64> = motifs.iter().flatten().copied().collect();
    Ok(SynthCorpus {
        corpus: Corpus { d, videos, queries, priors },
        motifs: Tensor::new(&[spec.num_motifs, d], motif_rows).expect("finite motifs"),
        plans,
    })
}

/// All four prior variants for one query, drawn in a fixed order from the
/// query's own stream so that the class mix never perturbs anything else.
struct PriorSet {
    correct: Vec<Vec<f64>>,
    positive: Vec<Vec<f64>>,
    weak: Vec<Vec<f64>>,
    hallucination: Vec<Vec<f64>>,
}

impl PriorSet {
    fn draw(rng: &mut ChaCha8Rng, spec: &SynthSpec, motifs: &[Vec<f64>], plan: &QueryPlan, video: &[Vec<f64>]) -> PriorSet {
        let (d, lg) = (spec.d, spec.prior_len);
        let m = plan.end - plan.start + 1;
        let pick: Vec<usize> = (0..lg).map(|i| i * m / lg).collect();
        let seq: Vec<usize> = plan
            .motifs
            .iter()
            .zip(&plan.run_lens)
            .flat_map(|(&k, &n)| std::iter::repeat_n(k, n))
            .collect();
        let token_motif: Vec<usize> = pick.iter().map(|&i| seq[i]).collect();
        let jitter = 0.5 * spec.noise;

        let correct: Vec<Vec<f64>> = pick
            .iter()
            .map(|&i| {
                let z = normal_vec(rng, d);
                video[plan.start + i].iter().zip(&z).map(|(x, z)| x + jitter * z).collect()
            })
            .collect();

        let planted = |rng: &mut ChaCha8Rng, ks: &[usize]| -> Vec<Vec<f64>> {
            ks.iter()
                .map(|&k| {
                    let bg = unit(&project_out(&normal_vec(rng, d), motifs));
                    let z = normal_vec(rng, d);
                    unit(&add(&motifs[k], &bg)).iter().zip(&z).map(|(x, z)| x + jitter * z).collect()
                })
                .collect()
        };
        let positive = planted(rng, &token_motif);

        let victim = plan.motifs[rng.random_range(0..plan.motifs.len())];
        let outside: Vec<usize> = (0..motifs.len()).filter(|k| !plan.motifs.contains(k)).collect();
        let replacement = if outside.is_empty() {
            victim
        } else {
            outside[rng.random_range(0..outside.len())]
        };
        let swapped: Vec<usize> = token_motif.iter().map(|&k| if k == victim { replacement } else { k }).collect();
        let weak = planted(rng, &swapped);

        // Built from the positive prior, not the correct one: removing the
        // motifs from gt clips would leave their background, which still
        // pinpoints the gt moment.
        let hallucination = positive.iter().map(|row| unit(&project_out(row, motifs))).collect();
        PriorSet {
            correct,
            positive,
            weak,
            hallucination,
        }
    }

    fn get(&self, q: PriorQuality) -> &[Vec<f64>] {
        match q {
            PriorQuality::Correct => &self.correct,
            PriorQuality::Positive => &self.positive,
            PriorQuality::WeakPositive => &self.weak,
            PriorQuality::Hallucination => &self.hallucination,
        }
    }
}

fn subtitles_for(rng: &mut ChaCha8Rng, plan: &QueryPlan, len: usize, dur: f64) -> Vec<Subtitle> {
    let mut subs = Vec::new();
    let mut t = plan.start;
    for (&k, &n) in plan.motifs.iter().zip(&plan.run_lens) {
        let line = VERB_LINES[rng.random_range(0..VERB_LINES.len())].replace("{v}", VERB_LEXICON[k]);
        subs.push(Subtitle {
            text: line,
            start_s: t as f64 * dur,
            end_s: (t + n) as f64 * dur,
            speaker: None,
        });
        t += n;
    }
    for _ in 0..rng.random_range(2..=4) {
        let at = rng.random_range(0..len);
        subs.push(Subtitle {
            text: CHATTER[rng.random_range(0..CHATTER.len())].into(),
            start_s: at as f64 * dur,
            end_s: (at + 1) as f64 * dur,
            speaker: None,
        });
    }
    subs.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    subs
}

/// Per-clip cosine gain over which a clip counts as showing its motif: half
/// the planted-clip cosine of 1/√2.
pub const ORACLE_MARGIN: f64 = 0.5 * std::f64::consts::FRAC_1_SQRT_2;

/// Nearest-motif oracle: the window, segmented into runs of 2–3 clips in the
/// query's motif order, maximising Σ (cos(clip, assigned motif) − margin).
/// Returns a 0-based inclusive span; ties go to the earliest window.
pub fn oracle_span(features: &Tensor, motifs: &Tensor, query_motifs: &[usize]) -> Option<(usize, usize)> {
    let l = features.rows();
    let c = query_motifs.len();
    let cos: Vec<Vec<f64>> = (0..l)
        .map(|t| {
            let x = unit(features.row(t));
            query_motifs.iter().map(|&k| dot(&x, motifs.row(k))).collect()
        })
        .collect();
    let mut best: Option<(f64, usize, usize)> = None;
    for mask in 0..(1usize << c) {
        let lens: Vec<usize> = (0..c).map(|j| if mask >> j & 1 == 1 { MAX_RUN } else { MIN_RUN }).collect();
        let m: usize = lens.iter().sum();
        if m > l {
            continue;
        }
        for a in 0..=l - m {
            let mut t = a;
            let mut total = 0.0;
            for (j, &n) in lens.iter().enumerate() {
                for _ in 0..n {
                    total += cos[t][j] - ORACLE_MARGIN;
                    t += 1;
                }
            }
            let score = total;
            let better = match best {
                None => true,
                Some((bs, ba, bm)) => score > bs || (score == bs && (a, m) < (ba, bm)),
            };
            if better {
                best = Some((score, a, m));
            }
        }
    }
    best.map(|(_, a, m)| (a, a + m - 1))
}
