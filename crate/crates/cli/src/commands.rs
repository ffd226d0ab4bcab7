//! One function per subcommand. Each resolves its inputs, writes artifacts
//! under the output directory and returns a summary for printing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use genspan_core::bench::{scaling_bench, write_bench, BenchReport};
use genspan_core::data::{load_checkpoint, load_manifest, save_checkpoint, save_corpus, Checkpoint, Corpus, PriorQuality, QuerySample};
use genspan_core::eval::{
    evaluate, export_relevance_map, metrics_report, relevance_row, MetricsReport, QueryRanking, RelevanceVariant,
};
use genspan_core::model::{forward, init_params, params_from_checkpoint, ModelConfig};
use genspan_core::prior::{run_pipeline, CacheOutcome, PriorCache};
use genspan_core::retrieval::{ranked_rows, write_ranked_csv, MomentCandidate, RankedRow, TaskMode};
use genspan_core::synth::{generate, quality_counts};
use genspan_core::training::{train, TrainOutcome};
use genspan_tensor::ParamSet;
use serde::Serialize;

use crate::config::{existing, PriorScope, RunConfig};

pub const FINAL_CHECKPOINT: &str = "checkpoint.gsck";
pub const METRICS_JSON: &str = "metrics.json";
pub const MATCHES_JSON: &str = "subtitle_matches.json";

pub fn ranked_csv_name(task: TaskMode) -> &'static str {
    match task {
        TaskMode::Vcmr => "ranked_vcmr.csv",
        TaskMode::Vmr => "ranked_vmr.csv",
        TaskMode::Vr => "ranked_vr.csv",
    }
}

fn split_queries<'a>(corpus: &'a Corpus, cfg: &RunConfig) -> Result<Vec<&'a QuerySample>> {
    let qs: Vec<&QuerySample> = corpus.queries_in(cfg.eval.split).collect();
    if qs.is_empty() {
        bail!("no {:?} queries in the manifest", cfg.eval.split);
    }
    Ok(qs)
}

fn load_model(path: &Path) -> Result<(ParamSet, ModelConfig)> {
    let ck = load_checkpoint(path)?;
    let params = params_from_checkpoint(&ck, &ck.config)?;
    Ok((params, ck.config))
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub videos: usize,
    pub queries: usize,
    pub train_queries: usize,
    pub test_queries: usize,
    pub priors: usize,
    pub quality: BTreeMap<String, usize>,
}

impl SynthSummary {
    pub fn line(&self) -> String {
        let q: Vec<String> = self.quality.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!(
            "{} videos, {} queries ({} train / {} test), {} priors [{}] -> {}",
            self.videos,
            self.queries,
            self.train_queries,
            self.test_queries,
            self.priors,
            q.join(" "),
            self.manifest.display()
        )
    }
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthSummary> {
    cfg.require_seed("synth")?;
    cfg.write_snapshot()?;
    let s = generate(&cfg.synth)?;
    let manifest = save_corpus(&cfg.paths.out, &s.corpus)?;
    let counts = quality_counts(&cfg.synth.quality_mix, s.corpus.queries.len());
    let quality = PriorQuality::ALL
        .iter()
        .zip(counts)
        .map(|(q, n)| (format!("{q:?}"), n))
        .collect();
    let c = &s.corpus;
    Ok(SynthSummary {
        manifest,
        videos: c.videos.len(),
        queries: c.queries.len(),
        train_queries: c.queries_in(genspan_core::data::Split::Train).count(),
        test_queries: c.queries_in(genspan_core::data::Split::Test).count(),
        priors: c.priors.len(),
        quality,
    })
}

// ---------------------------------------------------------------------------
// prior

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchRecord {
    pub query_id: String,
    pub video_id: Option<String>,
    pub sub_queries: Vec<String>,
    /// Kept subtitle indices (0-based, input order).
    pub selected: Vec<usize>,
    pub relevance: Vec<f64>,
    pub prompt_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriorSummary {
    pub manifest: PathBuf,
    pub generated: usize,
    pub cached: usize,
    pub with_dialogue: usize,
}

impl PriorSummary {
    pub fn line(&self) -> String {
        format!(
            "{} generated, {} cached ({} prompts with dialogue) -> {}",
            self.generated,
            self.cached,
            self.with_dialogue,
            self.manifest.display()
        )
    }
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

/// Runs the prior pipeline for every query of the manifest and writes a new
/// manifest (with the generated priors), one prompt file per prior and the
/// subtitle judgments under the output directory.
pub fn cmd_prior(cfg: &RunConfig) -> Result<PriorSummary> {
    let manifest = cfg.manifest()?;
    let mut corpus = load_manifest(manifest)?;
    let src_dir = manifest.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(&cfg.paths.out)?;
    if same_dir(src_dir, &cfg.paths.out) {
        bail!("output directory {} holds the input manifest; choose another --out", cfg.paths.out.display());
    }
    cfg.write_snapshot()?;
    let scorer = cfg.prior.scorer();
    let generator = cfg.prior.generator(corpus.d, cfg.seed.unwrap_or(0));
    let cache = PriorCache::new(cfg.cache_root());
    let prompt_dir = cfg.paths.out.join("prompts");
    fs::create_dir_all(&prompt_dir)?;

    let mut priors = Vec::new();
    let mut records = Vec::new();
    let (mut generated, mut cached, mut with_dialogue) = (0, 0, 0);
    for q in &corpus.queries {
        let pairs: Vec<(Option<&str>, &[genspan_core::data::Subtitle])> = match cfg.prior.scope {
            PriorScope::Query => vec![(None, &[])],
            PriorScope::Video => corpus.videos.iter().map(|v| (Some(v.video_id.as_str()), v.subtitles.as_slice())).collect(),
        };
        for (video_id, subtitles) in pairs {
            let rec = run_pipeline(&q.query_id, &q.text, video_id, subtitles, cfg.prior.eta, corpus.d, scorer.as_ref(), generator.as_ref(), &cache)
                .with_context(|| format!("query {}", q.query_id))?;
            match rec.outcome {
                CacheOutcome::Generated => generated += 1,
                CacheOutcome::Hit => cached += 1,
            }
            if !rec.matched.selected.is_empty() {
                with_dialogue += 1;
            }
            let name = match video_id {
                Some(v) => format!("{}__{v}.txt", q.query_id),
                None => format!("{}.txt", q.query_id),
            };
            fs::write(prompt_dir.join(&name), &rec.prompt)?;
            records.push(MatchRecord {
                query_id: q.query_id.clone(),
                video_id: video_id.map(String::from),
                sub_queries: rec.decomposition.sub_queries.clone(),
                selected: rec.matched.selected.clone(),
                relevance: rec.matched.judgments.iter().map(|j| j.relevance).collect(),
                prompt_file: format!("prompts/{name}"),
            });
            priors.push(rec.prior);
        }
    }
    fs::write(cfg.paths.out.join(MATCHES_JSON), serde_json::to_string_pretty(&records)?)?;
    corpus.set_priors(priors);
    let manifest = save_corpus(&cfg.paths.out, &corpus)?;
    Ok(PriorSummary {
        manifest,
        generated,
        cached,
        with_dialogue,
    })
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub outcome: TrainOutcome,
}

impl TrainSummary {
    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .outcome
            .epoch_losses
            .iter()
            .enumerate()
            .map(|(e, l)| format!("epoch {:>3}  loss {l:.5}", e + 1))
            .collect();
        out.push(format!("{} steps -> {}", self.outcome.step, self.checkpoint.display()));
        out
    }
}

/// Trains from a seeded initialisation. Writes per-epoch checkpoints, the
/// loss trace and `checkpoint.gsck` (the final parameters; with zero epochs,
/// the initialisation).
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let seed = cfg.require_seed("train")?;
    let corpus = load_manifest(cfg.manifest()?)?;
    cfg.write_snapshot()?;
    let init = init_params(&cfg.model, seed, cfg.train.precision.precision())?;
    let outcome = train(&corpus, &cfg.model, &cfg.train, init, Some(&cfg.paths.out))?;
    let checkpoint = cfg.paths.out.join(FINAL_CHECKPOINT);
    save_checkpoint(
        &checkpoint,
        &Checkpoint {
            params: outcome.params.clone(),
            config: cfg.model,
            step: outcome.step,
        },
    )?;
    Ok(TrainSummary { checkpoint, outcome })
}

// ---------------------------------------------------------------------------
// rank / eval

#[derive(Debug, Clone)]
pub struct RankSummary {
    pub files: Vec<PathBuf>,
    pub rankings: Vec<QueryRanking>,
    pub rows: Vec<RankedRow>,
}

fn list(r: &QueryRanking, task: TaskMode) -> &[MomentCandidate] {
    match task {
        TaskMode::Vcmr => &r.vcmr,
        TaskMode::Vmr => &r.vmr,
        TaskMode::Vr => &r.vr,
    }
}

/// Ranks the evaluation split with a checkpoint and writes one CSV per task.
/// `rows` holds the first `top_k` entries of `task` per query for printing.
pub fn cmd_rank(cfg: &RunConfig, task: TaskMode, top_k: usize) -> Result<RankSummary> {
    let corpus = load_manifest(cfg.manifest()?)?;
    let (params, model) = load_model(cfg.checkpoint()?)?;
    cfg.write_snapshot()?;
    let queries = split_queries(&corpus, cfg)?;
    let rankings = genspan_core::eval::rank_queries(&params, &model, &corpus, &queries, &cfg.rank, cfg.train.precision.precision())?;
    let mut files = Vec::new();
    for t in [TaskMode::Vcmr, TaskMode::Vmr, TaskMode::Vr] {
        let rows: Vec<RankedRow> = rankings.iter().flat_map(|r| ranked_rows(&corpus, &r.query_id, list(r, t))).collect();
        let path = cfg.paths.out.join(ranked_csv_name(t));
        write_ranked_csv(&path, &rows)?;
        files.push(path);
    }
    let rows = rankings
        .iter()
        .flat_map(|r| {
            let l = list(r, task);
            ranked_rows(&corpus, &r.query_id, &l[..top_k.min(l.len())])
        })
        .collect();
    Ok(RankSummary { files, rankings, rows })
}

/// Reads a ranked CSV back into per-query candidate lists.
pub fn read_ranked_csv(path: &Path, corpus: &Corpus) -> Result<BTreeMap<String, Vec<MomentCandidate>>> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out: BTreeMap<String, Vec<(usize, MomentCandidate)>> = BTreeMap::new();
    for row in rd.deserialize() {
        let row: RankedRow = row.with_context(|| format!("parsing {}", path.display()))?;
        let video = corpus
            .video_index(&row.video_id)
            .with_context(|| format!("{}: unknown video {}", path.display(), row.video_id))?;
        out.entry(row.query_id).or_default().push((
            row.rank,
            MomentCandidate {
                video,
                t_s: row.t_s,
                t_e: row.t_e,
                psi: row.psi,
            },
        ));
    }
    Ok(out
        .into_iter()
        .map(|(q, mut v)| {
            v.sort_by_key(|(rank, _)| *rank);
            (q, v.into_iter().map(|(_, c)| c).collect())
        })
        .collect())
}

/// Metrics for the evaluation split, from exported rankings when
/// `eval.rankings` is set, otherwise by ranking with the checkpoint.
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let corpus = load_manifest(cfg.manifest()?)?;
    let queries = split_queries(&corpus, cfg)?;
    let report = match &cfg.eval.rankings {
        Some(dir) => {
            let mut lists = BTreeMap::new();
            for t in [TaskMode::Vcmr, TaskMode::Vmr, TaskMode::Vr] {
                let p = dir.join(ranked_csv_name(t));
                lists.insert(ranked_csv_name(t), read_ranked_csv(existing(Some(&p), "eval.rankings")?, &corpus)?);
            }
            cfg.write_snapshot()?;
            let get = |t: TaskMode, q: &str| lists[ranked_csv_name(t)].get(q).cloned().unwrap_or_default();
            let rankings: Vec<QueryRanking> = queries
                .iter()
                .map(|q| QueryRanking {
                    query_id: q.query_id.clone(),
                    vcmr: get(TaskMode::Vcmr, &q.query_id),
                    vmr: get(TaskMode::Vmr, &q.query_id),
                    vr: get(TaskMode::Vr, &q.query_id),
                })
                .collect();
            metrics_report(&corpus, &queries, &rankings, &cfg.rank)?
        }
        None => {
            let (params, model) = load_model(cfg.checkpoint()?)?;
            cfg.write_snapshot()?;
            evaluate(&params, &model, &corpus, &queries, &cfg.rank, cfg.train.precision.precision())?.0
        }
    };
    fs::write(cfg.paths.out.join(METRICS_JSON), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// bench

pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    cfg.write_snapshot()?;
    let report = scaling_bench(&cfg.bench)?;
    write_bench(&cfg.paths.out, &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// export-relevance

#[derive(Debug, Clone)]
pub struct RelevanceSummary {
    pub path: PathBuf,
    pub query_id: String,
    pub video_id: String,
    pub variants: Vec<RelevanceVariant>,
}

/// Relevance rows of one query over its ground-truth video. The full row
/// uses the main checkpoint and manifest; the others need their own inputs
/// (see `relevance` in the config) and are skipped without them.
pub fn cmd_export_relevance(cfg: &RunConfig) -> Result<RelevanceSummary> {
    let corpus = load_manifest(cfg.manifest()?)?;
    let main_ck = cfg.checkpoint()?;
    let rel = &cfg.relevance;
    let no_sub = rel
        .no_subtitle_manifest
        .as_deref()
        .map(|p| load_manifest(existing(Some(p), "relevance.no_subtitle_manifest")?).map_err(anyhow::Error::from))
        .transpose()?;
    for (p, field) in [(&rel.text_only_checkpoint, "relevance.text_only_checkpoint"), (&rel.no_selector_checkpoint, "relevance.no_selector_checkpoint")] {
        if let Some(p) = p {
            existing(Some(p), field)?;
        }
    }
    let query = match &rel.query_id {
        Some(id) => corpus.query(id).with_context(|| format!("unknown query {id}"))?,
        None => split_queries(&corpus, cfg)?[0],
    };
    let video = corpus.video(&query.gt_video_id).with_context(|| format!("unknown video {}", query.gt_video_id))?;
    let precision = cfg.train.precision.precision();
    cfg.write_snapshot()?;

    let run = |ck: &Path, c: &Corpus| -> Result<(Vec<f64>, Vec<f64>)> {
        let (params, model) = load_model(ck)?;
        let prior = c
            .prior_for(&query.query_id, &video.video_id)
            .with_context(|| format!("no prior for {} / {}", query.query_id, video.video_id))?;
        let out = forward(&params, &model, &video.features, &query.embedding, &prior.features, precision)?;
        Ok((out.scores, out.r))
    };
    let mut rows = Vec::new();
    let (s, r) = run(main_ck, &corpus)?;
    rows.push((RelevanceVariant::Full, relevance_row(RelevanceVariant::Full, &s, &r)));
    if let Some(c) = &no_sub {
        let (s, r) = run(main_ck, c)?;
        rows.push((RelevanceVariant::NoSubtitle, relevance_row(RelevanceVariant::NoSubtitle, &s, &r)));
    }
    for (p, v) in [(&rel.text_only_checkpoint, RelevanceVariant::TextOnly), (&rel.no_selector_checkpoint, RelevanceVariant::NoSelector)] {
        if let Some(p) = p {
            let (s, r) = run(p, &corpus)?;
            rows.push((v, relevance_row(v, &s, &r)));
        }
    }
    let path = cfg.paths.out.join(format!("relevance_{}.csv", query.query_id));
    export_relevance_map(&path, &rows)?;
    Ok(RelevanceSummary {
        path,
        query_id: query.query_id.clone(),
        video_id: video.video_id.clone(),
        variants: rows.iter().map(|(v, _)| *v).collect(),
    })
}
