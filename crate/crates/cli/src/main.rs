//! `genspan` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use genspan_cli::commands::{self, ranked_csv_name};
use genspan_cli::config::{Overrides, RunConfig, CACHE_ENV};
use genspan_core::bench::BenchError;
use genspan_core::data::DataError;
use genspan_core::eval::EvalError;
use genspan_core::model::ModelError;
use genspan_core::prior::PriorError;
use genspan_core::retrieval::{RetrievalError, TaskMode};
use genspan_core::synth::SynthError;
use genspan_core::training::{LossError, TrainError};

#[derive(Parser)]
#[command(name = "genspan", version, about = "Video-corpus moment retrieval with generated visual priors")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel scoring.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted moments.
    Synth,
    /// Build (or load cached) generated priors for a manifest.
    Prior {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Subtitle relevance threshold.
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Train a model on the manifest's training split.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a ranked-list export or a checkpoint on the evaluation split.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory with ranked_{vcmr,vmr,vr}.csv from `rank`.
        #[arg(long)]
        rankings: Option<PathBuf>,
    },
    /// Rank the evaluation split and export ranked lists.
    Rank {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Task whose top entries are printed.
        #[arg(long, value_parser = parse_task, default_value = "vcmr")]
        task: TaskMode,
        /// Entries printed per query.
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Backbone vs attention scaling benchmark.
    Bench,
    /// Per-clip relevance map of one query over its ground-truth video.
    ExportRelevance {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        query: Option<String>,
    },
}

fn parse_task(s: &str) -> Result<TaskMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "vcmr" => Ok(TaskMode::Vcmr),
        "vmr" => Ok(TaskMode::Vmr),
        "vr" => Ok(TaskMode::Vr),
        _ => Err(format!("unknown task {s}; expected vcmr, vmr or vr")),
    }
}

/// Exit status per error family; 1 covers configuration and usage errors.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<DataError>() {
            return 3;
        }
        if cause.is::<PriorError>() {
            return 4;
        }
        if cause.is::<TrainError>() || cause.is::<LossError>() || cause.is::<ModelError>() {
            return 5;
        }
        if cause.is::<RetrievalError>() || cause.is::<EvalError>() {
            return 6;
        }
        if cause.is::<BenchError>() {
            return 7;
        }
        if cause.is::<SynthError>() {
            return 8;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let over = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        out: cli.out,
        cache: std::env::var_os(CACHE_ENV).map(PathBuf::from),
    };
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &over)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let set = |slot: &mut Option<PathBuf>, v: Option<PathBuf>| {
        if v.is_some() {
            *slot = v;
        }
    };
    match cli.command {
        Command::Synth => {
            let s = commands::cmd_synth(&cfg)?;
            println!("{}", s.line());
        }
        Command::Prior { manifest, eta } => {
            set(&mut cfg.paths.manifest, manifest);
            if let Some(eta) = eta {
                cfg.prior.eta = eta;
            }
            println!("{}", commands::cmd_prior(&cfg)?.line());
        }
        Command::Train { manifest, epochs } => {
            set(&mut cfg.paths.manifest, manifest);
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            for line in commands::cmd_train(&cfg)?.lines() {
                println!("{line}");
            }
        }
        Command::Eval {
            manifest,
            checkpoint,
            rankings,
        } => {
            set(&mut cfg.paths.manifest, manifest);
            set(&mut cfg.paths.checkpoint, checkpoint);
            set(&mut cfg.eval.rankings, rankings);
            let report = commands::cmd_eval(&cfg)?;
            print!("{}", report.table());
        }
        Command::Rank {
            manifest,
            checkpoint,
            task,
            k,
        } => {
            set(&mut cfg.paths.manifest, manifest);
            set(&mut cfg.paths.checkpoint, checkpoint);
            let s = commands::cmd_rank(&cfg, task, k)?;
            println!("rank,query_id,video_id,t_s,t_e,psi");
            for r in &s.rows {
                println!("{},{},{},{},{},{:.6}", r.rank, r.query_id, r.video_id, r.t_s, r.t_e, r.psi);
            }
            eprintln!("wrote {} under {}", ranked_csv_name(task), cfg.paths.out.display());
        }
        Command::Bench => {
            let r = commands::cmd_bench(&cfg)?;
            println!("length,model,time_ms,mem_bytes");
            for row in &r.rows {
                println!("{},{:?},{:.3},{}", row.length, row.model, row.time_ms, row.mem_bytes);
            }
            let s = r.slopes;
            println!(
                "slopes: backbone time {:.2} mem {:.2}; attention time {:.2} mem {:.2}",
                s.backbone_time, s.backbone_mem, s.attention_time, s.attention_mem
            );
        }
        Command::ExportRelevance {
            manifest,
            checkpoint,
            query,
        } => {
            set(&mut cfg.paths.manifest, manifest);
            set(&mut cfg.paths.checkpoint, checkpoint);
            if query.is_some() {
                cfg.relevance.query_id = query;
            }
            let s = commands::cmd_export_relevance(&cfg)?;
            let names: Vec<&str> = s.variants.iter().map(|v| v.name()).collect();
            println!("{} over {}: [{}] -> {}", s.query_id, s.video_id, names.join(", "), s.path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
