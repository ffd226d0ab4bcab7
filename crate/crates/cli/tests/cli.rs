//! Subcommands in-process and through the binary: artifacts, caching,
//! config resolution and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use genspan_cli::commands::{read_ranked_csv, ranked_csv_name, FINAL_CHECKPOINT, MATCHES_JSON, METRICS_JSON};
use genspan_cli::config::{ClientSpec, PriorScope, RESOLVED_CONFIG};
use genspan_cli::{cmd_eval, cmd_export_relevance, cmd_prior, cmd_rank, cmd_synth, cmd_train, Overrides, RunConfig};
use genspan_core::data::{load_checkpoint, load_manifest, Split};
use genspan_core::eval::evaluate;
use genspan_core::model::{init_params, params_from_checkpoint, ModelConfig};
use genspan_core::prior::PriorError;
use genspan_core::retrieval::TaskMode;
use genspan_core::synth::SynthSpec;

fn small_config(out: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::resolve(
        None,
        &Overrides {
            seed: Some(seed),
            out: Some(out.to_path_buf()),
            ..Overrides::default()
        },
    )
    .unwrap();
    cfg.synth = SynthSpec {
        seed,
        num_videos: 8,
        len_min: 16,
        len_max: 24,
        d: 8,
        num_motifs: 6,
        motifs_max: 3,
        prior_len: 4,
        ..SynthSpec::default()
    };
    cfg.model = ModelConfig {
        d: 8,
        state_size: 4,
        num_layers: 2,
        ..ModelConfig::default()
    };
    cfg.train.epochs = 2;
    cfg
}

/// Synthesises a small corpus under `root/data` and returns a config whose
/// output directory is `root/<name>`, reading that manifest.
fn with_corpus(root: &Path, name: &str) -> RunConfig {
    let mut cfg = small_config(&root.join("data"), 3);
    let s = cmd_synth(&cfg).unwrap();
    cfg.paths.manifest = Some(s.manifest);
    cfg.paths.out = root.join(name);
    cfg
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_path_buf();
                // The snapshot records the output directory itself.
                if rel != Path::new(RESOLVED_CONFIG) {
                    out.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_seeded_and_summarised() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = cmd_synth(&small_config(a.path(), 3)).unwrap();
    let sb = cmd_synth(&small_config(b.path(), 3)).unwrap();
    assert!(files(a.path()) == files(b.path()));
    assert_eq!((sa.videos, sa.queries, sa.train_queries + sa.test_queries), (8, 8, 8));
    assert_eq!(sa.quality.get("Correct"), Some(&8));
    assert!(sa.line().starts_with("8 videos, 8 queries (4 train / 4 test)"), "{}", sa.line());
    assert_eq!(load_manifest(&sb.manifest).unwrap().queries.len(), 8);

    let c = tempfile::tempdir().unwrap();
    cmd_synth(&small_config(c.path(), 4)).unwrap();
    assert!(files(a.path()) != files(c.path()));

    let mut unseeded = small_config(c.path(), 3);
    unseeded.seed = None;
    assert!(cmd_synth(&unseeded).unwrap_err().to_string().contains("seed"));
}

#[test]
fn prior_reruns_hit_the_cache_and_write_a_new_manifest() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = with_corpus(root.path(), "prior");
    cfg.prior.scope = PriorScope::Video;
    let first = cmd_prior(&cfg).unwrap();
    assert_eq!((first.generated, first.cached), (64, 0));
    assert!(first.with_dialogue > 0);
    let corpus = load_manifest(&first.manifest).unwrap();
    assert_eq!(corpus.priors.len(), 64);
    assert!(corpus.priors.iter().all(|p| p.video_id.is_some()));
    let matches: serde_json::Value = serde_json::from_slice(&fs::read(cfg.paths.out.join(MATCHES_JSON)).unwrap()).unwrap();
    assert_eq!(matches.as_array().unwrap().len(), 64);
    assert_eq!(fs::read_dir(cfg.paths.out.join("prompts")).unwrap().count(), 64);

    let again = cmd_prior(&cfg).unwrap();
    assert_eq!((again.generated, again.cached), (0, 64));

    cfg.prior.scope = PriorScope::Query;
    cfg.paths.out = root.path().join("per-query");
    let per_query = cmd_prior(&cfg).unwrap();
    assert_eq!(per_query.generated, 8);
    assert!(load_manifest(&per_query.manifest).unwrap().priors.iter().all(|p| p.video_id.is_none()));
}

#[test]
fn prior_refuses_to_overwrite_its_input_and_reports_client_failures() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = with_corpus(root.path(), "data");
    assert!(cmd_prior(&cfg).unwrap_err().to_string().contains("holds the input manifest"));

    cfg.paths.out = root.path().join("http");
    cfg.prior.scorer = ClientSpec::Http {
        endpoint: "http://127.0.0.1:9".into(),
    };
    let err = cmd_prior(&cfg).unwrap_err();
    assert!(err.chain().any(|c| matches!(c.downcast_ref::<PriorError>(), Some(PriorError::ClientFailure(_)))), "{err:#}");
}

#[test]
fn zero_epochs_save_the_seeded_initialisation() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = with_corpus(root.path(), "train");
    cfg.train.epochs = 0;
    let s = cmd_train(&cfg).unwrap();
    assert_eq!(s.checkpoint, cfg.paths.out.join(FINAL_CHECKPOINT));
    let ck = load_checkpoint(&s.checkpoint).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.config, cfg.model);
    let init = init_params(&cfg.model, 3, cfg.train.precision.precision()).unwrap();
    assert_eq!(params_from_checkpoint(&ck, &ck.config).unwrap(), init);
}

#[test]
fn rank_exports_round_trip_through_eval() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = with_corpus(root.path(), "run");
    let trained = cmd_train(&cfg).unwrap();
    assert_eq!(trained.outcome.epoch_losses.len(), 2);
    assert!(cfg.paths.out.join("epoch_002.gsck").is_file() && cfg.paths.out.join("train_trace.csv").is_file());
    cfg.paths.checkpoint = Some(trained.checkpoint.clone());

    let ranked = cmd_rank(&cfg, TaskMode::Vmr, 2).unwrap();
    let names: Vec<PathBuf> = [TaskMode::Vcmr, TaskMode::Vmr, TaskMode::Vr].iter().map(|&t| cfg.paths.out.join(ranked_csv_name(t))).collect();
    assert_eq!(ranked.files, names);
    assert_eq!(ranked.rows.len(), 2 * 4);
    assert!(ranked.rows.iter().all(|r| r.rank == 1 || r.rank == 2));

    let corpus = load_manifest(cfg.paths.manifest.as_deref().unwrap()).unwrap();
    let from_csv = read_ranked_csv(&names[0], &corpus).unwrap();
    for r in &ranked.rankings {
        assert_eq!(from_csv[&r.query_id], r.vcmr);
    }

    let direct = cmd_eval(&cfg).unwrap();
    cfg.eval.rankings = Some(cfg.paths.out.clone());
    let via_csv = cmd_eval(&cfg).unwrap();
    assert_eq!(direct, via_csv);
    assert_eq!(direct.num_queries, 4);

    let ck = load_checkpoint(&trained.checkpoint).unwrap();
    let params = params_from_checkpoint(&ck, &ck.config).unwrap();
    let test: Vec<_> = corpus.queries_in(Split::Test).collect();
    let (in_process, _) = evaluate(&params, &ck.config, &corpus, &test, &cfg.rank, cfg.train.precision.precision()).unwrap();
    assert_eq!(direct, in_process);
    let written: serde_json::Value = serde_json::from_slice(&fs::read(cfg.paths.out.join(METRICS_JSON)).unwrap()).unwrap();
    assert_eq!(written["num_queries"], 4);
}

#[test]
fn relevance_export_writes_only_the_rows_it_has_inputs_for() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = with_corpus(root.path(), "rel");
    cfg.train.epochs = 0;
    let ck = cmd_train(&cfg).unwrap().checkpoint;
    cfg.paths.checkpoint = Some(ck.clone());
    let s = cmd_export_relevance(&cfg).unwrap();
    assert_eq!(s.variants.len(), 1);
    let text = fs::read_to_string(&s.path).unwrap();
    assert!(text.starts_with('#'));
    assert_eq!(s.path, cfg.paths.out.join(format!("relevance_{}.csv", s.query_id)));

    cfg.relevance.text_only_checkpoint = Some(ck.clone());
    cfg.relevance.no_selector_checkpoint = Some(ck);
    cfg.relevance.query_id = Some(s.query_id.clone());
    assert_eq!(cmd_export_relevance(&cfg).unwrap().variants.len(), 3);

    cfg.relevance.text_only_checkpoint = Some(root.path().join("missing.gsck"));
    assert!(cmd_export_relevance(&cfg).unwrap_err().to_string().contains("relevance.text_only_checkpoint"));
}

#[test]
fn config_files_merge_with_flags_and_are_snapshotted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    fs::write(&path, r#"{"seed": 5, "threads": 2, "train": {"epochs": 1}, "prior": {"scope": "video", "generator": {"kind": "http", "endpoint": "http://x"}}}"#).unwrap();
    let cfg = RunConfig::resolve(Some(&path), &Overrides::default()).unwrap();
    assert_eq!((cfg.seed, cfg.synth.seed, cfg.train.seed), (Some(5), 5, 5));
    assert_eq!(cfg.train.epochs, 1);
    assert_eq!(cfg.train.lr, RunConfig::default().train.lr);
    assert_eq!(cfg.prior.generator, ClientSpec::Http { endpoint: "http://x".into() });

    let over = Overrides {
        seed: Some(9),
        out: Some(dir.path().join("o")),
        cache: Some(dir.path().join("c")),
        ..Overrides::default()
    };
    let cfg = RunConfig::resolve(Some(&path), &over).unwrap();
    assert_eq!((cfg.synth.seed, cfg.train.seed), (9, 9));
    assert_eq!(cfg.cache_root(), dir.path().join("c"));
    let snap = cfg.write_snapshot().unwrap();
    assert_eq!(snap, dir.path().join("o").join(RESOLVED_CONFIG));
    assert_eq!(RunConfig::from_file(&snap).unwrap(), cfg);

    fs::write(&path, r#"{"sed": 1}"#).unwrap();
    assert!(RunConfig::resolve(Some(&path), &Overrides::default()).is_err());
    let zero = Overrides {
        threads: Some(0),
        ..Overrides::default()
    };
    assert!(RunConfig::resolve(None, &zero).is_err());
}

fn genspan(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_genspan"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GENSPAN_CACHE")
        .output()
        .unwrap()
}

#[test]
fn binary_runs_the_pipeline_and_maps_errors_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    fs::write(
        &cfg,
        r#"{"synth": {"num_videos": 6, "len_min": 16, "len_max": 20, "d": 8, "num_motifs": 6, "motifs_max": 3, "prior_len": 4},
            "model": {"d": 8, "state_size": 4, "num_layers": 1}}"#,
    )
    .unwrap();
    let c = cfg.to_str().unwrap();

    let out = genspan(&["--config", c, "--seed", "2", "--out", "data", "synth"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("6 videos"));

    let out = genspan(&["--config", c, "--seed", "2", "--out", "run", "train", "--manifest", "data/manifest.json", "--epochs", "1"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run").join(FINAL_CHECKPOINT).is_file());
    let snap = RunConfig::from_file(&dir.path().join("run").join(RESOLVED_CONFIG)).unwrap();
    assert_eq!((snap.seed, snap.train.epochs), (Some(2), 1));

    let args = ["--config", c, "--out", "run", "rank", "--manifest", "data/manifest.json", "--checkpoint", "run/checkpoint.gsck", "--task", "vr"];
    let out = genspan(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("rank,query_id,video_id,t_s,t_e,psi\n"));

    let out = genspan(&["--out", "run", "eval", "--manifest", "data/manifest.json", "--rankings", "run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("VCMR"));

    // Usage and configuration problems exit 1; a malformed manifest is a data error.
    assert_eq!(genspan(&["--out", "x", "synth"], dir.path()).status.code(), Some(1));
    assert_eq!(genspan(&["train", "--seed", "1", "--manifest", "nope.json"], dir.path()).status.code(), Some(1));
    fs::write(dir.path().join("bad.json"), "{").unwrap();
    assert_eq!(genspan(&["--seed", "1", "--out", "y", "train", "--manifest", "bad.json"], dir.path()).status.code(), Some(3));
    assert_eq!(genspan(&["rank", "--task", "xyz"], dir.path()).status.code(), Some(2));
}
