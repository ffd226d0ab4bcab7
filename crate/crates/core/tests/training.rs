//! Training loop: determinism, loss decrease, artifacts and typed failures.

use genspan_core::data::{load_checkpoint, Split};
use genspan_core::model::{init_params, ModelConfig};
use genspan_core::synth::{generate, SynthSpec};
use genspan_core::training::{train, TrainConfig, TrainError};
use genspan_tensor::Precision;

fn spec() -> SynthSpec {
    SynthSpec {
        num_videos: 8,
        len_min: 16,
        len_max: 20,
        d: 8,
        num_motifs: 6,
        motifs_max: 3,
        prior_len: 4,
        ..SynthSpec::default()
    }
}

fn model() -> ModelConfig {
    ModelConfig {
        d: 8,
        state_size: 4,
        num_layers: 2,
        ..ModelConfig::default()
    }
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::desk()
    }
}

#[test]
fn zero_epochs_return_the_initial_parameters() {
    let corpus = generate(&spec()).unwrap().corpus;
    let init = init_params(&model(), 1, Precision::F32).unwrap();
    let out = train(&corpus, &model(), &cfg(0), init.clone(), None).unwrap();
    assert_eq!(out.params, init);
    assert_eq!(out.step, 0);
    assert!(out.trace.is_empty() && out.epoch_losses.is_empty() && out.checkpoints.is_empty());
}

#[test]
fn training_is_deterministic_and_reduces_the_loss() {
    let corpus = generate(&spec()).unwrap().corpus;
    let init = init_params(&model(), 1, Precision::F32).unwrap();
    let a = train(&corpus, &model(), &cfg(6), init.clone(), None).unwrap();
    let b = train(&corpus, &model(), &cfg(6), init.clone(), None).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.trace, b.trace);

    let per_epoch = corpus.queries_in(Split::Train).count() as u64;
    assert_eq!(a.step, 6 * per_epoch);
    assert_eq!(a.trace.len() as u64, a.step);
    assert!(a.trace.iter().enumerate().all(|(i, r)| r.step == i as u64 + 1));
    assert!(a.trace.iter().all(|r| r.total.is_finite() && r.bound >= 0.0 && r.rel >= 0.0 && r.cont >= 0.0));
    assert!(a.epoch_losses[5] < a.epoch_losses[0], "{:?}", a.epoch_losses);

    let other = train(&corpus, &model(), &TrainConfig { seed: 9, ..cfg(6) }, init, None).unwrap();
    assert_ne!(other.params, a.params);
}

#[test]
fn artifacts_are_written_per_epoch() {
    let corpus = generate(&spec()).unwrap().corpus;
    let init = init_params(&model(), 1, Precision::F32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&corpus, &model(), &cfg(2), init, Some(dir.path())).unwrap();
    assert_eq!(out.checkpoints, vec![dir.path().join("epoch_001.gsck"), dir.path().join("epoch_002.gsck")]);
    let last = load_checkpoint(&out.checkpoints[1]).unwrap();
    assert_eq!(last.params, out.params);
    assert_eq!(last.step, out.step);
    assert_eq!(last.config, model());
    assert_ne!(load_checkpoint(&out.checkpoints[0]).unwrap().params, out.params);

    let trace = std::fs::read_to_string(dir.path().join("train_trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("step,epoch,L_bound,L_rel,L_cont,total"));
    assert_eq!(lines.count(), out.trace.len());
}

#[test]
fn unusable_corpora_and_configs_are_rejected() {
    let init = init_params(&model(), 1, Precision::F32).unwrap();
    let mut corpus = generate(&spec()).unwrap().corpus;
    for q in &mut corpus.queries {
        q.split = Split::Test;
    }
    assert!(matches!(train(&corpus, &model(), &cfg(1), init.clone(), None), Err(TrainError::NoTrainingQueries)));

    let mut corpus = generate(&spec()).unwrap().corpus;
    let first_train = corpus.queries_in(Split::Train).next().unwrap().query_id.clone();
    corpus.priors.retain(|p| p.query_id != first_train);
    assert!(matches!(train(&corpus, &model(), &cfg(1), init.clone(), None), Err(TrainError::MissingPrior(id)) if id == first_train));

    let corpus = generate(&spec()).unwrap().corpus;
    for bad in [TrainConfig { batch_size: 0, ..cfg(1) }, TrainConfig { lr: 0.0, ..cfg(1) }, TrainConfig { beta2: 1.0, ..cfg(1) }, TrainConfig { prior_dropout: 1.5, ..cfg(1) }] {
        assert!(matches!(train(&corpus, &model(), &bad, init.clone(), None), Err(TrainError::InvalidConfig(_))));
    }
}

#[test]
fn prior_dropout_changes_training_only_when_enabled() {
    let corpus = generate(&spec()).unwrap().corpus;
    let init = init_params(&model(), 1, Precision::F32).unwrap();
    let base = train(&corpus, &model(), &cfg(2), init.clone(), None).unwrap();
    let off = train(&corpus, &model(), &TrainConfig { prior_dropout: 0.0, ..cfg(2) }, init.clone(), None).unwrap();
    assert_eq!(off.params, base.params);
    let swapped = train(&corpus, &model(), &TrainConfig { prior_dropout: 1.0, ..cfg(2) }, init.clone(), None).unwrap();
    assert_ne!(swapped.params, base.params);
    let again = train(&corpus, &model(), &TrainConfig { prior_dropout: 1.0, ..cfg(2) }, init, None).unwrap();
    assert_eq!(swapped.params, again.params);
}
