//! Synthetic corpus: determinism, planted ground truth, prior classes.

use genspan_core::data::{PriorQuality, Split};
use genspan_core::eval::VerbBucket;
use genspan_core::prior::{MockScorer, ScorerClient};
use genspan_core::synth::{assign_qualities, generate, oracle_span, quality_counts, query_text, SynthError, SynthSpec};

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

#[test]
fn generation_is_a_pure_function_of_the_spec() {
    let spec = SynthSpec::default();
    assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    let other = generate(&SynthSpec { seed: 8, ..spec }).unwrap();
    assert_ne!(other.corpus.videos, generate(&SynthSpec::default()).unwrap().corpus.videos);
}

#[test]
fn default_corpus_shape() {
    let s = generate(&SynthSpec::default()).unwrap();
    let c = &s.corpus;
    assert_eq!(c.d, 32);
    assert_eq!(c.videos.len(), 64);
    assert_eq!(c.queries.len(), 64);
    assert_eq!(c.queries_in(Split::Train).count(), 32);
    assert_eq!(c.queries_in(Split::Test).count(), 32);
    for (n, (v, q)) in c.videos.iter().zip(&c.queries).enumerate() {
        assert!((32..=64).contains(&v.len()));
        assert_eq!(v.video_id, format!("v{n:04}"));
        assert_eq!(q.query_id, format!("q{n:04}"));
        assert_eq!(q.gt_video_id, v.video_id);
        let plan = &s.plans[n];
        assert_eq!(q.gt_span, (plan.start + 1, plan.end + 1));
        assert_eq!(plan.end + 1 - plan.start, plan.run_lens.iter().sum::<usize>());
        assert!(plan.run_lens.iter().all(|r| (2..=3).contains(r)));
        assert_eq!(q.text, query_text(&plan.motifs));
        assert_eq!(q.sub_event_count, Some(plan.motifs.len() as u32));
        let norm: f64 = q.embedding.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let prior = c.prior_for(&q.query_id, &v.video_id).unwrap();
        assert_eq!(prior.features.dims(), &[8, 32]);
        assert_eq!(prior.quality, Some(PriorQuality::Correct));
        let limit = v.len() as f64 * v.clip_duration_s;
        assert!(v.subtitles.iter().all(|s| 0.0 <= s.start_s && s.start_s <= s.end_s && s.end_s <= limit));
    }
}

#[test]
fn motifs_are_orthonormal() {
    let s = generate(&SynthSpec::default()).unwrap();
    for i in 0..16 {
        for j in 0..16 {
            let dot: f64 = s.motifs.row(i).iter().zip(s.motifs.row(j)).map(|(a, b)| a * b).sum();
            assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
        }
    }
}

#[test]
fn noiseless_oracle_recovers_every_planted_span() {
    for seed in 0..10 {
        for (lo, hi) in [(1, 4), (3, 4)] {
            let spec = SynthSpec {
                seed,
                noise: 0.0,
                motifs_min: lo,
                motifs_max: hi,
                ..SynthSpec::default()
            };
            let s = generate(&spec).unwrap();
            for (n, plan) in s.plans.iter().enumerate() {
                let got = oracle_span(&s.corpus.videos[n].features, &s.motifs, &plan.motifs);
                assert_eq!(got, Some((plan.start, plan.end)), "seed {seed} query {n}");
            }
        }
    }
}

#[test]
fn noiseless_correct_priors_copy_ground_truth_clips() {
    let spec = SynthSpec { noise: 0.0, ..SynthSpec::default() };
    let s = generate(&spec).unwrap();
    for (n, plan) in s.plans.iter().enumerate() {
        let video = &s.corpus.videos[n].features;
        let prior = &s.corpus.priors[n].features;
        let m = plan.end - plan.start + 1;
        for i in 0..8 {
            assert_eq!(prior.row(i), video.row(plan.start + i * m / 8), "query {n} row {i}");
        }
    }
}

#[test]
fn hallucinated_priors_carry_no_motif() {
    let s = generate(&SynthSpec::default().with_quality(PriorQuality::Hallucination)).unwrap();
    for p in &s.corpus.priors {
        assert_eq!(p.quality, Some(PriorQuality::Hallucination));
        for t in 0..p.features.rows() {
            for k in 0..16 {
                assert!(cos(p.features.row(t), s.motifs.row(k)).abs() < 0.1);
            }
        }
    }
}

#[test]
fn hallucinated_priors_do_not_pinpoint_the_gt_clips() {
    let s = generate(&SynthSpec::default().with_quality(PriorQuality::Hallucination)).unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for (q, plan) in s.plans.iter().enumerate() {
        let video = &s.corpus.videos[q].features;
        let prior = &s.corpus.priors[q].features;
        let m = plan.end - plan.start + 1;
        for i in 0..prior.rows() {
            total += cos(prior.row(i), video.row(plan.start + i * m / prior.rows())).abs();
            n += 1;
        }
    }
    let mean = total / n as f64;
    assert!(mean < 0.3, "mean |cos| to the copied gt clip = {mean}");
}

#[test]
fn positive_priors_follow_the_query_motifs() {
    let s = generate(&SynthSpec::default().with_quality(PriorQuality::Positive)).unwrap();
    for (p, plan) in s.corpus.priors.iter().zip(&s.plans) {
        for t in 0..p.features.rows() {
            let best = (0..16)
                .max_by(|&a, &b| cos(p.features.row(t), s.motifs.row(a)).total_cmp(&cos(p.features.row(t), s.motifs.row(b))))
                .unwrap();
            assert!(plan.motifs.contains(&best));
        }
    }
}

#[test]
fn quality_mix_changes_only_the_priors() {
    let base = generate(&SynthSpec::default()).unwrap();
    for q in PriorQuality::ALL {
        let other = generate(&SynthSpec::default().with_quality(q)).unwrap();
        assert_eq!(other.corpus.videos, base.corpus.videos);
        assert_eq!(other.corpus.queries, base.corpus.queries);
        assert_eq!(other.motifs, base.motifs);
        assert!(other.corpus.priors.iter().all(|p| p.quality == Some(q)));
    }
    let mixed = generate(&SynthSpec {
        quality_mix: [0.25; 4],
        ..SynthSpec::default()
    })
    .unwrap();
    let correct = generate(&SynthSpec::default()).unwrap();
    let hall = generate(&SynthSpec::default().with_quality(PriorQuality::Hallucination)).unwrap();
    for (n, p) in mixed.corpus.priors.iter().enumerate() {
        match p.quality.unwrap() {
            PriorQuality::Correct => assert_eq!(p.features, correct.corpus.priors[n].features),
            PriorQuality::Hallucination => assert_eq!(p.features, hall.corpus.priors[n].features),
            _ => {}
        }
    }
}

#[test]
fn quality_counts_are_exact() {
    assert_eq!(quality_counts(&[1.0, 0.0, 0.0, 0.0], 64), [64, 0, 0, 0]);
    assert_eq!(quality_counts(&[0.25; 4], 10), [3, 3, 2, 2]);
    assert_eq!(quality_counts(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0], 10), [4, 3, 3, 0]);
    assert_eq!(quality_counts(&[0.1, 0.2, 0.3, 0.4], 64).iter().sum::<usize>(), 64);
    let a = assign_qualities(&[0.5, 0.0, 0.0, 0.5], 4);
    assert_eq!(
        a,
        vec![PriorQuality::Correct, PriorQuality::Correct, PriorQuality::Hallucination, PriorQuality::Hallucination]
    );
}

#[test]
fn every_verb_bucket_is_populated_and_annotations_match_text() {
    let s = generate(&SynthSpec::default()).unwrap();
    let scorer = MockScorer::default();
    let mut seen = std::collections::BTreeMap::new();
    for q in &s.corpus.queries {
        let c = q.sub_event_count.unwrap();
        assert_eq!(scorer.decompose(&q.text).unwrap().verbs.len(), c as usize);
        *seen.entry((q.split == Split::Train, VerbBucket::of(c))).or_insert(0) += 1;
    }
    // Counts 1..=4 over 64 queries, 8 of each per split.
    for train in [true, false] {
        assert_eq!(seen[&(train, VerbBucket::One)], 8);
        assert_eq!(seen[&(train, VerbBucket::Two)], 8);
        assert_eq!(seen[&(train, VerbBucket::ThreePlus)], 16);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let d = SynthSpec::default();
    for bad in [
        SynthSpec { num_videos: 0, ..d.clone() },
        SynthSpec { num_motifs: 40, ..d.clone() },
        SynthSpec { motifs_min: 3, motifs_max: 2, ..d.clone() },
        SynthSpec { len_min: 8, len_max: 64, ..d.clone() },
        SynthSpec { prior_len: 0, ..d.clone() },
        SynthSpec { noise: -1.0, ..d.clone() },
        SynthSpec { quality_mix: [0.5, 0.0, 0.0, 0.0], ..d.clone() },
    ] {
        assert!(matches!(generate(&bad), Err(SynthError::SpecInvalid(_))), "{bad:?}");
    }
}
