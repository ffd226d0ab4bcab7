//! Span scoring, IoU, NMS and recall against brute-force oracles.

use genspan_core::eval::{is_hit, recall_at_k, GroundTruth};
use genspan_tensor::kernels::sigmoid;
use genspan_core::retrieval::{global_order, nms, score_spans, temporal_iou, MomentCandidate, QueryScores, RankConfig, TaskMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct O(L²) enumeration with a fresh left-to-right sum per span. The
/// logistic itself is shared with the library so the comparison is exact.
fn brute_spans(video: usize, p_s: &[f64], p_e: &[f64], r: &[f64], max_span: usize) -> Vec<MomentCandidate> {
    let mut out = Vec::new();
    for a in 0..p_s.len() {
        for b in a..p_s.len() {
            if b - a + 1 > max_span {
                continue;
            }
            let mut sum = 0.0;
            for v in &r[a..=b] {
                sum += v;
            }
            out.push(MomentCandidate {
                video,
                t_s: a + 1,
                t_e: b + 1,
                psi: sigmoid(p_s[a]) * sigmoid(p_e[b]) * (sum / (b - a + 1) as f64),
            });
        }
    }
    out
}

/// Clip-set IoU by explicit membership counting.
fn counting_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.min(b.0);
    let hi = a.1.max(b.1);
    let (mut inter, mut union) = (0, 0);
    for t in lo..=hi {
        let ia = (a.0..=a.1).contains(&t);
        let ib = (b.0..=b.1).contains(&t);
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    inter as f64 / union as f64
}

/// Textbook greedy NMS: repeatedly take the best remaining, drop its overlaps.
fn greedy_nms(cands: &[MomentCandidate], thr: f64) -> Vec<MomentCandidate> {
    let mut pool: Vec<(usize, MomentCandidate)> = cands.iter().copied().enumerate().collect();
    let mut kept = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (bi, b) = pool[best];
            let (ci, c) = pool[i];
            let better = c.psi > b.psi
                || (c.psi == b.psi && (c.t_s, c.t_e, ci) < (b.t_s, b.t_e, bi));
            if better {
                best = i;
            }
        }
        let (_, top) = pool.remove(best);
        pool.retain(|(_, c)| counting_iou((top.t_s, top.t_e), (c.t_s, c.t_e)) <= thr);
        kept.push(top);
    }
    kept
}

fn random_video(rng: &mut ChaCha8Rng, len: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p_s = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
    let p_e = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
    let r = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
    (p_s, p_e, r)
}

fn cand(video: usize, t_s: usize, t_e: usize, psi: f64) -> MomentCandidate {
    MomentCandidate { video, t_s, t_e, psi }
}

#[test]
fn span_scores_equal_brute_force_exactly() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.random_range(1..40);
        let max_span = rng.random_range(1..30);
        let (p_s, p_e, r) = random_video(&mut rng, len);
        let fast = score_spans(3, &p_s, &p_e, &r, max_span);
        let slow = brute_spans(3, &p_s, &p_e, &r, max_span);
        assert_eq!(fast, slow, "seed {seed}");
    }
}

#[test]
fn iou_equals_clip_counting() {
    assert_eq!(temporal_iou((1, 4), (3, 6)), 1.0 / 3.0);
    assert_eq!(temporal_iou((2, 2), (2, 2)), 1.0);
    assert_eq!(temporal_iou((1, 2), (3, 4)), 0.0);
    for a0 in 1..=8 {
        for a1 in a0..=8 {
            for b0 in 1..=8 {
                for b1 in b0..=8 {
                    assert_eq!(temporal_iou((a0, a1), (b0, b1)), counting_iou((a0, a1), (b0, b1)));
                }
            }
        }
    }
}

#[test]
fn nms_equals_greedy_oracle() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let len = rng.random_range(2..30);
        let (p_s, p_e, r) = random_video(&mut rng, len);
        let mut cands = score_spans(0, &p_s, &p_e, &r, 12);
        // Quantize some scores so ties are exercised.
        if seed % 2 == 0 {
            for c in &mut cands {
                c.psi = (c.psi * 8.0).round() / 8.0;
            }
        }
        let thr = [0.3, 0.5, 0.7][seed as usize % 3];
        assert_eq!(nms(&cands, thr), greedy_nms(&cands, thr), "seed {seed}");
    }
}

#[test]
fn nms_keeps_disjoint_and_drops_heavy_overlap() {
    let cands = [cand(0, 1, 4, 0.9), cand(0, 2, 4, 0.8), cand(0, 6, 8, 0.7), cand(0, 3, 6, 0.6)];
    let kept = nms(&cands, 0.5);
    assert_eq!(kept, vec![cands[0], cands[2], cands[3]]);
}

#[test]
fn global_order_breaks_ties_by_video_then_span() {
    let mut v = vec![cand(2, 1, 2, 0.5), cand(1, 3, 4, 0.5), cand(1, 1, 5, 0.5), cand(0, 9, 9, 0.9)];
    v.sort_by(global_order);
    assert_eq!(v, vec![cand(0, 9, 9, 0.9), cand(1, 1, 5, 0.5), cand(1, 3, 4, 0.5), cand(2, 1, 2, 0.5)]);
}

#[test]
fn corpus_ranking_shortlists_suppresses_and_merges() {
    let per_video = vec![
        vec![cand(0, 1, 2, 0.2), cand(0, 1, 3, 0.1)],
        vec![cand(1, 1, 2, 0.9), cand(1, 1, 3, 0.85), cand(1, 5, 6, 0.3)],
        vec![cand(2, 2, 4, 0.5)],
    ];
    let scores = QueryScores { per_video };
    assert_eq!(scores.video_score(1), 0.9);
    let vr = scores.rank(TaskMode::Vr, None, &RankConfig::default()).unwrap();
    assert_eq!(vr.iter().map(|c| c.video).collect::<Vec<_>>(), vec![1, 2, 0]);
    let cfg = RankConfig {
        top_videos: 2,
        ..RankConfig::default()
    };
    let vcmr = scores.rank(TaskMode::Vcmr, None, &cfg).unwrap();
    assert_eq!(vcmr, vec![cand(1, 1, 2, 0.9), cand(2, 2, 4, 0.5), cand(1, 5, 6, 0.3)]);
    let vmr = scores.rank(TaskMode::Vmr, Some(0), &cfg).unwrap();
    assert_eq!(vmr, vec![cand(0, 1, 2, 0.2)]);
    assert!(scores.rank(TaskMode::Vmr, None, &cfg).is_err());
    assert!(scores.rank(TaskMode::Vmr, Some(7), &cfg).is_err());
}

#[test]
fn recall_matches_hand_enumerated_fixture() {
    let gts = [
        GroundTruth { video: 0, span: (3, 6) },
        GroundTruth { video: 1, span: (1, 4) },
        GroundTruth { video: 2, span: (5, 5) },
    ];
    // Query 0: hit at rank 1. Query 1: right video, IoU 1/3 at rank 2, exact
    // span at rank 4. Query 2: never localised.
    let lists = vec![
        vec![cand(0, 3, 6, 0.9), cand(1, 1, 1, 0.5)],
        vec![cand(0, 1, 4, 0.9), cand(1, 3, 6, 0.8), cand(2, 1, 2, 0.7), cand(1, 1, 4, 0.6)],
        vec![cand(2, 1, 2, 0.9), cand(0, 5, 5, 0.8)],
    ];
    let r = |k, mu, task| recall_at_k(&lists, &gts, k, mu, task).unwrap();
    assert_eq!(r(1, 0.5, TaskMode::Vcmr), 1.0 / 3.0);
    assert_eq!(r(3, 0.5, TaskMode::Vcmr), 1.0 / 3.0);
    assert_eq!(r(4, 0.5, TaskMode::Vcmr), 2.0 / 3.0);
    assert_eq!(r(2, 0.3, TaskMode::Vcmr), 2.0 / 3.0);
    assert_eq!(r(100, 0.7, TaskMode::Vcmr), 2.0 / 3.0);
    assert_eq!(r(1, 0.0, TaskMode::Vr), 2.0 / 3.0);
    assert_eq!(r(2, 0.0, TaskMode::Vr), 1.0);
    assert!(!is_hit(&lists[2], &gts[2], 100, 0.5, TaskMode::Vcmr));
    assert!(is_hit(&lists[2], &gts[2], 1, 0.5, TaskMode::Vr));
    assert!(recall_at_k(&[], &[], 1, 0.5, TaskMode::Vcmr).is_err());
    assert!(recall_at_k(&lists, &gts, 0, 0.5, TaskMode::Vcmr).is_err());
}

#[test]
fn rank_config_validation() {
    assert!(RankConfig::default().validate().is_ok());
    let bad = RankConfig {
        nms_threshold: 0.0,
        ..RankConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = RankConfig {
        max_span: 0,
        ..RankConfig::default()
    };
    assert!(bad.validate().is_err());
}
