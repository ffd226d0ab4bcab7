//! Backbone, cues and token selection against naive re-implementations, plus
//! the selector-mode contracts of the full forward pass.

use genspan_core::model::{
    backbone, forward, init_params, keep_count, relational_adjacency, select_tokens, selector_cues, Bound, ModelConfig, ModelError,
    SelectorMode, KeepRatioTarget, LN_EPS, MOTION_EPS,
};
use genspan_tensor::{Graph, ParamSet, Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// One direction of the scan, step by step: same-padded depthwise conv,
/// SiLU, `h_t = a ⊙ h_{t-1} + B u_t`, `y_t = C h_t`.
fn naive_direction(x: &[Vec<f64>], p: &ParamSet, prefix: &str, reverse: bool) -> Vec<Vec<f64>> {
    let get = |n: &str| p.get(&format!("{prefix}.{n}")).unwrap();
    let (conv, bm, cm, a_raw) = (get("conv"), get("B"), get("C"), get("A_raw"));
    let l = x.len();
    let d = x[0].len();
    let k = conv.cols();
    let n = bm.rows();
    let seq: Vec<&Vec<f64>> = if reverse { x.iter().rev().collect() } else { x.iter().collect() };
    let a: Vec<f64> = a_raw.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    let mut h = vec![0.0; n];
    let mut out = vec![vec![0.0; d]; l];
    for t in 0..l {
        let mut u = vec![0.0; d];
        for (c, uc) in u.iter_mut().enumerate() {
            for j in 0..k {
                let src = t as isize + j as isize - (k / 2) as isize;
                if src >= 0 && (src as usize) < l {
                    *uc += conv.get2(c, j) * seq[src as usize][c];
                }
            }
            *uc = silu(*uc);
        }
        for i in 0..n {
            let bu: f64 = (0..d).map(|c| bm.get2(i, c) * u[c]).sum();
            h[i] = a[i] * h[i] + bu;
        }
        let pos = if reverse { l - 1 - t } else { t };
        for c in 0..d {
            out[pos][c] = (0..n).map(|i| cm.get2(c, i) * h[i]).sum();
        }
    }
    out
}

fn naive_backbone(x: &[Vec<f64>], p: &ParamSet, layers: usize) -> Vec<Vec<f64>> {
    let mut x = x.to_vec();
    for i in 0..layers {
        let f = naive_direction(&x, p, &format!("layer{i}.fwd"), false);
        let r = naive_direction(&x, p, &format!("layer{i}.bwd"), true);
        let scale = p.get(&format!("layer{i}.ln.scale")).unwrap().data();
        let shift = p.get(&format!("layer{i}.ln.shift")).unwrap().data();
        x = x
            .iter()
            .enumerate()
            .map(|(t, row)| {
                let y: Vec<f64> = (0..row.len()).map(|c| row[c] + f[t][c] + r[t][c]).collect();
                let mu = y.iter().sum::<f64>() / y.len() as f64;
                let var = y.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / y.len() as f64;
                y.iter().enumerate().map(|(c, v)| (v - mu) / (var + LN_EPS).sqrt() * scale[c] + shift[c]).collect()
            })
            .collect();
    }
    x
}

/// Random parameters everywhere, including transitions and norms, so the
/// oracle does not benefit from the structured initialisation.
fn scrambled_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let base = init_params(cfg, rng.random(), Precision::F64).unwrap();
    let mut out = ParamSet::new();
    for (name, t) in base.iter() {
        let data = (0..t.len()).map(|_| rng.random_range(-2.5..2.5)).collect();
        out.insert(name.clone(), Tensor::new(t.dims(), data).unwrap());
    }
    out
}

#[test]
fn bidirectional_scan_equals_per_step_recurrence() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            d: rng.random_range(2..7),
            state_size: rng.random_range(1..5),
            num_layers: rng.random_range(1..3),
            conv_kernel: [1, 3, 5][rng.random_range(0..3)],
            ..ModelConfig::default()
        };
        let len = rng.random_range(1..25);
        let p = scrambled_params(&cfg, &mut rng);
        let x = rand_rows(&mut rng, len, cfg.d, 1.0);
        let mut g = Graph::with_precision(Precision::F64);
        let b = Bound::new(&mut g, &p, false);
        let xv = g.constant(tensor(&x));
        let y = backbone(&mut g, &b, cfg.num_layers, xv).unwrap();
        let want = naive_backbone(&x, &p, cfg.num_layers);
        let got = g.value(y);
        for (t, row) in want.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((got.get2(t, c) - v).abs() < 1e-6, "seed {seed} ({t},{c}): {} vs {v}", got.get2(t, c));
            }
        }
    }
}

#[test]
fn scan_state_stays_bounded_on_long_sequences() {
    let cfg = ModelConfig::default();
    let p = init_params(&cfg, 0, Precision::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_rows(&mut rng, 2048, cfg.d, 1.0);
    let mut g = Graph::with_precision(Precision::F64);
    let b = Bound::new(&mut g, &p, false);
    let xv = g.constant(tensor(&x));
    let y = backbone(&mut g, &b, cfg.num_layers, xv).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.is_finite() && v.abs() < 1e3));
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

#[test]
fn cues_equal_direct_formulas() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, d, lg) = (rng.random_range(2..15), 5, rng.random_range(1..6));
        let x = rand_rows(&mut rng, l, d, 1.0);
        let q = rand_rows(&mut rng, 1, d, 1.0);
        let pr = rand_rows(&mut rng, lg, d, 1.0);
        let motion: Vec<f64> = (0..l)
            .map(|t| if t == 0 { 0.0 } else { x[t].iter().zip(&x[t - 1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() })
            .collect();
        let top = motion.iter().copied().fold(0.0, f64::max);

        for with_prior in [true, false] {
            let mut g = Graph::with_precision(Precision::F64);
            let xv = g.constant(tensor(&x));
            let qv = g.constant(tensor(&q));
            let pv = with_prior.then(|| g.constant(tensor(&pr)));
            let cues = selector_cues(&mut g, xv, qv, pv).unwrap();
            let c = g.value(cues);
            assert_eq!(c.dims(), &[l, 3]);
            for t in 0..l {
                assert!((c.get2(t, 0) - cos(&x[t], &q[0])).abs() < 1e-12);
                let best = if with_prior { pr.iter().map(|p| cos(&x[t], p)).fold(f64::NEG_INFINITY, f64::max) } else { 0.0 };
                assert!((c.get2(t, 1) - best).abs() < 1e-12);
                assert!((c.get2(t, 2) - motion[t] / (top + MOTION_EPS)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn adjacency_rows_are_stochastic_and_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut x = rand_rows(&mut rng, 9, 4, 1.0);
    x[3] = vec![0.0; 4];
    let a = relational_adjacency(&tensor(&x));
    for i in 0..9 {
        let row = &a[i * 9..(i + 1) * 9];
        assert!(row.iter().all(|v| *v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(a[3 * 9 + 3], 1.0);
}

#[test]
fn keep_count_floors_with_a_floor_of_one() {
    assert_eq!(keep_count(100, 0.33), 33);
    assert_eq!(keep_count(100, 0.29), 29);
    assert_eq!(keep_count(10, 1.0), 10);
    assert_eq!(keep_count(5, 0.01), 1);
    assert_eq!(keep_count(1, 0.33), 1);
    for len in 1..200 {
        for rho in [0.1, 0.25, 0.33, 0.5, 0.9] {
            let want = ((rho * len as f64).floor() as usize).max(1);
            // Exact products may land a hair below an integer; allow only that.
            let k = keep_count(len, rho);
            assert!(k == want || (k == want + 1 && (rho * len as f64 - k as f64).abs() < 1e-9), "{len} {rho}");
        }
    }
}

#[test]
fn selection_invariants() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.random_range(1..120);
        let scores: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert_eq!(select_tokens(&scores, 1.0), (0..len).collect::<Vec<_>>());
        for rho in [0.1, 0.33, 0.5] {
            let base = select_tokens(&scores, rho);
            assert_eq!(base.len(), keep_count(len, rho));
            assert!(base.windows(2).all(|w| w[0] < w[1]));
            let c = rng.random_range(0.01..100.0);
            let scaled: Vec<f64> = scores.iter().map(|s| c * s).collect();
            assert_eq!(select_tokens(&scaled, rho), base, "seed {seed} rho {rho} c {c}");
            // Every kept score beats every dropped one.
            let min_kept = base.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            assert!((0..len).filter(|i| !base.contains(i)).all(|i| scores[i] <= min_kept));
        }
    }
    assert_eq!(select_tokens(&[1.0, 2.0, 2.0, 0.0], 0.5), vec![1, 2]);
    assert_eq!(select_tokens(&[5.0, 5.0, 5.0], 0.34), vec![0]);
}

struct Fixture {
    video: Tensor,
    query: Tensor,
    prior: Tensor,
    other_prior: Tensor,
}

fn fixture(seed: u64, l: usize, d: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Fixture {
        video: tensor(&rand_rows(&mut rng, l, d, 1.0)),
        query: tensor(&rand_rows(&mut rng, 1, d, 1.0)),
        prior: tensor(&rand_rows(&mut rng, 4, d, 1.0)),
        other_prior: tensor(&rand_rows(&mut rng, 6, d, 1.0)),
    }
}

fn small(mode: SelectorMode) -> ModelConfig {
    ModelConfig {
        d: 8,
        state_size: 4,
        num_layers: 2,
        selector_mode: mode,
        ..ModelConfig::default()
    }
}

#[test]
fn unselected_positions_carry_head_biases() {
    let cfg = small(SelectorMode::Select);
    let mut p = init_params(&cfg, 3, Precision::F64).unwrap();
    p.insert("head.bs", Tensor::new(&[1, 1], vec![-1.25]).unwrap());
    p.insert("head.br", Tensor::new(&[1, 1], vec![0.5]).unwrap());
    let f = fixture(1, 30, 8);
    let out = forward(&p, &cfg, &f.video, &f.query, &f.prior, Precision::F64).unwrap();
    assert_eq!(out.indices.len(), keep_count(30, cfg.keep_ratio));
    assert_eq!(out.gate.len(), out.indices.len());
    assert_eq!(out.scores.len(), 30);
    for t in 0..30 {
        if !out.indices.contains(&t) {
            assert_eq!(out.p_s[t], -1.25);
            assert_eq!(out.r[t], genspan_tensor::kernels::sigmoid(0.5));
        }
    }
    let sel_scores: Vec<f64> = out.indices.iter().map(|&i| out.scores[i]).collect();
    assert_eq!(out.indices, select_tokens(&out.scores, cfg.keep_ratio));
    for (g, s) in out.gate.iter().zip(sel_scores) {
        assert_eq!(*g, genspan_tensor::kernels::sigmoid(s));
    }
}

#[test]
fn full_keep_ratio_selects_every_token() {
    let cfg = ModelConfig {
        keep_ratio: 1.0,
        ..small(SelectorMode::Select)
    };
    let p = init_params(&cfg, 0, Precision::F64).unwrap();
    let f = fixture(2, 17, 8);
    let out = forward(&p, &cfg, &f.video, &f.query, &f.prior, Precision::F64).unwrap();
    assert_eq!(out.indices, (0..17).collect::<Vec<_>>());
}

#[test]
fn positive_rescaling_of_selector_preserves_selection() {
    let cfg = small(SelectorMode::Select);
    let p = init_params(&cfg, 9, Precision::F64).unwrap();
    let f = fixture(3, 40, 8);
    let base = forward(&p, &cfg, &f.video, &f.query, &f.prior, Precision::F64).unwrap();
    for c in [0.1, 3.0, 50.0] {
        let mut q = p.clone();
        for name in ["selector.w", "selector.b"] {
            let t = p.get(name).unwrap();
            q.insert(name, t.map(|v| c * v).unwrap());
        }
        let out = forward(&q, &cfg, &f.video, &f.query, &f.prior, Precision::F64).unwrap();
        assert_eq!(out.indices, base.indices, "scale {c}");
    }
}

#[test]
fn concat_keeps_every_token_and_reads_the_prior() {
    let cfg = small(SelectorMode::Concat);
    let p = init_params(&cfg, 1, Precision::F64).unwrap();
    let f = fixture(4, 21, 8);
    let a = forward(&p, &cfg, &f.video, &f.query, &f.prior, Precision::F64).unwrap();
    let b = forward(&p, &cfg, &f.video, &f.query, &f.other_prior, Precision::F64).unwrap();
    assert_eq!(a.indices, (0..21).collect::<Vec<_>>());
    assert_eq!(a.p_s.len(), 21);
    assert_ne!(a.p_s, b.p_s);
}

#[test]
fn off_mode_ignores_the_prior() {
    let cfg = small(SelectorMode::Off);
    let p = init_params(&cfg, 1, Precision::F64).unwrap();
    let f = fixture(5, 25, 8);
    let a = forward(&p, &cfg, &f.video, &f.query, &f.prior, Precision::F64).unwrap();
    let b = forward(&p, &cfg, &f.video, &f.query, &f.other_prior, Precision::F64).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.indices.len(), keep_count(25, cfg.keep_ratio));
}

#[test]
fn select_mode_prior_changes_scores() {
    let cfg = small(SelectorMode::Select);
    let p = init_params(&cfg, 1, Precision::F64).unwrap();
    let f = fixture(6, 25, 8);
    let a = forward(&p, &cfg, &f.video, &f.query, &f.prior, Precision::F64).unwrap();
    let b = forward(&p, &cfg, &f.video, &f.query, &f.other_prior, Precision::F64).unwrap();
    assert_ne!(a.scores, b.scores);
}

#[test]
fn generated_target_keeps_all_candidate_tokens() {
    let cfg = ModelConfig {
        keep_ratio_target: KeepRatioTarget::Generated,
        ..small(SelectorMode::Select)
    };
    let p = init_params(&cfg, 1, Precision::F64).unwrap();
    let f = fixture(7, 19, 8);
    let out = forward(&p, &cfg, &f.video, &f.query, &f.prior, Precision::F64).unwrap();
    assert_eq!(out.indices, (0..19).collect::<Vec<_>>());
}

#[test]
fn forward_is_deterministic_and_checks_shapes() {
    let cfg = small(SelectorMode::Select);
    let p = init_params(&cfg, 1, Precision::F32).unwrap();
    let f = fixture(8, 16, 8);
    let a = forward(&p, &cfg, &f.video, &f.query, &f.prior, Precision::F32).unwrap();
    let b = forward(&p, &cfg, &f.video, &f.query, &f.prior, Precision::F32).unwrap();
    assert_eq!(a, b);
    assert!(a.r.iter().all(|v| *v > 0.0 && *v < 1.0));
    let wrong = Tensor::zeros(&[1, 7]);
    assert!(matches!(
        forward(&p, &cfg, &f.video, &wrong, &f.prior, Precision::F32),
        Err(ModelError::DimMismatch(_))
    ));
}

#[test]
fn init_is_seeded_and_config_validated() {
    let cfg = ModelConfig::default();
    assert_eq!(init_params(&cfg, 3, Precision::F64).unwrap(), init_params(&cfg, 3, Precision::F64).unwrap());
    assert_ne!(init_params(&cfg, 3, Precision::F64).unwrap(), init_params(&cfg, 4, Precision::F64).unwrap());
    for bad in [
        ModelConfig { keep_ratio: 0.0, ..cfg },
        ModelConfig { keep_ratio: 1.5, ..cfg },
        ModelConfig { conv_kernel: 2, ..cfg },
        ModelConfig { state_size: 0, ..cfg },
    ] {
        assert!(matches!(bad.validate(), Err(ModelError::InvalidConfig(_))));
    }
}
