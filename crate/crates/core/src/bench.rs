//! Sequence-length scaling of the scan backbone against a single
//! full-attention layer.

use std::path::Path;
use std::time::Instant;

use genspan_tensor::{peak_bytes, reset_peak, live_bytes, Graph, Precision, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{write_atomic, DataError};
use crate::model::{backbone, init_params, Bound, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("need at least 3 strictly increasing lengths, got {0:?}")]
    InsufficientPoints(Vec<usize>),
    #[error("bench export failed: {0}")]
    Export(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub d: usize,
    pub state_size: usize,
    pub num_layers: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![256, 512, 1024, 2048],
            d: 32,
            state_size: 16,
            num_layers: 4,
            reps: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchModel {
    Backbone,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    pub model: BenchModel,
    pub time_ms: f64,
    pub mem_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchSlopes {
    pub backbone_time: f64,
    pub backbone_mem: f64,
    pub attention_time: f64,
    pub attention_mem: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub slopes: BenchSlopes,
}

/// Least-squares slope of log y against log x.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::with_precision(&[rows, cols], data, Precision::F32).expect("finite")
}

/// softmax(Q Kᵀ / √d) V with the full L×L score matrix.
pub fn attention_layer(g: &mut Graph, x: genspan_tensor::Var, wq: genspan_tensor::Var, wk: genspan_tensor::Var, wv: genspan_tensor::Var) -> Result<genspan_tensor::Var, TensorError> {
    let d = g.dims(x)[1];
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt())?;
    let a = g.softmax(s, 1)?;
    g.matmul(a, v)
}

struct Measured {
    time_ms: f64,
    mem_bytes: u64,
}

fn measure(reps: usize, mut run: impl FnMut() -> Result<(), BenchError>) -> Result<Measured, BenchError> {
    let mut times = Vec::with_capacity(reps);
    let mut mem = 0u64;
    for _ in 0..reps.max(1) {
        let base = live_bytes();
        reset_peak();
        let t0 = Instant::now();
        run()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        mem = mem.max((peak_bytes() - base) as u64);
    }
    times.sort_by(f64::total_cmp);
    Ok(Measured {
        time_ms: times[times.len() / 2],
        mem_bytes: mem,
    })
}

/// Forward-only runs, strictly serial, in 32-bit graphs.
pub fn scaling_bench(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    let ls = &cfg.lengths;
    if ls.len() < 3 || ls.windows(2).any(|w| w[0] >= w[1]) || ls[0] == 0 {
        return Err(BenchError::InsufficientPoints(ls.clone()));
    }
    let model = ModelConfig {
        d: cfg.d,
        state_size: cfg.state_size,
        num_layers: cfg.num_layers,
        ..ModelConfig::default()
    };
    let params = init_params(&model, cfg.seed, Precision::F32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (cfg.d as f64).sqrt();
    let wq = random(&mut rng, cfg.d, cfg.d, scale);
    let wk = random(&mut rng, cfg.d, cfg.d, scale);
    let wv = random(&mut rng, cfg.d, cfg.d, scale);

    let mut rows = Vec::new();
    for &l in ls {
        let x = random(&mut rng, l, cfg.d, 1.0);
        let bb = measure(cfg.reps, || {
            let mut g = Graph::with_precision(Precision::F32);
            let b = Bound::new(&mut g, &params, false);
            let xv = g.constant(x.clone());
            backbone(&mut g, &b, cfg.num_layers, xv)?;
            Ok(())
        })?;
        rows.push(BenchRow {
            length: l,
            model: BenchModel::Backbone,
            time_ms: bb.time_ms,
            mem_bytes: bb.mem_bytes,
        });
        let at = measure(cfg.reps, || {
            let mut g = Graph::with_precision(Precision::F32);
            let xv = g.constant(x.clone());
            let (q, k, v) = (g.constant(wq.clone()), g.constant(wk.clone()), g.constant(wv.clone()));
            attention_layer(&mut g, xv, q, k, v)?;
            Ok(())
        })?;
        rows.push(BenchRow {
            length: l,
            model: BenchModel::Attention,
            time_ms: at.time_ms,
            mem_bytes: at.mem_bytes,
        });
    }
    let xs: Vec<f64> = ls.iter().map(|&l| l as f64).collect();
    let series = |m: BenchModel, time: bool| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.model == m)
            .map(|r| if time { r.time_ms } else { r.mem_bytes as f64 })
            .collect()
    };
    let slopes = BenchSlopes {
        backbone_time: loglog_slope(&xs, &series(BenchModel::Backbone, true)),
        backbone_mem: loglog_slope(&xs, &series(BenchModel::Backbone, false)),
        attention_time: loglog_slope(&xs, &series(BenchModel::Attention, true)),
        attention_mem: loglog_slope(&xs, &series(BenchModel::Attention, false)),
    };
    Ok(BenchReport { rows, slopes })
}

/// Writes `bench.csv` (length, model, time_ms, mem_bytes) and `bench_slopes.json`.
pub fn write_bench(dir: &Path, report: &BenchReport) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &report.rows {
        w.serialize(r).map_err(|e| BenchError::Export(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Export(e.to_string()))?;
    write_atomic(&dir.join("bench.csv"), &bytes)?;
    let json = serde_json::to_string_pretty(&report.slopes).map_err(|e| BenchError::Export(e.to_string()))?;
    write_atomic(&dir.join("bench_slopes.json"), json.as_bytes())?;
    Ok(())
}
