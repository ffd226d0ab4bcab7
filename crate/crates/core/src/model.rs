//! Prior-guided token selection over a bidirectional diagonal-SSM backbone.
//!
//! Pipeline per candidate video: relational (GCN) embedding → three selector
//! cues → top-ρL gated selection → stacked bidirectional scans → scatter back
//! to the full timeline → start / end / relevance heads.

use std::collections::HashMap;

use genspan_tensor::{Graph, ParamSet, Precision, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Checkpoint, DataError};

/// Denominator guard of the motion cue.
pub const MOTION_EPS: f64 = 1e-8;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape mismatch: {0}")]
    DimMismatch(String),
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectorMode {
    /// Prior steers which candidate tokens survive.
    #[default]
    Select,
    /// No pruning; prior tokens are prepended to the sequence instead.
    Concat,
    /// Prior ignored entirely (text-only).
    Off,
}

/// What the keep ratio ρ prunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KeepRatioTarget {
    /// Candidate-video tokens (default).
    #[default]
    Candidate,
    /// Alternative reading: prune generated prior tokens (by query
    /// similarity) and keep every candidate token.
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub state_size: usize,
    pub num_layers: usize,
    pub conv_kernel: usize,
    pub keep_ratio: f64,
    pub gcn_layers: usize,
    pub selector_mode: SelectorMode,
    pub keep_ratio_target: KeepRatioTarget,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            state_size: 16,
            num_layers: 4,
            conv_kernel: 3,
            keep_ratio: 0.33,
            gcn_layers: 1,
            selector_mode: SelectorMode::Select,
            keep_ratio_target: KeepRatioTarget::Candidate,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return bad("keep ratio must lie in (0, 1]");
        }
        if self.state_size == 0 || self.num_layers == 0 || self.d == 0 || self.gcn_layers == 0 {
            return bad("d, state size, layer counts must be >= 1");
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad("conv kernel must be odd");
        }
        Ok(())
    }

    /// Flat numeric echo stored inside checkpoints (every value exact in f32).
    pub(crate) fn encode(&self) -> Vec<f32> {
        let mode = match self.selector_mode {
            SelectorMode::Select => 0.0,
            SelectorMode::Concat => 1.0,
            SelectorMode::Off => 2.0,
        };
        let target = match self.keep_ratio_target {
            KeepRatioTarget::Candidate => 0.0,
            KeepRatioTarget::Generated => 1.0,
        };
        vec![
            self.d as f32,
            self.state_size as f32,
            self.num_layers as f32,
            self.conv_kernel as f32,
            self.gcn_layers as f32,
            mode,
            target,
            (self.keep_ratio * 1e6).round() as f32,
        ]
    }

    pub(crate) fn decode(v: &[f64]) -> Option<ModelConfig> {
        if v.len() != 8 {
            return None;
        }
        let selector_mode = match v[5] as u32 {
            0 => SelectorMode::Select,
            1 => SelectorMode::Concat,
            2 => SelectorMode::Off,
            _ => return None,
        };
        let keep_ratio_target = match v[6] as u32 {
            0 => KeepRatioTarget::Candidate,
            1 => KeepRatioTarget::Generated,
            _ => return None,
        };
        Some(ModelConfig {
            d: v[0] as usize,
            state_size: v[1] as usize,
            num_layers: v[2] as usize,
            conv_kernel: v[3] as usize,
            gcn_layers: v[4] as usize,
            selector_mode,
            keep_ratio_target,
            keep_ratio: v[7] / 1e6,
        })
    }
}

// ---------------------------------------------------------------------------
// parameters

enum Init {
    Uniform(usize),
    Const(f64),
}

fn gcn_name(l: usize) -> String {
    if l == 0 {
        "gcn.W".into()
    } else {
        format!("gcn{l}.W")
    }
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, n, k) = (cfg.d, cfg.state_size, cfg.conv_kernel);
    let mut v = Vec::new();
    for l in 0..cfg.gcn_layers {
        v.push((gcn_name(l), vec![d, d], Init::Uniform(d)));
    }
    // Positive start so every cue initially votes "keep"; see README.
    v.push(("selector.w".into(), vec![3, 1], Init::Const(1.0 / 3f64.sqrt())));
    v.push(("selector.b".into(), vec![1, 1], Init::Const(0.0)));
    v.push(("selector.cue_proj".into(), vec![3, d], Init::Uniform(3)));
    for i in 0..cfg.num_layers {
        for dir in ["fwd", "bwd"] {
            v.push((format!("layer{i}.{dir}.A_raw"), vec![1, n], Init::Const(2.0)));
            v.push((format!("layer{i}.{dir}.B"), vec![n, d], Init::Uniform(d)));
            v.push((format!("layer{i}.{dir}.C"), vec![d, n], Init::Uniform(n)));
            v.push((format!("layer{i}.{dir}.conv"), vec![d, k], Init::Uniform(k)));
        }
        v.push((format!("layer{i}.ln.scale"), vec![1, d], Init::Const(1.0)));
        v.push((format!("layer{i}.ln.shift"), vec![1, d], Init::Const(0.0)));
    }
    for h in ["s", "e", "r"] {
        v.push((format!("head.W{h}"), vec![1, d], Init::Uniform(d)));
    }
    for h in ["s", "e", "r"] {
        v.push((format!("head.b{h}"), vec![1, 1], Init::Const(0.0)));
    }
    v
}

/// Stable parameter names and shapes, in initialization order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, d, _)| (n, d)).collect()
}

/// Weights uniform in ±1/√fan_in, transitions at +2 (a ≈ 0.88), biases zero.
pub fn init_params(cfg: &ModelConfig, seed: u64, precision: Precision) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    for (name, dims, init) in layout(cfg) {
        let n: usize = dims.iter().product();
        let data = match init {
            Init::Uniform(fan) => {
                let b = 1.0 / (fan as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..b)).collect()
            }
            Init::Const(c) => vec![c; n],
        };
        ps.insert(name, Tensor::with_precision(&dims, data, precision)?);
    }
    Ok(ps)
}

/// Checks that a checkpoint carries exactly the parameters `cfg` needs.
pub fn params_from_checkpoint(ck: &Checkpoint, cfg: &ModelConfig) -> std::result::Result<ParamSet, DataError> {
    let shapes = param_shapes(cfg);
    let missing: Vec<&str> = shapes
        .iter()
        .filter(|(n, _)| !ck.params.contains(n))
        .map(|(n, _)| n.as_str())
        .collect();
    let extra: Vec<&str> = ck.params.names().filter(|n| !shapes.iter().any(|(s, _)| s == n)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(DataError::NameMismatch(format!("missing {missing:?}, unexpected {extra:?}")));
    }
    for (name, dims) in &shapes {
        let found = ck.params.get(name).unwrap().dims();
        if found != dims.as_slice() {
            return Err(DataError::DimMismatch {
                name: name.clone(),
                expected: dims.clone(),
                found: found.to_vec(),
            });
        }
    }
    Ok(ck.params.clone())
}

/// Parameters placed into a graph.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Trainable leaves when `trainable`, constants otherwise.
    pub fn new(g: &mut Graph, params: &ParamSet, trainable: bool) -> Bound {
        let vars = params
            .iter()
            .map(|(n, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

// ---------------------------------------------------------------------------
// pieces

/// Row-normalized non-negative cosine adjacency; all-zero rows get a self loop.
pub fn relational_adjacency(e_o: &Tensor) -> Vec<f64> {
    let (l, d) = (e_o.rows(), e_o.cols());
    let unit: Vec<Vec<f64>> = (0..l)
        .map(|t| {
            let row = e_o.row(t);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect()
        })
        .collect();
    let mut a = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            let c: f64 = (0..d).map(|k| unit[i][k] * unit[j][k]).sum();
            a[i * l + j] = c.max(0.0);
        }
        let s: f64 = a[i * l..(i + 1) * l].iter().sum();
        if s > 0.0 {
            a[i * l..(i + 1) * l].iter_mut().for_each(|v| *v /= s);
        } else {
            a[i * l + i] = 1.0;
        }
    }
    a
}

/// `x = e_o + SiLU(Â e_o W_g)`, repeated for extra GCN layers.
pub fn relational_embed(g: &mut Graph, b: &Bound, cfg: &ModelConfig, e_o: Var) -> Result<Var> {
    let l = g.dims(e_o)[0];
    let adj = Tensor::new(&[l, l], relational_adjacency(g.value(e_o)))?;
    let adj = g.constant(adj);
    let mut x = e_o;
    for layer in 0..cfg.gcn_layers {
        let w = b.get(&gcn_name(layer))?;
        let m = g.matmul(adj, x)?;
        let m = g.matmul(m, w)?;
        let r = g.silu(m)?;
        x = g.add(x, r)?;
    }
    Ok(x)
}

/// `max(1, floor(ρL))`; the tiny slack keeps e.g. 0.29·100 from flooring to 28.
pub fn keep_count(len: usize, rho: f64) -> usize {
    ((rho * len as f64 + 1e-9).floor() as usize).clamp(1, len.max(1))
}

/// Indices of the `keep_count` largest scores (ties → smaller index),
/// returned in ascending temporal order.
pub fn select_tokens(scores: &[f64], rho: f64) -> Vec<usize> {
    let k = keep_count(scores.len(), rho);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut idx = order[..k].to_vec();
    idx.sort_unstable();
    idx
}

/// Three per-token cues as an L×3 matrix: query cosine, best prior-token
/// cosine, and normalized frame-difference magnitude.
pub fn selector_cues(g: &mut Graph, x: Var, e_q: Var, prior: Option<Var>) -> Result<Var> {
    let (l, d) = (g.dims(x)[0], g.dims(x)[1]);
    let q = g.expand(e_q, [l, d])?;
    let c1 = g.cosine_rows(x, q)?;
    let c2 = match prior {
        Some(p) => {
            let xn = g.l2_normalize_rows(x)?;
            let pn = g.l2_normalize_rows(p)?;
            let pt = g.transpose(pn)?;
            let sims = g.matmul(xn, pt)?;
            g.max_axis(sims, 1)?
        }
        None => g.constant(Tensor::zeros(&[l, 1])),
    };
    let zero = g.constant(Tensor::zeros(&[1, 1]));
    let c3 = if l == 1 {
        zero
    } else {
        let later = g.slice_rows(x, 1, l)?;
        let earlier = g.slice_rows(x, 0, l - 1)?;
        let diff = g.sub(later, earlier)?;
        let norms = g.row_norms(diff)?;
        let top = g.max_axis(norms, 0)?;
        let denom = g.add_scalar(top, MOTION_EPS)?;
        let tail = g.div(norms, denom)?;
        g.concat_rows(&[zero, tail])?
    };
    Ok(g.concat_cols(&[c1, c2, c3])?)
}

/// One scan direction: conv → SiLU → `h_t = a⊙h_{t-1} + B u_t` → `y_t = C h_t`.
pub fn ssm_direction(g: &mut Graph, b: &Bound, prefix: &str, x: Var, reverse: bool) -> Result<Var> {
    let x = if reverse { g.reverse_rows(x)? } else { x };
    let conv = b.get(&format!("{prefix}.conv"))?;
    let u = g.conv1d(x, conv)?;
    let u = g.silu(u)?;
    let bt = g.transpose(b.get(&format!("{prefix}.B"))?)?;
    let v = g.matmul(u, bt)?;
    let a = g.sigmoid(b.get(&format!("{prefix}.A_raw"))?)?;
    let h = g.diag_scan(v, a)?;
    let ct = g.transpose(b.get(&format!("{prefix}.C"))?)?;
    let y = g.matmul(h, ct)?;
    Ok(if reverse { g.reverse_rows(y)? } else { y })
}

/// Stacked `layernorm(x + ssm_fwd(x) + ssm_bwd(x))`.
pub fn backbone(g: &mut Graph, b: &Bound, num_layers: usize, mut x: Var) -> Result<Var> {
    for i in 0..num_layers {
        let f = ssm_direction(g, b, &format!("layer{i}.fwd"), x, false)?;
        let r = ssm_direction(g, b, &format!("layer{i}.bwd"), x, true)?;
        let y = g.add(x, f)?;
        let y = g.add(y, r)?;
        let scale = b.get(&format!("layer{i}.ln.scale"))?;
        let shift = b.get(&format!("layer{i}.ln.shift"))?;
        x = g.layer_norm(y, scale, shift, LN_EPS)?;
    }
    Ok(x)
}

pub struct HeadVars {
    pub p_s: Var,
    pub p_e: Var,
    pub r_logit: Var,
    pub r: Var,
}

/// Scatters selected rows back to an L-row zero timeline, then applies the
/// linear heads. Unselected rows carry zero features, so their logits equal
/// the head biases.
pub fn scatter_and_heads(g: &mut Graph, b: &Bound, f_s: Var, indices: &[usize], len: usize) -> Result<HeadVars> {
    let d = g.dims(f_s)[1];
    let base = g.constant(Tensor::zeros(&[len, d]));
    let full = g.scatter_rows(f_s, indices, base)?;
    let mut head = |w: &str, bias: &str| -> Result<Var> {
        let wt = g.transpose(b.get(w)?)?;
        let z = g.matmul(full, wt)?;
        Ok(g.add(z, b.get(bias)?)?)
    };
    let p_s = head("head.Ws", "head.bs")?;
    let p_e = head("head.We", "head.be")?;
    let r_logit = head("head.Wr", "head.br")?;
    let r = g.sigmoid(r_logit)?;
    Ok(HeadVars { p_s, p_e, r_logit, r })
}

// ---------------------------------------------------------------------------
// full forward

/// Graph handles of one forward pass; column vectors are L×1.
pub struct ForwardVars {
    pub p_s: Var,
    pub p_e: Var,
    pub r_logit: Var,
    pub r: Var,
    pub scores: Var,
    /// Relational features x (L×d), reused by the contrastive loss.
    pub x: Var,
    pub gate: Var,
    /// Selected positions, 0-based ascending.
    pub indices: Vec<usize>,
}

/// Builds the forward pass for one (video, query, prior) triple.
/// `video` is L×d, `query` 1×d, `prior` L_g×d.
pub fn forward_graph(g: &mut Graph, b: &Bound, cfg: &ModelConfig, video: Var, query: Var, prior: Var) -> Result<ForwardVars> {
    let (l, d) = (g.dims(video)[0], g.dims(video)[1]);
    if d != cfg.d || g.dims(query) != [1, d] || g.dims(prior)[1] != d {
        return Err(ModelError::DimMismatch(format!(
            "video {:?}, query {:?}, prior {:?}, model d={}",
            g.dims(video),
            g.dims(query),
            g.dims(prior),
            cfg.d
        )));
    }
    let x = relational_embed(g, b, cfg, video)?;

    let generated_target = cfg.keep_ratio_target == KeepRatioTarget::Generated;
    let cue_prior = match cfg.selector_mode {
        SelectorMode::Off => None,
        _ if generated_target => {
            let lg = g.dims(prior)[0];
            let qn = g.expand(query, [lg, d])?;
            let sims = g.cosine_rows(prior, qn)?;
            let keep = select_tokens(g.value(sims).data(), cfg.keep_ratio);
            Some(g.gather_rows(prior, &keep)?)
        }
        _ => Some(prior),
    };
    let cues = selector_cues(g, x, query, cue_prior)?;
    let w = b.get("selector.w")?;
    let bias = b.get("selector.b")?;
    let s = g.matmul(cues, w)?;
    let scores = g.add(s, bias)?;

    let prune = cfg.selector_mode != SelectorMode::Concat && !generated_target;
    let indices = if prune {
        select_tokens(g.value(scores).data(), cfg.keep_ratio)
    } else {
        (0..l).collect()
    };
    let ls = indices.len();
    let sel_scores = g.gather_rows(scores, &indices)?;
    let gate = g.sigmoid(sel_scores)?;
    let xs = g.gather_rows(x, &indices)?;
    let cs = g.gather_rows(cues, &indices)?;
    let proj = g.matmul(cs, b.get("selector.cue_proj")?)?;
    let tok = g.add(xs, proj)?;
    let gate_full = g.expand(gate, [ls, d])?;
    let mut seq = g.mul(tok, gate_full)?;

    let lg = g.dims(prior)[0];
    let concat = cfg.selector_mode == SelectorMode::Concat;
    if concat {
        seq = g.concat_rows(&[prior, seq])?;
    }
    let mut f = backbone(g, b, cfg.num_layers, seq)?;
    if concat {
        f = g.slice_rows(f, lg, lg + ls)?;
    }
    let h = scatter_and_heads(g, b, f, &indices, l)?;
    Ok(ForwardVars {
        p_s: h.p_s,
        p_e: h.p_e,
        r_logit: h.r_logit,
        r: h.r,
        scores,
        x,
        gate,
        indices,
    })
}

/// Plain-value outputs of an inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub p_s: Vec<f64>,
    pub p_e: Vec<f64>,
    pub r: Vec<f64>,
    pub scores: Vec<f64>,
    pub gate: Vec<f64>,
    /// 0-based, ascending.
    pub indices: Vec<usize>,
}

pub fn forward(
    params: &ParamSet,
    cfg: &ModelConfig,
    video: &Tensor,
    query: &Tensor,
    prior: &Tensor,
    precision: Precision,
) -> Result<ModelOutput> {
    let mut g = Graph::with_precision(precision);
    let b = Bound::new(&mut g, params, false);
    let v = g.constant(video.clone());
    let q = g.constant(query.clone());
    let p = g.constant(prior.clone());
    let out = forward_graph(&mut g, &b, cfg, v, q, p)?;
    let col = |var: Var| g.value(var).to_vec();
    Ok(ModelOutput {
        p_s: col(out.p_s),
        p_e: col(out.p_e),
        r: col(out.r),
        scores: col(out.scores),
        gate: col(out.gate),
        indices: out.indices,
    })
}
