//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{mismatch, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(config: AdamConfig) -> Self {
        OptimState {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(|v| v.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(|v| v.as_slice())
    }
}

/// One AdamW update. Parameters without a gradient entry are still decayed
/// and see a zero gradient, matching a graph that never touched them.
pub fn adam_step(params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, state: &mut OptimState) -> Result<()> {
    for (name, g) in grads {
        match params.get(name) {
            Some(p) if p.dims() == g.dims() => {}
            Some(p) => {
                return Err(mismatch(
                    "adam_step",
                    format!("{name}: param {:?} vs grad {:?}", p.dims(), g.dims()),
                ))
            }
            None => return Err(mismatch("adam_step", format!("gradient for unknown param {name}"))),
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let n = p.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let g = grads.get(name.as_str()).map(|g| g.data());
        let prec = p.precision();
        let data = p.data_mut();
        for i in 0..n {
            let gi = g.map_or(0.0, |g| g[i]);
            data[i] *= 1.0 - c.lr * c.weight_decay;
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            data[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        prec.round_slice(data);
    }
    Ok(())
}
