//! Minimal dense tensor engine: a tape [`Graph`] with reverse-mode autodiff
//! over the handful of ops a selective-scan retrieval model needs, plus AdamW.

mod error;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, AdamConfig, OptimState};
pub use params::ParamSet;
pub use tensor::{global_precision, live_bytes, peak_bytes, reset_peak, set_global_precision, Precision, Tensor};
