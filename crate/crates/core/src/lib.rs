//! GenSpan: video-corpus moment retrieval with generated visual priors.
//!
//! Modules follow the data flow: [`data`] (corpus, files, checkpoints) →
//! [`prior`] (subtitle matching, prompts, cached priors) / [`synth`]
//! (synthetic corpora) → [`model`] → [`training`] → [`retrieval`] →
//! [`eval`] and [`bench`].

pub mod bench;
pub mod data;
pub mod eval;
pub mod model;
pub mod prior;
pub mod retrieval;
pub mod synth;
pub mod training;
