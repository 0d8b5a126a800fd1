//! Unsupervised discovery of atomic actions in feature sequences.
//!
//! A stochastic autoregressive state model proposes candidate labelings of
//! each video; a constraint-based cost picks the best candidate as a
//! self-label; the model is then trained on its own selections. See the
//! README for the end-to-end workflow.

pub mod cli;
pub mod crossvideo;
pub mod data;
pub mod error;
pub mod eval;
pub mod labeling;
pub mod model;
pub mod numcore;
pub mod par;
pub mod ranking;
pub mod trainer;

pub use error::{Error, Result};
pub use labeling::{Labeling, Run};
