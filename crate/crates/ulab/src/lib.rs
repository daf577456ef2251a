//! ulab — a desk-scale unlearning laboratory.
//!
//! Trains tiny autoregressive language models on a synthetic fact corpus,
//! then removes selected facts with a family of unlearning objectives
//! (uniform-target self-distillation plus gradient-ascent, preference,
//! entropy and logit-adjustment baselines) and measures how close each
//! unlearned model lands to a golden model retrained without the forgotten
//! facts.
//!
//! The pipeline is: [`corpus`] generates facts, [`model`] trains and
//! checkpoints the transformer, [`targets`] builds self-distillation target
//! distributions, [`losses`] defines the scalar objectives, [`engine`] runs
//! unlearning and hyperparameter sweeps, and [`eval`] scores the results.

pub mod corpus;
pub mod engine;
pub mod error;
pub mod eval;
pub mod losses;
pub mod math;
pub mod model;
pub mod targets;

pub use error::{Result, UlabError};
