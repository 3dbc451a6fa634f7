//! Desk-scale vision-language-action policy distillation workbench.
//!
//! The crate is organized around one pipeline:
//!
//! 1. [`sim`] — a deterministic toy tabletop simulator with templated
//!    language tasks, dual-view rendering, and scripted expert policies.
//! 2. [`data`] — demonstration dataset generation, windowed sampling,
//!    and bit-exact checkpoint persistence.
//! 3. [`numerics`] — a small reverse-mode differentiation engine, AdamW,
//!    and the warmup/cosine learning-rate schedule.
//! 4. [`model`] — the teacher action model and the multimodal student.
//! 5. [`distill`] — alignment and fine-tuning losses plus the two-stage
//!    training strategy and its ablation variants.
//! 6. [`eval`] — closed-loop rollouts, per-task success rates, chained
//!    instruction evaluation, and report emission.
//!
//! The `vla` binary (see [`cli`]) ties the stages together behind a JSON
//! config file.

pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
