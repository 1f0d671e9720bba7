//! Desk-scale laboratory for early-exit decoder-only transformers.
//!
//! The crate trains a small character-level transformer from scratch, adds
//! stochastic per-layer exit heads with frozen-residual-stream semantics,
//! calibrates the exit probabilities by self-distillation against the
//! full-depth model, and then uses leave-one-out REINFORCE to reward earlier
//! exits while holding task reward.

pub mod checkpoint;
pub mod diff;
pub mod calibrate;
pub mod cli;
pub mod error;
pub mod exit;
pub mod forward;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod rl;
pub mod runcfg;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod viz;

pub use error::{Error, Result};
