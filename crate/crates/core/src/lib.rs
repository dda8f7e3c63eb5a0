//! Continual-learning laboratory.
//!
//! A desk-scale framework for sequential-task training of bias-free MLP
//! classifiers, with the usual baselines (EWC, ER, AGEM, LwF), plus a
//! weight-space dataset reconstruction step that recovers training-like
//! samples of past tasks from the frozen network and mixes them into the
//! current task's data.

pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod reconstruction;
pub mod strategies;
pub mod tensor;
pub mod tuning;

pub use error::{Error, Result};
