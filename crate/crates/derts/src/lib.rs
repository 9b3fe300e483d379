//! Weighted task selection for meta-learning on synthetic few-shot tasks.
//!
//! The crate implements the full loop: a task pool is drawn from a synthetic
//! distribution, a cheap last-layer gradient estimate is computed per task, a
//! facility-location objective is greedily maximized to pick a weighted
//! subset whose summed gradient approximates the pool gradient, optionally
//! high-gradient-norm tasks are truncated (label-noise robustness), and the
//! subset drives weighted ANIL or ProtoNet meta-training.
//!
//! Modules follow the pipeline order:
//!
//! - [`nn`] — dense MLP engine with explicit traces and manual backprop
//! - [`tasks`] — synthetic episodic task sampling and the noisy-task generator
//! - [`metalearn`] — ANIL / ProtoNet training loops and evaluation
//! - [`gradest`] — per-task gradient estimates and approximation-error reports
//! - [`select`] — facility-location greedy selection, weights, noise filter
//! - [`harness`] — experiment configs, samplers, metrics, CSV reporting

pub mod error;
pub mod gradest;
pub mod harness;
pub mod metalearn;
pub mod nn;
pub mod select;
pub mod tasks;

pub use error::{Error, Result};
