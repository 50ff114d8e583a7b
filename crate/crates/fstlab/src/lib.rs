//! fstlab: a desk-scale laboratory for backdoor poisoning attacks and
//! tuning-based purification defenses.
//!
//! The pipeline: generate a small synthetic image classification task,
//! poison a fraction of the training set with a trigger, train a model
//! that carries the backdoor, then tune it on a small clean subset with
//! one of six defenses and measure what survives. Everything is pure
//! CPU f64 and deterministic: same seeds, same bytes.
//!
//! Start with the `examples/` directory; each example is a runnable tour
//! of one capability. The `fstlab` binary wraps the same entry points as
//! subcommands for scripted use.

pub mod error;
pub mod rng;
pub mod tensor;

pub mod layer;
pub mod loss;
pub mod model;
pub mod optim;

pub mod dataset;
pub mod idx;
pub mod poison;
pub mod trigger;

pub mod attack;
pub mod defense;
pub mod experiment;

pub mod metrics;
pub mod pca;
pub mod separation;

pub use error::{Error, Result};
