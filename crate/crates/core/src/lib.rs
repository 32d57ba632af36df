//! Federated-learning simulator for studying model-poisoning defenses.
//!
//! The server can aggregate with horizontal rules ([`baselines`]) or with
//! [`vert`], which scores each user's upload against a prediction made from
//! that user's own gradient history. [`engine`] runs the rounds,
//! [`attacks`] supplies the adversaries and [`harness`] turns a
//! [`config::ExperimentConfig`] into files on disk.

pub mod attacks;
pub mod baselines;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod harness;
pub mod rng;
pub mod tensor;
pub mod vert;

pub use error::{Error, Result};
