//! opus-core: optimizer-induced projected utility selection at desk scale.
//!
//! A small autoregressive language model with manual backward, ghost
//! gradient factors, CountSketch utility estimation, SGD/AdamW/Muon update
//! rules with frozen-preconditioner extraction, Boltzmann soft selection,
//! retrieval-based proxy pools, and a deterministic experiment harness.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod proxy;
pub mod rng;
pub mod select;
pub mod sketch;
pub mod synthetic;

pub use error::{Error, Result};
