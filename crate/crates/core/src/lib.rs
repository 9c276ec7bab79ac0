//! Core library for prototype-exchange federated learning with a simulated
//! homomorphic backend and a two-server Byzantine-robust aggregation protocol.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the default `std`
//! feature is only needed by downstream IO. Everything here is deterministic:
//! given the same configuration and seeds, every forward pass, protocol round
//! and metric is reproduced bit for bit.
//!
//! Module map:
//! - [`nn`]: dense tensors, a two-part model (feature extractor + classifier),
//!   reverse-mode gradients over whole-tensor ops, plain SGD.
//! - [`proto`]: per-class prototypes, the cosine-regularized local loss and the
//!   client training loop.
//! - [`hesim`]: simulated CKKS-style vector arithmetic with calibrated
//!   approximation noise, plus the iterative ciphertext maximum.
//! - [`agg`]: the two-server secure aggregation protocol and its transcript.
//! - [`threat`]: data poisoning and prototype amplification attack injectors.
//! - [`fed`]: the experiment orchestrator — partitioning, setup, round loop.
//! - [`data`]: synthetic Gaussian blob dataset generation.
//! - [`metrics`]: the per-round experiment log consumed by IO layers.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod agg;
pub mod check;
pub mod data;
mod error;
pub mod fed;
pub mod fmath;
pub mod hesim;
pub mod metrics;
pub mod nn;
pub mod proto;
pub mod rng;
pub mod threat;

pub use error::{Error, Result};
