//! Deterministic federated-learning simulator with power-norm cosine
//! similarity (PNCS) client selection.
//!
//! Each round every client computes a full-batch gradient and sends a
//! summary; the server picks a subset from the summaries, averages the
//! selected clients' full gradients and takes one step. See
//! [`federation::Federation::run_round`] for the protocol.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod selection;
pub mod sketch;
pub mod study;

pub use error::{FedselError, Result};
