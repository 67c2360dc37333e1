//! A deterministic federated-learning simulator built around a personalized
//! dual-head model: a shared trunk and shared classification head learned by
//! weighted averaging across clients, plus a private per-client head that
//! never leaves its device. A layer-release schedule can gate how much of
//! the shared stack is exchanged each round, and a byte-exact ledger
//! accounts for every parameter that crosses the simulated wire.
//!
//! Everything is reproducible: a single experiment seed derives independent
//! named streams for initialization, batch orders, client sampling, and data
//! splits, so identical configurations produce byte-identical outputs.

pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod protocol;
pub mod runner;
pub mod seeds;
pub mod sharing;

pub use error::{Error, Result};
