//! Single-process simulator for FedSSA-style personalized federated
//! learning: structurally heterogeneous per-client models share a
//! homogeneous classification header whose rows are aggregated class-wise on
//! the server and fused back into each client with a cosine-decayed
//! stabilization coefficient. Baseline algorithms, non-IID data
//! partitioning, and communication/computation accounting ride on the same
//! engine.

pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod protocol;
pub mod runner;
pub mod seed;

pub use error::{Error, Result};
