//! Hardware-agnostic model of a fully fused GPT-NeoX decoder block.
//!
//! The crate is split into:
//!
//! * [`halfnum`]: software binary16 and order-sensitive reductions.
//! * [`neox`]: the unfused, high-precision reference block (the oracle).
//! * [`cluster`]: a simulator of the cluster-cooperative fused kernel.
//! * [`perfmodel`]: an analytical traffic / overhead / FLOPs model with calibration.
//! * [`fidelity`]: token-level agreement statistics between golden and simulated runs.
//! * [`plan`] and [`table`]: fusion plans and the tabular output format.

pub mod cluster;
pub mod error;
pub mod fidelity;
pub mod halfnum;
pub mod neox;
pub mod perfmodel;
pub mod plan;
pub mod rng;
pub mod table;

pub use error::{Error, Result};
