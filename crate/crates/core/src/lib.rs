//! Cross-domain offline reinforcement learning with target-aligned Bellman
//! backups: environments with controlled dynamics shifts, offline datasets,
//! shared latent encoders, mismatch scoring, IQL-style agents and exact
//! oracle diagnostics.

pub mod agents;
pub mod config;
pub mod datasets;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod framing;
pub mod numerics;
pub mod pipeline;
pub mod representation;
pub mod rng;
pub mod tbm;

pub use error::{Error, Result};
