//! Model-based skill discovery agent.
//!
//! The crate packages a latent world model, a vector-quantized skill
//! codebook with periodic code resampling, skill policies trained entirely
//! in imagined rollouts, an optional exploration policy, and a
//! meta-controller for downstream adaptation, together with a toy
//! continuous-control environment, replay/offline-data handling, and the
//! run harness driving the collect / pretrain / finetune phases.

pub mod adapt;
pub mod codebook;
pub mod config;
pub mod envs;
pub mod error;
pub mod explore;
pub mod metrics;
pub mod runner;
pub mod skills;
pub mod substrate;
pub mod world;

pub use error::{ChoreoError, Result};
