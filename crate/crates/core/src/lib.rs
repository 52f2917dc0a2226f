//! Segmentation-conditioned causal policies over a partially observable grid world.

pub mod agent_loop;
pub mod episode_server;
pub mod error;
pub mod expert;
pub mod gridworld;
pub mod harness;
pub mod policy;
pub mod reasoner;
pub mod relabel;
pub mod tracker;
pub mod trajectory;

pub use error::{Error, Result};
