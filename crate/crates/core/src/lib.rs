//! Failure episodic memory for reinforcement learning.
//!
//! Episodes that end in a hazard (a fall, a collision, leaving the track)
//! leave their last few transitions behind as *failure events*. A learned
//! state/action embedding and a risk head are fit to those events, and at
//! action time the agent samples several candidate actions from its policy
//! and prefers the one that is farthest from remembered hazardous
//! state/action pairs and rated least risky.
//!
//! Module map:
//!
//! - [`numeric`]: dense networks, gradients, Adam, random streams, codec.
//! - [`embedding`]: state/action encoders, joint embedding and risk head.
//! - [`memory`]: failure capture, periodic publication, threshold retrieval.
//! - [`selection`]: candidate sampling and distance-minus-risk scoring.
//! - [`agents`]: SAC-lite and PPO-lite learners with the selection hook.
//! - [`envs`]: hazard-terminating toy environments and a vectorized runner.

pub mod agents;
pub mod embedding;
pub mod envs;
mod error;
pub mod memory;
pub mod numeric;
pub mod selection;

pub use error::{Error, Result};
