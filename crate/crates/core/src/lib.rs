//! Uncertainty-aware tactical decision making at intersections.
//!
//! The crate bundles an intersection traffic simulator, the decision process
//! built on top of it, a small dueling Q-network with hand-written gradients,
//! an ensemble of randomized-prior Q-networks trained on a bootstrapped replay
//! memory, a Double DQN baseline, the coefficient-of-variation confidence gate
//! with its fallback controller, and the evaluation harness.

pub mod config;
pub mod dqn;
pub mod env;
pub mod error;
pub mod eval;
pub mod gate;
pub mod nn;
pub mod replay;
pub mod rpf;
pub mod run;
pub mod seed;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
