//! Koopman-guided online residual refinement on a desk-scale peg-alignment
//! task.
//!
//! A frozen, chunked base policy is corrected at every step by a residual
//! actor-critic. In `korr` mode the residual conditions on the next latent
//! state predicted by a learned Koopman model (lift network plus linear
//! operator); the `resip` baselines condition on the raw state and base
//! action, or on the prediction of a nonlinear dynamics network.

pub mod base;
pub mod drift;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod eval;
pub mod extrapolation;
pub mod numeric;
pub mod ppo;
pub mod residual;

pub use error::{KorrError, Result};
