//! Reset-free skill discovery through a reset game between a forward task
//! policy and a skill-conditioned reset policy, plus a hierarchical
//! controller that reuses the learned skills.

pub mod env;
pub mod game;
pub mod harness;
pub mod hrl;
pub mod error;
pub mod eval;
pub mod nn;
pub mod oracle;
pub mod plot;
pub mod rng;
pub mod sac;
pub mod skill;

pub use error::{Error, Result};
