//! Activation memory planning for transformer training.
//!
//! Given a per-operator profile of one transformer block, decide for every
//! activation whether to recompute it in the backward pass, keep it
//! compressed, or retain it as is, so that the step overhead is minimal while
//! the activations of all blocks fit in the memory budget.

pub mod cli;
pub mod codec;
pub mod evolution;
pub mod planner;
pub mod profile;
pub mod simulator;

#[cfg(test)]
mod testutil;

pub use profile::{load_profile, save_profile, scale_profile, LayerKind, ModelProfile, OperatorProfile, ProfileError};
