//! Actor-critic sequential instance segmentation.
//!
//! An actor network emits one instance mask per timestep through a
//! low-dimensional latent action decoded by a pre-trained conditional VAE
//! decoder, while a critic regresses discounted max-matching rewards and
//! supplies the actor's gradient.

pub mod actor;
pub mod assignment;
pub mod compute;
pub mod critic;
pub mod environment;
pub mod error;
pub mod experiments;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
