//! Deep clustering with a Dirichlet-process mixture in the latent space of a
//! variational auto-encoder.

pub mod data;
pub mod diva;
pub mod dpmm;
pub mod error;
pub mod eval;
pub mod moves;
pub mod numerics;
pub mod vae;

pub use error::{Error, Result};
