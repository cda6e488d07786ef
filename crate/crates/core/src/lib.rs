//! Controlled jump-diffusions modulated by a semi-Markov regime process.

pub mod cli;
pub mod error;
pub mod jump_diffusion;
pub mod maximum_principle;
pub mod portfolio;
pub mod quadrature;
pub mod rng;
pub mod semi_markov;
pub mod stats;
pub mod verification;

pub use error::{Error, Result};
