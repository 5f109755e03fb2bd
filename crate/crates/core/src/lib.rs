//! Fixed-pose cryo-EM simulation, hypernetwork-modulated implicit neural
//! reconstruction, and volume-comparison metrics.

pub mod cli;
pub mod error;
pub mod fourier;
pub mod hypenet;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod simulate;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
