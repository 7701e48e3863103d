//! Unpaired image dehazing with a Schrödinger bridge, at desk scale.
//!
//! The crate covers the Gaussian bridge process and its Markov sampling chain
//! ([`bridge`]), an entropic optimal-transport reference solver ([`ot`]), the
//! networks and training loop ([`nets`], [`trainer`]), atmospheric-scattering
//! physics and dark-channel-prior estimation ([`haze`]), detail-preserving
//! losses ([`regularizers`]), prompt learning against a frozen encoder
//! ([`prompt`]) and the experiment harness ([`harness`]).

pub mod bridge;
pub mod checkpoint;
mod error;
pub mod harness;
pub mod haze;
pub mod img;
pub mod nets;
pub mod ot;
pub mod prompt;
pub mod regularizers;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use img::Image;
