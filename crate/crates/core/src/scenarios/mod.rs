//! Built-in scenarios, one per CLI subcommand.

mod calibrate;
mod heating;
mod leakage;
mod noise_spectrum;
pub mod selfcheck;
mod transfer_sweep;
mod transport;

pub use calibrate::Calibrate;
pub use heating::{fitted_mode, Heating};
pub use leakage::Leakage;
pub use noise_spectrum::NoiseSpectrum;
pub use selfcheck::SelfCheck;
pub use transfer_sweep::TransferSweep;
pub use transport::{shuttle, Transport};
