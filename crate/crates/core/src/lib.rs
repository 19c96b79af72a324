//! Behavioral simulator for a chip-integrated voltage source driving
//! ion-trap electrodes: serial DAC bus, transfer/calibration, RC filtering
//! and noise, heating-rate conversion, and shuttling waveforms.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analog;
pub mod cli;
pub mod config;
pub mod constants;
pub mod dac;
pub mod ion;
pub mod protocol;
pub mod scenario;
pub mod scenarios;
pub mod transport;
