//! Behavioral modeling of RF power amplifiers with an
//! amplitude-conditioned LSTM, trained and evaluated against classical
//! baselines on synthetic or file-supplied I/Q data.
//!
//! Module map:
//! - [`signal`]: OFDM excitation generation, crest factor reduction,
//!   PAPR, normalization.
//! - [`dut`]: synthetic Wiener-Hammerstein/Saleh device and dataset
//!   partitioning.
//! - [`nn`]: AC-LSTM / LSTM / ARVTDNN forward models.
//! - [`train`]: exact BPTT gradients, Adam, the training loop, and the
//!   finite-difference gradient checker.
//! - [`poly`]: memory-polynomial baselines via complex least squares.
//! - [`metrics`]: NMSE, Welch PSD, SIM-ACPR, and RMS EVM.
//! - [`io`]: IQF1 waveforms, ACW1 weight containers, key=value sidecars.
//! - [`config`]: the flat run configuration shared by the CLI commands.

pub mod config;
pub mod dut;
pub mod error;
pub mod fft;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod poly;
pub mod rng;
pub mod signal;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
