//! Compressive CSI feedback simulation for massive MIMO-OFDM.
//!
//! The crate models the downlink of a multi-user MIMO-OFDM system in which
//! each receiver compresses its channel state information before feeding it
//! back to the transmitter:
//!
//! - [`channel`] synthesizes spatially correlated Rayleigh fading channels
//!   from a 2-D antenna correlation model and an L-tap delay profile.
//! - [`covariance`] builds the channel covariance in Kronecker-factored form
//!   (frequency factor ⊗ transmit factor ⊗ receive factor), exposes its
//!   eigensystem as a fast Karhunen-Loève transform, and derives the
//!   distortion-free compression ratio.
//! - [`codec`] implements the compress → quantize → feed back → recover
//!   pipeline for the sparse-domain (KLT), time-domain (IDFT) and
//!   frequency-domain (subcarrier selection + spline) feedback schemes,
//!   with exact feedback-bit accounting.
//! - [`metrics`] provides NMSE, Q-function, 16-QAM BER and spectral
//!   efficiency measures, both closed-form and empirical.
//! - [`linksim`] runs the multi-user downlink with zero-forcing precoding
//!   computed from recovered CSI.

pub mod channel;
pub mod codec;
pub mod covariance;
pub mod error;
pub mod interp;
pub mod linksim;
pub mod metrics;
pub mod seed;

pub use error::{Error, Result};

/// Complex sample type used throughout the crate.
pub type Cpx = num_complex::Complex64;
