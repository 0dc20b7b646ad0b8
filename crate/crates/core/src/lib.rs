//! Joint movable-element position and active/passive beamforming optimization
//! for a downlink multiuser MISO system assisted by a simultaneously
//! transmitting and reflecting surface (STARS) whose elements can be moved
//! inside a square region.
//!
//! The crate is organised bottom-up:
//!
//! - [`config`]: physical and algorithmic parameters, plain-text loader.
//! - [`rng`]: deterministic splittable random streams.
//! - [`channel`]: geometric multipath channel realizations and the cascaded
//!   responses as functions of the element positions.
//! - [`rates`]: SINR, per-user rates and weighted sum rate for the energy
//!   splitting (ES), mode switching (MS) and time switching (TS) protocols.
//! - [`position`]: penalty/log-sum-exp gradient ascent over element positions.
//! - [`active`]: WMMSE active beamforming at the base station.
//! - [`passive`]: successive convex approximation for the surface coefficients.
//! - [`cone`]: the small dense log-barrier solver behind [`passive`].
//! - [`ao`]: the alternating optimization drivers and the baselines.
//! - [`experiments`]: Monte-Carlo sweeps and convergence traces as CSV.

pub mod active;
pub mod ao;
pub mod channel;
pub mod cone;
pub mod config;
pub mod experiments;
pub mod linalg;
pub mod passive;
pub mod position;
pub mod rates;
pub mod rng;

mod error;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
/// Dense complex matrix.
pub type CMatrix = nalgebra::DMatrix<C64>;
/// Dense complex column vector.
pub type CVector = nalgebra::DVector<C64>;
