//! Heat transport in harmonic chains coupled to two exponentially correlated
//! (Drude) heat baths, solved through the exact Laplace-space response of the
//! damped normal modes.
//!
//! The crate is organized bottom-up:
//!
//! * [`model`] — chain and bath parameter types, coupling-matrix assembly
//! * [`spectral`] — normal-mode decomposition, parity labels, localization
//! * [`poly`] — real-coefficient polynomials and companion-matrix roots
//! * [`quad`] — adaptive Gauss–Kronrod and Filon-type oscillatory quadrature
//! * [`kernel`] — bath noise spectrum, quantum and classical
//! * [`response`] — pole/residue form of the mode response functions
//! * [`correlations`] — stationary, transient and time-shifted second moments
//! * [`observables`] — energies, local temperatures, occupation numbers, flux
//! * [`entanglement`] — covariance matrices and logarithmic negativity
//! * [`ensemble`] — disorder sampling, ensemble averaging, scaling fits
//! * [`oracles`] — independent cross-checks (Fourier steady state, explicit bath)
//! * [`pipeline`] — convenience drivers combining the above
//! * [`report`] — CSV and run-manifest emission

pub mod correlations;
pub mod ensemble;
pub mod entanglement;
pub mod error;
pub mod kernel;
pub mod model;
pub mod observables;
pub mod oracles;
pub mod pipeline;
pub mod policy;
pub mod poly;
pub mod quad;
pub mod report;
pub mod response;
pub mod spectral;

pub use error::Error;
pub use policy::NumericPolicy;

/// Crate result alias.
pub type Result<T> = std::result::Result<T, Error>;
