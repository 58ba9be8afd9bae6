//! Crate-wide error type with a coarse classification used by callers to
//! pick process exit codes.

use thiserror::Error;

/// Coarse failure class. `Validation` means the inputs were rejected before
/// any numerics ran; `Numeric` means a solver or quadrature failed its own
/// accuracy contract; `OracleDisagreement` means two independent routes to
/// the same quantity did not match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numeric,
    OracleDisagreement,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {arg}: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("coupling matrix is singular or indefinite: smallest eigenvalue {min_eig:.3e}")]
    SingularCoupling { min_eig: f64 },

    #[error("near-degenerate normal modes {i} and {j}: |Omega_i^2 - Omega_j^2| = {gap:.3e}")]
    DegenerateModes { i: usize, j: usize, gap: f64 },

    #[error("response pole {pole} violates stability margin (Re >= -{margin:.1e})")]
    UnstablePole { pole: String, margin: f64 },

    #[error("near-degenerate response poles {a} and {b} (distance {dist:.3e})")]
    DegeneratePoles { a: String, b: String, dist: f64 },

    #[error("polynomial construction failed: {0}")]
    PolynomialConstruction(String),

    #[error("residue reconstruction check failed: max relative error {err:.3e} at s = {at}")]
    ResidueReconstruction { err: f64, at: String },

    #[error("quadrature did not converge: {context} (estimated error {err:.3e}, budget {evals} evals)")]
    QuadratureFailure { context: String, err: f64, evals: usize },

    #[error("result has non-negligible imaginary part {imag:.3e} (scale {scale:.3e}) in {context}")]
    RealnessViolation { context: String, imag: f64, scale: f64 },

    #[error("covariance matrix is unphysical: symplectic eigenvalue {value} below 1 - {tol:.1e}")]
    UnphysicalCovariance { value: f64, tol: f64 },

    #[error("temperature inversion failed for site {site}: energy {energy:.6e} outside bracket")]
    TemperatureBracket { site: usize, energy: f64 },

    #[error("bond fluxes are not uniform: max deviation {spread:.3e} exceeds {tol:.3e}")]
    FluxNonuniform { spread: f64, tol: f64 },

    #[error("occupation number {value:.3e} of mode {mode} is below the physical floor")]
    NegativeOccupation { mode: usize, value: f64 },

    #[error("ground-state kinetic energy of mode {mode} is non-positive: {value:.3e}")]
    GroundStateKinetic { mode: usize, value: f64 },

    #[error("disorder rejection rate {rate:.2}% exceeds 10% over {attempts} attempts")]
    ExcessiveRejection { rate: f64, attempts: usize },

    #[error("oracle disagreement in {context}: max relative deviation {dev:.3e} exceeds {tol:.1e}")]
    OracleDisagreement { context: String, dev: f64, tol: f64 },

    #[error("oracle inconclusive: {0}")]
    OracleInconclusive(String),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            InvalidArgument { .. } | Config(_) | SingularCoupling { .. } | ExcessiveRejection { .. } => {
                ErrorClass::Validation
            }
            OracleDisagreement { .. } | OracleInconclusive(_) => ErrorClass::OracleDisagreement,
            Io(_) | Serde(_) => ErrorClass::Io,
            _ => ErrorClass::Numeric,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
