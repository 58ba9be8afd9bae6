//! Central numeric policy. Every tolerance that more than one module relies
//! on lives here so that changing one does not silently desynchronize its
//! uses.

/// Tolerances and budgets shared across the pipeline. All relative unless
/// the name says otherwise.
#[derive(Debug, Clone, Copy)]
pub struct NumericPolicy {
    /// A response pole must satisfy Re(lambda) < -pole_stability_margin.
    pub pole_stability_margin: f64,
    /// Two poles closer than this (relative to max |lambda|) are degenerate.
    pub pole_degeneracy_rel: f64,
    /// Two squared mode frequencies closer than this (relative to the largest)
    /// make partial fractions ill-posed.
    pub mode_degeneracy_rel: f64,
    /// Smallest admissible eigenvalue of the coupling matrix.
    pub singular_coupling_floor: f64,
    /// Pole/residue reconstruction must match direct rational evaluation to
    /// this relative error at random probe points.
    pub reconstruction_rel: f64,
    /// Relative tolerance for frequency-domain quadratures.
    pub quad_rel: f64,
    /// Absolute tolerance floor for frequency-domain quadratures.
    pub quad_abs: f64,
    /// Evaluation budget per adaptive quadrature.
    pub quad_max_evals: usize,
    /// Imaginary parts of assembled real observables must stay below
    /// realness_rel * max(1, scale).
    pub realness_rel: f64,
    /// Mode-orthogonality defect allowed in the eigenbasis.
    pub orthogonality_tol: f64,
    /// Flux spread across bonds: |J_n - J| <= max(flux_uniformity_rel * |J|,
    /// flux_abs_floor). The absolute floor covers near-equilibrium runs where
    /// the flux itself sits at the quadrature noise level.
    pub flux_uniformity_rel: f64,
    pub flux_abs_floor: f64,
    /// Symplectic eigenvalues may undershoot 1 by at most this before the
    /// covariance counts as unphysical.
    pub symplectic_floor_tol: f64,
    /// Argument below which coth(x) switches to its Laurent series.
    pub coth_series_threshold: f64,
}

impl Default for NumericPolicy {
    fn default() -> Self {
        NumericPolicy {
            pole_stability_margin: 1e-12,
            pole_degeneracy_rel: 1e-8,
            mode_degeneracy_rel: 1e-10,
            singular_coupling_floor: 1e-10,
            reconstruction_rel: 1e-8,
            quad_rel: 1e-11,
            quad_abs: 1e-13,
            quad_max_evals: 200_000,
            realness_rel: 1e-10,
            orthogonality_tol: 1e-10,
            flux_uniformity_rel: 1e-8,
            flux_abs_floor: 1e-11,
            symplectic_floor_tol: 1e-6,
            coth_series_threshold: 1e-4,
        }
    }
}

impl NumericPolicy {
    /// Physicality gate used in tests and reports: symplectic eigenvalues are
    /// accepted down to 1 - 1e-9 without comment; between that and
    /// 1 - symplectic_floor_tol they are clamped; below, it is an error.
    pub const SYMPLECTIC_WARN: f64 = 1e-9;
}
