//! Chain and bath parameter types plus assembly of the chain coupling
//! matrix. All quantities are dimensionless with hbar = k_B = M = omega0 = 1;
//! the mass is carried explicitly in formulas but pinned to 1 at validation.

use nalgebra::DMatrix;

use crate::error::Error;
use crate::policy::NumericPolicy;
use crate::Result;

/// How onsite pinning is applied when building a chain from a config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PinningStyle {
    /// Every oscillator gets the same onsite frequency.
    OnsiteEverywhere(f64),
    /// Only the first and last oscillators are pinned; interior sites are
    /// free. Used for the acoustic low-temperature conductivity behavior.
    EndsOnly(f64),
}

impl PinningStyle {
    pub fn onsite_freqs(&self, l: usize) -> Vec<f64> {
        match *self {
            PinningStyle::OnsiteEverywhere(w0) => vec![w0; l],
            PinningStyle::EndsOnly(w0) => {
                let mut w = vec![0.0; l];
                w[0] = w0;
                w[l - 1] = w0;
                w
            }
        }
    }
}

/// Parameters of the isolated chain: l oscillators of mass `mass`, onsite
/// frequencies `onsite_freqs[i]` and springs `couplings[i]` between sites
/// i and i+1. The end springs toward the baths are absent (f_0 = f_l = 0).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    pub length: usize,
    pub onsite_freqs: Vec<f64>,
    pub couplings: Vec<f64>,
    pub mass: f64,
}

impl ChainSpec {
    pub fn new(onsite_freqs: Vec<f64>, couplings: Vec<f64>) -> Result<Self> {
        let spec = ChainSpec {
            length: onsite_freqs.len(),
            onsite_freqs,
            couplings,
            mass: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Ordered chain: common onsite frequency and common coupling.
    pub fn ordered(l: usize, omega0: f64, f: f64) -> Result<Self> {
        Self::new(vec![omega0; l], vec![f; l.saturating_sub(1)])
    }

    /// Chain with given couplings and a pinning style.
    pub fn pinned(l: usize, style: PinningStyle, couplings: Vec<f64>) -> Result<Self> {
        Self::new(style.onsite_freqs(l), couplings)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::InvalidArgument {
                arg: "length",
                reason: format!("need at least 2 oscillators, got {}", self.length),
            });
        }
        if self.onsite_freqs.len() != self.length {
            return Err(Error::InvalidArgument {
                arg: "onsite_freqs",
                reason: format!(
                    "expected {} entries, got {}",
                    self.length,
                    self.onsite_freqs.len()
                ),
            });
        }
        if self.couplings.len() != self.length - 1 {
            return Err(Error::InvalidArgument {
                arg: "couplings",
                reason: format!(
                    "expected {} entries, got {}",
                    self.length - 1,
                    self.couplings.len()
                ),
            });
        }
        if self.mass != 1.0 {
            return Err(Error::InvalidArgument {
                arg: "mass",
                reason: format!("unit convention fixes M = 1, got {}", self.mass),
            });
        }
        if let Some(w) = self.onsite_freqs.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidArgument {
                arg: "onsite_freqs",
                reason: format!("onsite frequencies must be finite and >= 0, got {w}"),
            });
        }
        if let Some(f) = self.couplings.iter().find(|f| !f.is_finite() || **f <= 0.0) {
            return Err(Error::InvalidArgument {
                arg: "couplings",
                reason: format!("couplings must be finite and > 0, got {f}"),
            });
        }
        if self.onsite_freqs.iter().all(|&w| w == 0.0) {
            // Center-of-mass translation would be a zero mode.
            return Err(Error::InvalidArgument {
                arg: "onsite_freqs",
                reason: "all onsite frequencies are zero; the translation mode must be \
                         suppressed by pinning at least one site"
                    .into(),
            });
        }
        Ok(())
    }
}

/// Bath parameters: damping strength gamma, Drude cutoff, and the two bath
/// temperatures. Bath a attaches to site 1, bath b to site l.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathConfig {
    pub gamma: f64,
    pub cutoff: f64,
    pub t_a: f64,
    pub t_b: f64,
}

impl BathConfig {
    pub const DEFAULT_CUTOFF: f64 = 10.0;

    pub fn new(gamma: f64, cutoff: f64, t_a: f64, t_b: f64) -> Result<Self> {
        let bath = BathConfig { gamma, cutoff, t_a, t_b };
        bath.validate()?;
        Ok(bath)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::InvalidArgument {
                arg: "bath.gamma",
                reason: format!("damping strength must be > 0, got {}", self.gamma),
            });
        }
        if !self.cutoff.is_finite() || self.cutoff <= 0.0 {
            return Err(Error::InvalidArgument {
                arg: "bath.cutoff",
                reason: format!("Drude cutoff must be > 0, got {}", self.cutoff),
            });
        }
        for (name, t) in [("bath.Ta", self.t_a), ("bath.Tb", self.t_b)] {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::InvalidArgument {
                    arg: if name == "bath.Ta" { "bath.Ta" } else { "bath.Tb" },
                    reason: format!("temperature must be >= 0, got {t}"),
                });
            }
        }
        Ok(())
    }

    pub fn with_temperatures(&self, t_a: f64, t_b: f64) -> Result<Self> {
        Self::new(self.gamma, self.cutoff, t_a, t_b)
    }

    /// Mean temperature and relative bias: T_a = (1+eps) Tm, T_b = (1-eps) Tm.
    pub fn from_mean_and_bias(gamma: f64, cutoff: f64, t_m: f64, eps: f64) -> Result<Self> {
        Self::new(gamma, cutoff, (1.0 + eps) * t_m, (1.0 - eps) * t_m)
    }
}

/// Coupling matrix of the isolated chain:
/// C_ii = omega_i^2 + (f_{i-1} + f_i)/M, C_{i,i+1} = C_{i+1,i} = -f_i/M,
/// with f_0 = f_l = 0. The smallest eigenvalue is checked against the
/// singularity floor so downstream 1/Omega factors stay finite.
pub fn build_coupling_matrix(spec: &ChainSpec, policy: &NumericPolicy) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let l = spec.length;
    let m = spec.mass;
    let mut c = DMatrix::zeros(l, l);
    for i in 0..l {
        let f_left = if i == 0 { 0.0 } else { spec.couplings[i - 1] };
        let f_right = if i == l - 1 { 0.0 } else { spec.couplings[i] };
        c[(i, i)] = spec.onsite_freqs[i].powi(2) + (f_left + f_right) / m;
        if i + 1 < l {
            c[(i, i + 1)] = -spec.couplings[i] / m;
            c[(i + 1, i)] = -spec.couplings[i] / m;
        }
    }
    let min_eig = c
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min_eig < policy.singular_coupling_floor {
        return Err(Error::SingularCoupling { min_eig });
    }
    Ok(c)
}

/// True iff the chain maps to itself under site reversal: f_n = f_{l-n} and
/// omega_n = omega_{l+1-n}, within 1e-12 relative. Only exactly mirrored
/// chains may take the parity-split response path.
pub fn detect_symmetry(spec: &ChainSpec) -> bool {
    const TOL: f64 = 1e-12;
    let close = |a: f64, b: f64| (a - b).abs() <= TOL * a.abs().max(b.abs()).max(1e-300);
    let l = spec.length;
    let f_ok = (0..l - 1).all(|n| close(spec.couplings[n], spec.couplings[l - 2 - n]));
    let w_ok = (0..l).all(|n| close(spec.onsite_freqs[n], spec.onsite_freqs[l - 1 - n]));
    f_ok && w_ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn coupling_matrix_two_sites() {
        let spec = ChainSpec::ordered(2, 1.0, 1.0).unwrap();
        let c = build_coupling_matrix(&spec, &NumericPolicy::default()).unwrap();
        assert_eq!(c[(0, 0)], 2.0);
        assert_eq!(c[(1, 1)], 2.0);
        assert_eq!(c[(0, 1)], -1.0);
        assert_eq!(c[(1, 0)], -1.0);
    }

    #[test]
    fn coupling_matrix_three_sites_end_pinning() {
        // Interior site unpinned: diagonal there comes from the springs only.
        let spec = ChainSpec::new(vec![1.0, 0.0, 1.0], vec![1.0, 1.0]).unwrap();
        let c = build_coupling_matrix(&spec, &NumericPolicy::default()).unwrap();
        let expect = [[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(c[(i, j)], expect[i][j], "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn translation_mode_rejected_without_pinning() {
        assert!(ChainSpec::new(vec![0.0, 0.0, 0.0], vec![1.0, 1.0]).is_err());
        // Pinned ends with free interior are fine.
        let spec = ChainSpec::pinned(3, PinningStyle::EndsOnly(1.0), vec![1.0, 1.0]).unwrap();
        assert!(build_coupling_matrix(&spec, &NumericPolicy::default()).is_ok());
    }

    #[test]
    fn ordered_spectrum_matches_tridiagonal_formula() {
        // Free ends (f_0 = f_l = 0) make the coupling part a Neumann
        // Laplacian: eigenvalues omega0^2 + 2f(1 - cos(k pi / l)), k = 0..l-1,
        // with cosine standing waves sampled at half-integer sites.
        let l = 20;
        let spec = ChainSpec::ordered(l, 1.0, 1.0).unwrap();
        let c = build_coupling_matrix(&spec, &NumericPolicy::default()).unwrap();
        let mut eigs: Vec<f64> = c.symmetric_eigen().eigenvalues.iter().cloned().collect();
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (k, ev) in eigs.iter().enumerate() {
            let expect = 1.0 + 2.0 * (1.0 - (k as f64 * std::f64::consts::PI / l as f64).cos());
            assert_relative_eq!(*ev, expect, max_relative = 1e-10);
        }
    }

    #[test]
    fn gershgorin_bounds_hold() {
        let spec = ChainSpec::new(vec![1.0, 0.5, 2.0, 1.0], vec![0.7, 1.3, 0.9]).unwrap();
        let c = build_coupling_matrix(&spec, &NumericPolicy::default()).unwrap();
        let eigs = c.symmetric_eigen().eigenvalues;
        let lo = spec.onsite_freqs.iter().map(|w| w * w).fold(f64::INFINITY, f64::min);
        let hi = (0..4)
            .map(|i| {
                let fl = if i == 0 { 0.0 } else { spec.couplings[i - 1] };
                let fr = if i == 3 { 0.0 } else { spec.couplings[i] };
                spec.onsite_freqs[i].powi(2) + 2.0 * (fl + fr)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        for ev in eigs.iter() {
            assert!(*ev >= lo - 1e-12 && *ev <= hi + 1e-12);
        }
    }

    #[test]
    fn symmetry_detection() {
        let ordered = ChainSpec::ordered(6, 1.0, 1.0).unwrap();
        assert!(detect_symmetry(&ordered));
        let palin = ChainSpec::new(vec![1.0; 4], vec![1.1, 0.9, 1.1]).unwrap();
        assert!(detect_symmetry(&palin));
        let not = ChainSpec::new(vec![1.0; 4], vec![1.1, 0.9, 0.8]).unwrap();
        assert!(!detect_symmetry(&not));
        // Onsite asymmetry also disqualifies.
        let w_broken = ChainSpec::new(vec![1.0, 1.0, 1.0, 2.0], vec![1.0, 1.0, 1.0]).unwrap();
        assert!(!detect_symmetry(&w_broken));
    }

    #[test]
    fn mass_must_stay_unity() {
        let mut spec = ChainSpec::ordered(3, 1.0, 1.0).unwrap();
        spec.mass = 2.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn bath_validation() {
        assert!(BathConfig::new(2.0, 10.0, 5.0, 2.0).is_ok());
        assert!(BathConfig::new(-1.0, 10.0, 5.0, 2.0).is_err());
        assert!(BathConfig::new(2.0, 0.0, 5.0, 2.0).is_err());
        assert!(BathConfig::new(2.0, 10.0, -0.1, 2.0).is_err());
    }
}
