//! Gaussian-state entanglement across contiguous cuts of the chain:
//! covariance assembly, symplectic spectra, and logarithmic negativity.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::correlations::{CorrelationMatrices, Frame};
use crate::error::Error;
use crate::model::{BathConfig, ChainSpec};
use crate::observables::{heat_flux, StationaryState};
use crate::policy::NumericPolicy;
use crate::Result;

/// 2l x 2l covariance matrix over the ordered basis (X_1..X_l, P_1..P_l),
/// normalized to twice the symmetrized correlations so an uncoupled vacuum
/// mode has symplectic eigenvalue exactly 1.
#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    pub v: DMatrix<f64>,
}

impl CovarianceMatrix {
    /// Number of sites.
    pub fn sites(&self) -> usize {
        self.v.nrows() / 2
    }
}

/// Builds the covariance matrix from stationary real-space correlations and
/// checks physicality: every symplectic eigenvalue must stay above
/// 1 - symplectic_floor_tol (undershoot beyond rounding means the upstream
/// quadrature failed).
pub fn assemble_covariance(
    site: &CorrelationMatrices,
    policy: &NumericPolicy,
) -> Result<CovarianceMatrix> {
    if site.frame != Frame::RealSpace {
        return Err(Error::InvalidArgument {
            arg: "correlations",
            reason: "covariance needs real-space correlations".into(),
        });
    }
    let l = site.len();
    let mut v = DMatrix::zeros(2 * l, 2 * l);
    for i in 0..l {
        for j in 0..l {
            v[(i, j)] = 2.0 * site.yy[(i, j)];
            v[(l + i, l + j)] = 2.0 * site.qq[(i, j)];
            v[(i, l + j)] = 2.0 * site.yq[(i, j)];
            v[(l + j, i)] = 2.0 * site.yq[(i, j)];
        }
    }
    let cov = CovarianceMatrix { v };
    let floor = symplectic_eigenvalues(&cov)?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if floor < 1.0 - policy.symplectic_floor_tol {
        return Err(Error::UnphysicalCovariance {
            value: floor,
            tol: policy.symplectic_floor_tol,
        });
    }
    Ok(cov)
}

/// Symplectic eigenvalues: the moduli of the eigenvalues of sigma V, which
/// occur in +-i gamma pairs. The returned list has one entry per mode,
/// ascending. Pairs failing to match within 1e-9 relative mean the
/// eigensolve lost the structure.
pub fn symplectic_eigenvalues(cov: &CovarianceMatrix) -> Result<Vec<f64>> {
    let l = cov.sites();
    let n = 2 * l;
    // sigma V with sigma = [[0, I], [-I, 0]]: top half of the product takes
    // the momentum rows, bottom half the negated position rows.
    let mut sv = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..l {
            sv[(i, j)] = cov.v[(l + i, j)];
            sv[(l + i, j)] = -cov.v[(i, j)];
        }
    }
    let eig = sv.complex_eigenvalues();
    let mut mods: Vec<f64> = eig.iter().map(|z| z.norm()).collect();
    mods.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(l);
    for pair in mods.chunks(2) {
        let scale = pair[1].max(1.0);
        if (pair[1] - pair[0]).abs() > 1e-9 * scale {
            return Err(Error::RealnessViolation {
                context: "symplectic eigenvalue pairing".into(),
                imag: pair[1] - pair[0],
                scale,
            });
        }
        out.push(0.5 * (pair[0] + pair[1]));
    }
    Ok(out)
}

/// Logarithmic negativity across the cut after site `k` (1-based): subsystem
/// A holds sites 1..k, B the rest. Partial transposition flips the momentum
/// signs of B, and N = -sum_j log2(min(1, gamma_j)) over the symplectic
/// eigenvalues of the transposed matrix.
pub fn log_negativity(cov: &CovarianceMatrix, cut: usize) -> Result<f64> {
    let l = cov.sites();
    if cut == 0 || cut >= l {
        return Err(Error::InvalidArgument {
            arg: "cut",
            reason: format!("cut must lie in 1..{}, got {cut}", l - 1),
        });
    }
    let flipped = flip_momenta(cov, cut..l);
    let gammas = symplectic_eigenvalues(&flipped)?;
    Ok(gammas
        .iter()
        .map(|&g| -g.min(1.0).log2())
        .sum::<f64>()
        .max(0.0))
}

/// Sign flip of the momentum rows and columns of the given site range.
fn flip_momenta(cov: &CovarianceMatrix, sites: std::ops::Range<usize>) -> CovarianceMatrix {
    let l = cov.sites();
    let mut v = cov.v.clone();
    for s in sites {
        for j in 0..2 * l {
            v[(l + s, j)] = -v[(l + s, j)];
        }
        for i in 0..2 * l {
            v[(i, l + s)] = -v[(i, l + s)];
        }
    }
    CovarianceMatrix { v }
}

/// N_k for every contiguous cut k = 1..l-1; entry k-1 holds cut k.
pub fn negativity_profile(cov: &CovarianceMatrix) -> Result<Vec<f64>> {
    (1..cov.sites()).map(|k| log_negativity(cov, k)).collect()
}

/// One row of a temperature scan: negativities for the requested cuts plus
/// the thermal conductivity of the same steady state.
#[derive(Debug, Clone)]
pub struct NegativityPoint {
    pub t_mean: f64,
    pub conductivity: f64,
    /// Parallel to the requested cut list.
    pub negativity: Vec<f64>,
}

/// N_k and G_th across a mean-temperature grid at fixed relative bias.
/// Grid points solve independently in parallel.
pub fn negativity_temperature_scan(
    spec: &ChainSpec,
    gamma: f64,
    cutoff: f64,
    t_grid: &[f64],
    eps: f64,
    cuts: &[usize],
    policy: &NumericPolicy,
) -> Result<Vec<NegativityPoint>> {
    if cuts.is_empty() || cuts.iter().any(|&k| k == 0 || k >= spec.length) {
        return Err(Error::InvalidArgument {
            arg: "cuts",
            reason: format!("cuts must lie in 1..{}", spec.length - 1),
        });
    }
    if t_grid.is_empty() || t_grid.windows(2).any(|w| w[0] >= w[1]) || t_grid[0] <= 0.0 {
        return Err(Error::InvalidArgument {
            arg: "t_grid",
            reason: "temperature grid must be positive and strictly ascending".into(),
        });
    }
    t_grid
        .par_iter()
        .map(|&tm| {
            let bath = BathConfig::from_mean_and_bias(gamma, cutoff, tm, eps)?;
            let state = StationaryState::solve(spec, &bath, policy)?;
            let cov = assemble_covariance(&state.site, policy)?;
            let negativity = cuts
                .iter()
                .map(|&k| log_negativity(&cov, k))
                .collect::<Result<Vec<f64>>>()?;
            let flux = heat_flux(&state.site, spec, &bath, policy)?;
            Ok(NegativityPoint {
                t_mean: tm,
                conductivity: flux.flux / (bath.t_a - bath.t_b),
                negativity,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel;
    use crate::model::PinningStyle;
    use approx::assert_relative_eq;

    fn policy() -> NumericPolicy {
        NumericPolicy::default()
    }

    fn solved(
        spec: &ChainSpec,
        gamma: f64,
        t_a: f64,
        t_b: f64,
    ) -> (BathConfig, StationaryState) {
        let bath = BathConfig::new(gamma, 10.0, t_a, t_b).unwrap();
        let state = StationaryState::solve(spec, &bath, &policy()).unwrap();
        (bath, state)
    }

    /// Ground-state covariance of two oscillators with onsite frequency 1,
    /// mass 1 and spring f, from the exact normal-mode split: the symmetric
    /// mode keeps frequency 1, the antisymmetric one sqrt(1 + 2f).
    fn two_site_ground_covariance(f: f64) -> CovarianceMatrix {
        let ws: f64 = 1.0;
        let wa = (1.0 + 2.0 * f).sqrt();
        let a = 0.5 * (1.0 / ws + 1.0 / wa);
        let c = 0.5 * (1.0 / ws - 1.0 / wa);
        let b = 0.5 * (ws + wa);
        let d = 0.5 * (ws - wa);
        let mut v = DMatrix::zeros(4, 4);
        v[(0, 0)] = a;
        v[(1, 1)] = a;
        v[(0, 1)] = c;
        v[(1, 0)] = c;
        v[(2, 2)] = b;
        v[(3, 3)] = b;
        v[(2, 3)] = d;
        v[(3, 2)] = d;
        CovarianceMatrix { v }
    }

    #[test]
    fn two_site_ground_state_negativity_matches_closed_form() {
        // Partial transposition flips the sign of d; with no XP block the
        // squared symplectic eigenvalues are the eigenvalues of
        // V_XX * V_PP', giving (a+c)(b-d) and (a-c)(b+d) = wa/ws and ws/wa.
        let f = 1.0;
        let cov = two_site_ground_covariance(f);
        let wa = (1.0 + 2.0 * f).sqrt();
        let exact = 0.25 * (1.0 + 2.0 * f).log2();
        let n1 = log_negativity(&cov, 1).unwrap();
        assert_relative_eq!(n1, exact, max_relative = 1e-12);

        // Sanity on the raw spectrum too: the state itself is pure vacuum in
        // normal modes, so both symplectic eigenvalues are exactly 1.
        let gammas = symplectic_eigenvalues(&cov).unwrap();
        for g in gammas {
            assert_relative_eq!(g, 1.0, max_relative = 1e-12);
        }
        let flipped = symplectic_eigenvalues(&flip_momenta(&cov, 1..2)).unwrap();
        assert_relative_eq!(flipped[0], (1.0 / wa).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(flipped[1], wa.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn weakly_coupled_pair_approaches_the_isolated_ground_state() {
        let spec = ChainSpec::ordered(2, 1.0, 1.0).unwrap();
        let (_, state) = solved(&spec, 1e-4, 0.0, 0.0);
        let cov = assemble_covariance(&state.site, &policy()).unwrap();
        let oracle = two_site_ground_covariance(1.0);
        let err = (&cov.v - &oracle.v).amax();
        assert!(err < 1e-3, "covariance deviates from isolated ground state by {err}");

        let n1 = log_negativity(&cov, 1).unwrap();
        assert_relative_eq!(n1, 0.25 * 3.0f64.log2(), max_relative = 1e-2);
    }

    #[test]
    fn near_vacuum_covariance_for_nearly_uncoupled_sites() {
        let spec = ChainSpec::ordered(2, 1.0, 1e-4).unwrap();
        let (_, state) = solved(&spec, 1e-4, 0.0, 0.0);
        let cov = assemble_covariance(&state.site, &policy()).unwrap();
        let err = (&cov.v - DMatrix::identity(4, 4)).amax();
        assert!(err < 1e-3, "vacuum covariance off by {err}");
        for g in symplectic_eigenvalues(&cov).unwrap() {
            assert!((g - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn thermal_equilibrium_spectrum_is_coth() {
        let spec = ChainSpec::ordered(4, 1.0, 1.0).unwrap();
        let (_, state) = solved(&spec, 0.01, 2.0, 2.0);
        let cov = assemble_covariance(&state.site, &policy()).unwrap();
        let mut gammas = symplectic_eigenvalues(&cov).unwrap();
        gammas.sort_by(f64::total_cmp);
        let mut expected: Vec<f64> = state
            .basis
            .frequencies
            .iter()
            .map(|&w| kernel::coth(w / 4.0))
            .collect();
        expected.sort_by(f64::total_cmp);
        for (g, e) in gammas.iter().zip(&expected) {
            assert_relative_eq!(g, e, max_relative = 0.01);
        }
    }

    #[test]
    fn ground_state_chain_is_physical() {
        let spec = ChainSpec::ordered(5, 1.0, 1.0).unwrap();
        let (_, state) = solved(&spec, 2.0, 0.0, 0.0);
        let cov = assemble_covariance(&state.site, &policy()).unwrap();
        let min = symplectic_eigenvalues(&cov)
            .unwrap()
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        assert!(min >= 1.0 - 1e-9, "symplectic eigenvalue {min} below vacuum");
    }

    #[test]
    fn uncoupled_chain_has_no_entanglement() {
        // l = 2 keeps every site bath-damped, so the poles stay clear of the
        // imaginary axis even as the spring vanishes.
        let spec = ChainSpec::ordered(2, 1.0, 1e-6).unwrap();
        let (_, state) = solved(&spec, 2.0, 5.0, 2.0);
        let cov = assemble_covariance(&state.site, &policy()).unwrap();
        let n = log_negativity(&cov, 1).unwrap();
        assert!(n <= 1e-10, "residual negativity {n}");

        // Interior sites need some damping path to the ends; f = 1e-4 is
        // still far too weak for warm sites to entangle.
        let spec = ChainSpec::ordered(4, 1.0, 1e-4).unwrap();
        let (_, state) = solved(&spec, 2.0, 5.0, 2.0);
        let cov = assemble_covariance(&state.site, &policy()).unwrap();
        for (k, n) in negativity_profile(&cov).unwrap().into_iter().enumerate() {
            assert!(n <= 1e-10, "cut {}: residual negativity {n}", k + 1);
        }
    }

    #[test]
    fn high_temperature_equilibrium_is_separable() {
        let spec = ChainSpec::ordered(4, 1.0, 1.0).unwrap();
        let (_, state) = solved(&spec, 2.0, 100.0, 100.0);
        let cov = assemble_covariance(&state.site, &policy()).unwrap();
        for n in negativity_profile(&cov).unwrap() {
            assert_eq!(n, 0.0);
        }
    }

    #[test]
    fn transposing_either_side_gives_the_same_negativity() {
        let spec = ChainSpec::ordered(4, 1.0, 1.0).unwrap();
        let (_, state) = solved(&spec, 2.0, 0.5, 0.2);
        let cov = assemble_covariance(&state.site, &policy()).unwrap();
        for cut in 1..4 {
            let via_b = log_negativity(&cov, cut).unwrap();
            let flipped_a = flip_momenta(&cov, 0..cut);
            let via_a: f64 = symplectic_eigenvalues(&flipped_a)
                .unwrap()
                .iter()
                .map(|&g| -g.min(1.0).log2())
                .sum();
            assert_relative_eq!(via_b, via_a, epsilon = 1e-12, max_relative = 1e-12);
            assert!(via_b > 0.0, "expected entanglement across cut {cut}");
        }
    }

    #[test]
    fn mirror_symmetry_of_cuts_in_equilibrium() {
        let spec = ChainSpec::ordered(6, 1.0, 1.0).unwrap();
        let (_, state) = solved(&spec, 2.0, 0.3, 0.3);
        let cov = assemble_covariance(&state.site, &policy()).unwrap();
        let n = negativity_profile(&cov).unwrap();
        for k in 1..6 {
            let mirror = 6 - k;
            assert!(
                (n[k - 1] - n[mirror - 1]).abs() < 1e-8,
                "N_{k} = {} vs N_{mirror} = {}",
                n[k - 1],
                n[mirror - 1]
            );
        }
    }

    #[test]
    fn negativity_decays_with_temperature_and_ends_die_first() {
        let spec = ChainSpec::ordered(8, 1.0, 1.0).unwrap();
        let scan = negativity_temperature_scan(
            &spec,
            2.0,
            10.0,
            &[0.2, 0.5, 0.8],
            0.1,
            &[1, 4],
            &policy(),
        )
        .unwrap();
        for pair in scan.windows(2) {
            for c in 0..2 {
                assert!(
                    pair[1].negativity[c] <= pair[0].negativity[c] + 1e-12,
                    "negativity grew with temperature"
                );
            }
        }
        // End cuts carry less entanglement and vanish no later than interior
        // cuts as the temperature rises.
        assert!(scan[0].negativity[0] < scan[0].negativity[1]);
        let death = |c: usize| {
            scan.iter()
                .position(|p| p.negativity[c] == 0.0)
                .unwrap_or(scan.len())
        };
        assert!(death(0) <= death(1));
        // Conductivity rises over the same range.
        assert!(scan[2].conductivity > scan[0].conductivity);
    }

    #[test]
    fn free_interior_chain_entangles_more_at_low_temperature() {
        let pinned_everywhere = ChainSpec::ordered(8, 1.0, 1.0).unwrap();
        let ends_only =
            ChainSpec::pinned(8, PinningStyle::EndsOnly(1.0), vec![1.0; 7]).unwrap();
        let pol = policy();
        let mid = 4;
        let n_of = |spec: &ChainSpec| {
            let bath = BathConfig::from_mean_and_bias(2.0, 10.0, 0.05, 0.1).unwrap();
            let state = StationaryState::solve(spec, &bath, &pol).unwrap();
            let cov = assemble_covariance(&state.site, &pol).unwrap();
            log_negativity(&cov, mid).unwrap()
        };
        let uniform = n_of(&pinned_everywhere);
        let acoustic = n_of(&ends_only);
        assert!(
            acoustic > uniform,
            "EndsOnly N = {acoustic} should exceed uniform N = {uniform}"
        );
    }

    #[test]
    fn negativity_is_stable_under_small_coupling_perturbations() {
        let pol = policy();
        let n_at = |f: f64| {
            let spec = ChainSpec::ordered(4, 1.0, f).unwrap();
            let (_, state) = solved(&spec, 2.0, 0.5, 0.2);
            let cov = assemble_covariance(&state.site, &pol).unwrap();
            log_negativity(&cov, 2).unwrap()
        };
        let base = n_at(1.0);
        let bumped = n_at(1.01);
        assert!(base > 0.0);
        assert!(
            ((bumped - base) / base).abs() < 0.10,
            "1% coupling change moved N from {base} to {bumped}"
        );
    }
}
