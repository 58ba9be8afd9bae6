//! Observables of the steady state: local energies and temperatures, mode
//! occupations, heat flux, and scans of the conductivity over temperature
//! and of the flux over the coupling plane.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::correlations::{self, BathKernels, CorrelationMatrices, Frame};
use crate::error::Error;
use crate::kernel;
use crate::model::{build_coupling_matrix, BathConfig, ChainSpec};
use crate::policy::NumericPolicy;
use crate::response::response_for_chain;
use crate::spectral::{diagonalize, ModeBasis};
use crate::Result;

/// One fully solved steady state: the mode basis plus stationary second
/// moments in both frames.
pub struct StationaryState {
    pub basis: ModeBasis,
    /// Normal-mode correlations (Y, Q blocks).
    pub mode: CorrelationMatrices,
    /// Real-space correlations (X, P blocks).
    pub site: CorrelationMatrices,
}

impl StationaryState {
    /// End-to-end solve with the quantum noise kernel.
    pub fn solve(spec: &ChainSpec, bath: &BathConfig, policy: &NumericPolicy) -> Result<Self> {
        Self::solve_with(spec, bath, policy, false)
    }

    /// Same chain, classical (high-temperature) noise kernel.
    pub fn solve_classical(
        spec: &ChainSpec,
        bath: &BathConfig,
        policy: &NumericPolicy,
    ) -> Result<Self> {
        Self::solve_with(spec, bath, policy, true)
    }

    /// The matching zero-temperature run: same couplings, both baths at T=0.
    pub fn ground(spec: &ChainSpec, bath: &BathConfig, policy: &NumericPolicy) -> Result<Self> {
        Self::solve(spec, &bath.with_temperatures(0.0, 0.0)?, policy)
    }

    fn solve_with(
        spec: &ChainSpec,
        bath: &BathConfig,
        policy: &NumericPolicy,
        classical: bool,
    ) -> Result<Self> {
        bath.validate()?;
        let c = build_coupling_matrix(spec, policy)?;
        let basis = diagonalize(&c, spec, policy)?;
        let resp = response_for_chain(&basis, bath, spec.mass, policy)?;
        let kernels = if classical {
            BathKernels::classical(bath)
        } else {
            BathKernels::quantum(bath)
        };
        let mode = correlations::stationary_correlations(&resp, &kernels, spec.mass, policy)?;
        let site = correlations::to_real_space(&mode, &basis)?;
        Ok(StationaryState { basis, mode, site })
    }
}

fn expect_real_space(corr: &CorrelationMatrices, l: usize) -> Result<()> {
    if corr.frame != Frame::RealSpace {
        return Err(Error::InvalidArgument {
            arg: "correlations",
            reason: "expected real-space correlations".into(),
        });
    }
    if corr.len() != l {
        return Err(Error::InvalidArgument {
            arg: "correlations",
            reason: format!("size {} does not match chain length {l}", corr.len()),
        });
    }
    Ok(())
}

fn expect_normal_mode(corr: &CorrelationMatrices) -> Result<()> {
    if corr.frame != Frame::NormalMode {
        return Err(Error::InvalidArgument {
            arg: "correlations",
            reason: "expected normal-mode correlations".into(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Site energies and temperatures.

/// Per-site energy, effective frequency and reconstructed temperature.
#[derive(Debug, Clone)]
pub struct SiteProfile {
    pub energy: Vec<f64>,
    pub omega_eff: Vec<f64>,
    pub t_r: Vec<f64>,
}

/// Local energies, with each spring's energy split evenly between the two
/// sites it joins:
///
///   E_n = <P_n^2>/2M + (M w_n^2 + f_{n-1} + f_n) <X_n^2> / 2
///         - ( f_{n-1} <X_n X_{n-1}> + f_n <X_n X_{n+1}> ) / 2,
///
/// with f_0 = f_l = 0. The half weights on the cross terms make the sum
/// telescope exactly to the total chain energy; see [`chain_energy`].
pub fn site_energies(site: &CorrelationMatrices, spec: &ChainSpec) -> Result<Vec<f64>> {
    expect_real_space(site, spec.length)?;
    let l = spec.length;
    let m = spec.mass;
    let mut energies = Vec::with_capacity(l);
    for n in 0..l {
        let f_left = if n == 0 { 0.0 } else { spec.couplings[n - 1] };
        let f_right = if n + 1 < l { spec.couplings[n] } else { 0.0 };
        let mut e = site.qq[(n, n)] / (2.0 * m)
            + 0.5 * (m * spec.onsite_freqs[n].powi(2) + f_left + f_right) * site.yy[(n, n)];
        if n > 0 {
            e -= 0.5 * f_left * site.yy[(n, n - 1)];
        }
        if n + 1 < l {
            e -= 0.5 * f_right * site.yy[(n, n + 1)];
        }
        energies.push(e);
    }
    Ok(energies)
}

/// Total chain energy assembled directly from the kinetic, onsite and spring
/// terms. Equals the sum of [`site_energies`] up to rounding.
pub fn chain_energy(site: &CorrelationMatrices, spec: &ChainSpec) -> Result<f64> {
    expect_real_space(site, spec.length)?;
    let l = spec.length;
    let m = spec.mass;
    let mut total = 0.0;
    for n in 0..l {
        total += site.qq[(n, n)] / (2.0 * m)
            + 0.5 * m * spec.onsite_freqs[n].powi(2) * site.yy[(n, n)];
    }
    for (n, &f) in spec.couplings.iter().enumerate() {
        total +=
            0.5 * f * (site.yy[(n, n)] + site.yy[(n + 1, n + 1)] - 2.0 * site.yy[(n, n + 1)]);
    }
    Ok(total)
}

/// Inverts E = (w/2) coth(w / 2T) per site, with w fixed by the matching
/// zero-temperature energy through E_0 = w/2. Bisection on
/// T in (0, 10 max(T_a, T_b)]; the right side is increasing in T.
pub fn reconstruct_site_temperatures(
    energies: &[f64],
    ground: &[f64],
    bath: &BathConfig,
) -> Result<Vec<f64>> {
    if energies.len() != ground.len() {
        return Err(Error::InvalidArgument {
            arg: "energies",
            reason: format!("{} energies vs {} ground energies", energies.len(), ground.len()),
        });
    }
    let ceiling = 10.0 * bath.t_a.max(bath.t_b);
    energies
        .iter()
        .zip(ground)
        .enumerate()
        .map(|(site, (&e, &e0))| {
            if !(e0 > 0.0) || e < e0 - 1e-9 {
                return Err(Error::TemperatureBracket { site, energy: e });
            }
            if e <= e0 * (1.0 + 1e-12) {
                return Ok(0.0);
            }
            let omega = 2.0 * e0;
            let target = e / e0;
            if ceiling <= 0.0 || kernel::coth(omega / (2.0 * ceiling)) < target {
                return Err(Error::TemperatureBracket { site, energy: e });
            }
            let mut lo = 0.0;
            let mut hi = ceiling;
            for _ in 0..200 {
                if hi - lo < 1e-10 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if kernel::coth(omega / (2.0 * mid)) >= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(0.5 * (lo + hi))
        })
        .collect()
}

/// Site energies, effective frequencies and reconstructed temperatures from
/// a finite-temperature run and its matching zero-temperature run.
pub fn site_profile(
    warm_site: &CorrelationMatrices,
    ground_site: &CorrelationMatrices,
    spec: &ChainSpec,
    bath: &BathConfig,
) -> Result<SiteProfile> {
    let energy = site_energies(warm_site, spec)?;
    let ground = site_energies(ground_site, spec)?;
    let t_r = reconstruct_site_temperatures(&energy, &ground, bath)?;
    let omega_eff = ground.iter().map(|&e0| 2.0 * e0).collect();
    Ok(SiteProfile { energy, omega_eff, t_r })
}

// ---------------------------------------------------------------------------
// Mode occupations.

/// Per-mode effective frequency, occupation number, and the temperature of
/// the best-matching Bose-Einstein distribution.
#[derive(Debug, Clone)]
pub struct ModeOccupation {
    pub omega_eff: Vec<f64>,
    pub occupation: Vec<f64>,
    pub t_fit: f64,
}

/// Bose-Einstein occupation of a mode at frequency `omega` and temperature
/// `t` (zero at t = 0).
pub fn bose_occupation(omega: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let x = omega / t;
    if x > 700.0 {
        0.0
    } else {
        1.0 / x.exp_m1()
    }
}

/// Occupations from mode kinetic energies. The zero-temperature run fixes
/// the effective frequencies through <Q_i^2>_0 / M = Omega_eff,i / 2 (the
/// ground state splits its energy evenly, so twice the kinetic part is the
/// whole); the finite-temperature kinetic energy then yields
/// n_i = <Q_i^2> / (M Omega_eff,i) - 1/2. The fitted temperature minimizes
/// the summed squared deviation from a Bose-Einstein distribution over all
/// modes except the lowest.
pub fn effective_frequencies_and_occupations(
    warm: &CorrelationMatrices,
    ground: &CorrelationMatrices,
    mass: f64,
) -> Result<ModeOccupation> {
    expect_normal_mode(warm)?;
    expect_normal_mode(ground)?;
    if warm.len() != ground.len() {
        return Err(Error::InvalidArgument {
            arg: "correlations",
            reason: format!("warm run has {} modes, ground run {}", warm.len(), ground.len()),
        });
    }
    let l = warm.len();
    let mut omega_eff = Vec::with_capacity(l);
    let mut occupation = Vec::with_capacity(l);
    for i in 0..l {
        let q0 = ground.qq[(i, i)];
        if !(q0 > 0.0) {
            return Err(Error::GroundStateKinetic { mode: i, value: q0 });
        }
        let om = 2.0 * q0 / mass;
        let n = warm.qq[(i, i)] / (mass * om) - 0.5;
        if n < -0.05 {
            return Err(Error::NegativeOccupation { mode: i, value: n });
        }
        omega_eff.push(om);
        occupation.push(n);
    }
    let t_fit = fit_bose_temperature(&omega_eff, &occupation);
    Ok(ModeOccupation { omega_eff, occupation, t_fit })
}

/// Least-squares temperature of n(Omega) = 1/(e^{Omega/T} - 1), equal
/// weights, excluding the lowest mode. Coarse log scan, then golden-section
/// polish. Returns 0 when nothing is occupied.
fn fit_bose_temperature(omega: &[f64], occupation: &[f64]) -> f64 {
    let skip = omega
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let included: Vec<(f64, f64)> = omega
        .iter()
        .zip(occupation)
        .enumerate()
        .filter(|(i, _)| *i != skip)
        .map(|(_, (&w, &n))| (w, n))
        .collect();
    let best = included
        .iter()
        .cloned()
        .max_by(|a, b| a.1.total_cmp(&b.1));
    let (w_ref, n_ref) = match best {
        Some(pair) if pair.1 > 1e-9 => pair,
        _ => return 0.0,
    };
    let sse = |t: f64| -> f64 {
        included
            .iter()
            .map(|&(w, n)| {
                let d = n - bose_occupation(w, t);
                d * d
            })
            .sum()
    };
    let t_est = w_ref / (1.0 + 1.0 / n_ref).ln();
    let lo = (t_est / 50.0).ln();
    let hi = (t_est * 50.0).ln();
    let coarse = 64;
    let mut best_k: usize = 0;
    let mut best_val = f64::INFINITY;
    for k in 0..=coarse {
        let u = lo + (hi - lo) * k as f64 / coarse as f64;
        let v = sse(u.exp());
        if v < best_val {
            best_val = v;
            best_k = k;
        }
    }
    let step = (hi - lo) / coarse as f64;
    let a = lo + step * (best_k.saturating_sub(1)) as f64;
    let b = (lo + step * (best_k + 1) as f64).min(hi);
    golden_min(|u| sse(u.exp()), a, b, 1e-12).exp()
}

/// Golden-section minimum of a unimodal function on [lo, hi].
fn golden_min(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    const R: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - R * (hi - lo);
    let mut x2 = lo + R * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - R * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + R * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

// ---------------------------------------------------------------------------
// Heat flux.

/// Bond-resolved heat flux and its bond average. The conductivity is absent
/// for equal bath temperatures.
#[derive(Debug, Clone)]
pub struct FluxReport {
    /// J_{n,n+1} = (f_n/M) <X_n P_{n+1}>, one entry per spring.
    pub bonds: Vec<f64>,
    pub flux: f64,
    pub conductivity: Option<f64>,
}

/// Stationary heat flux through each bond. Positive values flow from the
/// first site toward the last. Energy conservation forces every bond to
/// carry the same flux; a spread beyond the policy tolerance means the
/// correlations were not stationary or the quadrature failed.
pub fn heat_flux(
    site: &CorrelationMatrices,
    spec: &ChainSpec,
    bath: &BathConfig,
    policy: &NumericPolicy,
) -> Result<FluxReport> {
    expect_real_space(site, spec.length)?;
    let bonds: Vec<f64> = spec
        .couplings
        .iter()
        .enumerate()
        .map(|(n, &f)| f / spec.mass * site.yq[(n, n + 1)])
        .collect();
    if bonds.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "spec",
            reason: "chain has no bonds".into(),
        });
    }
    let flux = bonds.iter().sum::<f64>() / bonds.len() as f64;
    let spread = bonds.iter().map(|j| (j - flux).abs()).fold(0.0, f64::max);
    let tol = (policy.flux_uniformity_rel * flux.abs()).max(policy.flux_abs_floor);
    if spread > tol {
        return Err(Error::FluxNonuniform { spread, tol });
    }
    let dt = bath.t_a - bath.t_b;
    let conductivity = if dt != 0.0 { Some(flux / dt) } else { None };
    Ok(FluxReport { bonds, flux, conductivity })
}

// ---------------------------------------------------------------------------
// Scans.

#[derive(Debug, Clone, Copy)]
pub struct ConductivityPoint {
    pub t_mean: f64,
    pub flux: f64,
    pub conductivity: f64,
}

/// G_th(T_m) at fixed relative bias: T_a = (1+eps) T_m, T_b = (1-eps) T_m.
/// Grid points solve independently in parallel.
pub fn conductivity_scan(
    spec: &ChainSpec,
    gamma: f64,
    cutoff: f64,
    t_grid: &[f64],
    eps: f64,
    policy: &NumericPolicy,
) -> Result<Vec<ConductivityPoint>> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument {
            arg: "eps",
            reason: format!("relative bias must lie in (0, 1), got {eps}"),
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
            let report = heat_flux(&state.site, spec, &bath, policy)?;
            Ok(ConductivityPoint {
                t_mean: tm,
                flux: report.flux,
                conductivity: report.flux / (bath.t_a - bath.t_b),
            })
        })
        .collect()
}

/// Heat flux over the (f, gamma) coupling plane for an ordered chain, plus
/// the location of the flux maximum in gamma for each f.
#[derive(Debug, Clone)]
pub struct FluxSurface {
    pub f_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    /// flux[(i, j)] at (f_grid[i], gamma_grid[j]).
    pub flux: DMatrix<f64>,
    /// Per f: gamma of maximal flux, golden-section refined between the
    /// grid neighbors of the grid argmax.
    pub gamma_max: Vec<f64>,
    pub flux_at_max: Vec<f64>,
}

pub fn flux_coupling_scan(
    length: usize,
    omega0: f64,
    f_grid: &[f64],
    gamma_grid: &[f64],
    cutoff: f64,
    t_a: f64,
    t_b: f64,
    policy: &NumericPolicy,
) -> Result<FluxSurface> {
    for (name, grid) in [("f_grid", f_grid), ("gamma_grid", gamma_grid)] {
        if grid.is_empty() || grid.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidArgument {
                arg: if name == "f_grid" { "f_grid" } else { "gamma_grid" },
                reason: "grid must be non-empty and positive".into(),
            });
        }
    }
    if gamma_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument {
            arg: "gamma_grid",
            reason: "gamma grid must be strictly ascending".into(),
        });
    }

    let eval = |f: f64, gamma: f64| -> Result<f64> {
        let spec = ChainSpec::ordered(length, omega0, f)?;
        let bath = BathConfig::new(gamma, cutoff, t_a, t_b)?;
        let state = StationaryState::solve(&spec, &bath, policy)?;
        Ok(heat_flux(&state.site, &spec, &bath, policy)?.flux)
    };

    let nf = f_grid.len();
    let ng = gamma_grid.len();
    let cells: Vec<f64> = (0..nf * ng)
        .into_par_iter()
        .map(|idx| eval(f_grid[idx / ng], gamma_grid[idx % ng]))
        .collect::<Result<_>>()?;
    let flux = DMatrix::from_fn(nf, ng, |i, j| cells[i * ng + j]);

    let mut gamma_max = Vec::with_capacity(nf);
    let mut flux_at_max = Vec::with_capacity(nf);
    for (i, &f) in f_grid.iter().enumerate() {
        let j_star: usize = (0..ng)
            .max_by(|&a, &b| flux[(i, a)].total_cmp(&flux[(i, b)]))
            .unwrap();
        let lo = gamma_grid[j_star.saturating_sub(1)];
        let hi = gamma_grid[(j_star + 1).min(ng - 1)];
        let mut failure: Option<Error> = None;
        let g = golden_min(
            |u| match eval(f, u.exp()) {
                Ok(j) => -j,
                Err(e) => {
                    if failure.is_none() {
                        failure = Some(e);
                    }
                    f64::INFINITY
                }
            },
            lo.ln(),
            hi.ln(),
            1e-3,
        )
        .exp();
        if let Some(e) = failure {
            return Err(e);
        }
        gamma_max.push(g);
        flux_at_max.push(eval(f, g)?);
    }

    Ok(FluxSurface {
        f_grid: f_grid.to_vec(),
        gamma_grid: gamma_grid.to_vec(),
        flux,
        gamma_max,
        flux_at_max,
    })
}
