//! Second moments of the damped chain: stationary correlation matrices,
//! transient evolution from a prepared chain state, and time-shifted
//! stationary correlations.
//!
//! Everything is assembled from the pole/residue form of the response: each
//! matrix entry is a double sum over pole pairs weighted by an ω-integral of
//! the bath spectrum against a rational kernel. The integrals only depend on
//! the pole pair, so they are tabulated once per (pair, bath) and shared by
//! all matrix entries.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::Error;
use crate::kernel::{self, KernelKind, NoiseKernel};
use crate::model::BathConfig;
use crate::policy::NumericPolicy;
use crate::quad::{self, FilonPanel};
use crate::response::{BathSide, ResponseSet};
use crate::spectral::ModeBasis;
use crate::Result;

/// Coordinate system the matrices refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Normal coordinates of the isolated chain.
    NormalMode,
    /// Lattice-site coordinates.
    RealSpace,
}

/// Time argument of a correlation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimePoint {
    /// t → ∞ limit; initial conditions have decayed.
    Stationary,
    /// Equal-time correlations at finite t after coupling to the baths.
    Finite(f64),
    /// Stationary two-time correlations ⟨·(t) ·(t+τ)⟩ at lag τ.
    Lag(f64),
}

/// Symmetrized second moments of coordinates and momenta.
///
/// `yy`/`qq`/`yq` hold ⟨pos pos⟩, ⟨mom mom⟩ and ⟨pos mom⟩ in the coordinates
/// named by `frame`. For `TimePoint::Lag` the row index carries time t and
/// the column index t+τ, so the matrices are not symmetric.
#[derive(Debug, Clone)]
pub struct CorrelationMatrices {
    pub yy: DMatrix<f64>,
    pub qq: DMatrix<f64>,
    pub yq: DMatrix<f64>,
    pub frame: Frame,
    pub time: TimePoint,
}

impl CorrelationMatrices {
    pub fn len(&self) -> usize {
        self.yy.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.yy.nrows() == 0
    }

    /// Thermal (or ground, at temperature 0) state of the isolated chain:
    /// every normal mode independently occupied, no cross correlations.
    pub fn thermal_isolated(basis: &ModeBasis, mass: f64, temperature: f64) -> CorrelationMatrices {
        let l = basis.len();
        let mut yy = DMatrix::zeros(l, l);
        let mut qq = DMatrix::zeros(l, l);
        for (i, &w) in basis.frequencies.iter().enumerate() {
            // w*coth(w/2T) reduces to w at T=0 and to 2T classically.
            let theta = kernel::omega_coth_half(w, temperature);
            yy[(i, i)] = theta / (2.0 * mass * w * w);
            qq[(i, i)] = mass * theta / 2.0;
        }
        CorrelationMatrices {
            yy,
            qq,
            yq: DMatrix::zeros(l, l),
            frame: Frame::NormalMode,
            time: TimePoint::Finite(0.0),
        }
    }

    /// Structural checks: finite entries, symmetry and positive diagonals
    /// for equal-time sets, vanishing ⟨pos mom⟩ diagonal in the stationary
    /// state (nothing accumulates in a steady state).
    pub fn validate(&self, policy: &NumericPolicy) -> Result<()> {
        let l = self.len();
        if self.qq.nrows() != l || self.yq.nrows() != l || !self.yy.is_square() {
            return Err(Error::InvalidArgument {
                arg: "correlations",
                reason: "matrix blocks must share one square shape".into(),
            });
        }
        for m in [&self.yy, &self.qq, &self.yq] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::UnphysicalCovariance { value: f64::NAN, tol: 0.0 });
            }
        }
        if let TimePoint::Lag(_) = self.time {
            return Ok(());
        }
        let scale = self
            .yy
            .iter()
            .chain(self.qq.iter())
            .fold(0.0f64, |a, &v| a.max(v.abs()))
            .max(1e-300);
        for m in [&self.yy, &self.qq] {
            for i in 0..l {
                if m[(i, i)] <= 0.0 {
                    return Err(Error::UnphysicalCovariance {
                        value: m[(i, i)],
                        tol: 0.0,
                    });
                }
                for j in 0..i {
                    let skew = (m[(i, j)] - m[(j, i)]).abs();
                    if skew > policy.realness_rel * scale {
                        return Err(Error::UnphysicalCovariance {
                            value: skew,
                            tol: policy.realness_rel * scale,
                        });
                    }
                }
            }
        }
        if self.time == TimePoint::Stationary {
            for i in 0..l {
                let natural = (self.yy[(i, i)] * self.qq[(i, i)]).sqrt();
                let tol = policy.reconstruction_rel * natural;
                if self.yq[(i, i)].abs() > tol {
                    return Err(Error::UnphysicalCovariance {
                        value: self.yq[(i, i)],
                        tol,
                    });
                }
            }
        }
        Ok(())
    }
}

/// The two bath noise spectra driving the chain ends.
#[derive(Debug, Clone)]
pub struct BathKernels {
    pub a: NoiseKernel,
    pub b: NoiseKernel,
}

impl BathKernels {
    pub fn quantum(bath: &BathConfig) -> BathKernels {
        BathKernels {
            a: NoiseKernel::quantum(bath.gamma, bath.cutoff, bath.t_a),
            b: NoiseKernel::quantum(bath.gamma, bath.cutoff, bath.t_b),
        }
    }

    pub fn classical(bath: &BathConfig) -> BathKernels {
        BathKernels {
            a: NoiseKernel::classical(bath.gamma, bath.cutoff, bath.t_a),
            b: NoiseKernel::classical(bath.gamma, bath.cutoff, bath.t_b),
        }
    }

    fn side(&self, side: BathSide) -> &NoiseKernel {
        match side {
            BathSide::A => &self.a,
            BathSide::B => &self.b,
        }
    }
}

// ---------------------------------------------------------------------------
// Compensated summation.

/// Neumaier running sum; the compensation also absorbs terms larger than the
/// current sum, which plain Kahan loses.
#[derive(Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of complex terms, largest magnitude first. Residue
/// products span many orders of magnitude, and conjugate partners land next
/// to each other in the sorted order so their imaginary parts cancel early.
fn compensated_sum(terms: &mut [Complex64]) -> Complex64 {
    terms.sort_unstable_by(|a, b| b.norm_sqr().total_cmp(&a.norm_sqr()));
    let mut re = Compensated::default();
    let mut im = Compensated::default();
    for t in terms.iter() {
        re.add(t.re);
        im.add(t.im);
    }
    Complex64::new(re.value(), im.value())
}

/// out_ij = Σ_{k,k'} w1_ik kern_kk' w2_jk', evaluated as two nested
/// compensated sums (over k' then k) so no gemm reassociation is involved.
fn quadratic_form(
    w1: &DMatrix<Complex64>,
    kern: &DMatrix<Complex64>,
    w2: &DMatrix<Complex64>,
) -> DMatrix<Complex64> {
    let n = w1.nrows();
    let np = w1.ncols();
    debug_assert_eq!(w2.nrows(), n);
    debug_assert_eq!(kern.nrows(), np);
    debug_assert_eq!(kern.ncols(), np);

    let mut inner = DMatrix::<Complex64>::zeros(np, n);
    let mut terms = Vec::with_capacity(np);
    for k in 0..np {
        for j in 0..n {
            terms.clear();
            for kp in 0..np {
                terms.push(kern[(k, kp)] * w2[(j, kp)]);
            }
            inner[(k, j)] = compensated_sum(&mut terms);
        }
    }
    let mut out = DMatrix::<Complex64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            terms.clear();
            for k in 0..np {
                terms.push(w1[(i, k)] * inner[(k, j)]);
            }
            out[(i, j)] = compensated_sum(&mut terms);
        }
    }
    out
}

/// Drop an imaginary part that conjugate-closed summation should have
/// cancelled; error if it did not.
fn realify(m: &DMatrix<Complex64>, context: &str, policy: &NumericPolicy) -> Result<DMatrix<f64>> {
    let scale = m.iter().map(|z| z.norm()).fold(0.0f64, f64::max).max(1e-300);
    let worst = m.iter().map(|z| z.im.abs()).fold(0.0f64, f64::max);
    if worst > policy.realness_rel * scale {
        return Err(Error::RealnessViolation { context: context.into(), imag: worst, scale });
    }
    Ok(m.map(|z| z.re))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

// ---------------------------------------------------------------------------
// Pair-integral tables.

/// Unordered pole pairs reduced by complex conjugation: I(λ̄_k, λ̄_k') is the
/// conjugate of I(λ_k, λ_k'), so only one representative per orbit is
/// integrated. Slot j*np+k names either a computed value or a conjugate.
fn canonical_pairs(
    resp: &ResponseSet,
    ordered: bool,
) -> (Vec<(usize, usize)>, Vec<(usize, bool)>) {
    let np = resp.n_poles();
    let mut index = vec![(usize::MAX, false); np * np];
    let mut reps: Vec<(usize, usize)> = Vec::new();
    for k in 0..np {
        let lo = if ordered { 0 } else { k };
        for kp in lo..np {
            if index[k * np + kp].0 != usize::MAX {
                continue;
            }
            let rep = reps.len();
            reps.push((k, kp));
            index[k * np + kp] = (rep, false);
            if !ordered {
                index[kp * np + k] = (rep, false);
            }
            let (ck, ckp) = (resp.conj_partner[k], resp.conj_partner[kp]);
            if index[ck * np + ckp].0 == usize::MAX {
                index[ck * np + ckp] = (rep, true);
                if !ordered {
                    index[ckp * np + ck] = (rep, true);
                }
            }
        }
    }
    (reps, index)
}

/// Matrix of ∫₀^∞ S(ω)(λ_k λ_k' + ω²)/((λ_k²+ω²)(λ_k'²+ω²)) dω over all pole
/// pairs; the kernel of every stationary second moment.
fn pair_integral_matrix(
    resp: &ResponseSet,
    kernel: &NoiseKernel,
    policy: &NumericPolicy,
) -> Result<DMatrix<Complex64>> {
    let np = resp.n_poles();
    let (reps, index) = canonical_pairs(resp, false);
    let values: Vec<Complex64> = reps
        .par_iter()
        .map(|&(k, kp)| kernel::omega_integral_pair(resp.poles[k], resp.poles[kp], kernel, policy))
        .collect::<Result<Vec<_>>>()?;
    let mut out = DMatrix::zeros(np, np);
    for k in 0..np {
        for kp in 0..np {
            let (rep, conj) = index[k * np + kp];
            out[(k, kp)] = if conj { values[rep].conj() } else { values[rep] };
        }
    }
    Ok(out)
}

/// Lag kernel V(λ, λ'; τ) = ½∫₀^∞ S(ω)[e^{iωτ} h₁ + e^{-iωτ} h₂] dω with
/// h₁ = 1/((λ+iω)(λ'-iω)) and h₂ = 1/((λ-iω)(λ'+iω)).
///
/// V(·,·;0) reproduces the stationary pair integral; for τ>0 it carries the
/// memory of the noise across the lag. It is not symmetric under λ ↔ λ', and
/// the same table serves both the transient corrections (evaluated at the
/// elapsed time) and the time-shifted stationary correlations (at the lag).
struct LaggedTable {
    np: usize,
    index: Vec<(usize, bool)>,
    /// Per representative pair: panels for ½S h₁ (phase +ωτ) and ½S h₂
    /// (phase -ωτ).
    panels: Vec<(Vec<FilonPanel>, Vec<FilonPanel>)>,
}

impl LaggedTable {
    fn build(
        resp: &ResponseSet,
        kernel: &NoiseKernel,
        scale_hint: f64,
        policy: &NumericPolicy,
    ) -> Result<LaggedTable> {
        let np = resp.n_poles();
        let (reps, index) = canonical_pairs(resp, true);
        let eps = (policy.quad_rel * scale_hint).max(policy.quad_abs);

        // Beyond the resonant head the integrand decays like ω^{-3} (ω^{-4}
        // for the classical spectrum); cut where the analytic tail bound
        // drops below eps. The oscillatory factor is integrated exactly per
        // panel, so octave-wide panels cover the extension cheaply.
        let g = kernel.cutoff;
        let w_osc = match kernel.kind {
            KernelKind::Quantum => g * (kernel.gamma / (std::f64::consts::PI * eps)).sqrt(),
            KernelKind::Classical => {
                let t = kernel.temperature.max(1e-300);
                (kernel.gamma * g * g * t / eps).powf(1.0 / 3.0)
            }
        };

        let panels: Vec<(Vec<FilonPanel>, Vec<FilonPanel>)> = reps
            .par_iter()
            .map(|&(k, kp)| {
                let (la, lb) = (resp.poles[k], resp.poles[kp]);
                let head = kernel::head_cutoff(&[la, lb], kernel);
                let mut bps = kernel::resonance_breakpoints(&[la, lb], kernel, head);
                let mut w = head;
                while w < w_osc {
                    w *= 2.0;
                    bps.push(w.min(w_osc));
                }
                let i = Complex64::new(0.0, 1.0);
                let g1 = |w: f64| {
                    0.5 * kernel.spectrum(w) / ((la + i * w) * (lb - i * w))
                };
                let g2 = |w: f64| {
                    0.5 * kernel.spectrum(w) / ((la - i * w) * (lb + i * w))
                };
                let tol = eps / 8.0;
                let plus = quad::build_filon_panels(&g1, &bps, tol, 4000)?;
                let minus = quad::build_filon_panels(&g2, &bps, tol, 4000)?;
                Ok((plus, minus))
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(LaggedTable { np, index, panels })
    }

    fn eval(&self, tau: f64) -> DMatrix<Complex64> {
        let values: Vec<Complex64> = self
            .panels
            .par_iter()
            .map(|(plus, minus)| {
                let mut acc = Complex64::new(0.0, 0.0);
                for p in plus {
                    acc += p.oscillatory_integral(tau);
                }
                for p in minus {
                    acc += p.oscillatory_integral(-tau);
                }
                acc
            })
            .collect();
        let mut out = DMatrix::zeros(self.np, self.np);
        for k in 0..self.np {
            for kp in 0..self.np {
                let (rep, conj) = self.index[k * self.np + kp];
                out[(k, kp)] = if conj { values[rep].conj() } else { values[rep] };
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Correlation assembly.

struct ResidueWeights {
    /// Noise residues per side, modes × poles.
    pos: [DMatrix<Complex64>; 2],
    /// The same columns scaled by λ_k: residues of the differentiated
    /// response, which the momenta couple to.
    mom: [DMatrix<Complex64>; 2],
}

fn residue_weights(resp: &ResponseSet) -> ResidueWeights {
    let scale_cols = |m: &DMatrix<Complex64>| {
        let mut out = m.clone();
        for k in 0..resp.n_poles() {
            let lam = resp.poles[k];
            for i in 0..out.nrows() {
                out[(i, k)] *= lam;
            }
        }
        out
    };
    let fa = resp.f_residues(BathSide::A).clone();
    let fb = resp.f_residues(BathSide::B).clone();
    let fam = scale_cols(&fa);
    let fbm = scale_cols(&fb);
    ResidueWeights { pos: [fa, fb], mom: [fam, fbm] }
}

fn assemble_blocks(
    weights: &ResidueWeights,
    kernels: [&DMatrix<Complex64>; 2],
    mass: f64,
    context: &str,
    policy: &NumericPolicy,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = weights.pos[0].nrows();
    let mut yy_c = DMatrix::<Complex64>::zeros(n, n);
    let mut qq_c = DMatrix::<Complex64>::zeros(n, n);
    let mut yq_c = DMatrix::<Complex64>::zeros(n, n);
    for side in 0..2 {
        yy_c += quadratic_form(&weights.pos[side], kernels[side], &weights.pos[side]);
        qq_c += quadratic_form(&weights.mom[side], kernels[side], &weights.mom[side]);
        yq_c += quadratic_form(&weights.pos[side], kernels[side], &weights.mom[side]);
    }
    let m2 = mass * mass;
    let yy = realify(&yy_c, context, policy)?.map(|v| v / m2);
    let qq = realify(&qq_c, context, policy)?;
    let yq = realify(&yq_c, context, policy)?.map(|v| v / mass);
    Ok((yy, qq, yq))
}

/// Stationary second moments in normal-mode coordinates. Initial-condition
/// terms are absent: every pole has a negative real part, so only the
/// noise-driven double convolution survives, one ω-integral per pole pair
/// and bath.
pub fn stationary_correlations(
    resp: &ResponseSet,
    kernels: &BathKernels,
    mass: f64,
    policy: &NumericPolicy,
) -> Result<CorrelationMatrices> {
    let ia = pair_integral_matrix(resp, kernels.side(BathSide::A), policy)?;
    let ib = pair_integral_matrix(resp, kernels.side(BathSide::B), policy)?;
    let weights = residue_weights(resp);
    let (mut yy, mut qq, yq) =
        assemble_blocks(&weights, [&ia, &ib], mass, "stationary correlations", policy)?;
    symmetrize(&mut yy);
    symmetrize(&mut qq);
    let out = CorrelationMatrices {
        yy,
        qq,
        yq,
        frame: Frame::NormalMode,
        time: TimePoint::Stationary,
    };
    out.validate(policy)?;
    Ok(out)
}

/// Equal-time correlations at finite times after the baths are switched on.
///
/// The propagator part uses the initial-value responses: with
/// A(t) = Σ_k X_k e^{λ_k t} (X_k the matrix residues of the resolvent),
/// positions evolve as Ȧ(t) Y(0) + A(t) Q(0)/M plus the noise convolution,
/// momenta as M Ä(t) Y(0) + Ȧ(t) Q(0) plus its derivative. The noise part
/// replaces the stationary pair integral by
///   I + e^{(λ+λ')t} I − e^{λt} V(λ,λ'; t) − e^{λ't} V(λ',λ; t),
/// which vanishes at t = 0 and relaxes to I as the exponentials decay.
pub fn transient_correlations(
    resp: &ResponseSet,
    kernels: &BathKernels,
    mass: f64,
    initial: &CorrelationMatrices,
    times: &[f64],
    policy: &NumericPolicy,
) -> Result<Vec<CorrelationMatrices>> {
    if initial.frame != Frame::NormalMode {
        return Err(Error::InvalidArgument {
            arg: "initial",
            reason: "initial correlations must be in normal-mode coordinates".into(),
        });
    }
    let n = resp.n_modes();
    if initial.len() != n {
        return Err(Error::InvalidArgument {
            arg: "initial",
            reason: format!("initial correlations are {}×{}, response has {} modes", initial.len(), initial.len(), n),
        });
    }
    if times.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
        return Err(Error::InvalidArgument {
            arg: "times",
            reason: "times must be finite and nonnegative".into(),
        });
    }
    initial.validate(policy)?;

    let np = resp.n_poles();
    let ia = pair_integral_matrix(resp, kernels.side(BathSide::A), policy)?;
    let ib = pair_integral_matrix(resp, kernels.side(BathSide::B), policy)?;
    let hint = ia.iter().chain(ib.iter()).map(|z| z.norm()).fold(0.0f64, f64::max).max(1.0);
    let table_a = LaggedTable::build(resp, kernels.side(BathSide::A), hint, policy)?;
    let table_b = LaggedTable::build(resp, kernels.side(BathSide::B), hint, policy)?;
    let weights = residue_weights(resp);
    let residues: Vec<DMatrix<Complex64>> = (0..np).map(|k| resp.initial_residue(k)).collect();

    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        if t == 0.0 {
            let mut zero = initial.clone();
            zero.time = TimePoint::Finite(0.0);
            out.push(zero);
            continue;
        }
        let decay: Vec<Complex64> = resp.poles.iter().map(|&l| (l * t).exp()).collect();
        let all_dead = decay.iter().all(|e| e.norm() < 1e-200);

        // Noise block.
        let windowed = |imat: &DMatrix<Complex64>, table: &LaggedTable| -> DMatrix<Complex64> {
            if all_dead {
                return imat.clone();
            }
            let v = table.eval(t);
            let mut w = DMatrix::zeros(np, np);
            for k in 0..np {
                for kp in 0..np {
                    w[(k, kp)] = imat[(k, kp)] * (1.0 + decay[k] * decay[kp])
                        - decay[k] * v[(k, kp)]
                        - decay[kp] * v[(kp, k)];
                }
            }
            w
        };
        let wa = windowed(&ia, &table_a);
        let wb = windowed(&ib, &table_b);
        let (mut yy, mut qq, mut yq) =
            assemble_blocks(&weights, [&wa, &wb], mass, "transient correlations", policy)?;

        // Initial-condition block through the propagator residues.
        if !all_dead {
            let mut a_c = DMatrix::<Complex64>::zeros(n, n);
            let mut da_c = DMatrix::<Complex64>::zeros(n, n);
            let mut dda_c = DMatrix::<Complex64>::zeros(n, n);
            for k in 0..np {
                let lam = resp.poles[k];
                let e = decay[k];
                a_c += residues[k].map(|x| x * e);
                da_c += residues[k].map(|x| x * e * lam);
                dda_c += residues[k].map(|x| x * e * lam * lam);
            }
            let a = realify(&a_c, "transient propagator", policy)?;
            let da = realify(&da_c, "transient propagator", policy)?;
            let dda = realify(&dda_c, "transient propagator", policy)?;

            let yy0 = &initial.yy;
            let qq0 = &initial.qq;
            let yq0 = &initial.yq;
            let cross_yy = &da * yq0 * a.transpose() / mass;
            yy += &da * yy0 * da.transpose()
                + &a * qq0 * a.transpose() / (mass * mass)
                + &cross_yy
                + cross_yy.transpose();
            let cross_qq = &dda * yq0 * da.transpose() * mass;
            qq += &dda * yy0 * dda.transpose() * (mass * mass)
                + &da * qq0 * da.transpose()
                + &cross_qq
                + cross_qq.transpose();
            yq += &da * yy0 * dda.transpose() * mass
                + &a * qq0 * da.transpose() / mass
                + &da * yq0 * da.transpose()
                + &a * yq0.transpose() * dda.transpose();
        }

        symmetrize(&mut yy);
        symmetrize(&mut qq);
        let set = CorrelationMatrices {
            yy,
            qq,
            yq,
            frame: Frame::NormalMode,
            time: TimePoint::Finite(t),
        };
        set.validate(policy)?;
        out.push(set);
    }
    Ok(out)
}

/// Stationary two-time correlations ⟨·_i(t) ·_j(t+τ)⟩ in the t → ∞ limit,
/// one set per requested lag. At τ = 0 this is the stationary set; as τ grows
/// the entries decay while oscillating near the damped mode frequencies.
pub fn time_shifted_stationary(
    resp: &ResponseSet,
    kernels: &BathKernels,
    mass: f64,
    taus: &[f64],
    policy: &NumericPolicy,
) -> Result<Vec<CorrelationMatrices>> {
    if taus.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
        return Err(Error::InvalidArgument {
            arg: "taus",
            reason: "lags must be finite and nonnegative".into(),
        });
    }
    let ia = pair_integral_matrix(resp, kernels.side(BathSide::A), policy)?;
    let ib = pair_integral_matrix(resp, kernels.side(BathSide::B), policy)?;
    let hint = ia.iter().chain(ib.iter()).map(|z| z.norm()).fold(0.0f64, f64::max).max(1.0);
    let table_a = LaggedTable::build(resp, kernels.side(BathSide::A), hint, policy)?;
    let table_b = LaggedTable::build(resp, kernels.side(BathSide::B), hint, policy)?;
    let weights = residue_weights(resp);

    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let (va, vb);
        let blocks: [&DMatrix<Complex64>; 2] = if tau == 0.0 {
            [&ia, &ib]
        } else {
            va = table_a.eval(tau);
            vb = table_b.eval(tau);
            [&va, &vb]
        };
        let (yy, qq, yq) =
            assemble_blocks(&weights, blocks, mass, "time-shifted correlations", policy)?;
        let set = CorrelationMatrices {
            yy,
            qq,
            yq,
            frame: Frame::NormalMode,
            time: TimePoint::Lag(tau),
        };
        set.validate(policy)?;
        out.push(set);
    }
    Ok(out)
}

/// Rotate normal-mode correlations into lattice-site coordinates.
pub fn to_real_space(
    corr: &CorrelationMatrices,
    basis: &ModeBasis,
) -> Result<CorrelationMatrices> {
    if corr.frame != Frame::NormalMode {
        return Err(Error::InvalidArgument {
            arg: "corr",
            reason: "expected normal-mode correlations".into(),
        });
    }
    if corr.len() != basis.len() {
        return Err(Error::InvalidArgument {
            arg: "corr",
            reason: format!("correlations are {}×{} but basis has {} modes", corr.len(), corr.len(), basis.len()),
        });
    }
    let g = &basis.g;
    Ok(CorrelationMatrices {
        yy: g * &corr.yy * g.transpose(),
        qq: g * &corr.qq * g.transpose(),
        yq: g * &corr.yq * g.transpose(),
        frame: Frame::RealSpace,
        time: corr.time,
    })
}

/// Inverse of [`to_real_space`]; exact up to roundoff since the mode matrix
/// is orthogonal.
pub fn to_normal_mode(
    corr: &CorrelationMatrices,
    basis: &ModeBasis,
) -> Result<CorrelationMatrices> {
    if corr.frame != Frame::RealSpace {
        return Err(Error::InvalidArgument {
            arg: "corr",
            reason: "expected real-space correlations".into(),
        });
    }
    if corr.len() != basis.len() {
        return Err(Error::InvalidArgument {
            arg: "corr",
            reason: format!("correlations are {}×{} but basis has {} sites", corr.len(), corr.len(), basis.len()),
        });
    }
    let g = &basis.g;
    Ok(CorrelationMatrices {
        yy: g.transpose() * &corr.yy * g,
        qq: g.transpose() * &corr.qq * g,
        yq: g.transpose() * &corr.yq * g,
        frame: Frame::NormalMode,
        time: corr.time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ChainSpec;
    use crate::response;
    use crate::spectral;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn policy() -> NumericPolicy {
        NumericPolicy::default()
    }

    fn chain_setup(
        spec: &ChainSpec,
        bath: &BathConfig,
    ) -> (ModeBasis, ResponseSet) {
        let pol = policy();
        let c = crate::model::build_coupling_matrix(spec, &pol).unwrap();
        let basis = spectral::diagonalize(&c, spec, &pol).unwrap();
        let resp = response::response_for_chain(&basis, bath, spec.mass, &pol).unwrap();
        (basis, resp)
    }

    /// Gauss–Legendre nodes/weights on [-1, 1] by Newton iteration on the
    /// recurrence; self-checked against Σw = 2.
    fn legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..60 {
                let mut p0 = 1.0f64;
                let mut p1 = x;
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let mut p0 = 1.0f64;
            let mut p1 = x;
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        let total: f64 = weights.iter().sum();
        assert!((total - 2.0).abs() < 1e-12);
        (nodes, weights)
    }

    /// (e^{zt} - 1)/z, series-expanded near zt = 0 to avoid cancellation.
    fn expm1_over(z: Complex64, t: f64) -> Complex64 {
        let x = z * t;
        if x.norm() < 1e-3 {
            // t·(1 + x/2 + x²/6 + x³/24 + x⁴/120); next term is below 1e-18.
            let c = Complex64::new(1.0, 0.0)
                + x * (Complex64::new(0.5, 0.0)
                    + x * (Complex64::new(1.0 / 6.0, 0.0)
                        + x * (Complex64::new(1.0 / 24.0, 0.0)
                            + x * Complex64::new(1.0 / 120.0, 0.0))));
            t * c
        } else {
            (x.exp() - 1.0) / z
        }
    }

    /// ∫₀^t∫₀^t e^{λ(t-t')} e^{λ'(t-t'')} cos(ω(t'-t'')) dt' dt'' for one
    /// noise frequency ω. Closed-form ground truth for the windowed pieces;
    /// production only ever uses the split into stationary and lag tables.
    fn finite_window_kernel(la: Complex64, lb: Complex64, omega: f64, t: f64) -> Complex64 {
        let i = Complex64::new(0.0, 1.0);
        let ap = expm1_over(la + i * omega, t);
        let am = expm1_over(la - i * omega, t);
        let bp = expm1_over(lb + i * omega, t);
        let bm = expm1_over(lb - i * omega, t);
        0.5 * (ap * bm + am * bp)
    }

    /// The closed form of the windowed double time integral against brute
    /// 2D quadrature, randomized over poles, frequency and window length.
    #[test]
    fn finite_time_kernel_matches_direct_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x77aa_11ee);
        let (nodes, wts) = legendre_rule(16);
        for trial in 0..20 {
            let la = Complex64::new(-rng.gen_range(0.05..2.0), rng.gen_range(-5.0..5.0));
            let lb = Complex64::new(-rng.gen_range(0.05..2.0), rng.gen_range(-5.0..5.0));
            let omega: f64 = rng.gen_range(0.0..6.0);
            let t: f64 = rng.gen_range(0.2..12.0);

            let closed = finite_window_kernel(la, lb, omega, t);

            // Composite 2D Gauss–Legendre, sized to the oscillation and
            // decay rates.
            let rate = omega + la.norm() + lb.norm();
            let panels = ((rate * t / 3.0).ceil() as usize + 6).min(220);
            let h = t / panels as f64;
            let mut xs = Vec::with_capacity(panels * nodes.len());
            let mut ws = Vec::with_capacity(panels * nodes.len());
            for p in 0..panels {
                let c = (p as f64 + 0.5) * h;
                for (x, w) in nodes.iter().zip(&wts) {
                    xs.push(c + 0.5 * h * x);
                    ws.push(0.5 * h * w);
                }
            }
            let ea: Vec<Complex64> =
                xs.iter().zip(&ws).map(|(&x, &w)| (la * (t - x)).exp() * w).collect();
            let eb: Vec<Complex64> =
                xs.iter().zip(&ws).map(|(&x, &w)| (lb * (t - x)).exp() * w).collect();
            let mut direct = Complex64::new(0.0, 0.0);
            for (i, &fa) in ea.iter().enumerate() {
                let mut row = Complex64::new(0.0, 0.0);
                for (j, &fb) in eb.iter().enumerate() {
                    row += fb * (omega * (xs[i] - xs[j])).cos();
                }
                direct += fa * row;
            }

            let err = (closed - direct).norm();
            assert!(
                err < 1e-8 * (1.0 + closed.norm()),
                "trial {trial}: closed {closed} vs direct {direct}, err {err}"
            );
        }
    }

    /// The windowed kernel splits into the stationary kernel and lag-kernel
    /// integrands with e^{λt} prefactors; the split must be exact because the
    /// assembly integrates the pieces separately.
    #[test]
    fn windowed_kernel_piece_decomposition_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x31f0_77);
        let i = Complex64::new(0.0, 1.0);
        for _ in 0..50 {
            let la = Complex64::new(-rng.gen_range(0.05..2.0), rng.gen_range(-6.0..6.0));
            let lb = Complex64::new(-rng.gen_range(0.05..2.0), rng.gen_range(-6.0..6.0));
            let w: f64 = rng.gen_range(0.0..8.0);
            let t: f64 = rng.gen_range(0.05..30.0);

            let h1 = 1.0 / ((la + i * w) * (lb - i * w));
            let h2 = 1.0 / ((la - i * w) * (lb + i * w));
            let stationary = 0.5 * (h1 + h2);
            let lag_ab = 0.5 * ((i * w * t).exp() * h1 + (-i * w * t).exp() * h2);
            let lag_ba = 0.5 * ((i * w * t).exp() * h2 + (-i * w * t).exp() * h1);
            let ea = (la * t).exp();
            let eb = (lb * t).exp();
            let pieces = stationary * (1.0 + ea * eb) - ea * lag_ab - eb * lag_ba;

            let full = finite_window_kernel(la, lb, w, t);
            assert!(
                (full - pieces).norm() <= 1e-13 * (1.0 + full.norm()),
                "split mismatch: {full} vs {pieces}"
            );
        }
    }

    /// Oscillatory panels with the geometric tail extension against the
    /// known transform ∫₀^∞ cos(ωτ)/(ω²+a²) dω = (π/2a) e^{-aτ}.
    #[test]
    fn lagged_panels_reproduce_lorentzian_transform() {
        for &a in &[0.5f64, 3.0] {
            let g = |w: f64| Complex64::new(1.0 / (w * w + a * a), 0.0);
            let mut bps = vec![0.0, a, 4.0 * a, 20.0 * a];
            let mut w = 20.0 * a;
            while w < 3.0e6 {
                w *= 2.0;
                bps.push(w);
            }
            let w_top = *bps.last().unwrap();
            let panels = quad::build_filon_panels(&g, &bps, 1e-13, 4000).unwrap();
            for &tau in &[0.0, 0.7, 3.0, 12.0] {
                let got: Complex64 =
                    panels.iter().map(|p| p.oscillatory_integral(tau / a)).sum();
                // At zero lag nothing suppresses the truncated 1/ω² tail, so
                // compare against the truncated antiderivative there.
                let want = if tau == 0.0 {
                    (w_top / a).atan() / a
                } else {
                    std::f64::consts::FRAC_PI_2 / a * (-tau).exp()
                };
                assert!(
                    (got.re - want).abs() < 1e-9 / a,
                    "a={a} tau/a={}: got {} want {want}",
                    tau / a,
                    got.re
                );
            }
        }
    }

    /// At zero lag the oscillatory table must agree with the adaptive
    /// stationary integrals; the two quadrature paths are independent.
    #[test]
    fn zero_lag_matches_stationary_integrals() {
        let spec = ChainSpec::ordered(3, 1.0, 1.0).unwrap();
        let bath = BathConfig::new(0.8, 10.0, 2.7, 1.1).unwrap();
        let (_, resp) = chain_setup(&spec, &bath);
        let kernel = NoiseKernel::quantum(0.8, 10.0, 2.7);
        let pol = policy();
        let imat = pair_integral_matrix(&resp, &kernel, &pol).unwrap();
        let hint = imat.iter().map(|z| z.norm()).fold(0.0f64, f64::max);
        let table = LaggedTable::build(&resp, &kernel, hint, &pol).unwrap();
        let v0 = table.eval(0.0);
        let scale = hint.max(1e-300);
        let worst = (&v0 - &imat).iter().map(|z| z.norm()).fold(0.0f64, f64::max);
        assert!(worst < 1e-9 * scale, "worst deviation {worst} at scale {scale}");
    }

    #[test]
    fn weak_coupling_equilibrium_matches_isolated_thermodynamics() {
        let spec = ChainSpec::ordered(5, 1.0, 1.0).unwrap();
        let bath = BathConfig::new(0.01, 10.0, 2.0, 2.0).unwrap();
        let (basis, resp) = chain_setup(&spec, &bath);
        let corr = stationary_correlations(
            &resp,
            &BathKernels::quantum(&bath),
            spec.mass,
            &policy(),
        )
        .unwrap();
        for (i, &w) in basis.frequencies.iter().enumerate() {
            let theta = kernel::omega_coth_half(w, 2.0);
            let qq_ref = spec.mass * theta / 2.0;
            let yy_ref = theta / (2.0 * spec.mass * w * w);
            assert_relative_eq!(corr.qq[(i, i)], qq_ref, max_relative = 0.01);
            assert_relative_eq!(corr.yy[(i, i)], yy_ref, max_relative = 0.01);
        }
    }

    #[test]
    fn classical_kernel_reaches_equipartition() {
        let spec = ChainSpec::ordered(3, 1.0, 1.0).unwrap();
        let bath = BathConfig::new(0.5, 10.0, 100.0, 100.0).unwrap();
        let (_, resp) = chain_setup(&spec, &bath);
        let corr = stationary_correlations(
            &resp,
            &BathKernels::classical(&bath),
            spec.mass,
            &policy(),
        )
        .unwrap();
        for i in 0..3 {
            assert_relative_eq!(corr.qq[(i, i)] / spec.mass, 100.0, max_relative = 0.02);
        }
    }

    #[test]
    fn zero_temperature_state_respects_uncertainty() {
        let spec = ChainSpec::ordered(4, 1.0, 1.0).unwrap();
        let bath = BathConfig::new(0.8, 10.0, 0.0, 0.0).unwrap();
        let (_, resp) = chain_setup(&spec, &bath);
        let corr = stationary_correlations(
            &resp,
            &BathKernels::quantum(&bath),
            spec.mass,
            &policy(),
        )
        .unwrap();
        for i in 0..4 {
            assert!(corr.qq[(i, i)] > 0.0);
            let product = corr.yy[(i, i)] * corr.qq[(i, i)];
            assert!(product > 0.25, "mode {i}: uncertainty product {product}");
        }
    }

    #[test]
    fn equal_temperature_cross_parity_blocks_vanish() {
        let spec = ChainSpec::ordered(5, 1.0, 1.0).unwrap();
        let bath = BathConfig::new(2.0, 10.0, 3.0, 3.0).unwrap();
        let (basis, resp) = chain_setup(&spec, &bath);
        let corr = stationary_correlations(
            &resp,
            &BathKernels::quantum(&bath),
            spec.mass,
            &policy(),
        )
        .unwrap();
        let scale = (0..5).map(|i| corr.yy[(i, i)]).fold(0.0f64, f64::max);
        for i in 0..5 {
            for j in 0..5 {
                if basis.parity[i] != basis.parity[j] {
                    assert!(
                        corr.yy[(i, j)].abs() < 1e-8 * scale,
                        "cross-parity ({i},{j}) = {}",
                        corr.yy[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn quadrature_refinement_leaves_correlations_fixed() {
        let spec = ChainSpec::ordered(3, 1.0, 1.0).unwrap();
        let bath = BathConfig::new(2.0, 10.0, 5.0, 2.0).unwrap();
        let (_, resp) = chain_setup(&spec, &bath);
        let kernels = BathKernels::quantum(&bath);
        let coarse = stationary_correlations(&resp, &kernels, spec.mass, &policy()).unwrap();
        let mut tight = policy();
        tight.quad_rel *= 0.5;
        tight.quad_abs *= 0.5;
        let fine = stationary_correlations(&resp, &kernels, spec.mass, &tight).unwrap();
        let scale = coarse.yy.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let worst = (&coarse.yy - &fine.yy).iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(worst < 1e-8 * scale, "refinement moved yy by {worst} at scale {scale}");
    }

    #[test]
    fn transient_interpolates_between_initial_and_stationary() {
        let spec = ChainSpec::ordered(3, 1.0, 1.0).unwrap();
        let bath = BathConfig::new(0.5, 10.0, 5.0, 2.0).unwrap();
        let (basis, resp) = chain_setup(&spec, &bath);
        let kernels = BathKernels::quantum(&bath);
        let pol = policy();
        let initial = CorrelationMatrices::thermal_isolated(&basis, spec.mass, 0.0);
        let slowest = resp.poles.iter().map(|p| p.re.abs()).fold(f64::INFINITY, f64::min);
        let late = 200.0 / slowest;
        let sets = transient_correlations(
            &resp,
            &kernels,
            spec.mass,
            &initial,
            &[0.0, 1.3, late],
            &pol,
        )
        .unwrap();

        // t = 0 hands back the prepared state untouched.
        assert_eq!(sets[0].yy, initial.yy);
        assert_eq!(sets[0].qq, initial.qq);

        // Intermediate times: heated above the ground state, still physical
        // (validate ran inside).
        assert!(sets[1].qq[(0, 0)] > initial.qq[(0, 0)]);

        // Late times: transients are dead, matches the stationary set.
        let stat = stationary_correlations(&resp, &kernels, spec.mass, &pol).unwrap();
        let scale = stat.qq.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        for (m_t, m_s) in [(&sets[2].yy, &stat.yy), (&sets[2].qq, &stat.qq)] {
            let worst = (m_t - m_s).iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            assert!(worst < 1e-8 * scale, "late-time deviation {worst}");
        }
    }

    /// Mid-time transients against the windowed kernel integrated directly
    /// with the adaptive scheme: an end-to-end check that the stationary
    /// + lag-table split assembles the right finite-t pair integrals.
    #[test]
    fn transient_pair_integrals_match_direct_windowed_quadrature() {
        let spec = ChainSpec::ordered(2, 1.0, 1.0).unwrap();
        let bath = BathConfig::new(0.7, 10.0, 4.0, 1.5).unwrap();
        let (_, resp) = chain_setup(&spec, &bath);
        let pol = policy();
        let kernel = NoiseKernel::quantum(0.7, 10.0, 4.0);
        let t = 2.4;

        let imat = pair_integral_matrix(&resp, &kernel, &pol).unwrap();
        let hint = imat.iter().map(|z| z.norm()).fold(0.0f64, f64::max);
        let table = LaggedTable::build(&resp, &kernel, hint, &pol).unwrap();
        let v = table.eval(t);

        let np = resp.n_poles();
        for k in 0..np {
            for kp in k..np {
                let (la, lb) = (resp.poles[k], resp.poles[kp]);
                let split = imat[(k, kp)] * (1.0 + (la * t).exp() * (lb * t).exp())
                    - (la * t).exp() * v[(k, kp)]
                    - (lb * t).exp() * v[(kp, k)];

                // Direct quadrature truncated where the analytic ω^{-3} tail
                // bound drops below ~3e-7; the assertion budgets for it.
                let head = kernel::head_cutoff(&[la, lb], &kernel);
                let mut bps = kernel::resonance_breakpoints(&[la, lb], &kernel, head);
                let mut w = head;
                while w < 8000.0 {
                    w *= 1.6;
                    bps.push(w.min(8000.0));
                }
                let direct = quad::integrate(
                    |w| kernel.spectrum(w) * finite_window_kernel(la, lb, w, t),
                    &bps,
                    1e-10,
                    1e-12,
                    2_000_000,
                    "windowed pair integral",
                )
                .unwrap()
                .value;

                assert!(
                    (split - direct).norm() < 1.5e-6 * (1.0 + split.norm()),
                    "pair ({k},{kp}): split {split} vs direct {direct}"
                );
            }
        }
    }

    #[test]
    fn time_shifted_correlations_decay_and_track_mode_frequency() {
        let spec = ChainSpec::ordered(2, 1.0, 1.0).unwrap();
        let bath = BathConfig::new(0.1, 10.0, 3.0, 1.0).unwrap();
        let (basis, resp) = chain_setup(&spec, &bath);
        let kernels = BathKernels::quantum(&bath);
        let pol = policy();

        let slowest = resp.poles.iter().map(|p| p.re.abs()).fold(f64::INFINITY, f64::min);
        let omega0 = basis.frequencies[0];
        let span = 20.0 * 2.0 * std::f64::consts::PI / omega0;
        let n_grid = 600;
        let mut taus: Vec<f64> = (0..=n_grid).map(|i| span * i as f64 / n_grid as f64).collect();
        taus.push(100.0 / slowest);

        let sets = time_shifted_stationary(&resp, &kernels, spec.mass, &taus, &pol).unwrap();
        let base = sets[0].qq[(0, 0)];
        assert!(base > 0.0);

        // Lag zero is definitionally the stationary matrix.
        let stat = stationary_correlations(&resp, &kernels, spec.mass, &pol).unwrap();
        assert_relative_eq!(base, stat.qq[(0, 0)], max_relative = 1e-10);

        // Memory loss at long lag.
        let last = sets.last().unwrap().qq[(0, 0)];
        assert!(last.abs() < 1e-6 * base, "residual correlation {last} vs base {base}");

        // Zero-crossing count of the lowest-mode autocorrelation tracks its
        // frequency at weak damping.
        let series: Vec<f64> = sets[..=n_grid].iter().map(|s| s.qq[(0, 0)]).collect();
        let crossings = series.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
        let measured = crossings as f64 * std::f64::consts::PI / span;
        assert_relative_eq!(measured, omega0, max_relative = 0.10);
    }

    #[test]
    fn real_space_round_trip_and_traces() {
        let spec = ChainSpec::ordered(5, 1.0, 1.0).unwrap();
        let bath = BathConfig::new(2.0, 10.0, 1.5, 1.5).unwrap();
        let (basis, resp) = chain_setup(&spec, &bath);
        let corr = stationary_correlations(
            &resp,
            &BathKernels::quantum(&bath),
            spec.mass,
            &policy(),
        )
        .unwrap();
        let real = to_real_space(&corr, &basis).unwrap();
        assert_eq!(real.frame, Frame::RealSpace);

        // Orthogonal similarity preserves traces.
        assert_relative_eq!(real.qq.trace(), corr.qq.trace(), max_relative = 1e-12);
        assert_relative_eq!(real.yy.trace(), corr.yy.trace(), max_relative = 1e-12);

        // Equal temperatures on a mirror-symmetric chain: the two ends look
        // identical.
        let last = 4;
        assert_relative_eq!(real.yy[(0, 0)], real.yy[(last, last)], max_relative = 1e-8);

        let back = to_normal_mode(&real, &basis).unwrap();
        let worst = (&back.yy - &corr.yy)
            .iter()
            .chain((&back.qq - &corr.qq).iter())
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        let scale = corr.qq.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(worst < 1e-12 * scale, "round trip drifted by {worst}");
    }

    #[test]
    fn frame_mismatch_is_rejected() {
        let spec = ChainSpec::ordered(2, 1.0, 1.0).unwrap();
        let bath = BathConfig::new(1.0, 10.0, 1.0, 1.0).unwrap();
        let (basis, resp) = chain_setup(&spec, &bath);
        let corr = stationary_correlations(
            &resp,
            &BathKernels::quantum(&bath),
            spec.mass,
            &policy(),
        )
        .unwrap();
        assert!(to_normal_mode(&corr, &basis).is_err());
        let real = to_real_space(&corr, &basis).unwrap();
        assert!(to_real_space(&real, &basis).is_err());
    }
}
