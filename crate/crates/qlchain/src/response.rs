//! Laplace-space response of the damped chain.
//!
//! In mode coordinates the equations of motion close on the symmetric matrix
//!
//!   B(s)_jk = (s^2 + Omega_j^2) d_jk + (s g(s)/M)(u_j u_k + v_j v_k),
//!
//! with g(s) = gamma*Gamma/(Gamma + s) and u, v the mode amplitudes at the
//! two bath-coupled end sites. Noise and initial-condition responses are
//! entries of B(s)^{-1}; they are rational with simple stable poles, so the
//! whole time dependence reduces to residues at the roots of
//! Q(s) = (Gamma+s)^2 det B(s).
//!
//! At a simple root L the resolvent is rank-1:
//!   B(s)^{-1} ~ x x^T / ((s - L) x^T B'(L) x),  B(L) x = 0
//! (transpose, not adjoint: B is complex symmetric). All residues are read
//! off that one vector, which keeps the computation free of expanded
//! polynomial coefficients; those appear only as companion-matrix starting
//! points for the simultaneous root refinement.
//!
//! Mirror-symmetric chains split into parity blocks where the rank-2 end
//! coupling collapses to rank 1 and the null vector is available in closed
//! form per family: x_j = w_j / (L^2 + Omega_j^2).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;

use crate::error::Error;
use crate::model::BathConfig;
use crate::policy::NumericPolicy;
use crate::poly::{self, Poly};
use crate::spectral::{ModeBasis, Parity};
use crate::Result;

/// Which bath a response function couples to: `A` drives the first site,
/// `B` the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BathSide {
    A,
    B,
}

/// Poles and residue data of the chain response, in mode coordinates.
///
/// For pole k with null vector x and normalization n = x^T B'(L_k) x:
///   noise residues      F^alpha_{j,k} = x_j (x . u_alpha) / n,
///   initial residues    A_{ij,k}      = x_i x_j / n.
/// Time-domain responses are sums over poles of residue * exp(L_k t).
#[derive(Debug, Clone)]
pub struct ResponseSet {
    pub poles: Vec<Complex64>,
    /// Index of the conjugate partner (self-index for real poles).
    pub conj_partner: Vec<usize>,
    /// Parity family each pole came from; `None` on the general path.
    pub pole_family: Vec<Parity>,
    /// l x n_p noise-response residues for bath a (first site).
    pub f_a: DMatrix<Complex64>,
    /// l x n_p noise-response residues for bath b (last site).
    pub f_b: DMatrix<Complex64>,
    mode_vectors: Vec<DVector<Complex64>>,
    norms: Vec<Complex64>,
}

impl ResponseSet {
    pub fn n_poles(&self) -> usize {
        self.poles.len()
    }

    pub fn n_modes(&self) -> usize {
        self.f_a.nrows()
    }

    pub fn f_residues(&self, side: BathSide) -> &DMatrix<Complex64> {
        match side {
            BathSide::A => &self.f_a,
            BathSide::B => &self.f_b,
        }
    }

    /// Modes that actually appear in this set: all of them for a full
    /// response, one parity family for a family fragment.
    pub fn active_modes(&self) -> Vec<usize> {
        let l = self.n_modes();
        (0..l).filter(|&j| self.mode_vectors.iter().any(|x| x[j].norm() > 0.0)).collect()
    }

    /// Residue matrix of the initial-condition response at pole k:
    /// A_{ij} = x_i x_j / n_k.
    pub fn initial_residue(&self, k: usize) -> DMatrix<Complex64> {
        let x = &self.mode_vectors[k];
        let l = x.len();
        let mut out = DMatrix::zeros(l, l);
        for i in 0..l {
            for j in 0..l {
                out[(i, j)] = x[i] * x[j] / self.norms[k];
            }
        }
        out
    }

    /// Single entry of the initial-condition residue at pole k.
    pub fn initial_residue_entry(&self, k: usize, i: usize, j: usize) -> Complex64 {
        self.mode_vectors[k][i] * self.mode_vectors[k][j] / self.norms[k]
    }

    /// Time-domain noise response F_j^alpha(t) = sum_k res e^{L_k t};
    /// real by conjugate closure, checked against the policy tolerance.
    pub fn f_time(&self, j: usize, side: BathSide, t: f64, policy: &NumericPolicy) -> Result<f64> {
        let res = self.f_residues(side);
        let mut acc = Complex64::new(0.0, 0.0);
        let mut scale = 0.0f64;
        for (k, &lam) in self.poles.iter().enumerate() {
            let term = res[(j, k)] * (lam * t).exp();
            acc += term;
            scale += term.norm();
        }
        if acc.im.abs() > policy.realness_rel * scale.max(1e-300) {
            return Err(Error::RealnessViolation {
                context: format!("noise response at t = {t}"),
                imag: acc.im,
                scale,
            });
        }
        Ok(acc.re)
    }
}

fn bath_weight(s: Complex64, bath: &BathConfig, mass: f64) -> Complex64 {
    // s * g(s) / M with g(s) = gamma*Gamma/(Gamma+s).
    s * bath.gamma * bath.cutoff / ((bath.cutoff + s) * mass)
}

fn bath_weight_deriv(s: Complex64, bath: &BathConfig, mass: f64) -> Complex64 {
    // d/ds [s g(s)] = gamma*Gamma^2/(Gamma+s)^2.
    let d = bath.cutoff + s;
    bath.gamma * bath.cutoff * bath.cutoff / (d * d * mass)
}

// ---------------------------------------------------------------------------
// Symmetric families.

/// Modes of one parity family: positions in the full mode list and their
/// end-site amplitudes. Both parities reduce the end coupling to 2 w w^T
/// with w_j = G_{1j}, since G_{lj} = +-G_{1j}.
struct Family {
    indices: Vec<usize>,
    omega2: Vec<f64>,
    weights: Vec<f64>,
}

fn family_of(basis: &ModeBasis, parity: Parity) -> Family {
    let mut indices = Vec::new();
    let mut omega2 = Vec::new();
    let mut weights = Vec::new();
    for i in 0..basis.frequencies.len() {
        if basis.parity[i] == parity {
            indices.push(i);
            omega2.push(basis.frequencies[i] * basis.frequencies[i]);
            weights.push(basis.end_a(i));
        }
    }
    Family { indices, omega2, weights }
}

/// Denominator polynomial of one parity family, expanded:
/// D(s) = (s+Gamma) Prod_j (s^2+Omega_j^2)
///        + 2s(gamma*Gamma/M) Sum_j w_j^2 Prod_{k != j} (s^2+Omega_k^2).
pub fn interaction_matrix_denominator(
    basis: &ModeBasis,
    bath: &BathConfig,
    parity: Parity,
    mass: f64,
) -> Result<Poly> {
    if !basis.symmetric {
        return Err(Error::InvalidArgument {
            arg: "basis",
            reason: "parity-family denominators need a mirror-symmetric chain".into(),
        });
    }
    if parity == Parity::None {
        return Err(Error::InvalidArgument {
            arg: "parity",
            reason: "family must be even or odd".into(),
        });
    }
    let fam = family_of(basis, parity);
    if fam.indices.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "parity",
            reason: format!("no modes in the {parity:?} family"),
        });
    }
    let mut d = poly::product_s2_plus(&fam.omega2).mul_s_plus(bath.cutoff);
    for j in 0..fam.omega2.len() {
        let mut rest = fam.omega2.clone();
        rest.remove(j);
        let t = poly::product_s2_plus(&rest);
        // 2s (gamma*Gamma/M) w_j^2 T_j(s): the s factor is an index shift.
        let coef = 2.0 * bath.gamma * bath.cutoff / mass * fam.weights[j] * fam.weights[j];
        let term = Poly::new(std::iter::once(0.0).chain(t.c.iter().map(|c| coef * c)).collect());
        d = d.add_scaled(&term, 1.0);
    }
    Ok(d)
}

/// Structured evaluation of the family denominator and its derivative using
/// leave-one-out and leave-two-out products, so no coefficient cancellation
/// enters near the roots.
fn family_denominator_eval(
    fam: &Family,
    bath: &BathConfig,
    mass: f64,
    s: Complex64,
) -> (Complex64, Complex64) {
    let m = fam.omega2.len();
    let a: Vec<Complex64> = fam.omega2.iter().map(|&w2| s * s + w2).collect();
    let mut prefix = vec![Complex64::new(1.0, 0.0); m + 1];
    for j in 0..m {
        prefix[j + 1] = prefix[j] * a[j];
    }
    let mut suffix = vec![Complex64::new(1.0, 0.0); m + 1];
    for j in (0..m).rev() {
        suffix[j] = suffix[j + 1] * a[j];
    }
    let full = prefix[m];
    let t = |j: usize| prefix[j] * suffix[j + 1];
    let c = 2.0 * bath.gamma * bath.cutoff / mass;

    let mut sum_wt = Complex64::new(0.0, 0.0);
    let mut sum_t = Complex64::new(0.0, 0.0);
    for j in 0..m {
        sum_wt += fam.weights[j] * fam.weights[j] * t(j);
        sum_t += t(j);
    }
    let f = (s + bath.cutoff) * full + c * s * sum_wt;

    // f' = full + (s+Gamma) 2s sum_j T_j + c sum_wt + c s sum_j w_j^2 T_j'
    // with T_j' = 2s sum_{k != j} prod_{i not in {j,k}} a_i.
    let mut sum_wtp = Complex64::new(0.0, 0.0);
    for j in 0..m {
        if m == 1 {
            break;
        }
        // Prefix/suffix pass over the factor list with j removed.
        let mut suf = vec![Complex64::new(1.0, 0.0); m - 1];
        let mut acc = Complex64::new(1.0, 0.0);
        let mut idx = m - 1;
        for k in (0..m).rev() {
            if k == j {
                continue;
            }
            idx -= 1;
            suf[idx] = acc;
            acc *= a[k];
        }
        let mut tjp = Complex64::new(0.0, 0.0);
        let mut pre = Complex64::new(1.0, 0.0);
        let mut pos = 0;
        for k in 0..m {
            if k == j {
                continue;
            }
            tjp += pre * suf[pos];
            pre *= a[k];
            pos += 1;
        }
        sum_wtp += fam.weights[j] * fam.weights[j] * 2.0 * s * tjp;
    }
    let df = full + (s + bath.cutoff) * 2.0 * s * sum_t + c * sum_wt + c * s * sum_wtp;
    (f, df)
}

// ---------------------------------------------------------------------------
// Pole utilities.

fn pole_scale(poles: &[Complex64]) -> f64 {
    poles.iter().map(|p| p.norm()).fold(0.0f64, f64::max).max(1e-300)
}

fn validate_stability(poles: &[Complex64], policy: &NumericPolicy) -> Result<()> {
    for &p in poles {
        if !(p.re < -policy.pole_stability_margin) || !p.re.is_finite() || !p.im.is_finite() {
            return Err(Error::UnstablePole {
                pole: format!("{p}"),
                margin: policy.pole_stability_margin,
            });
        }
    }
    Ok(())
}

fn validate_simplicity(poles: &[Complex64], policy: &NumericPolicy) -> Result<()> {
    let scale = pole_scale(poles);
    for i in 0..poles.len() {
        for j in 0..i {
            let d = (poles[i] - poles[j]).norm();
            if d < policy.pole_degeneracy_rel * scale {
                return Err(Error::DegeneratePoles {
                    a: format!("{}", poles[i]),
                    b: format!("{}", poles[j]),
                    dist: d,
                });
            }
        }
    }
    Ok(())
}

/// Pair conjugate poles and snap them to exact conjugates (and real poles to
/// the real axis) so downstream conjugate-pair sums are real by construction.
fn conjugate_closure(poles: &mut [Complex64], policy: &NumericPolicy) -> Result<Vec<usize>> {
    let scale = pole_scale(poles);
    let tol = policy.pole_degeneracy_rel * scale;
    let n = poles.len();
    let mut partner = vec![usize::MAX; n];
    for i in 0..n {
        if partner[i] != usize::MAX {
            continue;
        }
        if poles[i].im.abs() <= tol {
            poles[i].im = 0.0;
            partner[i] = i;
            continue;
        }
        let target = poles[i].conj();
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if j != i && partner[j] == usize::MAX {
                let d = (poles[j] - target).norm();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
        }
        if best == usize::MAX || best_d > tol {
            return Err(Error::PolynomialConstruction(format!(
                "pole {} has no conjugate partner (nearest mismatch {best_d:.3e})",
                poles[i]
            )));
        }
        let sym = 0.5 * (poles[i] + poles[best].conj());
        poles[i] = sym;
        poles[best] = sym.conj();
        partner[i] = best;
        partner[best] = i;
    }
    Ok(partner)
}

/// Roots of an expanded real-coefficient denominator polynomial, with the
/// stability and simplicity checks the response theory requires.
pub fn poles(denominator: &Poly, policy: &NumericPolicy) -> Result<Vec<Complex64>> {
    let raw = poly::roots(denominator, policy)?;
    let coeffs = denominator.c.clone();
    let dcoeffs: Vec<f64> = coeffs.iter().enumerate().skip(1).map(|(k, c)| k as f64 * c).collect();
    let f_df = move |z: Complex64| {
        let horner = |cs: &[f64]| {
            let mut acc = Complex64::new(0.0, 0.0);
            for &c in cs.iter().rev() {
                acc = acc * z + c;
            }
            acc
        };
        (horner(&coeffs), horner(&dcoeffs))
    };
    let mut refined = poly::aberth_refine(&raw, f_df, 100)?;
    validate_stability(&refined, policy)?;
    validate_simplicity(&refined, policy)?;
    conjugate_closure(&mut refined, policy)?;
    Ok(refined)
}

// ---------------------------------------------------------------------------
// Residues from null vectors.

struct PoleData {
    lambda: Complex64,
    x: DVector<Complex64>,
    norm: Complex64,
    family: Parity,
}

/// Closed-form family pole data: x_j = w_j/(L^2+Omega_j^2) on family modes,
/// n = 2L sum x^2 + 2 w'(L) (x.w)^2 with w'(L) = gamma Gamma^2/((Gamma+L)^2 M).
fn family_pole_data(
    fam: &Family,
    bath: &BathConfig,
    mass: f64,
    l_total: usize,
    lambda: Complex64,
    parity: Parity,
) -> PoleData {
    let mut x = DVector::zeros(l_total);
    let mut xw = Complex64::new(0.0, 0.0);
    let mut xx = Complex64::new(0.0, 0.0);
    for (pos, &mode) in fam.indices.iter().enumerate() {
        let xi = fam.weights[pos] / (lambda * lambda + fam.omega2[pos]);
        x[mode] = xi;
        xw += xi * fam.weights[pos];
        xx += xi * xi;
    }
    let norm = 2.0 * lambda * xx + 2.0 * bath_weight_deriv(lambda, bath, mass) * xw * xw;
    PoleData { lambda, x, norm, family: parity }
}

fn assemble(basis: &ModeBasis, data: Vec<PoleData>, policy: &NumericPolicy) -> Result<ResponseSet> {
    let l = basis.frequencies.len();
    let n_p = data.len();
    let u: DVector<Complex64> =
        DVector::from_iterator(l, (0..l).map(|j| Complex64::new(basis.end_a(j), 0.0)));
    let v: DVector<Complex64> =
        DVector::from_iterator(l, (0..l).map(|j| Complex64::new(basis.end_b(j), 0.0)));

    let mut poles = Vec::with_capacity(n_p);
    let mut families = Vec::with_capacity(n_p);
    let mut f_a = DMatrix::zeros(l, n_p);
    let mut f_b = DMatrix::zeros(l, n_p);
    let mut vectors = Vec::with_capacity(n_p);
    let mut norms = Vec::with_capacity(n_p);

    for (k, pd) in data.iter().enumerate() {
        if pd.norm.norm() < 1e-300 {
            return Err(Error::ResidueReconstruction {
                err: pd.norm.norm(),
                at: format!("vanishing normalization at pole {}", pd.lambda),
            });
        }
        let cu: Complex64 = pd.x.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        let cv: Complex64 = pd.x.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        for j in 0..l {
            f_a[(j, k)] = pd.x[j] * cu / pd.norm;
            f_b[(j, k)] = pd.x[j] * cv / pd.norm;
        }
        poles.push(pd.lambda);
        families.push(pd.family);
    }
    for pd in data {
        vectors.push(pd.x);
        norms.push(pd.norm);
    }

    // Degeneracy matters only within one family: those poles share a
    // denominator, so their collision blows up residues. Poles of different
    // parity blocks live in different rational functions and may approach
    // each other freely (both families relax near -Gamma at weak damping).
    for parity in [Parity::Even, Parity::Odd, Parity::None] {
        let group: Vec<Complex64> = poles
            .iter()
            .zip(families.iter())
            .filter(|(_, f)| **f == parity)
            .map(|(p, _)| *p)
            .collect();
        validate_simplicity(&group, policy)?;
    }
    let mut snapped = poles.clone();
    let conj_partner = conjugate_closure(&mut snapped, policy)?;
    // Snap residue data of conjugate partners to exact conjugates; residues
    // at real poles of a real rational function are real (any null-vector
    // phase drops out of x x^T / n), so their imaginary dust is cleared.
    for i in 0..n_p {
        let j = conj_partner[i];
        poles[i] = snapped[i];
        if j > i {
            let conj_x = vectors[i].map(|z| z.conj());
            vectors[j] = conj_x;
            norms[j] = norms[i].conj();
            for r in 0..l {
                f_a[(r, j)] = f_a[(r, i)].conj();
                f_b[(r, j)] = f_b[(r, i)].conj();
            }
        } else if j == i {
            for r in 0..l {
                f_a[(r, i)].im = 0.0;
                f_b[(r, i)].im = 0.0;
            }
        }
    }

    Ok(ResponseSet {
        poles,
        conj_partner,
        pole_family: families,
        f_a,
        f_b,
        mode_vectors: vectors,
        norms,
    })
}

/// Response fragment of one parity family of a mirror-symmetric chain.
pub fn symmetric_response_coefficients(
    basis: &ModeBasis,
    bath: &BathConfig,
    parity: Parity,
    mass: f64,
    policy: &NumericPolicy,
) -> Result<ResponseSet> {
    let data = family_pole_set(basis, bath, parity, mass, policy)?;
    let set = assemble(basis, data, policy)?;
    validate_response(basis, bath, mass, &set, policy)?;
    Ok(set)
}

fn family_pole_set(
    basis: &ModeBasis,
    bath: &BathConfig,
    parity: Parity,
    mass: f64,
    policy: &NumericPolicy,
) -> Result<Vec<PoleData>> {
    let expanded = interaction_matrix_denominator(basis, bath, parity, mass)?;
    let fam = family_of(basis, parity);
    let starts = poly::roots(&expanded, policy)?;
    let f_df = |z: Complex64| family_denominator_eval(&fam, bath, mass, z);
    let mut refined = poly::aberth_refine(&starts, f_df, 200)?;
    if refined.len() != 2 * fam.indices.len() + 1 {
        return Err(Error::PolynomialConstruction(format!(
            "{parity:?} family of size {} produced {} poles, expected {}",
            fam.indices.len(),
            refined.len(),
            2 * fam.indices.len() + 1
        )));
    }
    validate_stability(&refined, policy)?;
    validate_simplicity(&refined, policy)?;
    conjugate_closure(&mut refined, policy)?;
    let l = basis.frequencies.len();
    Ok(refined
        .into_iter()
        .map(|lambda| family_pole_data(&fam, bath, mass, l, lambda, parity))
        .collect())
}

// ---------------------------------------------------------------------------
// General path.

struct GeneralProblem<'a> {
    basis: &'a ModeBasis,
    bath: &'a BathConfig,
    mass: f64,
    u: DVector<f64>,
    v: DVector<f64>,
}

impl<'a> GeneralProblem<'a> {
    fn new(basis: &'a ModeBasis, bath: &'a BathConfig, mass: f64) -> Self {
        let l = basis.frequencies.len();
        let u = DVector::from_iterator(l, (0..l).map(|j| basis.end_a(j)));
        let v = DVector::from_iterator(l, (0..l).map(|j| basis.end_b(j)));
        GeneralProblem { basis, bath, mass, u, v }
    }

    fn matrix(&self, s: Complex64) -> DMatrix<Complex64> {
        let l = self.u.len();
        let w = bath_weight(s, self.bath, self.mass);
        let mut b = DMatrix::zeros(l, l);
        for i in 0..l {
            for j in 0..l {
                b[(i, j)] = w * (self.u[i] * self.u[j] + self.v[i] * self.v[j]);
            }
            let om = self.basis.frequencies[i];
            b[(i, i)] += s * s + om * om;
        }
        b
    }

    fn matrix_deriv(&self, s: Complex64) -> DMatrix<Complex64> {
        let l = self.u.len();
        let wd = bath_weight_deriv(s, self.bath, self.mass);
        let mut b = DMatrix::zeros(l, l);
        for i in 0..l {
            for j in 0..l {
                b[(i, j)] = wd * (self.u[i] * self.u[j] + self.v[i] * self.v[j]);
            }
            b[(i, i)] += 2.0 * s;
        }
        b
    }

    /// Q(s)/divisor^{l+2} and its derivative, Q = (Gamma+s)^2 det B(s). The
    /// per-factor divisor keeps magnitudes bounded at any chain length and
    /// cancels in Newton steps. Derivative via the logarithmic identity
    /// Q'/Q = 2/(Gamma+s) + tr(B^{-1} B').
    fn q_eval_scaled(&self, s: Complex64, per_factor: f64) -> (Complex64, Complex64) {
        let b = self.matrix(s);
        let lu = ComplexLu::factor(b.clone());
        let det = lu.det_scaled(per_factor);
        let g = self.bath.cutoff + s;
        let f = det * g * g / (per_factor * per_factor);
        let bp = self.matrix_deriv(s);
        let mut trace = Complex64::new(0.0, 0.0);
        for j in 0..b.nrows() {
            let col = bp.column(j).into_owned();
            let solved = lu.solve(&col);
            trace += solved[j];
        }
        let logder = 2.0 / g + trace;
        (f, f * logder)
    }

    /// Null vector of B(L) by inverse iteration off the LU factorization.
    fn null_vector(&self, lambda: Complex64) -> Result<DVector<Complex64>> {
        let b = self.matrix(lambda);
        let lu = ComplexLu::factor(b.clone());
        let l = b.nrows();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x9d2c_5681);
        let mut x = DVector::from_iterator(
            l,
            (0..l).map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)),
        );
        let scale = self.basis.frequencies.iter().map(|w| w * w).fold(1.0f64, f64::max)
            + lambda.norm_sqr();
        let mut residual = f64::INFINITY;
        for _ in 0..4 {
            let y = lu.solve(&x);
            let norm = y.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                break;
            }
            x = y / Complex64::new(norm, 0.0);
            let bx = &b * &x;
            residual = bx.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if residual < 1e-12 * scale {
                break;
            }
        }
        if residual > 1e-7 * scale {
            return Err(Error::ResidueReconstruction {
                err: residual,
                at: format!("null vector at pole {lambda}"),
            });
        }
        Ok(x)
    }

    /// First-order pole guesses: two relaxation poles near -Gamma and a
    /// conjugate pair near +-i Omega_j shifted left by the weak-damping rate.
    /// Refinement starts when the interpolated companion matrix fails.
    fn physical_starts(&self) -> Vec<Complex64> {
        let l = self.u.len();
        let gam = self.bath.cutoff;
        let mut out = Vec::with_capacity(2 * l + 2);
        out.push(Complex64::new(-gam * 0.97, 0.0));
        out.push(Complex64::new(-gam * 1.03, 0.0));
        for j in 0..l {
            let om = self.basis.frequencies[j];
            let weight = self.u[j] * self.u[j] + self.v[j] * self.v[j];
            let denom = Complex64::new(gam, om);
            let shift = self.bath.gamma * gam * weight / (2.0 * self.mass) / denom;
            let guess = Complex64::new(0.0, om) - shift;
            out.push(guess);
            out.push(guess.conj());
        }
        out
    }
}

/// Poles and residues for an arbitrary (not necessarily mirror-symmetric)
/// chain: refinement starts from an interpolated determinant polynomial
/// (falling back to perturbative guesses), simultaneous refinement against
/// LU-based determinant evaluations, residues from null vectors.
pub fn general_response_coefficients(
    basis: &ModeBasis,
    bath: &BathConfig,
    mass: f64,
    policy: &NumericPolicy,
) -> Result<ResponseSet> {
    let problem = GeneralProblem::new(basis, bath, mass);
    let l = basis.frequencies.len();
    let degree = 2 * l + 2;

    let omega_max = basis.frequencies.last().copied().unwrap_or(1.0);
    let radius = 1.3 * omega_max.max(bath.cutoff).max(1.0);
    let per_factor = radius * radius;
    let f_df = |z: Complex64| problem.q_eval_scaled(z, per_factor);

    let interp_starts = poly::interpolate_on_circle(
        |s| problem.q_eval_scaled(s, per_factor).0,
        degree,
        radius,
        4,
        1e-7,
    )
    .and_then(|q| poly::roots(&q, policy));

    let refined = match interp_starts {
        Ok(starts) if starts.len() == degree => poly::aberth_refine(&starts, &f_df, 200),
        _ => Err(Error::PolynomialConstruction("interpolation starts unusable".into())),
    };
    let mut refined = match refined {
        Ok(r) => r,
        // Companion starts failed; retry from the perturbative guesses.
        Err(_) => poly::aberth_refine(&problem.physical_starts(), &f_df, 400)?,
    };

    if refined.len() != degree {
        return Err(Error::PolynomialConstruction(format!(
            "expected {degree} poles, found {}",
            refined.len()
        )));
    }
    validate_stability(&refined, policy)?;
    validate_simplicity(&refined, policy)?;
    conjugate_closure(&mut refined, policy)?;

    let mut data = Vec::with_capacity(refined.len());
    for lambda in refined {
        let x = problem.null_vector(lambda)?;
        let bp = problem.matrix_deriv(lambda);
        let bx = &bp * &x;
        let norm: Complex64 = x.iter().zip(bx.iter()).map(|(a, b)| a * b).sum();
        data.push(PoleData { lambda, x, norm, family: Parity::None });
    }
    let set = assemble(basis, data, policy)?;
    validate_response(basis, bath, mass, &set, policy)?;
    Ok(set)
}

/// Response of a chain, picking the parity-split path when the mode basis
/// carries a full parity classification.
pub fn response_for_chain(
    basis: &ModeBasis,
    bath: &BathConfig,
    mass: f64,
    policy: &NumericPolicy,
) -> Result<ResponseSet> {
    let fully_classified = basis.symmetric && basis.parity.iter().all(|p| *p != Parity::None);
    if fully_classified {
        let mut data = family_pole_set(basis, bath, Parity::Even, mass, policy)?;
        data.extend(family_pole_set(basis, bath, Parity::Odd, mass, policy)?);
        let set = assemble(basis, data, policy)?;
        validate_response(basis, bath, mass, &set, policy)?;
        Ok(set)
    } else {
        general_response_coefficients(basis, bath, mass, policy)
    }
}

// ---------------------------------------------------------------------------
// Validation.

/// Residue-expansion checks: short-time moments and rational reconstruction
/// at random right-half-plane points against direct linear solves. For
/// family fragments only the family's own modes are checked; the matrix is
/// parity-block-diagonal, so restricted rows of B^{-1} close on the family.
fn validate_response(
    basis: &ModeBasis,
    bath: &BathConfig,
    mass: f64,
    set: &ResponseSet,
    policy: &NumericPolicy,
) -> Result<()> {
    let n_p = set.n_poles();
    let active = set.active_modes();

    // Moment identities: sum_k res = 0 and sum_k L_k res = u_j (or v_j).
    let scale: f64 = set.f_a.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
    for &j in &active {
        let mut s0a = Complex64::new(0.0, 0.0);
        let mut s1a = Complex64::new(0.0, 0.0);
        let mut s0b = Complex64::new(0.0, 0.0);
        let mut s1b = Complex64::new(0.0, 0.0);
        for k in 0..n_p {
            s0a += set.f_a[(j, k)];
            s1a += set.poles[k] * set.f_a[(j, k)];
            s0b += set.f_b[(j, k)];
            s1b += set.poles[k] * set.f_b[(j, k)];
        }
        let tol = policy.reconstruction_rel * scale.max(1.0);
        if s0a.norm() > tol || s0b.norm() > tol {
            return Err(Error::ResidueReconstruction {
                err: s0a.norm().max(s0b.norm()),
                at: format!("zeroth residue moment of mode {j}"),
            });
        }
        let ea = (s1a - Complex64::new(basis.end_a(j), 0.0)).norm();
        let eb = (s1b - Complex64::new(basis.end_b(j), 0.0)).norm();
        if ea > tol || eb > tol {
            return Err(Error::ResidueReconstruction {
                err: ea.max(eb),
                at: format!("first residue moment of mode {j}"),
            });
        }
    }

    // Rational reconstruction at random right-half-plane points.
    let problem = GeneralProblem::new(basis, bath, mass);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x51ed_270b);
    let pscale = pole_scale(&set.poles);
    let uc: DVector<Complex64> = problem.u.map(|x| Complex64::new(x, 0.0));
    let vc: DVector<Complex64> = problem.v.map(|x| Complex64::new(x, 0.0));
    let l = basis.frequencies.len();
    let mut probe = DVector::from_element(l, Complex64::new(0.0, 0.0));
    for _ in 0..20 {
        let s = Complex64::new(
            pscale * (0.05 + rng.gen::<f64>()),
            pscale * 2.0 * (rng.gen::<f64>() - 0.5),
        );
        let lu = ComplexLu::factor(problem.matrix(s));
        for (side, rhs) in [(BathSide::A, &uc), (BathSide::B, &vc)] {
            let direct = lu.solve(rhs);
            let vscale =
                active.iter().map(|&j| direct[j].norm()).fold(0.0f64, f64::max).max(1e-300);
            let res = set.f_residues(side);
            for &j in &active {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..n_p {
                    acc += res[(j, k)] / (s - set.poles[k]);
                }
                let err = (acc - direct[j]).norm();
                // Entries far below the vector scale arise by cancellation
                // and are held to the vector-scale relative error instead.
                if err > policy.reconstruction_rel * direct[j].norm().max(0.01 * vscale) {
                    return Err(Error::ResidueReconstruction {
                        err,
                        at: format!("noise response of mode {j} at s = {s}"),
                    });
                }
            }
        }
        // Initial-condition residues: spot-check entries of B^{-1}.
        for &t in active.iter().take(3) {
            probe.fill(Complex64::new(0.0, 0.0));
            probe[t] = Complex64::new(1.0, 0.0);
            let direct = lu.solve(&probe);
            for &j in active.iter().take(3) {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..n_p {
                    acc += set.initial_residue_entry(k, j, t) / (s - set.poles[k]);
                }
                let err = (acc - direct[j]).norm();
                if err > policy.reconstruction_rel * direct[j].norm().max(1.0) {
                    return Err(Error::ResidueReconstruction {
                        err,
                        at: format!("initial response ({j},{t}) at s = {s}"),
                    });
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Complex LU with partial pivoting. nalgebra's LU works over complex fields,
// but a local version exposes the pivots, which the determinant evaluation
// needs for overflow-free per-factor scaling at large chain length.

struct ComplexLu {
    lu: DMatrix<Complex64>,
    piv: Vec<usize>,
    sign: f64,
}

impl ComplexLu {
    fn factor(mut a: DMatrix<Complex64>) -> ComplexLu {
        let n = a.nrows();
        let mut piv = Vec::with_capacity(n);
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut best = a[(k, k)].norm();
            for r in k + 1..n {
                let v = a[(r, k)].norm();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if p != k {
                a.swap_rows(p, k);
                sign = -sign;
            }
            piv.push(p);
            let pivot = a[(k, k)];
            if pivot.norm() == 0.0 {
                continue;
            }
            for r in k + 1..n {
                let m = a[(r, k)] / pivot;
                a[(r, k)] = m;
                for c in k + 1..n {
                    let s = a[(k, c)];
                    a[(r, c)] -= m * s;
                }
            }
        }
        ComplexLu { lu: a, piv, sign }
    }

    /// det(A) / divisor^n, computed factor by factor to avoid overflow.
    fn det_scaled(&self, divisor: f64) -> Complex64 {
        let n = self.lu.nrows();
        let mut det = Complex64::new(self.sign, 0.0);
        for k in 0..n {
            det *= self.lu[(k, k)] / divisor;
        }
        det
    }

    fn solve(&self, b: &DVector<Complex64>) -> DVector<Complex64> {
        let n = self.lu.nrows();
        let mut x = b.clone();
        for k in 0..n {
            x.swap_rows(k, self.piv[k]);
        }
        for k in 0..n {
            for r in 0..k {
                let m = self.lu[(k, r)] * x[r];
                x[k] -= m;
            }
        }
        for k in (0..n).rev() {
            for r in k + 1..n {
                let m = self.lu[(k, r)] * x[r];
                x[k] -= m;
            }
            x[k] /= self.lu[(k, k)];
        }
        x
    }
}
