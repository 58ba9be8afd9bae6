//! Real-coefficient polynomials in the monomial basis, companion-matrix root
//! finding with variable rescaling and Newton polish, and interpolation from
//! samples on a complex circle (used to reconstruct determinant and cofactor
//! polynomials without symbolic expansion).

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::Error;
use crate::policy::NumericPolicy;
use crate::Result;

/// Dense polynomial, coefficients ascending: c[0] + c[1] s + c[2] s^2 + ...
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    pub c: Vec<f64>,
}

impl Poly {
    pub fn new(mut c: Vec<f64>) -> Self {
        while c.len() > 1 && *c.last().unwrap() == 0.0 {
            c.pop();
        }
        if c.is_empty() {
            c.push(0.0);
        }
        Poly { c }
    }

    pub fn zero() -> Self {
        Poly { c: vec![0.0] }
    }

    pub fn one() -> Self {
        Poly { c: vec![1.0] }
    }

    pub fn degree(&self) -> usize {
        self.c.len() - 1
    }

    pub fn leading(&self) -> f64 {
        *self.c.last().unwrap()
    }

    pub fn eval(&self, s: Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for &ck in self.c.iter().rev() {
            acc = acc * s + ck;
        }
        acc
    }

    pub fn eval_real(&self, s: f64) -> f64 {
        let mut acc = 0.0;
        for &ck in self.c.iter().rev() {
            acc = acc * s + ck;
        }
        acc
    }

    pub fn derivative(&self) -> Poly {
        if self.c.len() <= 1 {
            return Poly::zero();
        }
        Poly::new(self.c.iter().enumerate().skip(1).map(|(k, ck)| k as f64 * ck).collect())
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = vec![0.0; self.c.len() + other.c.len() - 1];
        for (i, a) in self.c.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            for (j, b) in other.c.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly::new(out)
    }

    pub fn add_scaled(&self, other: &Poly, w: f64) -> Poly {
        let mut out = vec![0.0; self.c.len().max(other.c.len())];
        for (i, a) in self.c.iter().enumerate() {
            out[i] += a;
        }
        for (i, b) in other.c.iter().enumerate() {
            out[i] += w * b;
        }
        Poly::new(out)
    }

    pub fn scale(&self, w: f64) -> Poly {
        Poly::new(self.c.iter().map(|ck| w * ck).collect())
    }

    /// (s^2 + a) * self
    pub fn mul_s2_plus(&self, a: f64) -> Poly {
        let mut out = vec![0.0; self.c.len() + 2];
        for (i, ck) in self.c.iter().enumerate() {
            out[i] += a * ck;
            out[i + 2] += ck;
        }
        Poly::new(out)
    }

    /// (s + a) * self
    pub fn mul_s_plus(&self, a: f64) -> Poly {
        let mut out = vec![0.0; self.c.len() + 1];
        for (i, ck) in self.c.iter().enumerate() {
            out[i] += a * ck;
            out[i + 1] += ck;
        }
        Poly::new(out)
    }

    /// Exact division by (s^2 + a); remainder must vanish to the given
    /// tolerance relative to the largest coefficient.
    pub fn div_s2_plus(&self, a: f64, tol: f64) -> Result<Poly> {
        if self.c.len() < 3 {
            return Err(Error::PolynomialConstruction(
                "division by quadratic of a lower-degree polynomial".into(),
            ));
        }
        let n = self.c.len();
        let mut q = vec![0.0; n - 2];
        let mut r = self.c.clone();
        for k in (0..n - 2).rev() {
            let coef = r[k + 2];
            q[k] = coef;
            r[k + 2] = 0.0;
            r[k] -= a * coef;
        }
        let scale = self.c.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
        if r[0].abs() > tol * scale || r[1].abs() > tol * scale {
            return Err(Error::PolynomialConstruction(format!(
                "inexact division by s^2 + {a}: remainder ({:.3e}, {:.3e})",
                r[0], r[1]
            )));
        }
        Ok(Poly::new(q))
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.c.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// prod_k (s^2 + values[k])
pub fn product_s2_plus(values: &[f64]) -> Poly {
    let mut p = Poly::one();
    for &v in values {
        p = p.mul_s2_plus(v);
    }
    p
}

/// All complex roots of a real polynomial. The variable is rescaled by a
/// Fujiwara-style bound so companion eigenvalues stay O(1), the coefficients
/// are normalized to max|c| = 1, and each eigenvalue gets Newton polish steps
/// in the scaled variable.
pub fn roots(p: &Poly, _policy: &NumericPolicy) -> Result<Vec<Complex64>> {
    let mut c = p.c.clone();
    // Trim exact zeros only. Coefficients of the response determinants span
    // many orders of magnitude, so a relative-to-max threshold would eat
    // genuine leading terms; the Fujiwara rescale below absorbs any dynamic
    // range a nonzero leading coefficient produces.
    if p.max_abs_coeff() == 0.0 {
        return Err(Error::PolynomialConstruction("zero polynomial has no roots".into()));
    }
    while c.len() > 1 && *c.last().unwrap() == 0.0 {
        c.pop();
    }
    let n = c.len() - 1;
    if n == 0 {
        return Ok(Vec::new());
    }

    let an = c[n];
    let rho = (0..n)
        .map(|k| (c[k] / an).abs().powf(1.0 / (n - k) as f64))
        .fold(0.0f64, f64::max)
        .max(1e-12);

    // Monic in z = s / rho.
    let mut b = vec![0.0; n + 1];
    for (k, ck) in c.iter().enumerate() {
        b[k] = ck / an * rho.powi(k as i32 - n as i32);
    }

    let mut comp = DMatrix::zeros(n, n);
    for k in 0..n {
        comp[(0, k)] = -b[n - 1 - k];
    }
    for k in 1..n {
        comp[(k, k - 1)] = 1.0;
    }
    balance(&mut comp);
    let eig = comp.complex_eigenvalues();

    let bp: Vec<f64> = (1..=n).map(|k| k as f64 * b[k]).collect();
    let horner = |z: Complex64, coef: &[f64]| {
        let mut acc = Complex64::new(0.0, 0.0);
        for &ck in coef.iter().rev() {
            acc = acc * z + ck;
        }
        acc
    };

    let mut out = Vec::with_capacity(n);
    for z0 in eig.iter() {
        let mut z = *z0;
        for _ in 0..3 {
            let f = horner(z, &b);
            let df = horner(z, &bp);
            if df.norm() < 1e-300 {
                break;
            }
            let step = f / df;
            z -= step;
            if step.norm() < 1e-16 * z.norm().max(1.0) {
                break;
            }
        }
        out.push(z * rho);
    }
    Ok(out)
}

/// Parlett–Reinsch balancing: diagonal similarity scaling that equalizes row
/// and column norms. Companion matrices are badly unbalanced and the QR
/// eigensolver here does not balance internally, costing several digits at
/// high degree without this step.
fn balance(a: &mut DMatrix<f64>) {
    const RADIX: f64 = 2.0;
    let n = a.nrows();
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut c: f64 = (0..n).filter(|&j| j != i).map(|j| a[(j, i)].abs()).sum();
            let r: f64 = (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum();
            if c == 0.0 || r == 0.0 || !c.is_finite() || !r.is_finite() {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / RADIX;
            while c < g {
                f *= RADIX;
                c *= RADIX * RADIX;
            }
            g = r * RADIX;
            while c > g {
                f /= RADIX;
                c /= RADIX * RADIX;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                let inv = 1.0 / f;
                for j in 0..n {
                    a[(i, j)] *= inv;
                }
                for j in 0..n {
                    a[(j, i)] *= f;
                }
            }
        }
    }
}

/// One Newton step against an externally supplied exact evaluation of the
/// function and its derivative; used to polish companion-matrix roots with
/// product-form evaluations that avoid coefficient cancellation.
pub fn newton_polish<F>(mut z: Complex64, steps: usize, f_df: F) -> Complex64
where
    F: Fn(Complex64) -> (Complex64, Complex64),
{
    for _ in 0..steps {
        let (f, df) = f_df(z);
        if df.norm() < 1e-300 {
            break;
        }
        let step = f / df;
        z -= step;
        if step.norm() < 1e-16 * z.norm().max(1.0) {
            break;
        }
    }
    z
}

/// Aberth–Ehrlich simultaneous refinement of all n simple roots from the
/// given starts. The correction N_i/(1 - N_i Σ_{j≠i} (z_i - z_j)^{-1}) repels
/// approximations from each other, so distinct starts converge to distinct
/// roots instead of piling onto one basin the way independent Newton does.
/// `f_df` must evaluate the function and derivative stably (product form).
pub fn aberth_refine<F>(starts: &[Complex64], f_df: F, max_iter: usize) -> Result<Vec<Complex64>>
where
    F: Fn(Complex64) -> (Complex64, Complex64),
{
    let n = starts.len();
    let mut z: Vec<Complex64> = starts.to_vec();
    // Break exact coincidences in the starts; Aberth needs distinct points.
    for i in 0..n {
        for j in 0..i {
            if (z[i] - z[j]).norm() < 1e-14 * (z[i].norm() + 1.0) {
                let bump = z[i].norm() + 1.0;
                z[i] += Complex64::new(1e-9 * bump, 1.3e-9 * bump);
            }
        }
    }
    for _ in 0..max_iter {
        let mut max_step = 0.0f64;
        for i in 0..n {
            let (f, df) = f_df(z[i]);
            if f.norm() == 0.0 {
                continue;
            }
            let newton = if df.norm() > 1e-300 { f / df } else { Complex64::new(1e-12, 0.0) };
            let mut repel = Complex64::new(0.0, 0.0);
            for j in 0..n {
                if j != i {
                    let d = z[i] - z[j];
                    if d.norm() > 1e-300 {
                        repel += 1.0 / d;
                    }
                }
            }
            let denom = 1.0 - newton * repel;
            let step = if denom.norm() > 1e-12 { newton / denom } else { newton };
            z[i] -= step;
            max_step = max_step.max(step.norm() / (1.0 + z[i].norm()));
        }
        if max_step < 1e-15 {
            return Ok(z);
        }
    }
    // One last convergence check: accept if every residual Newton step is
    // tiny even though the sweep above never went fully quiescent.
    let worst = z
        .iter()
        .map(|&zi| {
            let (f, df) = f_df(zi);
            if df.norm() > 1e-300 {
                (f / df).norm() / (1.0 + zi.norm())
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0f64, f64::max);
    if worst < 1e-12 {
        Ok(z)
    } else {
        Err(Error::PolynomialConstruction(format!(
            "simultaneous root refinement stalled: residual step {worst:.3e}"
        )))
    }
}

/// Recover real polynomial coefficients of degree <= deg from evaluations of
/// an analytic function on the circle |s| = radius. Sampling at roots of
/// unity makes the interpolation an inverse DFT; `guard` extra angles verify
/// that the assumed degree actually bounds the function (relative error of
/// the reconstruction at the guard points must stay below `tol`).
pub fn interpolate_on_circle<F>(
    eval: F,
    deg: usize,
    radius: f64,
    guard: usize,
    tol: f64,
) -> Result<Poly>
where
    F: Fn(Complex64) -> Complex64,
{
    let n = deg + 1;
    let tau = std::f64::consts::TAU;
    let samples: Vec<Complex64> = (0..n)
        .map(|j| {
            let s = Complex64::from_polar(radius, tau * j as f64 / n as f64);
            eval(s)
        })
        .collect();
    let vmax = samples.iter().fold(0.0f64, |m, v| m.max(v.norm())).max(1e-300);

    let mut coeffs = Vec::with_capacity(n);
    let mut imag_max: f64 = 0.0;
    for k in 0..n {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, v) in samples.iter().enumerate() {
            let phase = Complex64::from_polar(1.0, -tau * (j * k % n) as f64 / n as f64);
            acc += v * phase;
        }
        acc /= n as f64 * radius.powi(k as i32);
        imag_max = imag_max.max(acc.im.abs() * radius.powi(k as i32));
        coeffs.push(acc.re);
    }
    if imag_max > 1e-6 * vmax {
        return Err(Error::PolynomialConstruction(format!(
            "circle interpolation produced complex coefficients (imag {imag_max:.3e} vs scale {vmax:.3e})"
        )));
    }
    let p = Poly::new(coeffs);

    for g in 0..guard {
        // Off-lattice angles so guard points never coincide with samples.
        let s = Complex64::from_polar(radius, tau * (g as f64 + 0.37) / (n as f64 * 1.618));
        let direct = eval(s);
        let interp = p.eval(s);
        let err = (direct - interp).norm();
        if err > tol * vmax.max(direct.norm()) {
            return Err(Error::PolynomialConstruction(format!(
                "degree {deg} does not reproduce guard sample: error {err:.3e} vs scale {vmax:.3e}"
            )));
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cubic_roots_match_reference() {
        // s^3 + 10s^2 + 21s + 10 = (s + 2)(s^2 + 8s + 5).
        let p = Poly::new(vec![10.0, 21.0, 10.0, 1.0]);
        let policy = NumericPolicy::default();
        let mut rs = roots(&p, &policy).unwrap();
        rs.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap());
        let expect = [-4.0 - 11.0f64.sqrt(), -2.0, -4.0 + 11.0f64.sqrt()];
        for (r, e) in rs.iter().zip(expect) {
            assert!(r.im.abs() < 1e-12);
            assert!((r.re - e).abs() < 1e-10, "root {r} vs {e}");
            assert!(p.eval(*r).norm() < 1e-9, "|p(root)| = {:.3e}", p.eval(*r).norm());
        }
    }

    #[test]
    fn factored_polynomial_roots_recovered() {
        // (s^2+1)(s^2+4)(s+3)
        let p = product_s2_plus(&[1.0, 4.0]).mul_s_plus(3.0);
        let policy = NumericPolicy::default();
        let rs = roots(&p, &policy).unwrap();
        assert_eq!(rs.len(), 5);
        for target in [
            Complex64::new(0.0, 1.0),
            Complex64::new(0.0, -1.0),
            Complex64::new(0.0, 2.0),
            Complex64::new(0.0, -2.0),
            Complex64::new(-3.0, 0.0),
        ] {
            let best = rs.iter().map(|r| (r - target).norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-10, "missing root near {target}");
        }
    }

    #[test]
    fn large_factored_product_stays_accurate() {
        // Coefficients of this degree-61 polynomial span ~30 orders of
        // magnitude, which limits what any solver can recover from the
        // expanded form alone (roots come back with ~1e-2 errors). Polishing
        // against the factored evaluation restores full precision; this
        // mirrors how response poles are computed.
        let omegas: Vec<f64> = (1..=30).map(|k| 1.0 + 0.13 * k as f64).collect();
        let om2: Vec<f64> = omegas.iter().map(|w| w * w).collect();
        let p = product_s2_plus(&om2).mul_s_plus(10.0);
        let policy = NumericPolicy::default();
        let raw = roots(&p, &policy).unwrap();
        assert_eq!(raw.len(), 61);
        let f_df = |z: Complex64| {
            let mut f = z + 10.0;
            let mut df = Complex64::new(1.0, 0.0);
            for w2 in &om2 {
                let g = z * z + w2;
                df = df * g + f * 2.0 * z;
                f *= g;
            }
            (f, df)
        };
        let polished = aberth_refine(&raw, f_df, 100).unwrap();
        for w in &omegas {
            let target = Complex64::new(0.0, *w);
            let best =
                polished.iter().map(|r| (r - target).norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-12 * w, "root near i{w} off by {best:.3e}");
        }
        let target = Complex64::new(-10.0, 0.0);
        let best = polished.iter().map(|r| (r - target).norm()).fold(f64::INFINITY, f64::min);
        assert!(best < 1e-11, "real root off by {best:.3e}");
    }

    #[test]
    fn exact_quadratic_division() {
        let p = product_s2_plus(&[2.0, 5.0, 7.0]);
        let q = p.div_s2_plus(5.0, 1e-12).unwrap();
        let expect = product_s2_plus(&[2.0, 7.0]);
        for (a, b) in q.c.iter().zip(expect.c.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        assert!(p.div_s2_plus(4.9, 1e-12).is_err());
    }

    #[test]
    fn circle_interpolation_roundtrip() {
        let p = Poly::new(vec![2.0, -3.0, 0.5, 0.0, 1.25, 7.0]);
        let q = interpolate_on_circle(|s| p.eval(s), 5, 3.0, 3, 1e-10).unwrap();
        assert_eq!(q.degree(), 5);
        for (a, b) in q.c.iter().zip(p.c.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-10, max_relative = 1e-10);
        }
        // Underestimating the degree must trip the guard check.
        assert!(interpolate_on_circle(|s| p.eval(s), 4, 3.0, 3, 1e-8).is_err());
    }
}
