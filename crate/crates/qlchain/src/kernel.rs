//! Bath noise spectrum and the stationary pole-pair frequency integrals.
//!
//! The symmetrized noise spectrum of an Ohmic bath with a Lorentz–Drude
//! cutoff is
//!
//!   S(w) = (gamma/pi) * Gamma^2/(Gamma^2 + w^2) * w*coth(w/(2T)),
//!
//! in units hbar = k_B = 1. Every stationary second moment reduces to sums of
//!
//!   I(a, b) = ∫_0^∞ S(w) (a*b + w^2) / ((a^2 + w^2)(b^2 + w^2)) dw
//!
//! over response poles a, b with negative real part. The integrand decays as
//! w^{-3}; the range [W, ∞) is folded through u = 1/w onto a finite segment
//! instead of being truncated, so no tail bound is needed.

use num_complex::Complex64;

use crate::error::Error;
use crate::policy::NumericPolicy;
use crate::quad;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    /// Full Bose factor w*coth(w/2T).
    Quantum,
    /// High-temperature replacement w*coth(w/2T) -> 2T.
    Classical,
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseKernel {
    pub gamma: f64,
    pub cutoff: f64,
    pub temperature: f64,
    pub kind: KernelKind,
}

impl NoiseKernel {
    pub fn quantum(gamma: f64, cutoff: f64, temperature: f64) -> NoiseKernel {
        NoiseKernel { gamma, cutoff, temperature, kind: KernelKind::Quantum }
    }

    pub fn classical(gamma: f64, cutoff: f64, temperature: f64) -> NoiseKernel {
        NoiseKernel { gamma, cutoff, temperature, kind: KernelKind::Classical }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidArgument {
                arg: "gamma",
                reason: format!("damping must be finite and positive, got {}", self.gamma),
            });
        }
        if !(self.cutoff > 0.0) || !self.cutoff.is_finite() {
            return Err(Error::InvalidArgument {
                arg: "cutoff",
                reason: format!("cutoff must be finite and positive, got {}", self.cutoff),
            });
        }
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument {
                arg: "temperature",
                reason: format!("temperature must be finite and >= 0, got {}", self.temperature),
            });
        }
        Ok(())
    }

    /// Symmetrized spectrum S(w); even in w, nonnegative.
    pub fn spectrum(&self, w: f64) -> f64 {
        let g2 = self.cutoff * self.cutoff;
        let lorentz = g2 / (g2 + w * w);
        self.gamma / std::f64::consts::PI * lorentz * self.thermal_factor(w)
    }

    /// w*coth(w/(2T)) with the right limits: 2T at w = 0, |w| at T = 0.
    pub fn thermal_factor(&self, w: f64) -> f64 {
        match self.kind {
            KernelKind::Classical => 2.0 * self.temperature,
            KernelKind::Quantum => omega_coth_half(w, self.temperature),
        }
    }
}

/// w * coth(w / (2T)), even in w, evaluated without cancellation or overflow.
pub fn omega_coth_half(w: f64, temperature: f64) -> f64 {
    let w = w.abs();
    if temperature == 0.0 {
        return w;
    }
    let x = w / (2.0 * temperature);
    if x < 1e-4 {
        // coth x = 1/x + x/3 - x^3/45 + ...
        2.0 * temperature + w * x / 3.0
    } else {
        // coth x = 1 + 2/(e^{2x} - 1); e^{2x} overflows to +inf harmlessly.
        w * (1.0 + 2.0 / ((2.0 * x).exp_m1()))
    }
}

/// coth x for x > 0.
pub fn coth(x: f64) -> f64 {
    assert!(x > 0.0);
    if x < 1e-4 {
        1.0 / x + x / 3.0
    } else {
        1.0 + 2.0 / ((2.0 * x).exp_m1())
    }
}

fn check_pole(name: &'static str, z: Complex64, policy: &NumericPolicy) -> Result<()> {
    if !(z.re < -policy.pole_stability_margin) {
        return Err(Error::UnstablePole { pole: format!("{name} = {z}"), margin: z.re });
    }
    Ok(())
}

/// Frequency breakpoints around the resonance structure of a pole set, on
/// [0, head_cutoff]. Shared by the stationary integrals and the oscillatory
/// panel builder.
pub fn resonance_breakpoints(poles: &[Complex64], kernel: &NoiseKernel, head_cutoff: f64) -> Vec<f64> {
    let mut pts = vec![0.0, head_cutoff];
    let mut push = |w: f64| {
        if w > 0.0 && w < head_cutoff {
            pts.push(w);
        }
    };
    for &p in poles {
        let peak = p.im.abs();
        let width = p.re.abs().max(1e-9 * peak.max(1.0));
        if peak > 0.0 {
            for f in [-6.0, -2.0, -0.5, 0.5, 2.0, 6.0] {
                push(peak + f * width);
            }
        }
        push(p.norm());
    }
    push(kernel.cutoff);
    push(kernel.cutoff * 5.0);
    if kernel.temperature > 0.0 {
        push(2.0 * kernel.temperature);
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-12 * head_cutoff);
    pts
}

pub fn head_cutoff(poles: &[Complex64], kernel: &NoiseKernel) -> f64 {
    let pole_scale = poles.iter().map(|p| p.norm()).fold(0.0f64, f64::max);
    50.0 * kernel.cutoff.max(pole_scale).max(kernel.temperature)
}

/// ∫_0^∞ S(w) (ab + w^2)/((a^2+w^2)(b^2+w^2)) dw for stable poles a, b.
///
/// Real when b = conj(a) or both are real; complex in general, and the
/// conjugate-closed sums taken by the correlation assembly are real.
pub fn omega_integral_pair(
    a: Complex64,
    b: Complex64,
    kernel: &NoiseKernel,
    policy: &NumericPolicy,
) -> Result<Complex64> {
    kernel.validate()?;
    check_pole("first pole", a, policy)?;
    check_pole("second pole", b, policy)?;

    let ab = a * b;
    let a2 = a * a;
    let b2 = b * b;

    let w_max = head_cutoff(&[a, b], kernel);
    let bps = resonance_breakpoints(&[a, b], kernel, w_max);

    let head = quad::integrate(
        |w| {
            let w2 = w * w;
            let num = ab + w2;
            let den = (a2 + w2) * (b2 + w2);
            kernel.spectrum(w) * num / den
        },
        &bps,
        policy.quad_rel,
        policy.quad_abs,
        policy.quad_max_evals,
        "stationary pair integral head",
    )?;

    // u = 1/w maps [W, ∞) onto (0, 1/W]. With the u^-2 Jacobian the
    // integrand becomes, for the quantum kernel,
    //   (gamma/pi) * Gamma^2 u/(Gamma^2 u^2 + 1) * coth(1/(2Tu))
    //              * (ab u^2 + 1)/((a^2 u^2 + 1)(b^2 u^2 + 1)),
    // vanishing linearly at u = 0, so the endpoint is regular and nothing is
    // truncated. GK nodes are strictly interior; u = 0 is never evaluated.
    let g2 = kernel.cutoff * kernel.cutoff;
    let tail = quad::integrate(
        |u| {
            let u2 = u * u;
            let lorentz = g2 / (g2 * u2 + 1.0);
            // u^2 * theta(1/u), theta(w) = w coth(w/2T) or 2T.
            let scaled_thermal = match kernel.kind {
                KernelKind::Classical => 2.0 * kernel.temperature * u2,
                KernelKind::Quantum => {
                    if kernel.temperature == 0.0 {
                        u
                    } else {
                        u * coth(1.0 / (2.0 * kernel.temperature * u))
                    }
                }
            };
            let num = ab * u2 + 1.0;
            let den = (a2 * u2 + 1.0) * (b2 * u2 + 1.0);
            kernel.gamma / std::f64::consts::PI * lorentz * scaled_thermal * num / den
        },
        &[0.0, 1.0 / w_max],
        policy.quad_rel,
        policy.quad_abs,
        policy.quad_max_evals,
        "stationary pair integral tail",
    )?;

    Ok(head.value + tail.value)
}

/// Real-valued wrapper for conjugate-symmetric pole pairs; errors if a
/// residual imaginary part survives.
pub fn omega_integral_pair_real(
    a: Complex64,
    b: Complex64,
    kernel: &NoiseKernel,
    policy: &NumericPolicy,
) -> Result<f64> {
    let v = omega_integral_pair(a, b, kernel, policy)?;
    let scale = v.norm().max(1.0);
    if v.im.abs() > policy.realness_rel * scale {
        return Err(Error::RealnessViolation {
            context: "stationary pair integral".into(),
            imag: v.im,
            scale,
        });
    }
    Ok(v.re)
}
