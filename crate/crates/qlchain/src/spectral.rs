//! Normal-mode decomposition of the chain coupling matrix, parity labels for
//! mirror-symmetric chains, and participation-number localization lengths.

use nalgebra::DMatrix;

use crate::error::Error;
use crate::model::{detect_symmetry, ChainSpec};
use crate::policy::NumericPolicy;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
    None,
}

/// Normal modes of the isolated chain. Columns of `g` are the mode vectors:
/// X_i = sum_j G_ij Y_j, and G^T C G = diag(Omega^2). Frequencies ascend.
#[derive(Debug, Clone)]
pub struct ModeBasis {
    pub frequencies: Vec<f64>,
    pub g: DMatrix<f64>,
    pub parity: Vec<Parity>,
    pub symmetric: bool,
}

impl ModeBasis {
    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// Amplitude of mode i at the first site (bath a attachment point).
    pub fn end_a(&self, i: usize) -> f64 {
        self.g[(0, i)]
    }

    /// Amplitude of mode i at the last site (bath b attachment point).
    pub fn end_b(&self, i: usize) -> f64 {
        self.g[(self.g.nrows() - 1, i)]
    }

    /// Mode indices belonging to a parity family.
    pub fn family(&self, parity: Parity) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.parity[i] == parity).collect()
    }
}

/// Per-mode localization data: participation p_i = sum_j G_ji^4 and
/// xi_i = 1/p_i in units of the lattice constant.
#[derive(Debug, Clone)]
pub struct LocalizationReport {
    pub frequencies: Vec<f64>,
    pub participation: Vec<f64>,
    pub xi: Vec<f64>,
}

/// Diagonalize C. The returned basis is orthonormal, sorted by frequency,
/// sign-fixed (G_{1i} >= 0, ties broken by the first nonzero entry), and
/// parity-labeled when the generating spec is mirror symmetric.
pub fn diagonalize(c: &DMatrix<f64>, spec: &ChainSpec, policy: &NumericPolicy) -> Result<ModeBasis> {
    let l = c.nrows();
    let eig = c.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());

    let mut omega2: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut g = DMatrix::zeros(l, l);
    for (col, &k) in order.iter().enumerate() {
        g.set_column(col, &eig.eigenvectors.column(k));
    }

    let scale = omega2.last().copied().unwrap_or(1.0).abs().max(1.0);
    for i in 1..l {
        let gap = omega2[i] - omega2[i - 1];
        if gap.abs() < policy.mode_degeneracy_rel * scale {
            return Err(Error::DegenerateModes { i: i - 1, j: i, gap });
        }
    }
    if omega2[0] <= 0.0 {
        return Err(Error::SingularCoupling { min_eig: omega2[0] });
    }

    let symmetric = detect_symmetry(spec);
    let mut parity = vec![Parity::None; l];
    if symmetric {
        symmetrize_parity_blocks(&mut g, &omega2, scale);
        for i in 0..l {
            parity[i] = classify_parity(&g.column(i).iter().cloned().collect::<Vec<_>>());
        }
    }

    fix_signs(&mut g);

    // Orthogonality and reconstruction sanity on the finished basis.
    let defect = (g.transpose() * &g - DMatrix::identity(l, l)).abs().max();
    if defect > policy.orthogonality_tol {
        return Err(Error::PolynomialConstruction(format!(
            "eigenbasis orthogonality defect {defect:.3e}"
        )));
    }

    for w in omega2.iter_mut() {
        *w = w.sqrt();
    }
    Ok(ModeBasis { frequencies: omega2, g, parity, symmetric })
}

/// Within clusters of nearly equal frequencies, replace eigenvectors by their
/// even/odd projections so parity labels are exact even when the eigensolver
/// mixed members of a numerically degenerate cross-family pair.
fn symmetrize_parity_blocks(g: &mut DMatrix<f64>, omega2: &[f64], scale: f64) {
    let l = g.nrows();
    let cluster_tol = 1e-6 * scale;
    let mut start = 0;
    while start < l {
        let mut end = start + 1;
        while end < l && (omega2[end] - omega2[end - 1]).abs() < cluster_tol {
            end += 1;
        }
        if end - start > 1 {
            let mut replacements: Vec<Vec<f64>> = Vec::new();
            for col in start..end {
                let v: Vec<f64> = g.column(col).iter().cloned().collect();
                let mut even = vec![0.0; l];
                let mut odd = vec![0.0; l];
                for j in 0..l {
                    even[j] = 0.5 * (v[j] + v[l - 1 - j]);
                    odd[j] = 0.5 * (v[j] - v[l - 1 - j]);
                }
                let ne: f64 = even.iter().map(|x| x * x).sum::<f64>().sqrt();
                let no: f64 = odd.iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut pick = if ne >= no { even } else { odd };
                // Gram-Schmidt against the already-fixed members of the block.
                for prev in &replacements {
                    let dot: f64 = pick.iter().zip(prev).map(|(a, b)| a * b).sum();
                    for j in 0..l {
                        pick[j] -= dot * prev[j];
                    }
                }
                let norm: f64 = pick.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-8 {
                    for x in pick.iter_mut() {
                        *x /= norm;
                    }
                    replacements.push(pick);
                } else {
                    // Projection collapsed; keep the raw vector.
                    replacements.push(v);
                }
            }
            for (k, v) in replacements.iter().enumerate() {
                for j in 0..l {
                    g[(j, start + k)] = v[j];
                }
            }
        }
        start = end;
    }
}

fn classify_parity(v: &[f64]) -> Parity {
    let l = v.len();
    let mut even_defect: f64 = 0.0;
    let mut odd_defect: f64 = 0.0;
    for j in 0..l {
        even_defect = even_defect.max((v[j] - v[l - 1 - j]).abs());
        odd_defect = odd_defect.max((v[j] + v[l - 1 - j]).abs());
    }
    if even_defect <= 1e-8 {
        Parity::Even
    } else if odd_defect <= 1e-8 {
        Parity::Odd
    } else {
        Parity::None
    }
}

fn fix_signs(g: &mut DMatrix<f64>) {
    let l = g.nrows();
    for i in 0..l {
        let mut lead = g[(0, i)];
        if lead.abs() <= 1e-12 {
            lead = (1..l).map(|j| g[(j, i)]).find(|x| x.abs() > 1e-12).unwrap_or(1.0);
        }
        if lead < 0.0 {
            for j in 0..l {
                g[(j, i)] = -g[(j, i)];
            }
        }
    }
}

/// Localization lengths from the participation number of each mode vector.
pub fn localization(basis: &ModeBasis) -> LocalizationReport {
    let l = basis.len();
    let mut participation = Vec::with_capacity(l);
    let mut xi = Vec::with_capacity(l);
    for i in 0..l {
        let p: f64 = (0..l).map(|j| basis.g[(j, i)].powi(4)).sum();
        participation.push(p);
        xi.push(1.0 / p);
    }
    LocalizationReport { frequencies: basis.frequencies.clone(), participation, xi }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_coupling_matrix;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn basis_for(spec: &ChainSpec) -> ModeBasis {
        let policy = NumericPolicy::default();
        let c = build_coupling_matrix(spec, &policy).unwrap();
        diagonalize(&c, spec, &policy).unwrap()
    }

    #[test]
    fn two_site_modes() {
        let spec = ChainSpec::ordered(2, 1.0, 1.0).unwrap();
        let b = basis_for(&spec);
        assert_relative_eq!(b.frequencies[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(b.frequencies[1], 3f64.sqrt(), max_relative = 1e-12);
        let s = 0.5f64.sqrt();
        assert_relative_eq!(b.g[(0, 0)], s, max_relative = 1e-10);
        assert_relative_eq!(b.g[(1, 0)], s, max_relative = 1e-10);
        assert_relative_eq!(b.g[(0, 1)], s, max_relative = 1e-10);
        assert_relative_eq!(b.g[(1, 1)], -s, max_relative = 1e-10);
        assert_eq!(b.parity[0], Parity::Even);
        assert_eq!(b.parity[1], Parity::Odd);
    }

    #[test]
    fn ordered_twenty_site_spectrum() {
        let l = 20;
        let spec = ChainSpec::ordered(l, 1.0, 1.0).unwrap();
        let b = basis_for(&spec);
        // Free ends: cosine standing waves with Omega_k^2 = 1 + 2(1 - cos(k pi / l)).
        for k in 0..l {
            let expect =
                (1.0 + 2.0 * (1.0 - (k as f64 * std::f64::consts::PI / l as f64).cos())).sqrt();
            assert_relative_eq!(b.frequencies[k], expect, max_relative = 1e-10);
        }
        // Parity alternates starting even for the lowest standing wave.
        for k in 0..l {
            let expect = if k % 2 == 0 { Parity::Even } else { Parity::Odd };
            assert_eq!(b.parity[k], expect, "mode {k}");
        }
    }

    #[test]
    fn reconstruction_and_orthogonality() {
        let spec = ChainSpec::new(vec![1.0, 0.8, 1.2, 0.9, 1.0], vec![0.9, 1.4, 0.6, 1.1]).unwrap();
        let policy = NumericPolicy::default();
        let c = build_coupling_matrix(&spec, &policy).unwrap();
        let b = diagonalize(&c, &spec, &policy).unwrap();
        let l = 5;
        let mut d = DMatrix::zeros(l, l);
        for i in 0..l {
            d[(i, i)] = b.frequencies[i] * b.frequencies[i];
        }
        let rebuilt = &b.g * d * b.g.transpose();
        assert!((rebuilt - &c).abs().max() < 1e-9);
        assert!((b.g.transpose() * &b.g - DMatrix::identity(l, l)).abs().max() < 1e-10);
    }

    #[test]
    fn symmetric_draw_end_amplitudes_match() {
        let spec = ChainSpec::new(vec![1.0; 6], vec![1.3, 0.7, 1.05, 0.7, 1.3]).unwrap();
        let b = basis_for(&spec);
        assert!(b.symmetric);
        for i in 0..6 {
            assert!(b.parity[i] != Parity::None, "mode {i} unclassified");
            assert!((b.end_a(i).abs() - b.end_b(i).abs()).abs() < 1e-10);
            match b.parity[i] {
                Parity::Even => assert_relative_eq!(b.end_a(i), b.end_b(i), epsilon = 1e-10),
                Parity::Odd => assert_relative_eq!(b.end_a(i), -b.end_b(i), epsilon = 1e-10),
                Parity::None => unreachable!(),
            }
        }
    }

    #[test]
    fn localization_limits() {
        let l = 20;
        let spec = ChainSpec::ordered(l, 1.0, 1.0).unwrap();
        let b = basis_for(&spec);
        let report = localization(&b);
        // Free-end cosine modes: generic k gives xi = 2l/3; the uniform mode
        // (k = 0) and the alternating-magnitude mode (k = l/2) give xi = l.
        for (k, xi) in report.xi.iter().enumerate() {
            let expect = if k == 0 || k == l / 2 { l as f64 } else { 2.0 * l as f64 / 3.0 };
            assert_relative_eq!(*xi, expect, max_relative = 1e-9);
            assert!(*xi >= 1.0 && *xi <= l as f64 + 1e-9, "mode {k}");
        }
        // Hand-built vectors: fixed-end sine profile, uniform spread, single
        // site. Sum_j sin^4(k pi j /(l+1)) = 3(l+1)/8 gives xi = 2(l+1)/3.
        let norm = (2.0 / (l as f64 + 1.0)).sqrt();
        let sine: Vec<f64> = (1..=l)
            .map(|j| norm * (3.0 * j as f64 * std::f64::consts::PI / (l as f64 + 1.0)).sin())
            .collect();
        assert_relative_eq!(sine.iter().map(|x| x * x).sum::<f64>(), 1.0, max_relative = 1e-12);
        let p: f64 = sine.iter().map(|x| x.powi(4)).sum();
        assert_relative_eq!(1.0 / p, 2.0 * (l as f64 + 1.0) / 3.0, max_relative = 1e-12);
        assert_relative_eq!(1.0 / p, 14.0, max_relative = 1e-12);
        let uniform = vec![1.0 / (l as f64).sqrt(); l];
        let p: f64 = uniform.iter().map(|x: &f64| x.powi(4)).sum();
        assert_relative_eq!(1.0 / p, l as f64, max_relative = 1e-12);
        let mut single = vec![0.0f64; l];
        single[2] = 1.0;
        let p: f64 = single.iter().map(|x| x.powi(4)).sum();
        assert_relative_eq!(1.0 / p, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn disorder_localizes_high_frequencies() {
        let l = 20;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut pooled: Vec<(f64, f64)> = Vec::new();
        let mut draws = 0;
        while draws < 60 {
            let couplings: Vec<f64> = (0..l - 1)
                .map(|_| {
                    let mut f: f64;
                    loop {
                        f = 1.0 + 0.2 * rng.sample::<f64, _>(rand_distr::StandardNormal);
                        if f >= 0.05 {
                            break;
                        }
                    }
                    f
                })
                .collect();
            let spec = ChainSpec::new(vec![1.0; l], couplings).unwrap();
            let b = basis_for(&spec);
            let rep = localization(&b);
            pooled.extend(rep.frequencies.iter().cloned().zip(rep.xi.iter().cloned()));
            draws += 1;
        }
        pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let q = pooled.len() / 4;
        let low: f64 = pooled[..q].iter().map(|p| p.1).sum::<f64>() / q as f64;
        let high: f64 = pooled[pooled.len() - q..].iter().map(|p| p.1).sum::<f64>() / q as f64;
        assert!(
            high < low,
            "high-frequency modes should localize more: top-quartile mean xi {high:.3} vs bottom {low:.3}"
        );
    }
}
