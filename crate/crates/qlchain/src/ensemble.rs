//! Disorder ensembles: sampling random coupling chains, running the steady
//! state per realization with deterministic substreams, aggregating
//! statistics, and fitting flux-versus-length resistance laws.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::Error;
use crate::model::{BathConfig, ChainSpec};
use crate::observables::{
    bose_occupation, effective_frequencies_and_occupations, heat_flux, site_profile,
    StationaryState,
};
use crate::policy::NumericPolicy;
use crate::Result;

/// Gaussian coupling disorder f = mean +- width. Draws below
/// `floor_frac * mean` are rejected and redrawn, which keeps every spring
/// positive and bounds the condition number of the coupling matrix.
#[derive(Debug, Clone)]
pub struct DisorderSpec {
    pub mean: f64,
    pub width: f64,
    /// Mirror the couplings about the chain center (f_n = f_{l-n}).
    pub symmetric: bool,
    /// Rejection floor as a fraction of the mean.
    pub floor_frac: f64,
}

impl DisorderSpec {
    pub fn new(mean: f64, width: f64, symmetric: bool) -> Result<Self> {
        let spec = DisorderSpec { mean, width, symmetric, floor_frac: 0.05 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_floor(mut self, floor_frac: f64) -> Result<Self> {
        self.floor_frac = floor_frac;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean > 0.0) {
            return Err(Error::InvalidArgument {
                arg: "disorder.mean",
                reason: format!("mean coupling must be positive, got {}", self.mean),
            });
        }
        if !(self.width >= 0.0) || self.width >= self.mean {
            return Err(Error::InvalidArgument {
                arg: "disorder.width",
                reason: format!(
                    "width must satisfy 0 <= width < mean for terminating rejection, got {}",
                    self.width
                ),
            });
        }
        if !(0.0..1.0).contains(&self.floor_frac) {
            return Err(Error::InvalidArgument {
                arg: "disorder.floor_frac",
                reason: format!("floor fraction must lie in [0, 1), got {}", self.floor_frac),
            });
        }
        Ok(())
    }
}

/// One coupling draw with the positivity floor.
fn draw_coupling(disorder: &DisorderSpec, normal: &Normal<f64>, rng: &mut ChaCha12Rng) -> f64 {
    let floor = disorder.floor_frac * disorder.mean;
    loop {
        let f = normal.sample(rng);
        if f >= floor {
            return f;
        }
    }
}

/// Draws a disordered chain: couplings Gaussian(mean, width) with the
/// positivity floor, onsite frequencies kept uniform at `omega0`. Symmetric
/// disorder draws ceil((l-1)/2) values and mirrors them about the center.
pub fn sample_chain(
    disorder: &DisorderSpec,
    length: usize,
    omega0: f64,
    rng: &mut ChaCha12Rng,
) -> Result<ChainSpec> {
    disorder.validate()?;
    let normal = Normal::new(disorder.mean, disorder.width).map_err(|_| Error::InvalidArgument {
        arg: "disorder.width",
        reason: "width must be finite and non-negative".into(),
    })?;
    let m = length.checked_sub(1).filter(|&m| m > 0).ok_or(Error::InvalidArgument {
        arg: "length",
        reason: "need at least two sites".into(),
    })?;
    let mut couplings = vec![0.0; m];
    if disorder.symmetric {
        for i in 0..m.div_ceil(2) {
            let f = draw_coupling(disorder, &normal, rng);
            couplings[i] = f;
            couplings[m - 1 - i] = f;
        }
    } else {
        for slot in couplings.iter_mut() {
            *slot = draw_coupling(disorder, &normal, rng);
        }
    }
    ChainSpec::new(vec![omega0; length], couplings)
}

/// Substream for realization `i`, retry `attempt`: one base cipher keyed by
/// the seed, stream counter split so retries never collide with first draws.
fn substream(seed: u64, realization: usize, attempt: u32) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(realization as u64 | ((attempt as u64) << 40));
    rng
}

const MAX_ATTEMPTS: u32 = 8;
const MAX_REJECTION_RATE: f64 = 0.10;

/// One realization on its deterministic substream: sample a chain, run the
/// job, resample on degenerate or marginally stable response poles. Returns
/// the job result and how many retries the draw cost.
fn run_one<T>(
    disorder: &DisorderSpec,
    length: usize,
    omega0: f64,
    seed: u64,
    index: usize,
    job: &(impl Fn(&ChainSpec) -> Result<T> + ?Sized),
) -> Result<(T, u32)> {
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = substream(seed, index, attempt);
        let spec = sample_chain(disorder, length, omega0, &mut rng)?;
        match job(&spec) {
            Ok(row) => return Ok((row, attempt)),
            Err(Error::DegeneratePoles { .. }) | Err(Error::UnstablePole { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Err(Error::ExcessiveRejection { rate: 1.0, attempts: MAX_ATTEMPTS as usize })
}

/// Runs `job` once per realization on deterministic substreams, resampling
/// draws whose response poles come out degenerate or marginally stable.
/// Resample counts come back with the rows; a rejection rate above 10%
/// aborts, since it signals pathological parameters rather than bad luck.
fn with_realizations<T: Send>(
    disorder: &DisorderSpec,
    length: usize,
    omega0: f64,
    k: usize,
    seed: u64,
    job: impl Fn(&ChainSpec) -> Result<T> + Sync,
) -> Result<(Vec<(T, u32)>, usize)> {
    if k == 0 {
        return Err(Error::InvalidArgument {
            arg: "k",
            reason: "need at least one realization".into(),
        });
    }
    let rows: Vec<(T, u32)> = (0..k)
        .into_par_iter()
        .map(|i| run_one(disorder, length, omega0, seed, i, &job))
        .collect::<Result<_>>()?;
    let resamples: usize = rows.iter().map(|&(_, a)| a as usize).sum();
    let rate = resamples as f64 / (k + resamples) as f64;
    if rate > MAX_REJECTION_RATE {
        return Err(Error::ExcessiveRejection { rate, attempts: k + resamples });
    }
    Ok((rows, resamples))
}

/// Mean, standard deviation and both standard-error conventions in use for
/// ensemble averages: sigma/sqrt(k-1) and sigma/(k-1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryStat {
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
    pub stderr_alt: f64,
    pub count: usize,
}

impl SummaryStat {
    pub fn from_samples(samples: &[f64]) -> Self {
        let k = samples.len();
        let mean = samples.iter().sum::<f64>() / k as f64;
        if k < 2 {
            return SummaryStat { mean, std: 0.0, stderr: 0.0, stderr_alt: 0.0, count: k };
        }
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        let std = var.sqrt();
        SummaryStat {
            mean,
            std,
            stderr: std / ((k - 1) as f64).sqrt(),
            stderr_alt: std / (k - 1) as f64,
            count: k,
        }
    }
}

/// Full per-realization record: the drawn couplings and every observable the
/// aggregated scans consume.
#[derive(Debug, Clone)]
pub struct RealizationRow {
    pub index: usize,
    pub resamples: u32,
    pub couplings: Vec<f64>,
    pub flux: f64,
    pub energy: Vec<f64>,
    pub t_r: Vec<f64>,
    /// Per-site effective frequencies from the ground-state energies.
    pub site_omega_eff: Vec<f64>,
    /// Per-mode effective frequencies.
    pub omega_eff: Vec<f64>,
    pub occupation: Vec<f64>,
    pub t_fit: f64,
}

#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub rows: Vec<RealizationRow>,
    pub flux: SummaryStat,
    /// Per-site statistics over realizations.
    pub energy: Vec<SummaryStat>,
    pub t_r: Vec<SummaryStat>,
    pub omega_eff: Vec<SummaryStat>,
    pub t_fit: SummaryStat,
    pub resamples: usize,
    pub seed: u64,
}

/// Solves the steady state for `k` disorder realizations and aggregates
/// site profiles, mode occupations and the heat flux. Realization `i` is a
/// pure function of (seed, i), so runs are reproducible and extending `k`
/// preserves earlier rows.
pub fn run_ensemble(
    disorder: &DisorderSpec,
    length: usize,
    omega0: f64,
    bath: &BathConfig,
    k: usize,
    seed: u64,
    policy: &NumericPolicy,
) -> Result<EnsembleResult> {
    let (rows, resamples) = with_realizations(disorder, length, omega0, k, seed, |spec| {
        let warm = StationaryState::solve(spec, bath, policy)?;
        let ground = StationaryState::ground(spec, bath, policy)?;
        let profile = site_profile(&warm.site, &ground.site, spec, bath)?;
        let modes = effective_frequencies_and_occupations(&warm.mode, &ground.mode, spec.mass)?;
        let flux = heat_flux(&warm.site, spec, bath, policy)?;
        Ok((spec.couplings.clone(), profile, modes, flux.flux))
    })?;
    let rows: Vec<RealizationRow> = rows
        .into_iter()
        .enumerate()
        .map(|(index, ((couplings, profile, modes, flux), resamples))| RealizationRow {
            index,
            resamples,
            couplings,
            flux,
            energy: profile.energy,
            t_r: profile.t_r,
            site_omega_eff: profile.omega_eff,
            omega_eff: modes.omega_eff,
            occupation: modes.occupation,
            t_fit: modes.t_fit,
        })
        .collect();
    let site_stat = |field: fn(&RealizationRow) -> &Vec<f64>| -> Vec<SummaryStat> {
        (0..length)
            .map(|s| {
                let samples: Vec<f64> = rows.iter().map(|r| field(r)[s]).collect();
                SummaryStat::from_samples(&samples)
            })
            .collect()
    };
    let fluxes: Vec<f64> = rows.iter().map(|r| r.flux).collect();
    let t_fits: Vec<f64> = rows.iter().map(|r| r.t_fit).collect();
    Ok(EnsembleResult {
        flux: SummaryStat::from_samples(&fluxes),
        energy: site_stat(|r| &r.energy),
        t_r: site_stat(|r| &r.t_r),
        omega_eff: site_stat(|r| &r.site_omega_eff),
        t_fit: SummaryStat::from_samples(&t_fits),
        resamples,
        seed,
        rows,
    })
}

/// Least-squares slope of `values[first..=last]` against site index, with
/// the slope's standard error from the regression residuals.
pub fn profile_slope(values: &[f64], first: usize, last: usize) -> Result<(f64, f64)> {
    if first >= last || last >= values.len() || last - first < 2 {
        return Err(Error::InvalidArgument {
            arg: "range",
            reason: format!(
                "need at least three sites inside 0..{}, got {first}..={last}",
                values.len()
            ),
        });
    }
    let n = (last - first + 1) as f64;
    let xs = || (first..=last).map(|i| i as f64);
    let x_mean = xs().sum::<f64>() / n;
    let y_mean = values[first..=last].iter().sum::<f64>() / n;
    let sxx: f64 = xs().map(|x| (x - x_mean).powi(2)).sum();
    let sxy: f64 = xs().zip(&values[first..=last]).map(|(x, &y)| (x - x_mean) * (y - y_mean)).sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let rss: f64 = xs()
        .zip(&values[first..=last])
        .map(|(x, &y)| (y - intercept - slope * x).powi(2))
        .sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    Ok((slope, se))
}

// ---------------------------------------------------------------------------
// Flux-versus-length scaling.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingModel {
    /// Resistance grows linearly: 1/J = R_c + R l.
    Linear,
    /// Anomalous bulk resistance: 1/J = R_c + R sqrt(l).
    Sqrt,
}

impl ScalingModel {
    fn g(self, l: f64) -> f64 {
        match self {
            ScalingModel::Linear => l,
            ScalingModel::Sqrt => l.sqrt(),
        }
    }
}

/// One fitted resistance law J = 1/(R_c + R g(l)).
#[derive(Debug, Clone, Copy)]
pub struct ScalingFit {
    pub model: ScalingModel,
    pub r_contact: f64,
    pub r_bulk: f64,
    /// Weighted residual sum of squares in flux space.
    pub rss: f64,
}

/// Weighted least squares of J against 1/(R_c + R g(l)): seeded by the
/// linear fit in resistance space, refined by Gauss-Newton on the flux
/// residuals. Weights are 1/stderr^2 when every point carries an error bar,
/// unweighted otherwise.
pub fn fit_resistance(
    lengths: &[usize],
    flux: &[f64],
    stderr: &[f64],
    model: ScalingModel,
) -> Result<ScalingFit> {
    let n = lengths.len();
    if n < 3 || flux.len() != n || stderr.len() != n {
        return Err(Error::InvalidArgument {
            arg: "lengths",
            reason: "resistance fit needs at least three matched points".into(),
        });
    }
    if flux.iter().any(|&j| !(j > 0.0)) {
        return Err(Error::FitFailure(
            "flux must be positive to define a resistance".into(),
        ));
    }
    let w: Vec<f64> = if stderr.iter().all(|&s| s > 0.0) {
        stderr.iter().map(|&s| 1.0 / (s * s)).collect()
    } else {
        vec![1.0; n]
    };
    let g: Vec<f64> = lengths.iter().map(|&l| model.g(l as f64)).collect();

    // Resistance space is linear in the parameters; the flux-space weights
    // transform with J^4.
    let (mut a, mut b) = {
        let mut s_w = 0.0;
        let mut s_x = 0.0;
        let mut s_y = 0.0;
        let mut s_xx = 0.0;
        let mut s_xy = 0.0;
        for i in 0..n {
            let wi = w[i] * flux[i].powi(4);
            let y = 1.0 / flux[i];
            s_w += wi;
            s_x += wi * g[i];
            s_y += wi * y;
            s_xx += wi * g[i] * g[i];
            s_xy += wi * g[i] * y;
        }
        let det = s_w * s_xx - s_x * s_x;
        if det.abs() < 1e-300 {
            return Err(Error::FitFailure("degenerate resistance design matrix".into()));
        }
        ((s_xx * s_y - s_x * s_xy) / det, (s_w * s_xy - s_x * s_y) / det)
    };

    let rss_of = |a: f64, b: f64| -> f64 {
        (0..n).map(|i| w[i] * (flux[i] - 1.0 / (a + b * g[i])).powi(2)).sum()
    };
    let mut rss = rss_of(a, b);
    for _ in 0..60 {
        // Gauss-Newton step: residual r = J - 1/(a + b g), dr/da = m^2 with
        // m = 1/(a + b g), dr/db = g m^2.
        let mut h_aa = 0.0;
        let mut h_ab = 0.0;
        let mut h_bb = 0.0;
        let mut g_a = 0.0;
        let mut g_b = 0.0;
        for i in 0..n {
            let m = 1.0 / (a + b * g[i]);
            let ja = m * m;
            let jb = g[i] * m * m;
            let r = flux[i] - m;
            h_aa += w[i] * ja * ja;
            h_ab += w[i] * ja * jb;
            h_bb += w[i] * jb * jb;
            g_a += w[i] * ja * r;
            g_b += w[i] * jb * r;
        }
        let det = h_aa * h_bb - h_ab * h_ab;
        if det.abs() < 1e-300 {
            break;
        }
        let mut da = (h_bb * g_a - h_ab * g_b) / det;
        let mut db = (h_aa * g_b - h_ab * g_a) / det;
        let mut improved = false;
        for _ in 0..30 {
            let (na, nb) = (a + da, b + db);
            if (0..n).all(|i| na + nb * g[i] > 0.0) {
                let nr = rss_of(na, nb);
                if nr <= rss {
                    improved = nr < rss * (1.0 - 1e-14);
                    a = na;
                    b = nb;
                    rss = nr;
                    break;
                }
            }
            da *= 0.5;
            db *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(ScalingFit { model, r_contact: a, r_bulk: b, rss })
}

/// Both resistance laws fitted to the same data; `preferred` is the one with
/// the smaller weighted residual.
#[derive(Debug, Clone, Copy)]
pub struct ScalingComparison {
    pub linear: ScalingFit,
    pub sqrt: ScalingFit,
    pub preferred: ScalingModel,
}

pub fn compare_scaling(
    lengths: &[usize],
    flux: &[f64],
    stderr: &[f64],
) -> Result<ScalingComparison> {
    let linear = fit_resistance(lengths, flux, stderr, ScalingModel::Linear)?;
    let sqrt = fit_resistance(lengths, flux, stderr, ScalingModel::Sqrt)?;
    let preferred =
        if sqrt.rss <= linear.rss { ScalingModel::Sqrt } else { ScalingModel::Linear };
    Ok(ScalingComparison { linear, sqrt, preferred })
}

/// Spearman rank correlation with a one-sided exact permutation p-value for
/// P(rho_perm <= rho_observed). Exact enumeration up to n = 8, normal
/// approximation beyond.
pub fn spearman_decreasing(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return Err(Error::InvalidArgument {
            arg: "x",
            reason: "rank correlation needs at least three matched points".into(),
        });
    }
    let rho = rank_correlation(&ranks(x), &ranks(y));
    let p = if n <= 8 {
        let rx = ranks(x);
        let mut ry = ranks(y);
        let mut at_most = 0usize;
        let mut total = 0usize;
        permute(&mut ry, 0, &mut |perm| {
            total += 1;
            if rank_correlation(&rx, perm) <= rho + 1e-12 {
                at_most += 1;
            }
        });
        at_most as f64 / total as f64
    } else {
        // Under the null, rho is asymptotically N(0, 1/(n-1)).
        let z = rho * ((n - 1) as f64).sqrt();
        0.5 * erfc_approx(-z / std::f64::consts::SQRT_2)
    };
    Ok((rho, p))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn rank_correlation(rx: &[f64], ry: &[f64]) -> f64 {
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn permute(v: &mut [f64], k: usize, visit: &mut impl FnMut(&[f64])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, visit);
        v.swap(k, i);
    }
}

/// Abramowitz-Stegun 7.1.26 complementary error function, 1.5e-7 absolute.
fn erfc_approx(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc_approx(-x);
    }
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    poly * (-x * x).exp()
}

/// Flux statistics across a length grid, with both resistance laws fitted
/// and the monotonicity of mean flux against length.
#[derive(Debug, Clone)]
pub struct FluxLengthScan {
    pub lengths: Vec<usize>,
    pub flux: Vec<SummaryStat>,
    /// Raw per-realization fluxes, one row per length.
    pub samples: Vec<Vec<f64>>,
    pub fits: ScalingComparison,
    pub spearman_rho: f64,
    pub spearman_p: f64,
    pub resamples: usize,
}

fn flux_job(spec: &ChainSpec, bath: &BathConfig, policy: &NumericPolicy) -> Result<f64> {
    let state = StationaryState::solve(spec, bath, policy)?;
    Ok(heat_flux(&state.site, spec, bath, policy)?.flux)
}

/// Flux of a single disorder realization at (seed, index) granularity,
/// drawing from exactly the substream the batch scan would use, so a
/// resumable driver can skip completed pairs and still reproduce the scan
/// bit for bit. Also returns the retries the draw cost.
pub fn flux_realization(
    disorder: &DisorderSpec,
    length: usize,
    omega0: f64,
    bath: &BathConfig,
    seed: u64,
    index: usize,
    policy: &NumericPolicy,
) -> Result<(f64, u32)> {
    run_one(disorder, length, omega0, seed, index, &|spec: &ChainSpec| {
        flux_job(spec, bath, policy)
    })
}

/// Mean flux over `k` realizations for each chain length, flux-only solves.
pub fn flux_length_scan(
    disorder: &DisorderSpec,
    omega0: f64,
    bath: &BathConfig,
    lengths: &[usize],
    k: usize,
    seed: u64,
    policy: &NumericPolicy,
) -> Result<FluxLengthScan> {
    if lengths.len() < 3 || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument {
            arg: "lengths",
            reason: "length grid must be ascending with at least three entries".into(),
        });
    }
    if *lengths.last().unwrap() > 75 {
        return Err(Error::InvalidArgument {
            arg: "lengths",
            reason: "length grid is capped at 75 sites".into(),
        });
    }
    let mut samples = Vec::with_capacity(lengths.len());
    let mut resamples = 0;
    for (li, &l) in lengths.iter().enumerate() {
        // Offset the substreams so every (length, realization) pair draws
        // independently while staying reproducible.
        let (rows, rej) =
            with_realizations(disorder, l, omega0, k, seed.wrapping_add(li as u64), |spec| {
                flux_job(spec, bath, policy)
            })?;
        resamples += rej;
        samples.push(rows.into_iter().map(|(j, _)| j).collect::<Vec<f64>>());
    }
    let flux: Vec<SummaryStat> = samples.iter().map(|s| SummaryStat::from_samples(s)).collect();
    let means: Vec<f64> = flux.iter().map(|s| s.mean).collect();
    let stderrs: Vec<f64> = flux.iter().map(|s| s.stderr).collect();
    let fits = compare_scaling(lengths, &means, &stderrs)?;
    let ls: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    let (spearman_rho, spearman_p) = spearman_decreasing(&ls, &means)?;
    Ok(FluxLengthScan { lengths: lengths.to_vec(), flux, samples, fits, spearman_rho, spearman_p, resamples })
}

// ---------------------------------------------------------------------------
// Pooled occupation scatter.

/// One pooled (mode frequency, occupation) point.
#[derive(Debug, Clone, Copy)]
pub struct ModePoint {
    pub realization: usize,
    pub omega: f64,
    pub occupation: f64,
}

#[derive(Debug, Clone)]
pub struct OccupationEnsemble {
    pub points: Vec<ModePoint>,
    pub t_fit: SummaryStat,
    pub t_a: f64,
    pub t_b: f64,
    pub t_mean: f64,
    pub resamples: usize,
}

/// Pools effective frequencies and occupations across realizations; the
/// Bose-Einstein curves at the bath and mean temperatures are the reference
/// the scatter is judged against.
pub fn occupation_ensemble(
    disorder: &DisorderSpec,
    length: usize,
    omega0: f64,
    bath: &BathConfig,
    k: usize,
    seed: u64,
    policy: &NumericPolicy,
) -> Result<OccupationEnsemble> {
    let (rows, resamples) = with_realizations(disorder, length, omega0, k, seed, |spec| {
        let warm = StationaryState::solve(spec, bath, policy)?;
        let ground = StationaryState::ground(spec, bath, policy)?;
        effective_frequencies_and_occupations(&warm.mode, &ground.mode, spec.mass)
    })?;
    let mut points = Vec::with_capacity(k * length);
    let mut t_fits = Vec::with_capacity(k);
    for (i, (modes, _)) in rows.into_iter().enumerate() {
        t_fits.push(modes.t_fit);
        for (w, n) in modes.omega_eff.into_iter().zip(modes.occupation) {
            points.push(ModePoint { realization: i, omega: w, occupation: n });
        }
    }
    Ok(OccupationEnsemble {
        points,
        t_fit: SummaryStat::from_samples(&t_fits),
        t_a: bath.t_a,
        t_b: bath.t_b,
        t_mean: 0.5 * (bath.t_a + bath.t_b),
        resamples,
    })
}

impl OccupationEnsemble {
    /// RMS deviation of the pooled occupations from the Bose-Einstein curve
    /// at temperature `t`.
    pub fn rms_from_bose(&self, t: f64) -> f64 {
        let ss: f64 = self
            .points
            .iter()
            .map(|p| (p.occupation - bose_occupation(p.omega, t)).powi(2))
            .sum();
        (ss / self.points.len() as f64).sqrt()
    }

    /// Variance of the per-mode effective temperatures in the bottom and top
    /// frequency quartiles. A wide top-quartile spread is the signature of
    /// high modes locking to one bath or the other.
    pub fn quartile_temperature_variances(&self) -> (f64, f64) {
        let mut temps: Vec<(f64, f64)> = self
            .points
            .iter()
            .filter(|p| p.occupation > 1e-12)
            .map(|p| (p.omega, p.omega / (1.0 + 1.0 / p.occupation).ln()))
            .collect();
        temps.sort_by(|a, b| a.0.total_cmp(&b.0));
        let q = temps.len() / 4;
        let var = |slice: &[(f64, f64)]| -> f64 {
            let m = slice.iter().map(|&(_, t)| t).sum::<f64>() / slice.len() as f64;
            slice.iter().map(|&(_, t)| (t - m).powi(2)).sum::<f64>() / slice.len() as f64
        };
        (var(&temps[..q]), var(&temps[temps.len() - q..]))
    }
}
