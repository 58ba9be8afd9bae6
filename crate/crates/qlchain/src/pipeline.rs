//! Verb-level drivers tying the library together: parse a flat key=value
//! configuration, run one scan family, and leave CSV artifacts plus a
//! manifest in an output directory.
//!
//! Ensemble scans checkpoint per realization: each finished (seed, index)
//! pair is recorded in the manifest together with its value, so an
//! interrupted run resumed with the same configuration skips straight to the
//! missing realizations and reproduces the same bytes.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::correlations::{
    time_shifted_stationary, to_real_space, transient_correlations, BathKernels,
    CorrelationMatrices,
};
use crate::ensemble::{self, DisorderSpec, SummaryStat};
use crate::entanglement::negativity_temperature_scan;
use crate::error::Error;
use crate::model::{build_coupling_matrix, BathConfig, ChainSpec, PinningStyle};
use crate::observables::{
    conductivity_scan, effective_frequencies_and_occupations, flux_coupling_scan, heat_flux,
    site_profile, StationaryState,
};
use crate::oracles::{
    classical_explicit_bath, correlation_deviation, fourier_stationary_correlations,
    fourier_stationary_correlations_classical, mean_bond_flux, ExplicitBathConfig,
    FOURIER_AGREEMENT_TOL,
};
use crate::policy::NumericPolicy;
use crate::report::{Cell, CompletedJob, RunManifest, Table};
use crate::spectral::{diagonalize, localization};
use crate::Result;

// ---------------------------------------------------------------------------
// Configuration.

/// The closed set of configuration keys. Dots mark sections; the file format
/// itself stays flat, one `key = value` per line.
pub const CONFIG_KEYS: [&str; 11] = [
    "length",
    "coupling.mean",
    "coupling.sigma",
    "coupling.symmetric",
    "onsite.style",
    "onsite.omega0",
    "bath.gamma",
    "bath.cutoff",
    "bath.Ta",
    "bath.Tb",
    "seed",
];

fn canonical_key(raw: &str) -> Option<&'static str> {
    CONFIG_KEYS.iter().find(|k| k.eq_ignore_ascii_case(raw)).copied()
}

/// Parses flat `key = value` text. Blank lines and `#` comments are allowed;
/// unknown or repeated keys are hard errors, listed by name.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<&'static str, String>> {
    let mut map = BTreeMap::new();
    let mut unknown = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        match canonical_key(key) {
            None => unknown.push(key.to_string()),
            Some(canon) => {
                if map.insert(canon, value.to_string()).is_some() {
                    return Err(Error::Config(format!("key `{canon}` is set twice")));
                }
            }
        }
    }
    if !unknown.is_empty() {
        return Err(Error::Config(format!(
            "unknown configuration keys: {}",
            unknown.join(", ")
        )));
    }
    Ok(map)
}

/// Extracts `QLCHAIN_*` overrides from an environment listing. The variable
/// suffix maps to a dotted key (underscores become dots, case-insensitive):
/// `QLCHAIN_BATH_TA=10` sets `bath.Ta`.
pub fn env_overrides(
    vars: impl Iterator<Item = (String, String)>,
) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (name, value) in vars {
        let Some(suffix) = name.strip_prefix("QLCHAIN_") else {
            continue;
        };
        let dotted = suffix.to_ascii_lowercase().replace('_', ".");
        match canonical_key(&dotted) {
            Some(canon) => out.push((canon.to_string(), value)),
            None => {
                return Err(Error::Config(format!(
                    "environment variable {name} does not map to a configuration key"
                )))
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Onsite pinning pattern selected by `onsite.style`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnsiteStyle {
    Uniform,
    EndsOnly,
}

/// Effective run configuration, defaults filled in. The default is the
/// ordered five-site chain between a hot and a cold bath.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub length: usize,
    pub coupling_mean: f64,
    pub coupling_sigma: f64,
    pub coupling_symmetric: bool,
    pub onsite_style: OnsiteStyle,
    pub onsite_omega0: f64,
    pub bath_gamma: f64,
    pub bath_cutoff: f64,
    pub bath_ta: f64,
    pub bath_tb: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            length: 5,
            coupling_mean: 1.0,
            coupling_sigma: 0.0,
            coupling_symmetric: false,
            onsite_style: OnsiteStyle::Uniform,
            onsite_omega0: 1.0,
            bath_gamma: 2.0,
            bath_cutoff: 10.0,
            bath_ta: 5.0,
            bath_tb: 2.0,
            seed: 42,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected {what}, got `{value}`")))
}

impl RunConfig {
    /// Builds the effective configuration from optional file text plus an
    /// ordered override list (environment first, then flags), validating
    /// every value.
    pub fn build(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut map = match file_text {
            Some(text) => parse_config_text(text)?,
            None => BTreeMap::new(),
        };
        for (key, value) in overrides {
            let canon = canonical_key(key).ok_or_else(|| {
                Error::Config(format!("unknown configuration keys: {key}"))
            })?;
            map.insert(canon, value.clone());
        }
        Self::from_pairs(&map)
    }

    pub fn from_pairs(map: &BTreeMap<&'static str, String>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (&key, value) in map {
            match key {
                "length" => cfg.length = parse_value(key, value, "a positive integer")?,
                "coupling.mean" => cfg.coupling_mean = parse_value(key, value, "a number")?,
                "coupling.sigma" => cfg.coupling_sigma = parse_value(key, value, "a number")?,
                "coupling.symmetric" => {
                    cfg.coupling_symmetric = parse_value(key, value, "true or false")?
                }
                "onsite.style" => {
                    cfg.onsite_style = match value.as_str() {
                        "uniform" => OnsiteStyle::Uniform,
                        "ends-only" => OnsiteStyle::EndsOnly,
                        _ => {
                            return Err(Error::Config(format!(
                                "onsite.style: expected `uniform` or `ends-only`, got `{value}`"
                            )))
                        }
                    }
                }
                "onsite.omega0" => cfg.onsite_omega0 = parse_value(key, value, "a number")?,
                "bath.gamma" => cfg.bath_gamma = parse_value(key, value, "a number")?,
                "bath.cutoff" => cfg.bath_cutoff = parse_value(key, value, "a number")?,
                "bath.Ta" => cfg.bath_ta = parse_value(key, value, "a number")?,
                "bath.Tb" => cfg.bath_tb = parse_value(key, value, "a number")?,
                "seed" => cfg.seed = parse_value(key, value, "an unsigned integer")?,
                _ => unreachable!("key list is closed"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.length < 2 {
            return fail(format!("length must be at least 2, got {}", self.length));
        }
        if !(self.coupling_mean > 0.0) {
            return fail(format!(
                "coupling.mean must be positive, got {}",
                self.coupling_mean
            ));
        }
        if !(self.coupling_sigma >= 0.0) {
            return fail(format!(
                "coupling.sigma must be non-negative, got {}",
                self.coupling_sigma
            ));
        }
        if self.coupling_sigma >= self.coupling_mean {
            return fail(format!(
                "coupling.sigma must be smaller than coupling.mean ({} >= {})",
                self.coupling_sigma, self.coupling_mean
            ));
        }
        if !(self.onsite_omega0 > 0.0) {
            return fail(format!(
                "onsite.omega0 must be positive, got {}",
                self.onsite_omega0
            ));
        }
        if self.onsite_style == OnsiteStyle::EndsOnly && self.coupling_sigma > 0.0 {
            return fail("onsite.style = ends-only requires coupling.sigma = 0".into());
        }
        if !(self.bath_gamma > 0.0) {
            return fail(format!("bath.gamma must be positive, got {}", self.bath_gamma));
        }
        if !(self.bath_cutoff > 0.0) {
            return fail(format!(
                "bath.cutoff must be positive, got {}",
                self.bath_cutoff
            ));
        }
        if !(self.bath_ta >= 0.0) || !(self.bath_tb >= 0.0) {
            return fail(format!(
                "bath.Ta and bath.Tb must be non-negative, got {} and {}",
                self.bath_ta, self.bath_tb
            ));
        }
        Ok(())
    }

    /// Canonical echo of the effective configuration, every key present.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let style = match self.onsite_style {
            OnsiteStyle::Uniform => "uniform",
            OnsiteStyle::EndsOnly => "ends-only",
        };
        [
            ("length", self.length.to_string()),
            ("coupling.mean", self.coupling_mean.to_string()),
            ("coupling.sigma", self.coupling_sigma.to_string()),
            ("coupling.symmetric", self.coupling_symmetric.to_string()),
            ("onsite.style", style.to_string()),
            ("onsite.omega0", self.onsite_omega0.to_string()),
            ("bath.gamma", self.bath_gamma.to_string()),
            ("bath.cutoff", self.bath_cutoff.to_string()),
            ("bath.Ta", self.bath_ta.to_string()),
            ("bath.Tb", self.bath_tb.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn bath(&self) -> Result<BathConfig> {
        BathConfig::new(self.bath_gamma, self.bath_cutoff, self.bath_ta, self.bath_tb)
    }

    pub fn disorder(&self) -> Result<DisorderSpec> {
        DisorderSpec::new(self.coupling_mean, self.coupling_sigma, self.coupling_symmetric)
    }

    fn pinning(&self) -> PinningStyle {
        match self.onsite_style {
            OnsiteStyle::Uniform => PinningStyle::OnsiteEverywhere(self.onsite_omega0),
            OnsiteStyle::EndsOnly => PinningStyle::EndsOnly(self.onsite_omega0),
        }
    }

    /// The chain this configuration describes. With coupling disorder, this
    /// is the single realization drawn directly from the seed (ensemble verbs
    /// draw their own substreams instead).
    pub fn chain(&self) -> Result<ChainSpec> {
        if self.coupling_sigma > 0.0 {
            let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
            ensemble::sample_chain(&self.disorder()?, self.length, self.onsite_omega0, &mut rng)
        } else {
            ChainSpec::pinned(
                self.length,
                self.pinning(),
                vec![self.coupling_mean; self.length - 1],
            )
        }
    }
}

// ---------------------------------------------------------------------------
// Verbs.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Profile,
    FluxLength,
    FluxSurface,
    Conductivity,
    Occupations,
    Localization,
    Negativity,
    Transient,
    Verify,
}

impl Verb {
    pub const ALL: [Verb; 9] = [
        Verb::Profile,
        Verb::FluxLength,
        Verb::FluxSurface,
        Verb::Conductivity,
        Verb::Occupations,
        Verb::Localization,
        Verb::Negativity,
        Verb::Transient,
        Verb::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Verb::Profile => "profile",
            Verb::FluxLength => "flux-length",
            Verb::FluxSurface => "flux-surface",
            Verb::Conductivity => "conductivity",
            Verb::Occupations => "occupations",
            Verb::Localization => "localization",
            Verb::Negativity => "negativity",
            Verb::Transient => "transient",
            Verb::Verify => "verify",
        }
    }

    pub fn parse(s: &str) -> Result<Verb> {
        Verb::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Verb::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown verb `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Runs one verb end to end: dispatch, artifact emission, manifest save.
/// With `resume`, a compatible manifest already in `out` seeds the completed
/// set so finished ensemble realizations are not recomputed.
pub fn run(verb: Verb, cfg: &RunConfig, out: &Path, resume: bool) -> Result<RunManifest> {
    std::fs::create_dir_all(out)?;
    let echo = cfg.echo();
    let mut manifest = match RunManifest::load(out) {
        Ok(m) if resume => {
            m.resume_compatible(verb.name(), cfg.seed, &echo)?;
            m
        }
        _ => RunManifest::new(verb.name(), cfg.seed, echo),
    };
    let result = match verb {
        Verb::Profile => profile_verb(&mut manifest, cfg, out),
        Verb::FluxLength => flux_length_verb(&mut manifest, cfg, out),
        Verb::FluxSurface => flux_surface_verb(&mut manifest, cfg, out),
        Verb::Conductivity => conductivity_verb(&mut manifest, cfg, out),
        Verb::Occupations => occupations_verb(&mut manifest, cfg, out),
        Verb::Localization => localization_verb(&mut manifest, cfg, out),
        Verb::Negativity => negativity_verb(&mut manifest, cfg, out),
        Verb::Transient => transient_verb(&mut manifest, cfg, out),
        Verb::Verify => verify_verb(&mut manifest, cfg, out),
    };
    manifest.finish();
    match result {
        Ok(()) => {
            manifest.save(out)?;
            Ok(manifest)
        }
        Err(e) => {
            // Keep whatever progress was checkpointed; the manifest is the
            // resume point.
            let _ = manifest.save(out);
            Err(e)
        }
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let ratio = (hi / lo).powf(1.0 / (n - 1) as f64);
    (0..n).map(|i| lo * ratio.powi(i as i32)).collect()
}

// ---------------------------------------------------------------------------
// Verb drivers.

fn profile_verb(man: &mut RunManifest, cfg: &RunConfig, out: &Path) -> Result<()> {
    let bath = cfg.bath()?;
    let policy = NumericPolicy::default();
    let mut table = Table::new(&["site", "E", "omega_eff", "T_R"]);
    if cfg.coupling_sigma > 0.0 {
        let result = man.stage("ensemble", |_| {
            ensemble::run_ensemble(
                &cfg.disorder()?,
                cfg.length,
                cfg.onsite_omega0,
                &bath,
                50,
                cfg.seed,
                &policy,
            )
        })?;
        for s in 0..cfg.length {
            table.push(vec![
                Cell::Int((s + 1) as i64),
                Cell::Float(result.energy[s].mean),
                Cell::Float(result.omega_eff[s].mean),
                Cell::Float(result.t_r[s].mean),
            ]);
        }
        man.rejections += result.resamples as u64;
        man.metrics.insert("J".into(), result.flux.mean);
        man.metrics.insert("J_stderr".into(), result.flux.stderr);
    } else {
        let spec = cfg.chain()?;
        let (profile, flux) = man.stage("solve", |_| {
            let warm = StationaryState::solve(&spec, &bath, &policy)?;
            let ground = StationaryState::ground(&spec, &bath, &policy)?;
            let profile = site_profile(&warm.site, &ground.site, &spec, &bath)?;
            let flux = heat_flux(&warm.site, &spec, &bath, &policy)?;
            Ok((profile, flux))
        })?;
        for s in 0..cfg.length {
            table.push(vec![
                Cell::Int((s + 1) as i64),
                Cell::Float(profile.energy[s]),
                Cell::Float(profile.omega_eff[s]),
                Cell::Float(profile.t_r[s]),
            ]);
        }
        man.metrics.insert("J".into(), flux.flux);
        if cfg.bath_ta != cfg.bath_tb {
            man.metrics
                .insert("Gth".into(), flux.flux / (cfg.bath_ta - cfg.bath_tb));
        }
    }
    man.emit_table(out, "profile.csv", &table)
}

/// Length grid and realization count for the flux-length verb: an ordered
/// configuration sweeps every length once; a disordered one runs the
/// ensemble grid.
fn flux_length_defaults(cfg: &RunConfig) -> (Vec<usize>, usize) {
    if cfg.coupling_sigma > 0.0 {
        (vec![5, 10, 20, 40, 65], 22)
    } else {
        ((5..=20).collect(), 1)
    }
}

fn flux_length_verb(man: &mut RunManifest, cfg: &RunConfig, out: &Path) -> Result<()> {
    let (lengths, k) = flux_length_defaults(cfg);
    flux_length_run(man, cfg, out, &lengths, k)
}

/// Resumable flux-vs-length scan. Every (length, realization) job is keyed
/// by its substream (seed, index); completed jobs found in the manifest are
/// reused verbatim. Workers solve in parallel and serialize their completion
/// records through one lock.
pub fn flux_length_run(
    man: &mut RunManifest,
    cfg: &RunConfig,
    out: &Path,
    lengths: &[usize],
    k: usize,
) -> Result<()> {
    let disorder = cfg.disorder()?;
    let bath = cfg.bath()?;
    let policy = NumericPolicy::default();

    man.stage("realizations", |man| {
        for (li, &l) in lengths.iter().enumerate() {
            let seed_l = cfg.seed.wrapping_add(li as u64);
            let missing: Vec<usize> =
                (0..k).filter(|&i| man.is_completed(seed_l, i as u64).is_none()).collect();
            let shared = Mutex::new(&mut *man);
            missing.par_iter().try_for_each(|&i| -> Result<()> {
                let (flux, attempts) = ensemble::flux_realization(
                    &disorder,
                    l,
                    cfg.onsite_omega0,
                    &bath,
                    seed_l,
                    i,
                    &policy,
                )?;
                let mut guard = shared.lock().expect("manifest lock");
                guard.record_completed(CompletedJob {
                    seed: seed_l,
                    index: i as u64,
                    value: flux,
                    resamples: attempts as u64,
                });
                guard.save(out)
            })?;
        }
        Ok(())
    })?;

    let samples: Vec<Vec<f64>> = lengths
        .iter()
        .enumerate()
        .map(|(li, _)| {
            let seed_l = cfg.seed.wrapping_add(li as u64);
            (0..k)
                .map(|i| man.is_completed(seed_l, i as u64).expect("job recorded").value)
                .collect()
        })
        .collect();
    let stats: Vec<SummaryStat> = samples.iter().map(|v| SummaryStat::from_samples(v)).collect();

    let mut table = Table::new(&["l", "J_mean", "J_std", "k_realizations"]);
    for (li, &l) in lengths.iter().enumerate() {
        table.push(vec![
            Cell::Int(l as i64),
            Cell::Float(stats[li].mean),
            Cell::Float(stats[li].std),
            Cell::Int(k as i64),
        ]);
    }

    let means: Vec<f64> = stats.iter().map(|s| s.mean).collect();
    let ls: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    let (rho, p) = ensemble::spearman_decreasing(&ls, &means)?;
    man.metrics.insert("spearman_rho".into(), rho);
    man.metrics.insert("spearman_p".into(), p);
    let stderrs: Vec<f64> = stats.iter().map(|s| s.stderr).collect();
    let fits = ensemble::compare_scaling(lengths, &means, &stderrs)?;
    man.metrics.insert("rss_linear".into(), fits.linear.rss);
    man.metrics.insert("rss_sqrt".into(), fits.sqrt.rss);
    man.metrics.insert(
        "sqrt_preferred".into(),
        if fits.preferred == ensemble::ScalingModel::Sqrt { 1.0 } else { 0.0 },
    );

    man.emit_table(out, "flux_length.csv", &table)
}

fn flux_surface_verb(man: &mut RunManifest, cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.coupling_sigma > 0.0 || cfg.onsite_style != OnsiteStyle::Uniform {
        return Err(Error::Config(
            "flux-surface scans ordered chains; set coupling.sigma = 0 and onsite.style = uniform"
                .into(),
        ));
    }
    let f_grid = [0.25, 0.5, 1.0, 2.0, 4.0];
    let gamma_grid = [0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 40.0, 80.0];
    let policy = NumericPolicy::default();
    let surface = man.stage("scan", |_| {
        flux_coupling_scan(
            cfg.length,
            cfg.onsite_omega0,
            &f_grid,
            &gamma_grid,
            cfg.bath_cutoff,
            cfg.bath_ta,
            cfg.bath_tb,
            &policy,
        )
    })?;
    let mut table = Table::new(&["f", "gamma", "J"]);
    for (i, &f) in surface.f_grid.iter().enumerate() {
        for (j, &g) in surface.gamma_grid.iter().enumerate() {
            table.push(vec![Cell::Float(f), Cell::Float(g), Cell::Float(surface.flux[(i, j)])]);
        }
    }
    for (i, &f) in surface.f_grid.iter().enumerate() {
        man.metrics.insert(format!("gamma_max[f={f}]"), surface.gamma_max[i]);
    }
    man.emit_table(out, "flux_surface.csv", &table)
}

fn conductivity_verb(man: &mut RunManifest, cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.chain()?;
    let grid = log_grid(0.02, 10.0, 25);
    let policy = NumericPolicy::default();
    let points = man.stage("scan", |_| {
        conductivity_scan(&spec, cfg.bath_gamma, cfg.bath_cutoff, &grid, 0.01, &policy)
    })?;
    let mut table = Table::new(&["Tm", "Gth"]);
    for p in &points {
        table.push(vec![Cell::Float(p.t_mean), Cell::Float(p.conductivity)]);
    }
    let peak = points.iter().map(|p| p.conductivity).fold(f64::NAN, f64::max);
    man.metrics.insert("Gth_max".into(), peak);
    man.emit_table(out, "conductivity.csv", &table)
}

fn occupations_verb(man: &mut RunManifest, cfg: &RunConfig, out: &Path) -> Result<()> {
    let bath = cfg.bath()?;
    let policy = NumericPolicy::default();
    let mut table = Table::new(&["mode", "Omega_eff", "n"]);
    if cfg.coupling_sigma > 0.0 {
        let pooled = man.stage("ensemble", |_| {
            ensemble::occupation_ensemble(
                &cfg.disorder()?,
                cfg.length,
                cfg.onsite_omega0,
                &bath,
                24,
                cfg.seed,
                &policy,
            )
        })?;
        for (row, point) in pooled.points.iter().enumerate() {
            table.push(vec![
                Cell::Int((row + 1) as i64),
                Cell::Float(point.omega),
                Cell::Float(point.occupation),
            ]);
        }
        man.rejections += pooled.resamples as u64;
        man.metrics.insert("T_fit".into(), pooled.t_fit.mean);
        man.metrics.insert("T_fit_stderr".into(), pooled.t_fit.stderr);
    } else {
        let spec = cfg.chain()?;
        let modes = man.stage("solve", |_| {
            let warm = StationaryState::solve(&spec, &bath, &policy)?;
            let ground = StationaryState::ground(&spec, &bath, &policy)?;
            effective_frequencies_and_occupations(&warm.mode, &ground.mode, spec.mass)
        })?;
        for i in 0..cfg.length {
            table.push(vec![
                Cell::Int((i + 1) as i64),
                Cell::Float(modes.omega_eff[i]),
                Cell::Float(modes.occupation[i]),
            ]);
        }
        man.metrics.insert("T_fit".into(), modes.t_fit);
    }
    man.emit_table(out, "occupations.csv", &table)
}

fn localization_verb(man: &mut RunManifest, cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.chain()?;
    let policy = NumericPolicy::default();
    let report = man.stage("modes", |_| {
        let c = build_coupling_matrix(&spec, &policy)?;
        Ok(localization(&diagonalize(&c, &spec, &policy)?))
    })?;
    let mut table = Table::new(&["mode_index", "Omega", "xi"]);
    for i in 0..report.frequencies.len() {
        table.push(vec![
            Cell::Int((i + 1) as i64),
            Cell::Float(report.frequencies[i]),
            Cell::Float(report.xi[i]),
        ]);
    }
    man.emit_table(out, "localization.csv", &table)
}

fn negativity_verb(man: &mut RunManifest, cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.chain()?;
    let policy = NumericPolicy::default();
    let grid = log_grid(0.15, 3.0, 14);
    let cuts: Vec<usize> = (1..cfg.length).collect();
    let points = man.stage("scan", |_| {
        negativity_temperature_scan(
            &spec,
            cfg.bath_gamma,
            cfg.bath_cutoff,
            &grid,
            0.1,
            &cuts,
            &policy,
        )
    })?;
    let mut table = Table::new(&["Tm", "cut", "N", "Gth"]);
    for point in &points {
        for (ci, &cut) in cuts.iter().enumerate() {
            table.push(vec![
                Cell::Float(point.t_mean),
                Cell::Int(cut as i64),
                Cell::Float(point.negativity[ci]),
                Cell::Float(point.conductivity),
            ]);
        }
    }
    man.emit_table(out, "negativity.csv", &table)
}

fn transient_verb(man: &mut RunManifest, cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.chain()?;
    let bath = cfg.bath()?;
    let policy = NumericPolicy::default();
    let basis = diagonalize(&build_coupling_matrix(&spec, &policy)?, &spec, &policy)?;
    let resp = crate::response::response_for_chain(&basis, &bath, spec.mass, &policy)?;
    let kernels = BathKernels::quantum(&bath);

    // Horizons sized so the slowest pole has decayed well past 1e-6:
    // equal-time deviations relax at twice the pole rate, lagged
    // correlations at the rate itself.
    let slowest = resp.poles.iter().map(|p| -p.re).fold(f64::INFINITY, f64::min);
    let depth = (1e7f64).ln();
    let horizon = (0.5 * depth / slowest).clamp(50.0, 2000.0);
    let lag_horizon = (depth / slowest).clamp(50.0, 4000.0);

    // Switch-on relaxation from an isolated thermal chain at the mean bath
    // temperature.
    let t_init = 0.5 * (cfg.bath_ta + cfg.bath_tb);
    let initial = CorrelationMatrices::thermal_isolated(&basis, spec.mass, t_init);
    let mut times = vec![0.0];
    times.extend(log_grid(0.25, horizon, 28));
    let sets = man.stage("relaxation", |_| {
        transient_correlations(&resp, &kernels, spec.mass, &initial, &times, &policy)
    })?;
    let mut table = Table::new(&["t", "site", "P2"]);
    for (set, &t) in sets.iter().zip(&times) {
        let real = to_real_space(set, &basis)?;
        for s in 0..cfg.length {
            table.push(vec![
                Cell::Float(t),
                Cell::Int((s + 1) as i64),
                Cell::Float(real.qq[(s, s)]),
            ]);
        }
    }
    man.emit_table(out, "transient.csv", &table)?;

    // Stationary time-shifted autocorrelations.
    let mut taus = vec![0.0];
    taus.extend(log_grid(0.25, lag_horizon, 24));
    let lagged = man.stage("autocorrelation", |_| {
        time_shifted_stationary(&resp, &kernels, spec.mass, &taus, &policy)
    })?;
    let mut lag_table = Table::new(&["tau", "site", "XX", "PP"]);
    for (set, &tau) in lagged.iter().zip(&taus) {
        let real = to_real_space(set, &basis)?;
        for s in 0..cfg.length {
            lag_table.push(vec![
                Cell::Float(tau),
                Cell::Int((s + 1) as i64),
                Cell::Float(real.yy[(s, s)]),
                Cell::Float(real.qq[(s, s)]),
            ]);
        }
    }
    man.emit_table(out, "autocorrelation.csv", &lag_table)
}

fn verify_verb(man: &mut RunManifest, cfg: &RunConfig, _out: &Path) -> Result<()> {
    let spec = cfg.chain()?;
    let bath = cfg.bath()?;
    let policy = NumericPolicy::default();

    man.stage("fourier-quantum", |man| {
        let state = StationaryState::solve(&spec, &bath, &policy)?;
        let oracle = fourier_stationary_correlations(&spec, &bath)?;
        let dev = correlation_deviation(&state.site, &oracle);
        man.metrics.insert("fourier_quantum_dev".into(), dev);
        if dev > FOURIER_AGREEMENT_TOL {
            return Err(Error::OracleDisagreement {
                context: "frequency-domain oracle vs pipeline, quantum kernel".into(),
                dev,
                tol: FOURIER_AGREEMENT_TOL,
            });
        }
        Ok(())
    })?;

    // The sampled oracle is classical, so this leg runs hot regardless of
    // the configured temperatures.
    let hot = BathConfig::new(cfg.bath_gamma, cfg.bath_cutoff, 100.0, 60.0)?;
    let exact = man.stage("fourier-classical", |man| {
        let state = StationaryState::solve_classical(&spec, &hot, &policy)?;
        let oracle = fourier_stationary_correlations_classical(&spec, &hot)?;
        let dev = correlation_deviation(&state.site, &oracle);
        man.metrics.insert("fourier_classical_dev".into(), dev);
        if dev > FOURIER_AGREEMENT_TOL {
            return Err(Error::OracleDisagreement {
                context: "frequency-domain oracle vs pipeline, classical kernel".into(),
                dev,
                tol: FOURIER_AGREEMENT_TOL,
            });
        }
        Ok(state)
    })?;

    man.stage("explicit-bath", |man| {
        let config = ExplicitBathConfig {
            modes_per_bath: 600,
            spacing: 0.05,
            horizon: 110.0,
            samples: 48,
            chain_temperature: None,
        };
        let run = classical_explicit_bath(&spec, &hot, &config, cfg.seed)?;
        let kinetic_dev = (0..spec.length)
            .map(|i| {
                let exact_k = exact.site.qq[(i, i)];
                ((run.correlations.qq[(i, i)] - exact_k) / exact_k).abs()
            })
            .fold(0.0f64, f64::max);
        man.metrics.insert("explicit_kinetic_dev".into(), kinetic_dev);
        if kinetic_dev > 0.08 {
            return Err(Error::OracleDisagreement {
                context: "explicit-bath kinetic energies vs classical pipeline".into(),
                dev: kinetic_dev,
                tol: 0.08,
            });
        }
        let exact_flux = mean_bond_flux(&exact.site, &spec);
        let (est, err) = run.flux_estimate();
        man.metrics.insert("explicit_flux_dev".into(), (est - exact_flux).abs());
        man.metrics.insert("explicit_flux_stderr".into(), err);
        let gate = (5.0 * err).max(0.05 * exact_flux.abs());
        if (est - exact_flux).abs() > gate {
            return Err(Error::OracleDisagreement {
                context: "explicit-bath flux vs classical pipeline".into(),
                dev: (est - exact_flux).abs(),
                tol: gate,
            });
        }
        Ok(())
    })?;
    man.metrics.insert("verify_ok".into(), 1.0);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in_and_file_values_override() {
        let cfg = RunConfig::build(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.length, 5);

        let text = "length = 20\nbath.Ta = 0.5   # hot side\n\ncoupling.symmetric = true\n";
        let cfg = RunConfig::build(Some(text), &[]).unwrap();
        assert_eq!(cfg.length, 20);
        assert_eq!(cfg.bath_ta, 0.5);
        assert!(cfg.coupling_symmetric);
        assert_eq!(cfg.bath_tb, 2.0, "unset keys keep their defaults");
    }

    #[test]
    fn unknown_keys_are_listed_not_ignored() {
        let err = RunConfig::build(Some("lenght = 5\nbath.gamm = 1\n"), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lenght") && msg.contains("bath.gamm"), "{msg}");
        assert_eq!(err.class(), crate::error::ErrorClass::Validation);
    }

    #[test]
    fn repeated_keys_and_malformed_lines_are_rejected() {
        let err = RunConfig::build(Some("seed = 1\nseed = 2\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        let err = RunConfig::build(Some("just some words\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn negative_gamma_is_named_in_the_error() {
        let err = RunConfig::build(Some("bath.gamma = -2.0\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("bath.gamma"), "{err}");
        assert_eq!(err.class(), crate::error::ErrorClass::Validation);
    }

    #[test]
    fn environment_overrides_map_dotted_keys_case_insensitively() {
        let vars = vec![
            ("QLCHAIN_BATH_TA".to_string(), "7.5".to_string()),
            ("QLCHAIN_LENGTH".to_string(), "8".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let overrides = env_overrides(vars.into_iter()).unwrap();
        let cfg = RunConfig::build(Some("bath.Ta = 1.0\n"), &overrides).unwrap();
        assert_eq!(cfg.bath_ta, 7.5, "environment beats the file");
        assert_eq!(cfg.length, 8);

        let bad = vec![("QLCHAIN_WIDTH".to_string(), "1".to_string())];
        assert!(env_overrides(bad.into_iter()).is_err());
    }

    #[test]
    fn ends_only_pinning_frees_the_interior() {
        let text = "onsite.style = ends-only\nlength = 6\n";
        let cfg = RunConfig::build(Some(text), &[]).unwrap();
        let spec = cfg.chain().unwrap();
        assert_eq!(spec.onsite_freqs[0], 1.0);
        assert!(spec.onsite_freqs[1..5].iter().all(|&w| w == 0.0));
        assert_eq!(spec.onsite_freqs[5], 1.0);
    }

    #[test]
    fn disordered_chain_draw_is_seed_deterministic() {
        let text = "coupling.sigma = 0.2\nlength = 9\nseed = 7\n";
        let cfg = RunConfig::build(Some(text), &[]).unwrap();
        let a = cfg.chain().unwrap();
        let b = cfg.chain().unwrap();
        assert_eq!(a.couplings, b.couplings);
        assert!(a.couplings.windows(2).any(|w| w[0] != w[1]), "couplings vary");
    }

    #[test]
    fn verbs_parse_by_name_and_reject_junk() {
        for verb in Verb::ALL {
            assert_eq!(Verb::parse(verb.name()).unwrap(), verb);
        }
        assert!(Verb::parse("plot").is_err());
    }
}
