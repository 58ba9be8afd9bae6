//! End-to-end checks of the verb drivers: artifact layout, manifest
//! bookkeeping, and checkpoint/resume behaviour on the ensemble scan.

use std::fs;
use std::path::Path;

use qlchain::pipeline::{self, RunConfig, Verb};
use qlchain::report::{sha256_hex, RunManifest};

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

fn columns(line: &str) -> Vec<f64> {
    line.split(',').map(|c| c.parse().unwrap()).collect()
}

#[test]
fn ordered_profile_emits_a_manifest_backed_csv() {
    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let man = pipeline::run(Verb::Profile, &cfg, dir.path(), false).unwrap();

    let csv = read(dir.path(), "profile.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "site,E,omega_eff,T_R");
    assert_eq!(csv.lines().count(), 1 + cfg.length);

    let rec = man.outputs.iter().find(|o| o.file == "profile.csv").unwrap();
    assert_eq!(rec.sha256, sha256_hex(csv.as_bytes()));
    assert!(man.metrics.contains_key("J"));
    assert!(man.metrics.contains_key("Gth"));
    assert!(man.finished_unix.is_some());
    assert!(!man.stages.is_empty());

    let loaded = RunManifest::load(dir.path()).unwrap();
    assert_eq!(loaded.outputs, man.outputs);

    // Interior local temperatures sit strictly between the two baths.
    for line in csv.lines().skip(2).take(cfg.length - 2) {
        let cols = columns(line);
        assert!(cols[3] > cfg.bath_tb && cols[3] < cfg.bath_ta, "{line}");
    }
}

#[test]
fn localization_lists_every_mode_in_frequency_order() {
    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().unwrap();
    pipeline::run(Verb::Localization, &cfg, dir.path(), false).unwrap();

    let csv = read(dir.path(), "localization.csv");
    assert_eq!(csv.lines().next().unwrap(), "mode_index,Omega,xi");
    let rows: Vec<Vec<f64>> = csv.lines().skip(1).map(columns).collect();
    assert_eq!(rows.len(), cfg.length);
    for pair in rows.windows(2) {
        assert!(pair[1][1] >= pair[0][1], "mode frequencies ascend");
    }
    for row in &rows {
        assert!(row[2] > 0.0 && row[2] <= cfg.length as f64);
    }
}

#[test]
fn ordered_occupations_report_positive_modes_and_a_fit() {
    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let man = pipeline::run(Verb::Occupations, &cfg, dir.path(), false).unwrap();

    let csv = read(dir.path(), "occupations.csv");
    assert_eq!(csv.lines().next().unwrap(), "mode,Omega_eff,n");
    let rows: Vec<Vec<f64>> = csv.lines().skip(1).map(columns).collect();
    assert_eq!(rows.len(), cfg.length);
    for row in &rows {
        assert!(row[1] > 0.0 && row[2] > 0.0, "{row:?}");
    }
    let t_fit = man.metrics["T_fit"];
    assert!(t_fit > cfg.bath_tb && t_fit < cfg.bath_ta);
}

#[test]
fn conductivity_scan_climbs_from_suppression_to_a_plateau() {
    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let man = pipeline::run(Verb::Conductivity, &cfg, dir.path(), false).unwrap();

    let csv = read(dir.path(), "conductivity.csv");
    assert_eq!(csv.lines().next().unwrap(), "Tm,Gth");
    let rows: Vec<Vec<f64>> = csv.lines().skip(1).map(columns).collect();
    assert_eq!(rows.len(), 25);
    let peak = man.metrics["Gth_max"];
    assert!(peak > 10.0 * rows.first().unwrap()[1], "quantum suppression at low temperature");
    let tail = rows.last().unwrap()[1];
    assert!(tail > 0.8 * peak, "saturates at the high-temperature end");
}

#[test]
fn negativity_scan_covers_every_cut_at_every_temperature() {
    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().unwrap();
    pipeline::run(Verb::Negativity, &cfg, dir.path(), false).unwrap();

    let csv = read(dir.path(), "negativity.csv");
    assert_eq!(csv.lines().next().unwrap(), "Tm,cut,N,Gth");
    let rows: Vec<Vec<f64>> = csv.lines().skip(1).map(columns).collect();
    assert_eq!(rows.len(), 14 * (cfg.length - 1));
    assert!(rows.iter().all(|r| r[2] >= 0.0));
    // Entanglement dies off at the hot end of the sweep.
    let hottest = rows.iter().map(|r| r[0]).fold(f64::NAN, f64::max);
    for row in rows.iter().filter(|r| r[0] == hottest) {
        assert!(row[2] < 1e-6, "{row:?}");
    }
}

#[test]
fn transient_relaxes_onto_the_stationary_autocorrelation() {
    let mut cfg = RunConfig::default();
    cfg.length = 4;
    cfg.bath_gamma = 0.5;
    let dir = tempfile::tempdir().unwrap();
    pipeline::run(Verb::Transient, &cfg, dir.path(), false).unwrap();

    let relax = read(dir.path(), "transient.csv");
    assert_eq!(relax.lines().next().unwrap(), "t,site,P2");
    let rows: Vec<Vec<f64>> = relax.lines().skip(1).map(columns).collect();
    assert_eq!(rows.len(), 29 * cfg.length);

    let lags = read(dir.path(), "autocorrelation.csv");
    assert_eq!(lags.lines().next().unwrap(), "tau,site,XX,PP");
    let lag_rows: Vec<Vec<f64>> = lags.lines().skip(1).map(columns).collect();
    assert_eq!(lag_rows.len(), 25 * cfg.length);

    // The switch-on momentum spread converges to the equal-time stationary
    // value, which the lag table holds at tau = 0.
    let t_max = rows.iter().map(|r| r[0]).fold(f64::NAN, f64::max);
    let tau_max = lag_rows.iter().map(|r| r[0]).fold(f64::NAN, f64::max);
    for s in 1..=cfg.length {
        let late = rows.iter().find(|r| r[0] == t_max && r[1] == s as f64).unwrap()[2];
        let at_zero = lag_rows.iter().find(|r| r[0] == 0.0 && r[1] == s as f64).unwrap();
        let (xx0, pp0) = (at_zero[2], at_zero[3]);
        assert!((late - pp0).abs() / pp0 < 1e-5, "site {s}: {late} vs {pp0}");
        // Long-lag autocorrelations decohere relative to their equal-time
        // values.
        let far = lag_rows.iter().find(|r| r[0] == tau_max && r[1] == s as f64).unwrap();
        assert!(far[2].abs() / xx0 < 1e-5 && far[3].abs() / pp0 < 1e-5, "{far:?}");
    }
}

#[test]
fn flux_length_scan_resumes_without_changing_bytes() {
    let mut cfg = RunConfig::default();
    cfg.coupling_sigma = 0.15;
    cfg.seed = 11;
    let lengths = [4usize, 5, 6];
    let echo = cfg.echo();

    // Reference: the whole scan in one sitting.
    let dir_a = tempfile::tempdir().unwrap();
    let mut man_a = RunManifest::new("flux-length", cfg.seed, echo.clone());
    pipeline::flux_length_run(&mut man_a, &cfg, dir_a.path(), &lengths, 2).unwrap();
    man_a.finish();
    man_a.save(dir_a.path()).unwrap();
    let reference = read(dir_a.path(), "flux_length.csv");
    assert_eq!(reference.lines().next().unwrap(), "l,J_mean,J_std,k_realizations");
    assert_eq!(man_a.completed.len(), 6);

    // Interrupted run: only the first realization of each length.
    let dir_b = tempfile::tempdir().unwrap();
    let mut man_b = RunManifest::new("flux-length", cfg.seed, echo.clone());
    pipeline::flux_length_run(&mut man_b, &cfg, dir_b.path(), &lengths, 1).unwrap();
    man_b.save(dir_b.path()).unwrap();
    assert_eq!(man_b.completed.len(), 3);

    // Resume finishes the missing half and lands on identical bytes.
    let mut resumed = RunManifest::load(dir_b.path()).unwrap();
    resumed.resume_compatible("flux-length", cfg.seed, &echo).unwrap();
    pipeline::flux_length_run(&mut resumed, &cfg, dir_b.path(), &lengths, 2).unwrap();
    resumed.finish();
    resumed.save(dir_b.path()).unwrap();
    assert_eq!(read(dir_b.path(), "flux_length.csv"), reference);
    assert_eq!(resumed.completed, man_a.completed);

    // Resuming a finished run recomputes nothing and leaves the bytes alone.
    let before = RunManifest::load(dir_b.path()).unwrap();
    let mut again = RunManifest::load(dir_b.path()).unwrap();
    again.resume_compatible("flux-length", cfg.seed, &echo).unwrap();
    pipeline::flux_length_run(&mut again, &cfg, dir_b.path(), &lengths, 2).unwrap();
    again.save(dir_b.path()).unwrap();
    assert_eq!(again.completed, before.completed);
    assert_eq!(read(dir_b.path(), "flux_length.csv"), reference);

    // A manifest from a different configuration refuses to resume.
    let mut other = cfg.clone();
    other.bath_ta = 9.0;
    let stale = RunManifest::load(dir_b.path()).unwrap();
    assert!(stale.resume_compatible("flux-length", other.seed, &other.echo()).is_err());
    let wrong_verb = RunManifest::load(dir_b.path()).unwrap();
    assert!(wrong_verb.resume_compatible("profile", cfg.seed, &echo).is_err());
}

#[test]
fn ordered_flux_length_is_flat_within_a_percent() {
    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let mut man = RunManifest::new("flux-length", cfg.seed, cfg.echo());
    pipeline::flux_length_run(&mut man, &cfg, dir.path(), &[5, 8, 12], 1).unwrap();
    man.finish();
    man.save(dir.path()).unwrap();

    let rows: Vec<Vec<f64>> = read(dir.path(), "flux_length.csv").lines().skip(1).map(columns).collect();
    let fluxes: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let mean = fluxes.iter().sum::<f64>() / fluxes.len() as f64;
    for &j in &fluxes {
        assert!((j - mean).abs() / mean < 0.01, "ordered chains are ballistic: {fluxes:?}");
    }
}
