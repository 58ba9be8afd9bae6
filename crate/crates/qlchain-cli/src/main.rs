//! Command-line driver: one verb per invocation, artifacts plus a manifest
//! into --out. Exit codes separate configuration mistakes (2), numerical
//! failures (3), and oracle disagreements (4).

use std::path::PathBuf;
use std::process::exit;

use clap::Parser;
use qlchain::error::ErrorClass;
use qlchain::pipeline::{self, RunConfig, Verb};
use qlchain::report::RunManifest;

#[derive(Parser)]
#[command(
    name = "qlchain",
    version,
    about = "Steady-state and transient heat transport in damped harmonic chains",
    after_help = "Verbs: profile, flux-length, flux-surface, conductivity, occupations,\n       localization, negativity, transient, verify.\n\nConfiguration values resolve flag > QLCHAIN_* environment > file > default."
)]
struct Cli {
    /// What to compute.
    verb: String,

    /// Configuration file, flat `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Directory for CSV artifacts and the run manifest.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads for ensemble realizations (default: all cores).
    #[arg(long, value_name = "N")]
    workers: Option<usize>,

    /// Reuse completed work recorded in an existing manifest in --out.
    #[arg(long)]
    resume: bool,
}

fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Validation | ErrorClass::Io => 2,
        ErrorClass::Numeric => 3,
        ErrorClass::OracleDisagreement => 4,
    }
}

fn fail(err: qlchain::Error) -> ! {
    eprintln!("qlchain: {err}");
    exit(exit_code(err.class()));
}

fn report(verb: Verb, man: &RunManifest) {
    for s in &man.stages {
        println!("stage {:<18} {:9.2}s", s.stage, s.seconds);
    }
    if man.rejections > 0 {
        println!("rejected draws      {}", man.rejections);
    }
    for o in &man.outputs {
        println!("wrote {}  sha256:{}", o.file, &o.sha256[..12]);
    }
    if verb == Verb::Verify {
        let dev = |k: &str| man.metrics.get(k).copied().unwrap_or(f64::NAN);
        println!(
            "verify: frequency-domain oracle (quantum)    ok  dev {:.3e}",
            dev("fourier_quantum_dev")
        );
        println!(
            "verify: frequency-domain oracle (classical)  ok  dev {:.3e}",
            dev("fourier_classical_dev")
        );
        println!(
            "verify: sampled explicit-bath oracle         ok  dev {:.3e} (flux {:.3e} +- {:.3e})",
            dev("explicit_kinetic_dev"),
            dev("explicit_flux_dev"),
            dev("explicit_flux_stderr")
        );
    } else {
        for (k, v) in &man.metrics {
            println!("metric {k} = {v:.6}");
        }
    }
}

fn main() {
    let cli = Cli::parse();

    let verb = Verb::parse(&cli.verb).unwrap_or_else(|e| fail(e));

    let file_text = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => Some(text),
            Err(e) => fail(qlchain::Error::Config(format!(
                "cannot read {}: {e}",
                path.display()
            ))),
        },
        None => None,
    };

    let mut overrides = pipeline::env_overrides(std::env::vars()).unwrap_or_else(|e| fail(e));
    if let Some(seed) = cli.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    let cfg = RunConfig::build(file_text.as_deref(), &overrides).unwrap_or_else(|e| fail(e));

    if let Some(n) = cli.workers {
        if n == 0 {
            fail(qlchain::Error::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("worker pool configured once at startup");
    }

    match pipeline::run(verb, &cfg, &cli.out, cli.resume) {
        Ok(man) => report(verb, &man),
        Err(e) => fail(e),
    }
}
