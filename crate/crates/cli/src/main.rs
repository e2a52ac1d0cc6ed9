use std::path::PathBuf;
use std::process::ExitCode;

use acgrac::experiment::{self, ExperimentConfig, Variant};
use acgrac::{verify, Error, Result};
use clap::{Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "acgrac", version, about = "Adaptive GRAC atomistic/continuum coupling experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the adaptive loop for one variant and write trace, summary and mesh files.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// l1s1, l1s0, l2s1 or l2s0; overrides the config.
        #[arg(long)]
        variant: Option<String>,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve (or load from the cache) the full atomistic reference.
    Reference {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the patch-test and weak-form self-checks.
    Verify {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Print the checks as JSON.
        #[arg(long)]
        json: bool,
    },
}

fn load(config: &PathBuf, variant: Option<&str>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(config)?;
    if let Some(v) = variant {
        c = c.with_variant(Variant::parse(v)?);
    }
    if let Some(o) = out {
        c.out_dir = o;
    }
    Ok(c)
}

fn execute(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Run { config, variant, out } => {
            let c = load(&config, variant.as_deref(), out)?;
            info!("effective configuration:\n{}", experiment::describe(&c));
            let o = experiment::run_experiment(&c)?;
            let last = o.trace.records.last().expect("at least one step");
            println!(
                "{} {}: stop={} steps={} N={} R={} rho={:.6e} h1_err={:.6e}",
                c.problem.name(),
                c.variant.tag(),
                o.trace.stop.name(),
                o.trace.records.len(),
                last.n,
                last.r,
                last.rho,
                last.h1_err
            );
            println!("trace: {}", o.csv.display());
            println!("summary: {}", o.summary.display());
            Ok(true)
        }
        Cmd::Reference { config } => {
            let c = load(&config, None, None)?;
            let (_, r) = experiment::reference_solution(&c)?;
            println!("{} reference: R={} sites={} energy={:.16e}", c.problem.name(), r.radius, r.u.len(), r.energy);
            Ok(true)
        }
        Cmd::Verify { seed, json } => {
            let checks = verify::run_all(seed)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&checks).map_err(|e| Error::InvalidConfig(e.to_string()))?);
            } else {
                for c in &checks {
                    println!(
                        "{} {}: {:.3e} (tol {:.0e}, {} samples, {:.1}s)",
                        if c.passed() { "PASS" } else { "FAIL" },
                        c.name,
                        c.value,
                        c.tol,
                        c.samples,
                        c.seconds
                    );
                }
            }
            Ok(checks.iter().all(|c| c.passed()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(2)
        }
    }
}
