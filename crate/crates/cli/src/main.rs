use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use meanstop_cli::output::{manifest, write_all};
use meanstop_cli::run::{base_dir, execute, Context, Overrides, RunError};
use meanstop_cli::scenario::{Kind, Scenario};

/// Keep the schema number in step with `scenario::SCHEMA_VERSION`.
const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (scenario schema 1)");

/// Runs mean field optimal stopping experiments described by JSON scenarios.
#[derive(Debug, Parser)]
#[command(name = "meanstop", version = VERSION)]
struct Cli {
    /// Pipeline to run.
    kind: Kind,
    /// Scenario file.
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `numerics.particles`
    #[arg(long)]
    particles: Option<usize>,
    /// Overrides `numerics.steps`
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory; defaults to the scenario's `output.dir` or `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Dual search grid as `LO:HI:N`.
    #[arg(long, value_parser = parse_alpha_range, allow_hyphen_values = true)]
    alpha_range: Option<(f64, f64, usize)>,
}

fn parse_alpha_range(s: &str) -> Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else {
        return Err(format!("expected LO:HI:N, got '{s}'"));
    };
    let lo = lo.parse::<f64>().map_err(|e| format!("LO: {e}"))?;
    let hi = hi.parse::<f64>().map_err(|e| format!("HI: {e}"))?;
    let n = n.parse::<usize>().map_err(|e| format!("N: {e}"))?;
    Ok((lo, hi, n))
}

fn run(cli: Cli) -> Result<(), RunError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RunError::Validation(format!("cannot start {n} threads: {e}")))?;
    }
    let (scenario, bytes) =
        Scenario::load(&cli.scenario).map_err(|e| RunError::Validation(e.to_string()))?;
    let overrides = Overrides {
        seed: cli.seed,
        particles: cli.particles,
        steps: cli.steps,
        alpha_range: cli.alpha_range,
    };
    let ctx = Context {
        kind: cli.kind,
        scenario: &scenario,
        base_dir: base_dir(&cli.scenario),
        overrides: &overrides,
    };
    let mut artifacts = execute(&ctx)?;
    let seed = overrides.seed.or(scenario.seed);
    artifacts.push(manifest(cli.kind, &bytes, seed, &overrides, &artifacts));
    let out = cli
        .out
        .or_else(|| scenario.output.as_ref().map(|o| ctx.base_dir.join(&o.dir)))
        .unwrap_or_else(|| PathBuf::from("out"));
    write_all(&out, &artifacts)?;
    for a in &artifacts {
        println!("{}", out.join(&a.name).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("meanstop: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
