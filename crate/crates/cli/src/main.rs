use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lingrow_cli::{execute_all, exit_code, load, write_outcome, EXIT_CONFIG, EXIT_SOLVER};

/// Runs linear-growth variational scenarios and writes reports.
#[derive(Debug, Parser)]
#[command(name = "lingrow", version)]
struct Args {
    /// TOML scenario file; the builtin catalogue when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; one subdirectory per scenario.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run only this scenario (repeatable).
    #[arg(long = "scenario")]
    scenarios: Vec<String>,
    /// Worker threads for independent scenarios.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Overrides every scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// List scenarios and exit.
    #[arg(long)]
    list: bool,
    /// Exit with status 1 when any expectation fails.
    #[arg(long)]
    check: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let scenarios = match load(args.config.as_deref(), &args.scenarios, args.seed) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    if args.list {
        for s in &scenarios {
            println!("{:<24} {:<15} {}", s.name, s.kind.as_str(), s.spec.integrand.key());
        }
        return ExitCode::SUCCESS;
    }
    let outcomes = execute_all(&scenarios, args.jobs);
    let mut io_failed = false;
    for o in &outcomes {
        if let Err(e) = write_outcome(&args.out, o) {
            eprintln!("{e}");
            io_failed = true;
        }
        let failed: Vec<&str> = o.checks.iter().filter(|c| !c.pass).map(|c| c.metric.as_str()).collect();
        let exp = if o.checks.is_empty() {
            "no expectations".to_string()
        } else if failed.is_empty() {
            format!("{} expectations pass", o.checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        };
        println!("{:<24} {:<13} {exp} ({:.2}s)", o.name, o.status.as_str(), o.elapsed.as_secs_f64());
    }
    let code = if io_failed { EXIT_SOLVER } else { exit_code(&outcomes, args.check) };
    ExitCode::from(code as u8)
}
