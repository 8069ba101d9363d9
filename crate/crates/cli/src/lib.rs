//! Scenario runner: config files, builtin experiments, reports and field dumps.

pub mod config;
pub mod report;
pub mod run;
pub mod scenarios;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde_json::Value;

use config::Scenario;
use run::Status;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

/// A finished scenario.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub status: Status,
    pub report: Value,
    pub checks: Vec<report::Check>,
    pub files: Vec<(String, Vec<u8>)>,
    pub elapsed: Duration,
}

impl Outcome {
    pub fn expectations_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

pub fn execute(sc: &Scenario) -> Outcome {
    let start = Instant::now();
    let out = run::run_scenario(sc);
    let checks = report::check_all(&sc.expected, &out.metrics);
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let report = report::build(sc, &out, &checks, ts);
    Outcome { name: sc.name.clone(), status: out.status, report, checks, files: out.files, elapsed: start.elapsed() }
}

/// Runs scenarios on `jobs` worker threads; results keep the input order.
pub fn execute_all(scenarios: &[Scenario], jobs: usize) -> Vec<Outcome> {
    let jobs = jobs.clamp(1, scenarios.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Outcome>>> = scenarios.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= scenarios.len() {
                    break;
                }
                let o = execute(&scenarios[i]);
                *slots[i].lock().expect("no poisoned slot") = Some(o);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("no poisoned slot").expect("every slot filled")).collect()
}

/// Writes `report.json` and the field dumps under `out/<name>/`.
pub fn write_outcome(out: &Path, o: &Outcome) -> Result<(), CliError> {
    let dir = out.join(&o.name);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CliError::Io { path, source }
    };
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    let mut json = serde_json::to_vec_pretty(&o.report).expect("json values serialise");
    json.push(b'\n');
    let p = dir.join("report.json");
    std::fs::write(&p, json).map_err(io(&p))?;
    for (name, bytes) in &o.files {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(io(&p))?;
    }
    Ok(())
}

/// Solver failures outrank expectation mismatches, which only count under `check`.
pub fn exit_code(outcomes: &[Outcome], check: bool) -> i32 {
    if outcomes.iter().any(|o| o.status == Status::SolverError) {
        EXIT_SOLVER
    } else if check && outcomes.iter().any(|o| !o.expectations_pass()) {
        EXIT_MISMATCH
    } else {
        EXIT_OK
    }
}

/// Loads scenarios from `config` (or the builtins) and keeps those named in `only`.
pub fn load(config: Option<&Path>, only: &[String], seed: Option<u64>) -> Result<Vec<Scenario>, CliError> {
    let (file, dir) = match config {
        Some(p) => (config::parse_file(p)?, config::config_dir(p)),
        None => (scenarios::builtin_file(), PathBuf::from(".")),
    };
    for name in only {
        if !file.scenarios.iter().any(|s| &s.name == name) {
            return Err(CliError::Config(format!("no scenario named {name:?}")));
        }
    }
    let file = config::ConfigFile {
        seed: file.seed,
        scenarios: file.scenarios.into_iter().filter(|s| only.is_empty() || only.contains(&s.name)).collect(),
    };
    config::resolve_all(&file, &dir, seed)
}
