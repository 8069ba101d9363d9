//! TOML scenario files and their resolution into runnable scenarios.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use lingrow_core::domain::{Grid, Mask};
use lingrow_core::integrand::RadialIntegrand;
use lingrow_core::solver::{ContinuationSchedule, NewtonConfig, ProblemSpec};
use serde::Deserialize;

use crate::scenarios;
use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    #[serde(default, rename = "scenario")]
    pub scenarios: Vec<ScenarioConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    /// Viscosity continuation to the end of the schedule.
    Continuation,
    /// Continuation with capped Newton budget and an energy floor; no convergence claim.
    Capped,
    /// Curl and reconstruction diagnostics on a prescribed field.
    FieldAnalysis,
    /// Random relaxed-energy samples and a brute-force infimum in 1D.
    RelaxedBv,
}

impl Kind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Kind::Continuation => "continuation",
            Kind::Capped => "capped",
            Kind::FieldAnalysis => "field_analysis",
            Kind::RelaxedBv => "relaxed_bv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum LoadConfig {
    Constant(Vec<f64>),
    Modulated { base: Vec<f64>, modulation: String, amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ScheduleConfig {
    List(Vec<f64>),
    Powers { powers_of_four: [u32; 2] },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonToml {
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

/// One target in an `expected` block.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub value: Option<f64>,
    pub tol: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub equals: Option<String>,
    /// Where the target comes from.
    pub basis: String,
}

/// A `[[scenario]]` table. Unset fields fall back to the builtin named by `base`
/// (or by `name` when it is a builtin).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub base: Option<String>,
    pub kind: Option<Kind>,
    pub integrand: Option<String>,
    /// `[a, b]` or `[x0, x1, y0, y1]`.
    pub extent: Option<Vec<f64>>,
    pub cells: Option<Vec<usize>>,
    pub components: Option<usize>,
    pub mask: Option<String>,
    pub t0: Option<LoadConfig>,
    pub schedule: Option<ScheduleConfig>,
    pub newton: Option<NewtonToml>,
    /// `zero` or `random`.
    pub init: Option<String>,
    pub init_amplitude: Option<f64>,
    pub analyses: Option<Vec<String>>,
    pub seed: Option<u64>,
    /// `vortex`, `shear` or `gradient` for field analysis.
    pub field: Option<String>,
    pub energy_floor: Option<f64>,
    pub samples: Option<usize>,
    pub bruteforce_load: Option<f64>,
    pub expected: Option<BTreeMap<String, Expectation>>,
}

macro_rules! overlay {
    ($top:ident, $base:ident; $($f:ident),*) => {
        $( if $top.$f.is_none() { $top.$f = $base.$f.clone(); } )*
    };
}

impl ScenarioConfig {
    pub(crate) fn overlay(mut self, base: &ScenarioConfig) -> Self {
        overlay!(self, base; kind, integrand, extent, cells, components, mask, t0, schedule, newton,
            init, init_amplitude, analyses, seed, field, energy_floor, samples, bruteforce_load, expected);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analysis {
    Duality,
    Forensics,
    Reconstruction,
    Monitors,
    Uniqueness,
}

impl Analysis {
    fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "duality" => Analysis::Duality,
            "forensics" => Analysis::Forensics,
            "reconstruction" => Analysis::Reconstruction,
            "monitors" => Analysis::Monitors,
            "uniqueness" => Analysis::Uniqueness,
            other => return Err(CliError::Config(format!("unknown analysis {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    /// `(−y, x)/|x|²`, curl-free off the origin with circulation 2π.
    Vortex,
    /// `(0, x)`, constant curl 1.
    Shear,
    /// Gradient of a seeded random potential.
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    Random { amplitude: f64 },
}

/// A fully resolved scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub kind: Kind,
    pub seed: u64,
    pub spec: ProblemSpec,
    pub schedule: ContinuationSchedule,
    pub newton: NewtonConfig,
    pub init: Init,
    pub analyses: Vec<Analysis>,
    pub field: Option<FieldKind>,
    pub energy_floor: Option<f64>,
    pub samples: usize,
    pub bruteforce_load: f64,
    pub expected: BTreeMap<String, Expectation>,
}

impl Scenario {
    pub fn wants(&self, a: Analysis) -> bool {
        self.analyses.contains(&a)
    }
}

pub fn parse_file(path: &Path) -> Result<ConfigFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Resolves every scenario in `file`; relative paths are taken from `dir`.
pub fn resolve_all(file: &ConfigFile, dir: &Path, seed_override: Option<u64>) -> Result<Vec<Scenario>, CliError> {
    let global = seed_override.or(file.seed).unwrap_or(0);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for raw in &file.scenarios {
        if !seen.insert(raw.name.clone()) {
            return Err(CliError::Config(format!("duplicate scenario name {:?}", raw.name)));
        }
        out.push(resolve(raw, dir, global, seed_override.is_some())?);
    }
    Ok(out)
}

/// Stable per-scenario seed: FNV-1a of the name mixed with the run seed.
pub fn derived_seed(name: &str, global: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ global
}

fn rebase(path: &str, dir: &Path) -> String {
    let p = Path::new(path.trim());
    if p.is_absolute() {
        p.display().to_string()
    } else {
        dir.join(p).display().to_string()
    }
}

fn with_dir(key: &str, prefix: &str, dir: &Path) -> String {
    match key.strip_prefix(prefix) {
        Some(rest) => format!("{prefix}{}", rebase(rest, dir)),
        None => key.to_string(),
    }
}

fn bad(name: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("scenario {name:?}: {e}"))
}

pub fn resolve(raw: &ScenarioConfig, dir: &Path, global_seed: u64, seed_forced: bool) -> Result<Scenario, CliError> {
    let name = raw.name.as_str();
    let base_name = raw.base.as_deref().unwrap_or(name);
    let c = match scenarios::builtin(base_name) {
        Some(b) => raw.clone().overlay(&b),
        None if raw.base.is_some() => return Err(CliError::Config(format!("unknown base scenario {base_name:?}"))),
        None => raw.clone(),
    };
    let kind = c.kind.ok_or_else(|| bad(name, "missing kind"))?;

    let integrand_key = with_dir(c.integrand.as_deref().unwrap_or("area"), "tabulated:", dir);
    let integrand = RadialIntegrand::from_key(&integrand_key).map_err(|e| bad(name, e))?;
    let components = c.components.unwrap_or(1);
    let cells = c.cells.clone().ok_or_else(|| bad(name, "missing cells"))?;
    let extent = c.extent.clone().ok_or_else(|| bad(name, "missing extent"))?;
    let grid = match (cells.as_slice(), extent.as_slice()) {
        ([m], [a, b]) => {
            if c.mask.is_some() {
                return Err(bad(name, "a mask needs a 2D grid"));
            }
            Grid::interval(*a, *b, *m, components).map_err(|e| bad(name, e))?
        }
        ([nx, ny], [x0, x1, y0, y1]) => {
            let mask_key = with_dir(c.mask.as_deref().unwrap_or("full"), "file:", dir);
            let mask = Mask::parse(&mask_key).map_err(|e| bad(name, e))?;
            Grid::rectangle((*x0, *x1), (*y0, *y1), *nx, *ny, &mask, components).map_err(|e| bad(name, e))?
        }
        _ => return Err(bad(name, "cells/extent must describe an interval or a rectangle")),
    };

    let load = c.t0.clone().unwrap_or(LoadConfig::Constant(vec![0.0; components * grid.dim()]));
    let t0 = match &load {
        LoadConfig::Constant(v) => {
            check_len(v, components * grid.dim(), name)?;
            grid.cell_field_from_fn(components, grid.dim(), |_| v.clone())
        }
        LoadConfig::Modulated { base, modulation, amplitude } => {
            check_len(base, components * grid.dim(), name)?;
            if modulation != "cos_product" {
                return Err(bad(name, format!("unknown modulation {modulation:?}")));
            }
            let a = *amplitude;
            grid.cell_field_from_fn(components, grid.dim(), |p| {
                let m = 1.0 + a * p.iter().map(|x| (PI * x).cos()).product::<f64>();
                base.iter().map(|b| b * m).collect()
            })
        }
    };
    let spec = ProblemSpec::new(grid, integrand, t0).map_err(|e| bad(name, e))?;

    let schedule = match c.schedule.clone() {
        None => ContinuationSchedule::default(),
        Some(ScheduleConfig::List(ks)) => ContinuationSchedule::new(ks).map_err(|e| bad(name, e))?,
        Some(ScheduleConfig::Powers { powers_of_four: [from, to] }) => {
            if from > to {
                return Err(bad(name, "powers_of_four needs from ≤ to"));
            }
            ContinuationSchedule::new((from..=to).map(|j| 4f64.powi(j as i32)).collect()).map_err(|e| bad(name, e))?
        }
    };

    let mut newton = NewtonConfig::default();
    if let Some(n) = c.newton {
        newton.tol = n.tol.unwrap_or(newton.tol);
        newton.max_iter = n.max_iter.unwrap_or(newton.max_iter);
    }
    if newton.tol.is_nan() || newton.tol <= 0.0 || newton.max_iter == 0 {
        return Err(bad(name, "newton tol and max_iter must be positive"));
    }

    let init = match c.init.as_deref().unwrap_or("zero") {
        "zero" => Init::Zero,
        "random" => Init::Random { amplitude: c.init_amplitude.unwrap_or(1.0) },
        other => return Err(bad(name, format!("unknown init {other:?}"))),
    };
    let analyses =
        c.analyses.clone().unwrap_or_default().iter().map(|a| Analysis::parse(a)).collect::<Result<_, _>>()?;
    let field = match c.field.as_deref() {
        None => None,
        Some("vortex") => Some(FieldKind::Vortex),
        Some("shear") => Some(FieldKind::Shear),
        Some("gradient") => Some(FieldKind::Gradient),
        Some(other) => return Err(bad(name, format!("unknown field {other:?}"))),
    };
    if kind == Kind::FieldAnalysis && field.is_none() {
        return Err(bad(name, "field_analysis needs a field"));
    }
    if kind == Kind::RelaxedBv && spec.grid.dim() != 1 {
        return Err(bad(name, "relaxed_bv runs on an interval"));
    }
    let seed = match (seed_forced, c.seed) {
        (false, Some(s)) => s,
        _ => derived_seed(name, global_seed),
    };
    let expected = c.expected.clone().unwrap_or_default();
    for (metric, e) in &expected {
        let has_target = e.equals.is_some() || e.value.is_some() || e.min.is_some() || e.max.is_some();
        if !has_target || (e.value.is_some() != e.tol.is_some()) {
            return Err(bad(name, format!("expectation {metric:?} needs equals, value+tol, min or max")));
        }
    }
    Ok(Scenario {
        name: name.to_string(),
        kind,
        seed,
        spec,
        schedule,
        newton,
        init,
        analyses,
        field,
        energy_floor: c.energy_floor,
        samples: c.samples.unwrap_or(1000),
        bruteforce_load: c.bruteforce_load.unwrap_or(0.5),
        expected,
    })
}

fn check_len(v: &[f64], n: usize, name: &str) -> Result<(), CliError> {
    if v.len() != n {
        return Err(CliError::Config(format!("scenario {name:?}: t0 needs {n} entries, got {}", v.len())));
    }
    Ok(())
}

/// Directory that relative paths in `config` refer to.
pub fn config_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}
