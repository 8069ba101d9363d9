//! Executes a resolved scenario and collects metrics, sections and field dumps.

use std::collections::BTreeMap;

use lingrow_core::analysis::{
    bv_infimum_bruteforce, convergence_forensics, curl_free_test, reconstruct_potential, relaxed_energy_1d, BVField1D,
    Jump, SearchBudget,
};
use lingrow_core::domain::{CellField, Grid, NodeField, Norm};
use lingrow_core::duality::{coercivity_radial, pointwise_duality_check, sigma_from_primal, CoercivityReport};
use lingrow_core::integrand::norm;
use lingrow_core::solver::{
    continuation_run, newton_solve, random_field, trace_record, ContinuationResult, NewtonConfig, PrimalState,
    ProblemSpec, TraceRecord,
};
use lingrow_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::config::{Analysis, FieldKind, Init, Kind, Scenario};

/// Absolute floor added to both ends of a monitor max/min ratio, so that
/// roundoff-sized monitors on affine minimisers compare as equal.
pub const MONITOR_FLOOR: f64 = 1e-12;
/// Curl density below which a field counts as curl-free.
pub const CURL_TOL: f64 = 1e-2;
/// Relative allowance in the weak duality check.
pub const WEAK_DUALITY_ROUNDOFF: f64 = 1e-12;
/// Viscosity for the Newton reference value in the brute-force comparison.
pub const BRUTE_FORCE_K: f64 = 1e8;
/// Jumps and densities of random relaxed samples stay within this bound.
pub const SAMPLE_RADIUS: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Capped run that stopped by design before the end of its schedule.
    Capped,
    SolverError,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Capped => "capped",
            Status::SolverError => "solver_error",
        }
    }
}

/// Everything a scenario produced, before it touches the disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub status: Status,
    pub metrics: Map<String, Value>,
    pub sections: Map<String, Value>,
    /// `(file name, contents)`.
    pub files: Vec<(String, Vec<u8>)>,
    pub error: Option<Value>,
}

impl RunOutput {
    fn new() -> Self {
        Self { status: Status::Ok, metrics: Map::new(), sections: Map::new(), files: Vec::new(), error: None }
    }

    fn metric(&mut self, key: impl Into<String>, v: impl Into<Value>) {
        self.metrics.insert(key.into(), v.into());
    }

    fn fail(&mut self, kind: &str, e: &Error) {
        self.status = Status::SolverError;
        self.error = Some(json!({ "kind": kind, "message": e.to_string() }));
    }
}

pub fn run_scenario(sc: &Scenario) -> RunOutput {
    let mut out = RunOutput::new();
    let coerc = coercivity_radial(&sc.spec);
    out.sections.insert("coercivity".into(), coercivity_json(&coerc));
    out.metric("classification", coerc.classification.as_str());
    match sc.kind {
        Kind::Continuation => run_continuation(sc, &mut out),
        Kind::Capped => run_capped(sc, &mut out),
        Kind::FieldAnalysis => run_field(sc, &mut out),
        Kind::RelaxedBv => run_relaxed(sc, &mut out),
    }
    out
}

fn coercivity_json(c: &CoercivityReport) -> Value {
    json!({
        "margin": c.margin,
        "delta": c.delta,
        "ell0": c.ell0,
        "lower_bound_constant": c.lower_bound_constant,
        "classification": c.classification.as_str(),
        "r0": c.r0,
        "certified_bound": c.certified_bound,
    })
}

fn initial_field(sc: &Scenario, seed: u64) -> NodeField {
    match sc.init {
        Init::Zero => sc.spec.grid.zero_nodes(),
        Init::Random { amplitude } => random_field(&sc.spec.grid, seed, amplitude),
    }
}

fn run_continuation(sc: &Scenario, out: &mut RunOutput) {
    let spec = &sc.spec;
    let u0 = initial_field(sc, sc.seed);
    let res = match continuation_run(spec, &sc.schedule, &sc.newton, Some(&u0)) {
        Ok(r) => r,
        Err(partial) => {
            out.fail("non_convergence", &partial.error);
            emit_trace(out, &partial.completed.trace.records);
            return;
        }
    };
    emit_trace(out, &res.trace.records);
    if let Err(e) = continuation_metrics(sc, &res, out) {
        out.fail("analysis", &e);
    }
}

fn continuation_metrics(sc: &Scenario, res: &ContinuationResult, out: &mut RunOutput) -> lingrow_core::Result<()> {
    let spec = &sc.spec;
    let grid = &spec.grid;
    let recs = &res.trace.records;
    let last = res.states.last().expect("schedule is non-empty");
    let rec = recs.last().expect("schedule is non-empty");
    let g = grid.gradient(&last.u)?;

    out.metric("final_k", last.k);
    out.metric("final_energy", last.energy);
    out.metric("final_energy_unregularised", rec.energy_unregularised);
    out.metric("final_el_residual", last.el_residual_inf);
    out.metric("max_grad", rec.max_grad);
    out.metric("min_grad", g.magnitudes().into_iter().fold(f64::INFINITY, f64::min));
    component_extremes(&g, out);
    out.metric("energy_monotone", res.energy_monotone);
    out.metric("newton_iters_total", recs.iter().map(|r| r.newton_iters).sum::<usize>() as u64);
    out.metric("viscous_scaled_decreasing", recs.windows(2).all(|w| w[1].viscous_scaled_l2 < w[0].viscous_scaled_l2));
    let bounds: Vec<_> = recs.iter().filter_map(|r| r.bound).collect();
    if !bounds.is_empty() {
        out.metric("bounds_hold", bounds.iter().all(|b| b.holds()));
    }
    out.metric("min_block_eig_ok", res.states.iter().all(|s| s.min_block_eig >= (1.0 - 1e-12) / s.k));

    if sc.wants(Analysis::Monitors) {
        let w: Vec<f64> = recs.iter().filter_map(|r| r.w22.map(|m| m.weighted)).collect();
        let s: Vec<f64> = recs.iter().filter_map(|r| r.sigma_h1).collect();
        if !w.is_empty() {
            out.metric("w22_ratio", floored_ratio(&w));
            out.metric("w22_min", w.iter().cloned().fold(f64::INFINITY, f64::min));
        }
        if !s.is_empty() {
            out.metric("sigma_h1_ratio", floored_ratio(&s));
        }
        if let Some(gk) = rec.gk_l2 {
            out.metric("final_gk_l2", gk);
        }
    }
    if sc.wants(Analysis::Duality) {
        duality_section(spec, &res.states, out)?;
    }
    if sc.wants(Analysis::Forensics) {
        let snaps = res.states.iter().map(|s| grid.gradient(&s.u)).collect::<lingrow_core::Result<Vec<_>>>()?;
        if snaps.len() >= 3 {
            let f = convergence_forensics(grid, &snaps)?;
            out.metric("cauchy_decreasing", f.cauchy_decreasing);
            out.metric("pointwise_fraction", f.pointwise_fraction);
            out.metric("final_cauchy_l1", *f.cauchy_l1.last().unwrap());
            let mut w = csv_writer();
            let mut head = vec!["k".to_string(), "cauchy_l1_next".into()];
            head.extend(f.levels.iter().map(|l| format!("tail_{l}")));
            head.extend(f.levels.iter().map(|l| format!("exceptional_{l}")));
            w.write_record(&head).expect("in-memory csv");
            for (j, s) in res.states.iter().enumerate() {
                let mut row = vec![num(s.k), f.cauchy_l1.get(j).map(|v| num(*v)).unwrap_or_default()];
                row.extend(f.tails[j].iter().map(|v| num(*v)));
                row.extend(f.exceptional[j].iter().map(|v| num(*v)));
                w.write_record(&row).expect("in-memory csv");
            }
            out.files.push(("forensics.csv".into(), finish(w)));
            out.sections.insert(
                "forensics".into(),
                json!({ "cauchy_l1": f.cauchy_l1, "cauchy_decreasing": f.cauchy_decreasing, "pointwise_fraction": f.pointwise_fraction }),
            );
        }
    }
    if sc.wants(Analysis::Reconstruction) {
        let rec = reconstruct_potential(grid, &g)?;
        let scale = grid.cell_norm(&g, Norm::L1);
        let rel = if scale > 0.0 { rec.residual_l1 / scale } else { rec.residual_l1 };
        out.metric("reconstruction_residual_l1", rec.residual_l1);
        out.metric("reconstruction_residual_rel", rel);
        out.files.push((
            "reconstruction.json".into(),
            pretty(&json!({
                "residual_l1": rec.residual_l1,
                "residual_rel": rel,
                "curl_max": rec.curl_max,
                "hole_circulations": rec.hole_circulations,
            })),
        ));
    }
    if sc.wants(Analysis::Uniqueness) {
        let other = random_field(grid, sc.seed.wrapping_add(1), 1.0);
        let alt = continuation_run(spec, &sc.schedule, &sc.newton, Some(&other)).map_err(|p| p.error)?;
        let a = grid.mean_zero_project(&last.u);
        let b = grid.mean_zero_project(&alt.states.last().expect("schedule is non-empty").u);
        out.metric("uniqueness_linf", a.max_abs_diff(&b));
    }

    out.files.push(("u_final.csv".into(), node_csv(grid, &last.u)));
    out.files.push(("grad_final.csv".into(), cell_csv(grid, &g)));
    Ok(())
}

fn component_extremes(g: &CellField, out: &mut RunOutput) {
    let stride = g.stride();
    for i in 0..stride {
        let vals = (0..g.len()).map(|c| g.cell(c)[i]);
        let lo = vals.clone().fold(f64::INFINITY, f64::min);
        let hi = vals.fold(f64::NEG_INFINITY, f64::max);
        out.metric(format!("grad_min_{i}"), lo);
        out.metric(format!("grad_max_{i}"), hi);
    }
}

/// `(max + floor) / (min + floor)`.
pub fn floored_ratio(v: &[f64]) -> f64 {
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    (hi + MONITOR_FLOOR) / (lo + MONITOR_FLOOR)
}

fn duality_section(spec: &ProblemSpec, states: &[PrimalState], out: &mut RunOutput) -> lingrow_core::Result<()> {
    let mut rows = Vec::new();
    let (mut worst_pw, mut worst_gap, mut min_gap, mut worst_feas) = (0.0f64, 0.0f64, f64::INFINITY, 0.0f64);
    let mut weak = true;
    for s in states {
        let cert = sigma_from_primal(spec, s)?;
        let pw = pointwise_duality_check(spec, s)?;
        let g = spec.grid.gradient(&s.u)?;
        let l1 = spec.grid.cell_norm(&g, Norm::L1);
        worst_pw = worst_pw.max(pw);
        worst_gap = worst_gap.max(cert.gap_reg / (1.0 + l1));
        min_gap = min_gap.min(cert.gap_reg);
        worst_feas = worst_feas.max(cert.feasibility_residual);
        // Fenchel–Young gives E ≥ D(σ) + ⟨σ, ∇u⟩ exactly; the pairing vanishes for feasible σ
        let pairing = spec.grid.cell_inner(&cert.sigma, &g);
        weak &= s.energy >= cert.dual_value_reg - pairing.abs() - WEAK_DUALITY_ROUNDOFF * (1.0 + s.energy.abs());
        rows.push(json!({
            "k": s.k,
            "pointwise": pw,
            "gap_reg": cert.gap_reg,
            "dual_value_reg": cert.dual_value_reg,
            "dual_value_limit": cert.dual_value_limit,
            "feasibility_residual": cert.feasibility_residual,
            "clipped_cells": cert.clipped_cells as u64,
        }));
    }
    out.metric("max_pointwise_duality", worst_pw);
    out.metric("max_gap_rel", worst_gap);
    out.metric("min_gap", min_gap);
    out.metric("max_feasibility_residual", worst_feas);
    out.metric("weak_duality_holds", weak);
    out.sections.insert("dual".into(), Value::Array(rows));
    Ok(())
}

fn run_capped(sc: &Scenario, out: &mut RunOutput) {
    let spec = &sc.spec;
    let mut u = initial_field(sc, sc.seed);
    let mut recs: Vec<TraceRecord> = Vec::new();
    let (mut floor_reached, mut capped_at) = (false, None);
    for &k in sc.schedule.k_values() {
        let state = match newton_solve(spec, k, &u, &sc.newton) {
            Ok(s) => s,
            Err(Error::NotConverged { state, .. }) | Err(Error::LineSearch { state, .. }) => {
                // record the best iterate and stop, without claiming convergence
                capped_at = Some(k);
                *state
            }
            Err(e) => {
                out.fail("solver", &e);
                break;
            }
        };
        match trace_record(spec, &state) {
            Ok(r) => recs.push(r),
            Err(e) => {
                out.fail("analysis", &e);
                break;
            }
        }
        u = state.u;
        if sc.energy_floor.is_some_and(|f| state.energy < f) {
            floor_reached = true;
            break;
        }
        if capped_at.is_some() {
            break;
        }
    }
    emit_trace(out, &recs);
    if out.status == Status::SolverError {
        return;
    }
    if floor_reached || capped_at.is_some() || recs.len() < sc.schedule.k_values().len() {
        out.status = Status::Capped;
    }
    let e: Vec<f64> = recs.iter().map(|r| r.energy).collect();
    let steps: Vec<f64> = e.windows(2).map(|w| w[0] - w[1]).collect();
    out.metric("steps_completed", recs.len() as u64);
    out.metric("floor_reached", floor_reached);
    out.metric("newton_capped_at_k", capped_at);
    out.metric("energy_strictly_decreasing", steps.iter().all(|d| *d > 0.0));
    out.metric("descent_accelerating", steps.windows(2).all(|w| w[1] > w[0]));
    if let Some(r) = recs.last() {
        out.metric("final_k", r.k);
        out.metric("final_energy", r.energy);
        out.metric("energy_per_k", r.energy / r.k);
        out.metric("max_grad", r.max_grad);
    }
    out.files.push(("u_final.csv".into(), node_csv(&spec.grid, &u)));
}

fn run_field(sc: &Scenario, out: &mut RunOutput) {
    if let Err(e) = field_analysis(sc, out) {
        out.fail("analysis", &e);
    }
}

fn field_analysis(sc: &Scenario, out: &mut RunOutput) -> lingrow_core::Result<()> {
    let grid = &sc.spec.grid;
    let (rows, cols) = (grid.components(), grid.dim());
    let e = match sc.field.expect("resolved field") {
        FieldKind::Vortex | FieldKind::Shear if cols != 2 || rows != 1 => {
            return Err(Error::Invalid("vortex and shear fields need a scalar 2D grid".into()));
        }
        FieldKind::Vortex => grid.cell_field_from_fn(1, 2, |p| {
            let r2 = p[0] * p[0] + p[1] * p[1];
            vec![-p[1] / r2, p[0] / r2]
        }),
        FieldKind::Shear => grid.cell_field_from_fn(1, 2, |p| vec![0.0, p[0]]),
        FieldKind::Gradient => grid.gradient(&random_field(grid, sc.seed, 1.0))?,
    };
    let h = grid.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
    let l1 = grid.cell_norm(&e, Norm::L1);
    out.metric("hole_count", grid.hole_count() as u64);
    out.metric("field_l1", l1);
    if cols == 2 {
        let rep = curl_free_test(grid, &e, CURL_TOL)?;
        out.metric("is_curl_free", rep.is_curl_free);
        out.metric("curl_max", rep.curl_max);
        out.metric("circulation_max", rep.circulation_max);
        out.metric("circulation_bound", 1e-3 * h);
        out.metric("plaquette_within_bound", rep.circulation_max <= 1e-3 * h);
        for (i, c) in rep.hole_circulations.iter().enumerate() {
            out.metric(format!("hole_circulation_{i}"), *c);
        }
    }
    let rec = reconstruct_potential(grid, &e)?;
    let rel = if l1 > 0.0 { rec.residual_l1 / l1 } else { rec.residual_l1 };
    out.metric("reconstruction_residual_l1", rec.residual_l1);
    out.metric("reconstruction_residual_rel", rel);
    out.files.push(("field.csv".into(), cell_csv(grid, &e)));
    out.files.push(("potential.csv".into(), node_csv(grid, &rec.v)));
    out.files.push((
        "reconstruction.json".into(),
        pretty(&json!({
            "residual_l1": rec.residual_l1,
            "residual_rel": rel,
            "curl_max": rec.curl_max,
            "hole_circulations": rec.hole_circulations,
        })),
    ));
    Ok(())
}

fn run_relaxed(sc: &Scenario, out: &mut RunOutput) {
    if let Err(e) = relaxed_bv(sc, out) {
        out.fail("analysis", &e);
    }
}

fn relaxed_bv(sc: &Scenario, out: &mut RunOutput) -> lingrow_core::Result<()> {
    let spec = &sc.spec;
    let grid = &spec.grid;
    let f = &spec.integrand;
    let (a, b) = grid.extent()[0];
    let m = grid.n_cells();
    let load = |x: f64| -> Vec<f64> {
        let c = (((x - a) / (b - a) * m as f64).floor().max(0.0) as usize).min(m - 1);
        spec.t0.cell(c).to_vec()
    };
    let mut floor = 0.0;
    for c in 0..m {
        floor -= grid.cell_volume() * f.conjugate(norm(spec.t0.cell(c)), 1e-13)?;
    }
    let comps = grid.components();
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let (mut lowest, mut all_above) = (f64::INFINITY, true);
    let mut taken = 0usize;
    while taken < sc.samples {
        let ac = CellField {
            rows: comps,
            cols: 1,
            values: (0..m * comps).map(|_| rng.gen_range(-SAMPLE_RADIUS..=SAMPLE_RADIUS)).collect(),
        };
        let jumps = (0..rng.gen_range(0..=2))
            .map(|_| Jump {
                position: rng.gen_range(a..b),
                height: (0..comps).map(|_| rng.gen_range(-SAMPLE_RADIUS..=SAMPLE_RADIUS)).collect(),
            })
            .collect();
        let Ok(w) = BVField1D::new(grid.clone(), ac, jumps) else { continue };
        let v = relaxed_energy_1d(f, &load, &w);
        lowest = lowest.min(v);
        all_above &= v > floor;
        taken += 1;
    }
    out.metric("bv_samples", taken as u64);
    out.metric("bv_floor", floor);
    out.metric("bv_min_energy", lowest);
    out.metric("bv_all_above_floor", all_above);

    let tiny = Grid::interval(a, b, 4, 1)?;
    let load = sc.bruteforce_load;
    let bf = bv_infimum_bruteforce(f, &|_| load, &tiny, 2, &SearchBudget::default())?;
    let reference = ProblemSpec::constant(tiny.clone(), f.clone(), &[load])?;
    let cfg = NewtonConfig::default();
    let st = newton_solve(&reference, BRUTE_FORCE_K, &tiny.zero_nodes(), &cfg)?;
    out.metric("bruteforce_value", bf.value);
    out.metric("newton_value", st.energy);
    out.metric("bruteforce_gap", (bf.value - st.energy).abs());
    out.sections.insert(
        "bruteforce".into(),
        json!({ "load": load, "ac": bf.ac, "jumps": bf.jumps, "newton_k": BRUTE_FORCE_K }),
    );
    Ok(())
}

fn emit_trace(out: &mut RunOutput, recs: &[TraceRecord]) {
    let mut w = csv_writer();
    w.write_record([
        "k",
        "energy",
        "energy_unregularised",
        "grad_l1",
        "viscous_l2sq",
        "viscous_scaled_l2",
        "max_grad",
        "w22_weighted",
        "w22_h_weighted",
        "w22_plain",
        "gk_l2",
        "sigma_h1",
        "el_residual_inf",
        "newton_iters",
        "min_block_eig",
        "bound_lhs",
        "bound_rhs",
    ])
    .expect("in-memory csv");
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    let mut rows = Vec::new();
    for r in recs {
        w.write_record([
            num(r.k),
            num(r.energy),
            num(r.energy_unregularised),
            num(r.grad_l1),
            num(r.viscous_l2sq),
            num(r.viscous_scaled_l2),
            num(r.max_grad),
            opt(r.w22.map(|m| m.weighted)),
            opt(r.w22.map(|m| m.h_weighted)),
            opt(r.w22.map(|m| m.plain)),
            opt(r.gk_l2),
            opt(r.sigma_h1),
            num(r.el_residual_inf),
            r.newton_iters.to_string(),
            num(r.min_block_eig),
            opt(r.bound.map(|b| b.lhs)),
            opt(r.bound.map(|b| b.rhs)),
        ])
        .expect("in-memory csv");
        let mut o = BTreeMap::new();
        o.insert("k", json!(r.k));
        o.insert("energy", json!(r.energy));
        o.insert("energy_unregularised", json!(r.energy_unregularised));
        o.insert("grad_l1", json!(r.grad_l1));
        o.insert("viscous_scaled_l2", json!(r.viscous_scaled_l2));
        o.insert("max_grad", json!(r.max_grad));
        o.insert("w22", json!(r.w22.map(|m| m.weighted)));
        o.insert("sigma_h1", json!(r.sigma_h1));
        o.insert("gk_l2", json!(r.gk_l2));
        o.insert("el_residual_inf", json!(r.el_residual_inf));
        o.insert("newton_iters", json!(r.newton_iters as u64));
        o.insert("min_block_eig", json!(r.min_block_eig));
        o.insert("bound", json!(r.bound.map(|b| json!({ "lhs": b.lhs, "rhs": b.rhs, "holds": b.holds() }))));
        rows.push(json!(o));
    }
    out.files.push(("trace.csv".into(), finish(w)));
    out.sections.insert("trace".into(), Value::Array(rows));
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("in-memory csv")
}

fn node_csv(grid: &Grid, u: &NodeField) -> Vec<u8> {
    let mut buf = Vec::new();
    grid.write_node_csv(u, &mut buf).expect("in-memory csv");
    buf
}

fn cell_csv(grid: &Grid, e: &CellField) -> Vec<u8> {
    let mut buf = Vec::new();
    grid.write_cell_csv(e, &mut buf).expect("in-memory csv");
    buf
}

fn pretty(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("json values serialise");
    s.push(b'\n');
    s
}
