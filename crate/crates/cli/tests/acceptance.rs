//! Acceptance run: one pass/fail line per criterion, nonzero exit on any failure.

use std::f64::consts::TAU;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use lingrow_cli::config::Scenario;
use lingrow_cli::report::without_timestamp;
use lingrow_cli::{execute, load, Outcome};
use lingrow_core::analysis::{curl_free_test, reconstruct_potential, relaxed_energy_1d, BVField1D, Jump};
use lingrow_core::domain::{CellField, Grid, Mask, Norm};
use lingrow_core::duality::{pointwise_duality_check, sigma_from_primal};
use lingrow_core::integrand::{dot, norm, Profile, RadialIntegrand};
use lingrow_core::solver::{continuation_run, energy, random_field, ContinuationSchedule, NewtonConfig, ProblemSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

fn builtin(name: &str) -> Scenario {
    load(None, &[name.to_string()], None).unwrap().remove(0)
}

fn metric(o: &Outcome, key: &str) -> f64 {
    o.report["metrics"][key].as_f64().unwrap_or_else(|| panic!("{}: metric {key} missing", o.name))
}

fn flag(o: &Outcome, key: &str) -> bool {
    o.report["metrics"][key].as_bool().unwrap_or_else(|| panic!("{}: flag {key} missing", o.name))
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

/// Bisection root of `t/√(1+t²) + t/k = load`.
fn stationary_slope(k: f64, load: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, load * k);
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid / (1.0 + mid * mid).sqrt() + mid / k < load {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn borderline_infimum() -> Verdict {
    let sc = builtin("area_borderline_1d");
    let (o, dt) = timed(|| execute(&sc));
    let e = metric(&o, "final_energy");
    ensure((-2.0..=-1.95).contains(&e), || format!("final energy {e} outside [-2, -1.95]"))?;
    for kappa in [1.0, 10.0, 100.0] {
        let u = sc.spec.grid.node_field_from_fn(|p| vec![kappa * p[0]]);
        let got = energy(&sc.spec, &u, None).unwrap();
        let want = 2.0 * ((1.0 + kappa * kappa).sqrt() - kappa - 1.0);
        ensure((got - want).abs() <= 1e-10, || format!("slope {kappa}: {got} vs {want}"))?;
    }
    ensure(dt < Duration::from_secs(5), || format!("took {dt:?}"))?;
    Ok(format!("energy {e:.7}, slopes 1/10/100 exact, {:.2}s", dt.as_secs_f64()))
}

fn borderline_rate() -> Verdict {
    let sc = builtin("area_borderline_1d");
    let (o, dt) = timed(|| execute(&sc));
    let trace = o.report["trace"].as_array().unwrap();
    let mut worst: f64 = 0.0;
    for j in [6, 8, 10] {
        let k = 4f64.powi(j);
        let rec = trace.iter().find(|r| r["k"].as_f64() == Some(k)).ok_or(format!("k = 4^{j} missing"))?;
        let got = rec["max_grad"].as_f64().unwrap();
        let root = stationary_slope(k, 1.0);
        let rel = (got - root).abs() / root;
        worst = worst.max(rel);
        ensure(rel <= 0.2, || format!("k = 4^{j}: max grad {got} vs root {root}"))?;
    }
    ensure(dt < Duration::from_secs(5), || format!("took {dt:?}"))?;
    Ok(format!("worst relative deviation {worst:.2e}, {:.2}s", dt.as_secs_f64()))
}

fn coercive_exact() -> Verdict {
    let slope = 3f64.powf(-0.5);
    // f(t) − t/2 at the stationary slope, per unit measure
    let density = (1.0 + slope * slope).sqrt() - 1.0 - 0.5 * slope;
    let mut notes = Vec::new();
    for (name, measure, comps) in [("area_coercive_1d", 2.0, 1usize), ("area_coercive_2d", 4.0, 2)] {
        let (o, dt) = timed(|| execute(&builtin(name)));
        for key in ["grad_min_0", "grad_max_0"] {
            let v = metric(&o, key);
            ensure((v - slope).abs() <= 1e-6, || format!("{name}: {key} = {v}"))?;
        }
        if comps == 2 {
            for key in ["grad_min_1", "grad_max_1"] {
                let v = metric(&o, key);
                ensure(v.abs() <= 1e-6, || format!("{name}: {key} = {v}"))?;
            }
        }
        let e = metric(&o, "final_energy");
        let want = measure * density;
        ensure((e - want).abs() <= 1e-6, || format!("{name}: energy {e} vs {want}"))?;
        ensure(dt < Duration::from_secs(10), || format!("{name} took {dt:?}"))?;
        notes.push(format!("{name} {:.2}s", dt.as_secs_f64()));
    }
    Ok(notes.join(", "))
}

fn varying(grid: Grid, f: RadialIntegrand) -> ProblemSpec {
    let t0 = grid.cell_field_from_fn(1, grid.dim(), |p| {
        let mut v = vec![0.4 * (1.0 + 0.3 * (3.0 * p[0]).sin())];
        if p.len() == 2 {
            v.push(0.3 * (2.0 * p[0] * p[1]).cos());
        }
        v
    });
    ProblemSpec::new(grid, f, t0).unwrap()
}

fn duality_suite() -> Verdict {
    let square = || Grid::rectangle((-1.0, 1.0), (-1.0, 1.0), 16, 16, &Mask::Full, 1).unwrap();
    let cases = [
        (builtin("area_coercive_1d").spec, ContinuationSchedule::powers_of_four(8)),
        (builtin("area_borderline_1d").spec, ContinuationSchedule::powers_of_four(10)),
        (varying(square(), RadialIntegrand::area()), ContinuationSchedule::powers_of_four(8)),
        (varying(square(), RadialIntegrand::mu_elliptic(1.5).unwrap()), ContinuationSchedule::powers_of_four(6)),
        (
            varying(Grid::interval(0.0, 1.0, 32, 1).unwrap(), RadialIntegrand::mu_elliptic(5.0).unwrap()),
            ContinuationSchedule::powers_of_four(8),
        ),
    ];
    let mut states = 0;
    for (i, (spec, sched)) in cases.iter().enumerate() {
        let run = continuation_run(spec, sched, &NewtonConfig::default(), None).map_err(|p| p.error.to_string())?;
        for s in &run.states {
            let cert = sigma_from_primal(spec, s).unwrap();
            let g = spec.grid.gradient(&s.u).unwrap();
            let l1 = spec.grid.cell_norm(&g, Norm::L1);
            let pw = pointwise_duality_check(spec, s).unwrap();
            ensure(pw <= 1e-8, || format!("case {i}, k = {}: pointwise {pw}", s.k))?;
            ensure(cert.gap_reg <= 1e-6 * (1.0 + l1), || format!("case {i}, k = {}: gap {}", s.k, cert.gap_reg))?;
            // weak duality with the feasibility slack of σ: E ≥ D(σ) + ⟨σ, ∇u⟩
            let slack = spec.grid.cell_inner(&cert.sigma, &g);
            let lower = cert.dual_value_reg + slack;
            ensure(s.energy >= lower - 1e-12 * (1.0 + s.energy.abs()), || {
                format!("case {i}, k = {}: energy {} below dual bound {lower}", s.k, s.energy)
            })?;
            states += 1;
        }
    }
    Ok(format!("{states} converged states"))
}

fn families() -> Vec<RadialIntegrand> {
    vec![
        RadialIntegrand::area(),
        RadialIntegrand::mu_elliptic(1.5).unwrap(),
        RadialIntegrand::mu_elliptic(3.0).unwrap(),
        RadialIntegrand::mu_elliptic(5.0).unwrap(),
    ]
}

/// Fourth-order central difference of `A` along `zeta`, step `|z|/100`.
/// Near-radial directions at large `|z|` see `f″ ~ |z|^(−μ)`, so a short
/// second-order step would be dominated by cancellation.
fn central_difference(f: &RadialIntegrand, z: &[f64], zeta: &[f64]) -> Vec<f64> {
    let h = 1e-2 * norm(z);
    let at = |c: f64| f.tensor_a(&z.iter().zip(zeta).map(|(a, b)| a + c * h * b).collect::<Vec<_>>());
    let (p1, m1, p2, m2) = (at(1.0), at(-1.0), at(2.0), at(-2.0));
    (0..z.len()).map(|i| (8.0 * (p1[i] - m1[i]) - (p2[i] - m2[i])) / (12.0 * h)).collect()
}

fn conjugate_hessian_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let fams = families();
    // Fenchel–Young: inequality everywhere, equality at s = f′(t)
    for _ in 0..1000 {
        let f = &fams[rng.gen_range(0..fams.len())];
        let t = rng.gen_range(0.0..100.0);
        let s = rng.gen_range(0.0..0.999);
        let fs = f.conjugate(s, 1e-13).unwrap();
        ensure(f.f(t) + fs >= s * t - 1e-10, || format!("{f}: FY fails at t {t}, s {s}"))?;
        let st = f.df(t);
        if st < f.recession_coeff() * (1.0 - 1e-9) {
            let eq = f.f(t) + f.conjugate(st, 1e-13).unwrap() - st * t;
            ensure(eq.abs() <= 1e-8, || format!("{f}: FY equality defect {eq} at t {t}"))?;
        }
    }
    // biconjugate of the area integrand by golden section over s
    let area = RadialIntegrand::area();
    for i in 0..=100 {
        let t = i as f64;
        let g = |s: f64| s * t - area.conjugate(s, 1e-13).unwrap();
        let (mut a, mut b) = (0.0f64, 1.0 - 1e-12);
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..120 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if g(c) > g(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let fss = g(0.5 * (a + b));
        ensure((fss - area.f(t)).abs() <= 1e-6, || format!("biconjugate at {t}: {fss} vs {}", area.f(t)))?;
    }
    // Hessian against central differences of A, and the growth sandwich
    let mut worst_fd: f64 = 0.0;
    for _ in 0..1000 {
        let f = &fams[rng.gen_range(0..fams.len())];
        let d = rng.gen_range(1..=4);
        let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mag = 10f64.powf(rng.gen_range(-1.0..2.0));
        let z: Vec<f64> = dir.iter().map(|v| v * mag / norm(&dir)).collect();
        let zeta: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fd = central_difference(f, &z, &zeta);
        let hz = f.hessian(&z);
        let exact = hz.apply(&zeta);
        let err: Vec<f64> = fd.iter().zip(&exact).map(|(a, b)| a - b).collect();
        let rel = norm(&err) / norm(&exact).max(1e-300);
        worst_fd = worst_fd.max(rel);
        ensure(rel <= 1e-5, || format!("{f}: Hessian relative error {rel} at |z| = {mag}"))?;
        let form = hz.form(&zeta);
        let sq = dot(&zeta, &zeta);
        let lower = f.h_monotone(mag).unwrap() * sq;
        let upper = 2.0 * f.upper_constant() * sq / (1.0 + mag);
        ensure(lower <= form * (1.0 + 1e-12) + 1e-15 && form <= upper * (1.0 + 1e-12), || {
            format!("{f}: sandwich {lower} ≤ {form} ≤ {upper} fails")
        })?;
    }
    let mu3 = RadialIntegrand::mu_elliptic(3.0).unwrap();
    for i in 0..=1000 {
        let t = 0.1 * i as f64;
        ensure((mu3.f(t) - area.f(t)).abs() <= 1e-10, || format!("μ = 3 differs from area at {t}"))?;
    }
    Ok(format!("worst Hessian FD error {worst_fd:.1e}"))
}

fn reconstruction_dichotomy() -> Verdict {
    let t = Instant::now();
    let grid = Grid::rectangle((0.0, 1.0), (0.0, 1.0), 64, 64, &Mask::Full, 1).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let e = grid.gradient(&random_field(&grid, 100 + seed, 1.0)).unwrap();
        let rec = reconstruct_potential(&grid, &e).unwrap();
        let rel = rec.residual_l1 / grid.cell_norm(&e, Norm::L1);
        worst = worst.max(rel);
        ensure(rel <= 1e-9, || format!("roundtrip {seed}: relative residual {rel}"))?;
    }
    let scenarios = load(Some(&fixture("annulus/annulus.toml")), &["annulus_vortex_frozen".into()], None)
        .map_err(|e| e.to_string())?;
    let grid = &scenarios[0].spec.grid;
    let e: CellField = grid.cell_field_from_fn(1, 2, |p| {
        let r2 = p[0] * p[0] + p[1] * p[1];
        vec![-p[1] / r2, p[0] / r2]
    });
    let h = grid.spacing()[0];
    let rep = curl_free_test(grid, &e, f64::INFINITY).unwrap();
    ensure(rep.circulation_max <= 1e-3 * h, || {
        format!("plaquette circulation {} > {}", rep.circulation_max, 1e-3 * h)
    })?;
    ensure(rep.hole_circulations.len() == 1, || format!("{} hole loops", rep.hole_circulations.len()))?;
    let c = rep.hole_circulations[0];
    ensure((c - TAU).abs() <= 0.02 * TAU, || format!("circulation {c}"))?;
    let rec = reconstruct_potential(grid, &e).unwrap();
    ensure(rec.residual_l1 >= 0.1, || format!("vortex residual {}", rec.residual_l1))?;
    let dt = t.elapsed();
    ensure(dt < Duration::from_secs(10), || format!("took {dt:?}"))?;
    Ok(format!(
        "roundtrip worst {worst:.1e}; vortex circulation {c:.6}, plaquette {:.1e}, residual {:.3}, {:.2}s",
        rep.circulation_max,
        rec.residual_l1,
        dt.as_secs_f64()
    ))
}

fn relaxed_bv_suite() -> Verdict {
    let f = RadialIntegrand::area();
    let grid = Grid::interval(-1.0, 1.0, 8, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut lowest = f64::INFINITY;
    let mut n = 0;
    while n < 1000 {
        let ac = CellField { rows: 1, cols: 1, values: (0..8).map(|_| rng.gen_range(-1e3..1e3)).collect() };
        let jumps = (0..rng.gen_range(0..=3))
            .map(|_| Jump { position: rng.gen_range(-1.0..1.0), height: vec![rng.gen_range(-1e3..1e3)] })
            .collect();
        let Ok(w) = BVField1D::new(grid.clone(), ac, jumps) else { continue };
        let v = relaxed_energy_1d(&f, &|_| vec![1.0], &w);
        lowest = lowest.min(v);
        ensure(v > -2.0, || format!("sample energy {v} ≤ -2"))?;
        n += 1;
    }
    let o = execute(&builtin("bv_relaxed_1d"));
    ensure(flag(&o, "bv_all_above_floor"), || "scenario samples reach the floor".into())?;
    let gap = metric(&o, "bruteforce_gap");
    ensure(gap <= 5e-3, || format!("brute force vs Newton gap {gap}"))?;
    // the coercive tiny instance has the affine minimiser with slope 3^(-1/2)
    let s = 3f64.powf(-0.5);
    let exact = 2.0 * ((1.0 + s * s).sqrt() - 1.0 - 0.5 * s);
    let bf = metric(&o, "bruteforce_value");
    ensure((bf - exact).abs() <= 5e-3, || format!("brute force {bf} vs closed form {exact}"))?;
    Ok(format!("lowest sample {lowest:.4}, brute-force gap {gap:.1e}"))
}

fn regularity_monitors() -> Verdict {
    let mut notes = Vec::new();
    for name in ["mu_elliptic_2d", "mu_elliptic_2d_varying"] {
        let (o, dt) = timed(|| execute(&builtin(name)));
        let trace = o.report["trace"].as_array().unwrap();
        let col = |key: &str| -> Vec<f64> { trace.iter().map(|r| r[key].as_f64().unwrap()).collect() };
        let (w, s, v) = (col("w22"), col("sigma_h1"), col("viscous_scaled_l2"));
        let ratio = |x: &[f64]| x.iter().cloned().fold(0.0, f64::max) / x.iter().cloned().fold(f64::INFINITY, f64::min);
        let (wf, sf) = (metric(&o, "w22_ratio"), metric(&o, "sigma_h1_ratio"));
        ensure(wf < 10.0 && sf < 10.0, || format!("{name}: ratios {wf}, {sf}"))?;
        ensure(v.windows(2).all(|p| p[1] < p[0]), || format!("{name}: k^-1/2 ‖∇u‖ not strictly decreasing"))?;
        ensure(dt < Duration::from_secs(60), || format!("{name} took {dt:?}"))?;
        notes.push(format!(
            "{name}: W ratio {wf:.3} (raw {:.3}, min {:.1e}), σ ratio {sf:.3} (raw {:.3}), {:.1}s",
            ratio(&w),
            w.iter().cloned().fold(f64::INFINITY, f64::min),
            ratio(&s),
            dt.as_secs_f64()
        ));
    }
    Ok(notes.join("; "))
}

fn uniqueness() -> Verdict {
    let names = [
        "area_coercive_1d",
        "area_coercive_2d",
        "mu_elliptic_2d",
        "mu_elliptic_2d_mu1p5",
        "mu_elliptic_2d_mu3",
        "mu_elliptic_2d_varying",
        "convergence_study",
    ];
    let mut worst: f64 = 0.0;
    for name in names {
        let sc = builtin(name);
        let grid = &sc.spec.grid;
        let finals: Vec<_> = [31u64, 47]
            .iter()
            .map(|&seed| {
                let init = random_field(grid, seed, 1.0);
                let run = continuation_run(&sc.spec, &sc.schedule, &sc.newton, Some(&init))
                    .map_err(|p| p.error.to_string())?;
                Ok(grid.mean_zero_project(&run.states.last().unwrap().u))
            })
            .collect::<Result<_, String>>()?;
        let d = finals[0].max_abs_diff(&finals[1]);
        worst = worst.max(d);
        ensure(d <= 1e-6, || format!("{name}: random starts differ by {d}"))?;
    }
    Ok(format!("{} coercive scenarios, worst L∞ difference {worst:.1e}", names.len()))
}

fn determinism() -> Verdict {
    let cfg = fixture("check.toml");
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        let st = Command::new(env!("CARGO_BIN_EXE_lingrow"))
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(d.path())
            .arg("--check")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(st.status.code() == Some(0), || {
            format!("--check exited {:?}: {}", st.status.code(), String::from_utf8_lossy(&st.stdout))
        })?;
    }
    let mut files = 0;
    for entry in std::fs::read_dir(dirs[0].path()).unwrap() {
        let scenario = entry.unwrap().path();
        let name = scenario.file_name().unwrap().to_owned();
        for file in std::fs::read_dir(&scenario).unwrap() {
            let a = file.unwrap().path();
            let b = dirs[1].path().join(&name).join(a.file_name().unwrap());
            let (ba, bb) =
                (std::fs::read(&a).unwrap(), std::fs::read(&b).map_err(|e| format!("{}: {e}", b.display()))?);
            if a.file_name().unwrap() == "report.json" {
                let (ja, jb): (Value, Value) =
                    (serde_json::from_slice(&ba).unwrap(), serde_json::from_slice(&bb).unwrap());
                ensure(without_timestamp(&ja) == without_timestamp(&jb), || format!("{} differs", a.display()))?;
                let strip = |s: &[u8]| -> String {
                    String::from_utf8_lossy(s)
                        .lines()
                        .filter(|l| !l.contains("\"timestamp\""))
                        .collect::<Vec<_>>()
                        .join("\n")
                };
                ensure(strip(&ba) == strip(&bb), || format!("{} text differs", a.display()))?;
            } else {
                ensure(ba == bb, || format!("{} differs", a.display()))?;
            }
            files += 1;
        }
    }
    Ok(format!("{files} artifacts identical across two --check runs"))
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("borderline infimum", borderline_infimum),
        ("borderline blow-up rate", borderline_rate),
        ("coercive exact solution", coercive_exact),
        ("duality suite", duality_suite),
        ("conjugate and Hessian suite", conjugate_hessian_suite),
        ("reconstruction dichotomy", reconstruction_dichotomy),
        ("relaxed BV suite", relaxed_bv_suite),
        ("regularity monitors", regularity_monitors),
        ("uniqueness", uniqueness),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match verdict {
            Ok(detail) => println!("PASS  {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:>2} {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
