//! Damped Newton for the viscous approximations with continuation in `k`.
//!
//! The discrete energy is
//!
//! ```text
//! 𝔉ₖ[u] = Σ_c |c| [ f(|∇u_c|) − T₀_c : ∇u_c + |∇u_c|²/(2k) ]
//! ```
//!
//! whose nodal gradient is the Euler–Lagrange residual `Gᵀ W (Aₖ(∇u) − T₀)`
//! and whose Hessian is `Gᵀ W (D_zA + k⁻¹ I) G`. The Hessian is assembled into
//! a band matrix, the gradient kernel is removed by pinning, and the step is
//! projected back onto the complement of the kernel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::banded::BandMatrix;
use crate::domain::{CellField, Grid, NodeField, Norm};
use crate::integrand::{norm, RadialIntegrand};
use crate::{duality, Error, Result};

/// Slack used when checking that energies decrease along the schedule.
pub const MONOTONE_SLACK: f64 = 1e-10;
/// Interior margin, in cells, for the second-difference monitors.
pub const INTERIOR_MARGIN: usize = 2;

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub grid: Grid,
    pub integrand: RadialIntegrand,
    pub t0: CellField,
    /// `f∞(1) − ‖T₀‖∞`; may be zero or negative.
    pub coercivity_margin: f64,
}

impl ProblemSpec {
    pub fn new(grid: Grid, integrand: RadialIntegrand, t0: CellField) -> Result<Self> {
        if t0.rows != grid.components() || t0.cols != grid.dim() || t0.len() != grid.n_cells() {
            return Err(Error::Shape(format!(
                "T0 is {}×{} on {} cells, grid needs {}×{} on {}",
                t0.rows,
                t0.cols,
                t0.len(),
                grid.components(),
                grid.dim(),
                grid.n_cells()
            )));
        }
        let sup = grid.cell_norm(&t0, Norm::Linf);
        let coercivity_margin = integrand.recession_coeff() - sup;
        Ok(Self { grid, integrand, t0, coercivity_margin })
    }

    /// Spatially constant load `T₀ ≡ value` (row-major `N × n`).
    pub fn constant(grid: Grid, integrand: RadialIntegrand, value: &[f64]) -> Result<Self> {
        let (rows, cols) = (grid.components(), grid.dim());
        if value.len() != rows * cols {
            return Err(Error::Shape(format!("T0 needs {} entries, got {}", rows * cols, value.len())));
        }
        let t0 = grid.cell_field_from_fn(rows, cols, |_| value.to_vec());
        Self::new(grid, integrand, t0)
    }

    pub fn t0_sup(&self) -> f64 {
        self.grid.cell_norm(&self.t0, Norm::Linf)
    }

    pub fn dofs(&self) -> usize {
        self.grid.n_nodes() * self.grid.components()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationSchedule {
    k_values: Vec<f64>,
}

impl ContinuationSchedule {
    pub fn new(k_values: Vec<f64>) -> Result<Self> {
        let ok = !k_values.is_empty()
            && k_values.iter().all(|k| *k > 0.0 && k.is_finite())
            && k_values.windows(2).all(|w| w[1] > w[0]);
        if !ok {
            return Err(Error::Schedule);
        }
        Ok(Self { k_values })
    }

    /// `k = 4ʲ` for `j = 0..=j_max`.
    pub fn powers_of_four(j_max: u32) -> Self {
        Self { k_values: (0..=j_max).map(|j| 4f64.powi(j as i32)).collect() }
    }

    pub fn k_values(&self) -> &[f64] {
        &self.k_values
    }
}

impl Default for ContinuationSchedule {
    fn default() -> Self {
        Self::powers_of_four(12)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalState {
    pub k: f64,
    pub u: NodeField,
    pub energy: f64,
    pub el_residual_inf: f64,
    pub newton_iters: usize,
    /// Smallest eigenvalue of any cell block of the Newton Hessian seen during the solve.
    pub min_block_eig: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub max_halvings: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 200, armijo_c: 1e-4, backtrack: 0.5, max_halvings: 40 }
    }
}

/// Per-cell energy density `fₖ(|z|) − T₀ : z`; `k = None` drops the viscous term.
fn density(f: &RadialIntegrand, z: &[f64], t0: &[f64], k: Option<f64>) -> f64 {
    use crate::integrand::Profile;
    let t = norm(z);
    let visc = k.map_or(0.0, |k| 0.5 * t * t / k);
    f.f(t) + visc - crate::integrand::dot(t0, z)
}

/// `𝔉ₖ[u]`, or `𝔉[u]` when `k` is `None`.
pub fn energy(spec: &ProblemSpec, u: &NodeField, k: Option<f64>) -> Result<f64> {
    let g = spec.grid.gradient(u)?;
    Ok(energy_of_gradient(spec, &g, k))
}

pub fn energy_of_gradient(spec: &ProblemSpec, g: &CellField, k: Option<f64>) -> f64 {
    let w = spec.grid.cell_volume();
    (0..g.len()).map(|c| w * density(&spec.integrand, g.cell(c), spec.t0.cell(c), k)).sum()
}

/// `Aₖ(∇u) − T₀` per cell; with `k = None` the unregularised stress.
pub fn flux(spec: &ProblemSpec, g: &CellField, k: Option<f64>) -> CellField {
    let mut out = CellField::zeros(g.len(), g.rows, g.cols);
    for c in 0..g.len() {
        let a = match k {
            Some(k) => spec.integrand.tensor_a_k(g.cell(c), k),
            None => spec.integrand.tensor_a(g.cell(c)),
        };
        for ((o, a), t) in out.cell_mut(c).iter_mut().zip(a).zip(spec.t0.cell(c)) {
            *o = a - t;
        }
    }
    out
}

/// Nodal Euler–Lagrange residual `∫ (Aₖ(∇u) − T₀) : ∇φⱼ` for every basis function.
///
/// Every entry is already orthogonal to the gradient kernel, so no further
/// mean-zero reduction is needed.
pub fn el_residual(spec: &ProblemSpec, u: &NodeField, k: Option<f64>) -> Result<NodeField> {
    let g = spec.grid.gradient(u)?;
    spec.grid.gradient_adjoint(&flux(spec, &g, k))
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Assembles `Gᵀ W (D_zA + k⁻¹ I) G`, returning the smallest block eigenvalue.
fn assemble_hessian(spec: &ProblemSpec, g: &CellField, k: f64) -> (BandMatrix, f64) {
    let nd = g.stride();
    let mut min_eig = f64::INFINITY;
    let h = spec.grid.stiffness(|c| {
        let hz = spec.integrand.hessian(g.cell(c));
        min_eig = min_eig.min(hz.min_eig() + 1.0 / k);
        let mut dm = hz.matrix();
        for i in 0..nd {
            dm[i * nd + i] += 1.0 / k;
        }
        dm
    });
    (h, min_eig)
}

fn add_scaled(u: &NodeField, dir: &NodeField, alpha: f64) -> NodeField {
    NodeField {
        components: u.components,
        values: u.values.iter().zip(&dir.values).map(|(a, b)| a + alpha * b).collect(),
    }
}

/// Minimises `𝔉ₖ` from `u_init` by Newton's method with Armijo backtracking.
pub fn newton_solve(spec: &ProblemSpec, k: f64, u_init: &NodeField, cfg: &NewtonConfig) -> Result<PrimalState> {
    if !(k > 0.0) {
        return Err(Error::Domain { what: "viscosity index k", value: k });
    }
    let grid = &spec.grid;
    let target = cfg.tol * (1.0 + spec.t0_sup());
    let mut u = grid.project_out_kernel(u_init);
    let mut g = grid.gradient(&u)?;
    let mut e = energy_of_gradient(spec, &g, Some(k));
    let mut r = grid.gradient_adjoint(&flux(spec, &g, Some(k)))?;
    let mut res = inf_norm(&r.values);
    let mut min_block_eig = f64::INFINITY;

    let state = |u: &NodeField, e: f64, res: f64, it: usize, me: f64| PrimalState {
        k,
        u: u.clone(),
        energy: e,
        el_residual_inf: res,
        newton_iters: it,
        min_block_eig: me,
    };

    for it in 0..cfg.max_iter {
        if res <= target {
            return Ok(state(&u, e, res, it, min_block_eig));
        }
        let (h, me) = assemble_hessian(spec, &g, k);
        min_block_eig = min_block_eig.min(me);
        let rhs: Vec<f64> = r.values.iter().map(|v| -v).collect();
        let dir = grid.solve_singular(h, &rhs)?;
        let slope: f64 = r.values.iter().zip(&dir.values).map(|(a, b)| a * b).sum();

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial = add_scaled(&u, &dir, alpha);
            let tg = grid.gradient(&trial)?;
            let te = energy_of_gradient(spec, &tg, Some(k));
            if te <= e + cfg.armijo_c * alpha * slope {
                accepted = Some((trial, tg, te));
                break;
            }
            // energy differences below roundoff: fall back to residual decrease
            if (alpha * slope).abs() < 1e-14 * (1.0 + e.abs()) {
                let tr = grid.gradient_adjoint(&flux(spec, &tg, Some(k)))?;
                if inf_norm(&tr.values) < res {
                    accepted = Some((trial, tg, te));
                    break;
                }
            }
            alpha *= cfg.backtrack;
        }
        let Some((nu, ng, ne)) = accepted else {
            return Err(Error::LineSearch {
                iteration: it,
                residual: res,
                state: Box::new(state(&u, e, res, it, min_block_eig)),
            });
        };
        u = grid.project_out_kernel(&nu);
        g = ng;
        e = ne;
        r = grid.gradient_adjoint(&flux(spec, &g, Some(k)))?;
        res = inf_norm(&r.values);
    }
    if res <= target {
        return Ok(state(&u, e, res, cfg.max_iter, min_block_eig));
    }
    Err(Error::NotConverged {
        iterations: cfg.max_iter,
        residual: res,
        state: Box::new(state(&u, e, res, cfg.max_iter, min_block_eig)),
    })
}

/// Second-difference monitors on interior cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondDifference {
    /// `Σ |c| D_zA(∇u)[δ∇u, δ∇u]`.
    pub weighted: f64,
    /// `Σ |c| h(|∇u|) |δ∇u|²`.
    pub h_weighted: f64,
    /// `Σ |c| |δ∇u|²`.
    pub plain: f64,
}

fn interior_cells(grid: &Grid) -> Result<Vec<usize>> {
    let cells: Vec<usize> =
        (0..grid.n_cells()).filter(|&c| grid.cell_margin(c, INTERIOR_MARGIN) >= INTERIOR_MARGIN).collect();
    if cells.is_empty() {
        return Err(Error::EmptyInterior { margin: INTERIOR_MARGIN });
    }
    Ok(cells)
}

/// Forward difference quotients of a cell field at interior cell `c`, one per direction.
fn forward_quotients(grid: &Grid, e: &CellField, c: usize) -> Vec<Vec<f64>> {
    let (i, j) = grid.cell_ij(c);
    let h = grid.spacing();
    (0..grid.dim())
        .map(|s| {
            let (di, dj) = if s == 0 { (1, 0) } else { (0, 1) };
            let n = grid.cell_at(i as i64 + di, j as i64 + dj).expect("interior cell has neighbours");
            e.cell(n).iter().zip(e.cell(c)).map(|(a, b)| (a - b) / h[s]).collect()
        })
        .collect()
}

/// Local second-order monitor `Wₖ(K)` with `K` the cells at least two cells
/// from the boundary; differences are difference quotients.
pub fn monitor_w22(spec: &ProblemSpec, state: &PrimalState) -> Result<SecondDifference> {
    let grid = &spec.grid;
    let cells = interior_cells(grid)?;
    let g = grid.gradient(&state.u)?;
    let w = grid.cell_volume();
    let mut out = SecondDifference { weighted: 0.0, h_weighted: 0.0, plain: 0.0 };
    for c in cells {
        let z = g.cell(c);
        let hz = spec.integrand.hessian(z);
        let hm = spec.integrand.h_monotone(norm(z))?;
        for d in forward_quotients(grid, &g, c) {
            let sq: f64 = d.iter().map(|v| v * v).sum();
            out.weighted += w * hz.form(&d);
            out.h_weighted += w * hm * sq;
            out.plain += w * sq;
        }
    }
    Ok(out)
}

/// Interior discrete `H¹` seminorm of `σₖ = Aₖ(∇uₖ) − T₀`.
pub fn sigma_h1(spec: &ProblemSpec, state: &PrimalState) -> Result<f64> {
    let grid = &spec.grid;
    let cells = interior_cells(grid)?;
    let sigma = flux(spec, &grid.gradient(&state.u)?, Some(state.k));
    let w = grid.cell_volume();
    let mut acc = 0.0;
    for c in cells {
        for d in forward_quotients(grid, &sigma, c) {
            acc += w * d.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(acc.sqrt())
}

/// `gₖ = √(f∞(1)|∇uₖ| − T₀ : ∇uₖ)` per cell.
pub fn gk_field(spec: &ProblemSpec, state: &PrimalState) -> Result<CellField> {
    let g = spec.grid.gradient(&state.u)?;
    let finf = spec.integrand.recession_coeff();
    let mut out = CellField::zeros(g.len(), 1, 1);
    for c in 0..g.len() {
        let z = g.cell(c);
        let rad = finf * norm(z) - crate::integrand::dot(spec.t0.cell(c), z);
        if rad < -1e-12 {
            return Err(Error::NegativeRadicand { cell: c, value: rad });
        }
        out.values[c] = rad.max(0.0).sqrt();
    }
    Ok(out)
}

/// Both sides of `γ(‖∇u‖₁ + k⁻¹‖∇u‖₂²) ≤ 𝔉ₖ[u] + f∞(1)|Ω|R₀`, rearranged as
/// `lhs ≤ rhs`. Only defined for coercive specs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AprioriBound {
    pub lhs: f64,
    pub rhs: f64,
}

impl AprioriBound {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs * (1.0 + 1e-12) + 1e-12
    }
}

pub fn apriori_bound(spec: &ProblemSpec, state: &PrimalState) -> Result<Option<AprioriBound>> {
    let Some(r0) = duality::radial_level(&spec.integrand, spec.t0_sup()) else {
        return Ok(None);
    };
    let g = spec.grid.gradient(&state.u)?;
    let l1 = spec.grid.cell_norm(&g, Norm::L1);
    let l2 = spec.grid.cell_norm(&g, Norm::L2);
    let gamma = (0.5 * spec.coercivity_margin).min(0.5);
    let lhs = l1 + l2 * l2 / state.k;
    let rhs = (state.energy + spec.integrand.recession_coeff() * spec.grid.measure() * r0) / gamma;
    Ok(Some(AprioriBound { lhs, rhs }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub k: f64,
    pub energy: f64,
    pub energy_unregularised: f64,
    pub grad_l1: f64,
    /// `k⁻¹‖∇uₖ‖²_{L²}`.
    pub viscous_l2sq: f64,
    /// `k⁻¹ᐟ²‖∇uₖ‖_{L²}`.
    pub viscous_scaled_l2: f64,
    pub max_grad: f64,
    pub w22: Option<SecondDifference>,
    pub gk_l2: Option<f64>,
    pub sigma_h1: Option<f64>,
    pub el_residual_inf: f64,
    pub newton_iters: usize,
    pub min_block_eig: f64,
    pub bound: Option<AprioriBound>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveTrace {
    pub records: Vec<TraceRecord>,
}

impl SolveTrace {
    /// `𝔉ₖ[uₖ]` non-increasing in `k` up to [`MONOTONE_SLACK`].
    pub fn energy_monotone(&self) -> bool {
        self.records.windows(2).all(|w| w[1].energy <= w[0].energy + MONOTONE_SLACK)
    }
}

/// Records every monitor for a converged state.
pub fn trace_record(spec: &ProblemSpec, state: &PrimalState) -> Result<TraceRecord> {
    let g = spec.grid.gradient(&state.u)?;
    let l2 = spec.grid.cell_norm(&g, Norm::L2);
    let gk_l2 = gk_field(spec, state).ok().map(|gk| spec.grid.cell_norm(&gk, Norm::L2));
    Ok(TraceRecord {
        k: state.k,
        energy: state.energy,
        energy_unregularised: energy_of_gradient(spec, &g, None),
        grad_l1: spec.grid.cell_norm(&g, Norm::L1),
        viscous_l2sq: l2 * l2 / state.k,
        viscous_scaled_l2: l2 / state.k.sqrt(),
        max_grad: spec.grid.cell_norm(&g, Norm::Linf),
        w22: monitor_w22(spec, state).ok(),
        gk_l2,
        sigma_h1: sigma_h1(spec, state).ok(),
        el_residual_inf: state.el_residual_inf,
        newton_iters: state.newton_iters,
        min_block_eig: state.min_block_eig,
        bound: apriori_bound(spec, state)?,
    })
}

#[derive(Debug, Clone)]
pub struct ContinuationResult {
    pub trace: SolveTrace,
    pub states: Vec<PrimalState>,
    pub energy_monotone: bool,
}

/// A continuation run stopped by a solver error, with everything computed before it.
#[derive(Debug)]
pub struct PartialRun {
    pub completed: ContinuationResult,
    pub error: Error,
}

/// Solves along `schedule`, warm-starting each `k` from the previous minimiser.
pub fn continuation_run(
    spec: &ProblemSpec,
    schedule: &ContinuationSchedule,
    cfg: &NewtonConfig,
    u_init: Option<&NodeField>,
) -> std::result::Result<ContinuationResult, Box<PartialRun>> {
    let mut u = u_init.cloned().unwrap_or_else(|| spec.grid.zero_nodes());
    let mut out = ContinuationResult { trace: SolveTrace::default(), states: Vec::new(), energy_monotone: true };
    for &k in schedule.k_values() {
        let step = newton_solve(spec, k, &u, cfg).and_then(|s| trace_record(spec, &s).map(|r| (s, r)));
        match step {
            Ok((state, rec)) => {
                u = state.u.clone();
                out.trace.records.push(rec);
                out.states.push(state);
            }
            Err(error) => {
                out.energy_monotone = out.trace.energy_monotone();
                return Err(Box::new(PartialRun { completed: out, error }));
            }
        }
    }
    out.energy_monotone = out.trace.energy_monotone();
    Ok(out)
}

/// Uniform random nodal field in `[−amplitude, amplitude]`, kernel removed.
pub fn random_field(grid: &Grid, seed: u64, amplitude: f64) -> NodeField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = grid.zero_nodes();
    u.values.iter_mut().for_each(|v| *v = rng.gen_range(-amplitude..=amplitude));
    grid.project_out_kernel(&u)
}
