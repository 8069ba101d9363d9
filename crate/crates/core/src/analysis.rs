//! Structure diagnostics for gradient limits.
//!
//! - discrete curl tests and circulation around holes of the mask,
//! - least-squares potential reconstruction,
//! - convergence forensics along a continuation run,
//! - the one-dimensional relaxed energy with explicit jump parts and a
//!   brute-force search for its infimum on tiny grids.

use crate::domain::{CellField, Grid, NodeField, Norm};
use crate::integrand::{dot, norm, Profile, RadialIntegrand};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CurlReport {
    pub is_curl_free: bool,
    /// Largest curl density: plaquette circulation per unit area, or the weak
    /// pairing against an interior bilinear bump divided by the bump's mass.
    pub curl_max: f64,
    /// Largest raw plaquette circulation.
    pub circulation_max: f64,
    /// Circulation around each hole, hole-major then component.
    pub hole_circulations: Vec<f64>,
}

/// Tests whether `E` (shape `N × 2`) is curl-free up to `tol` in curl density.
pub fn curl_free_test(grid: &Grid, e: &CellField, tol: f64) -> Result<CurlReport> {
    let plaquettes = grid.plaquette_curl(e)?;
    let area = grid.cell_volume();
    let mut circulation_max: f64 = 0.0;
    for p in &plaquettes {
        for c in &p.circulation {
            circulation_max = circulation_max.max(c.abs());
        }
    }
    let mut curl_max = circulation_max / area;
    curl_max = curl_max.max(weak_curl_max(grid, e));
    let mut hole_circulations = Vec::new();
    for path in grid.hole_loops() {
        hole_circulations.extend(grid.loop_circulation(e, &path)?);
    }
    Ok(CurlReport { is_curl_free: curl_max <= tol, curl_max, circulation_max, hole_circulations })
}

/// `max_φ |∫ e₁∂₂φ − e₂∂₁φ| / ∫φ` over bilinear bumps whose four cells are active.
fn weak_curl_max(grid: &Grid, e: &CellField) -> f64 {
    let (nx, ny) = (grid.cells_per_axis()[0], grid.cells_per_axis()[1]);
    let (hx, hy) = (grid.spacing()[0], grid.spacing()[1]);
    let w = grid.cell_volume();
    let mut worst: f64 = 0.0;
    for j in 1..ny as i64 {
        for i in 1..nx as i64 {
            // the bump at node (i, j) seen from each surrounding cell: (cell, ∂₁φ, ∂₂φ)
            let around = [
                (grid.cell_at(i - 1, j - 1), 0.5 / hx, 0.5 / hy),
                (grid.cell_at(i, j - 1), -0.5 / hx, 0.5 / hy),
                (grid.cell_at(i, j), -0.5 / hx, -0.5 / hy),
                (grid.cell_at(i - 1, j), 0.5 / hx, -0.5 / hy),
            ];
            if around.iter().any(|a| a.0.is_none()) {
                continue;
            }
            for row in 0..e.rows {
                let mut acc = 0.0;
                for &(c, d1, d2) in &around {
                    let v = e.cell(c.unwrap());
                    acc += w * (v[row * 2] * d2 - v[row * 2 + 1] * d1);
                }
                // ∫φ = w under cell-centre quadrature
                worst = worst.max(acc.abs() / w);
            }
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub v: NodeField,
    /// `‖∇v − E‖_{L¹}`.
    pub residual_l1: f64,
    /// Zero in 1D.
    pub curl_max: f64,
    pub hole_circulations: Vec<f64>,
}

/// Least-squares potential: minimises `‖∇v − E‖²_{L²}` over kernel-free `v`.
pub fn reconstruct_potential(grid: &Grid, e: &CellField) -> Result<ReconstructionResult> {
    if e.rows != grid.components() || e.cols != grid.dim() || e.len() != grid.n_cells() {
        return Err(Error::Shape(format!("field {}×{} on {} cells does not fit the grid", e.rows, e.cols, e.len())));
    }
    let nd = e.stride();
    let mut identity = vec![0.0; nd * nd];
    for i in 0..nd {
        identity[i * nd + i] = 1.0;
    }
    let k = grid.stiffness(|_| identity.clone());
    let rhs = grid.gradient_adjoint(e)?;
    let v = grid.solve_singular(k, &rhs.values)?;
    let residual_l1 = grid.cell_norm(&grid.gradient(&v)?.sub(e), Norm::L1);
    let (curl_max, hole_circulations) = if grid.dim() == 2 {
        let rep = curl_free_test(grid, e, f64::INFINITY)?;
        (rep.curl_max, rep.hole_circulations)
    } else {
        (0.0, Vec::new())
    };
    Ok(ReconstructionResult { v, residual_l1, curl_max, hole_circulations })
}

/// Levels `2ⁱ`, `i = 0..=10`, used for tail profiles.
pub fn tail_levels() -> Vec<f64> {
    (0..=10).map(|i| 2f64.powi(i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForensicsReport {
    /// `‖E_{j+1} − E_j‖_{L¹}`.
    pub cauchy_l1: Vec<f64>,
    pub cauchy_decreasing: bool,
    /// Share of cells where `|E_{j+1} − E_j|` is non-increasing in `j`.
    pub pointwise_fraction: f64,
    pub levels: Vec<f64>,
    /// `tails[j][i]`: tail mass of snapshot `j` at `levels[i]`.
    pub tails: Vec<Vec<f64>>,
    /// `exceptional[j][i]`: `|{|E_j| ≥ levels[i]}|`.
    pub exceptional: Vec<Vec<f64>>,
}

pub fn convergence_forensics(grid: &Grid, snapshots: &[CellField]) -> Result<ForensicsReport> {
    if snapshots.len() < 3 {
        return Err(Error::TooFewSnapshots { needed: 3, got: snapshots.len() });
    }
    let diffs: Vec<CellField> = snapshots.windows(2).map(|w| w[1].sub(&w[0])).collect();
    let cauchy_l1: Vec<f64> = diffs.iter().map(|d| grid.cell_norm(d, Norm::L1)).collect();
    let cauchy_decreasing = cauchy_l1.windows(2).all(|w| w[1] <= w[0]);
    let mags: Vec<Vec<f64>> = diffs.iter().map(|d| d.magnitudes()).collect();
    let cells = grid.n_cells();
    let monotone = (0..cells).filter(|&c| mags.windows(2).all(|w| w[1][c] <= w[0][c] * (1.0 + 1e-12) + 1e-300)).count();
    let levels = tail_levels();
    let tails = snapshots.iter().map(|s| levels.iter().map(|&l| grid.tail_mass(s, l)).collect()).collect();
    let exceptional =
        snapshots.iter().map(|s| levels.iter().map(|&l| grid.exceptional_measure(s, l)).collect()).collect();
    Ok(ForensicsReport {
        cauchy_l1,
        cauchy_decreasing,
        pointwise_fraction: monotone as f64 / cells as f64,
        levels,
        tails,
        exceptional,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Jump {
    pub position: f64,
    pub height: Vec<f64>,
}

/// A BV function on an interval: absolutely continuous derivative per cell
/// plus a finite list of jumps.
#[derive(Debug, Clone)]
pub struct BVField1D {
    pub grid: Grid,
    /// `N × 1` per cell.
    pub ac_density: CellField,
    pub jumps: Vec<Jump>,
}

impl BVField1D {
    pub fn new(grid: Grid, ac_density: CellField, mut jumps: Vec<Jump>) -> Result<Self> {
        if grid.dim() != 1 {
            return Err(Error::Grid("BV fields live on 1D grids".into()));
        }
        let nn = grid.components();
        if ac_density.rows != nn || ac_density.cols != 1 || ac_density.len() != grid.n_cells() {
            return Err(Error::Shape("absolutely continuous part does not fit the grid".into()));
        }
        let (a, b) = grid.extent()[0];
        jumps.sort_by(|x, y| x.position.total_cmp(&y.position));
        for (i, j) in jumps.iter().enumerate() {
            if !(j.position > a && j.position < b) {
                return Err(Error::Invalid(format!("jump at {} not inside ({a}, {b})", j.position)));
            }
            if j.height.len() != nn {
                return Err(Error::Shape(format!("jump height has {} entries, N = {nn}", j.height.len())));
            }
            if i > 0 && jumps[i - 1].position == j.position {
                return Err(Error::Invalid(format!("two jumps at {}", j.position)));
            }
        }
        Ok(Self { grid, ac_density, jumps })
    }
}

/// Relaxed energy `∫ f(|w′|) − T₀ w′ + Σ f∞(1)|[w]| − T₀(x)[w]`.
pub fn relaxed_energy_1d(f: &RadialIntegrand, t0: &dyn Fn(f64) -> Vec<f64>, w: &BVField1D) -> f64 {
    let grid = &w.grid;
    let h = grid.cell_volume();
    let mut total = 0.0;
    for c in 0..grid.n_cells() {
        let ac = w.ac_density.cell(c);
        total += h * (f.f(norm(ac)) - dot(&t0(grid.cell_center(c)[0]), ac));
    }
    let finf = f.recession_coeff();
    for j in &w.jumps {
        total += finf * norm(&j.height) - dot(&t0(j.position), &j.height);
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchBudget {
    /// Box `[−radius, radius]` for every slot.
    pub radius: f64,
    pub points: usize,
    /// Zoom passes around the incumbent after the first sweep.
    pub refinements: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self { radius: 1e3, points: 201, refinements: 40 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub value: f64,
    pub ac: Vec<f64>,
    /// `(position, height)` per jump slot.
    pub jumps: Vec<(f64, f64)>,
}

/// Minimises `g` over `[−r, r]` by a grid sweep followed by zoom passes.
fn sweep(g: &dyn Fn(f64) -> f64, budget: &SearchBudget) -> (f64, f64) {
    let r = budget.radius;
    let n = budget.points.max(3);
    let mut best = (0.0, g(0.0));
    let (mut lo, mut hi) = (-r, r);
    for _ in 0..=budget.refinements {
        let step = (hi - lo) / (n - 1) as f64;
        for i in 0..n {
            let x = lo + step * i as f64;
            let v = g(x);
            if v < best.1 {
                best = (x, v);
            }
        }
        lo = (best.0 - step).max(-r);
        hi = (best.0 + step).min(r);
    }
    best
}

/// Brute-force infimum of the relaxed energy on a grid of at most four cells
/// with jump slots at the first `jump_slots` interior nodes.
///
/// The energy separates into one term per cell and one per slot, so each is
/// searched on its own.
pub fn bv_infimum_bruteforce(
    f: &RadialIntegrand,
    t0: &dyn Fn(f64) -> f64,
    grid: &Grid,
    jump_slots: usize,
    budget: &SearchBudget,
) -> Result<BruteForceResult> {
    if grid.dim() != 1 || grid.components() != 1 {
        return Err(Error::Grid("brute force needs a scalar 1D grid".into()));
    }
    let cells = grid.n_cells();
    if cells > 4 || jump_slots > 2 || jump_slots >= cells {
        return Err(Error::Invalid(format!(
            "brute force limited to ≤ 4 cells and ≤ 2 interior jump slots, got {cells} and {jump_slots}"
        )));
    }
    let h = grid.cell_volume();
    let finf = f.recession_coeff();
    let mut value = 0.0;
    let mut ac = Vec::with_capacity(cells);
    for c in 0..cells {
        let t = t0(grid.cell_center(c)[0]);
        let (x, v) = sweep(&|a: f64| h * (f.f(a.abs()) - t * a), budget);
        ac.push(x);
        value += v;
    }
    let mut jumps = Vec::new();
    for s in 0..jump_slots {
        let pos = grid.node_coords(s + 1)[0];
        let t = t0(pos);
        let (x, v) = sweep(&|j: f64| finf * j.abs() - t * j, budget);
        jumps.push((pos, x));
        value += v;
    }
    Ok(BruteForceResult { value, ac, jumps })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularMass {
    pub mass_above: f64,
    pub total_mass: f64,
    /// `mass_above / total_mass`, or 0 when both vanish.
    pub ratio: f64,
    pub degenerate: bool,
}

pub fn singular_mass_indicator(grid: &Grid, e: &CellField, level: f64) -> Result<SingularMass> {
    if !(level > 0.0) {
        return Err(Error::Domain { what: "tail level", value: level });
    }
    let mass_above = grid.tail_mass(e, level);
    let total_mass = grid.cell_norm(e, Norm::L1);
    if total_mass == 0.0 {
        return Ok(SingularMass { mass_above, total_mass, ratio: 0.0, degenerate: true });
    }
    Ok(SingularMass { mass_above, total_mass, ratio: mass_above / total_mass, degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Mask;
    use std::f64::consts::TAU;

    fn square(n: usize) -> Grid {
        Grid::rectangle((0.0, 1.0), (0.0, 1.0), n, n, &Mask::Full, 1).unwrap()
    }

    #[test]
    fn curl_of_a_shear() {
        let g = square(8);
        let e = g.cell_field_from_fn(1, 2, |p| vec![0.0, p[0]]);
        let rep = curl_free_test(&g, &e, 1e-6).unwrap();
        assert!(!rep.is_curl_free);
        assert!((rep.curl_max - 1.0).abs() < 1e-12);
        assert!(rep.hole_circulations.is_empty());
    }

    #[test]
    fn gradients_pass_both_curl_tests() {
        let g = square(9);
        let u = g.node_field_from_fn(|p| vec![(p[0] * 4.0).sin() * p[1].exp()]);
        let e = g.gradient(&u).unwrap();
        let rep = curl_free_test(&g, &e, 1e-12).unwrap();
        assert!(rep.is_curl_free, "{}", rep.curl_max);
    }

    #[test]
    fn vortex_on_annulus() {
        let g = Grid::rectangle((-1.0, 1.0), (-1.0, 1.0), 64, 64, &Mask::Annulus { r_in: 0.5, r_out: 1.0 }, 1).unwrap();
        let e = g.cell_field_from_fn(1, 2, |p| {
            let r2 = p[0] * p[0] + p[1] * p[1];
            vec![-p[1] / r2, p[0] / r2]
        });
        let rep = curl_free_test(&g, &e, 5e-2).unwrap();
        assert!(rep.is_curl_free, "{}", rep.curl_max);
        assert_eq!(rep.hole_circulations.len(), 1);
        assert!((rep.hole_circulations[0] - TAU).abs() < 0.02 * TAU, "{:?}", rep.hole_circulations);
        let rec = reconstruct_potential(&g, &e).unwrap();
        assert!(rec.residual_l1 > 0.1);
    }

    #[test]
    fn reconstruction_of_gradients_and_constants() {
        let g = square(12);
        let u = g.project_out_kernel(&g.node_field_from_fn(|p| vec![p[0] * p[0] - p[1].cos()]));
        let rec = reconstruct_potential(&g, &g.gradient(&u).unwrap()).unwrap();
        assert!(rec.residual_l1 < 1e-10);
        assert!(rec.v.max_abs_diff(&u) < 1e-10);

        let c = g.cell_field_from_fn(1, 2, |_| vec![2.0, -1.0]);
        let rec = reconstruct_potential(&g, &c).unwrap();
        assert!(rec.residual_l1 < 1e-12);
        let expect = g.project_out_kernel(&g.node_field_from_fn(|p| vec![2.0 * p[0] - p[1]]));
        assert!(rec.v.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn forensics_of_a_constant_sequence() {
        let g = square(4);
        let e = g.cell_field_from_fn(1, 2, |p| vec![p[0], 3.0]);
        let rep = convergence_forensics(&g, &[e.clone(), e.clone(), e.clone()]).unwrap();
        assert!(rep.cauchy_l1.iter().all(|d| *d == 0.0));
        assert_eq!(rep.pointwise_fraction, 1.0);
        assert!(matches!(convergence_forensics(&g, &[e.clone(), e]), Err(Error::TooFewSnapshots { .. })));
    }

    fn bv(jump: f64) -> BVField1D {
        let grid = Grid::interval(-1.0, 1.0, 8, 1).unwrap();
        let ac = CellField::zeros(8, 1, 1);
        BVField1D::new(grid, ac, vec![Jump { position: 0.1, height: vec![jump] }]).unwrap()
    }

    #[test]
    fn relaxed_energy_jump_structure() {
        let f = RadialIntegrand::area();
        let one = |_: f64| vec![1.0];
        assert_eq!(relaxed_energy_1d(&f, &one, &bv(0.5)), 0.0);
        assert_eq!(relaxed_energy_1d(&f, &one, &bv(-0.5)), 1.0);
    }

    #[test]
    fn jumps_must_lie_inside() {
        let grid = Grid::interval(0.0, 1.0, 2, 1).unwrap();
        let ac = CellField::zeros(2, 1, 1);
        assert!(BVField1D::new(grid, ac, vec![Jump { position: 1.0, height: vec![1.0] }]).is_err());
    }

    #[test]
    fn brute_force_infima() {
        let f = RadialIntegrand::area();
        let grid = Grid::interval(-1.0, 1.0, 4, 1).unwrap();
        let budget = SearchBudget::default();
        let coercive = bv_infimum_bruteforce(&f, &|_| 0.5, &grid, 2, &budget).unwrap();
        assert!((coercive.value - (3f64.sqrt() - 2.0)).abs() < 1e-9);
        assert!(coercive.jumps.iter().all(|j| j.1 == 0.0));
        let border = bv_infimum_bruteforce(&f, &|_| 1.0, &grid, 2, &budget).unwrap();
        assert!(border.value > -2.0 && border.value < -1.99);
        let zero = bv_infimum_bruteforce(&f, &|_| 0.0, &grid, 1, &budget).unwrap();
        assert_eq!(zero.value, 0.0);
    }

    #[test]
    fn singular_mass_conventions() {
        let g = square(4);
        let zero = CellField::zeros(16, 1, 2);
        let s = singular_mass_indicator(&g, &zero, 4.0).unwrap();
        assert!(s.degenerate && s.ratio == 0.0);
        let big = g.cell_field_from_fn(1, 2, |_| vec![5.0, 0.0]);
        assert_eq!(singular_mass_indicator(&g, &big, 4.0).unwrap().ratio, 1.0);
        assert!(singular_mass_indicator(&g, &big, 0.0).is_err());
    }
}
