//! Dual certificates extracted from primal iterates, and coercivity checks.
//!
//! For a minimiser `uₖ` of the viscous problem the candidate stress is
//! `σₖ = Aₖ(∇uₖ) − T₀`, so `T₀ + σₖ = Aₖ(∇uₖ)` and the regularised dual value
//! is `−∫ fₖ*(|Aₖ(∇uₖ)|)`. Its pairing with nodal gradients is exactly the
//! Euler–Lagrange residual, which measures how far `σₖ` is from the
//! orthogonal complement of gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::domain::CellField;
use crate::integrand::{conjugate, dot, norm, Profile, RadialIntegrand, Regularised};
use crate::solver::{energy_of_gradient, flux, PrimalState, ProblemSpec};
use crate::{Error, Result};

/// Tolerance of the conjugate evaluations.
const CONJ_TOL: f64 = 1e-13;
/// Relative shrink of the recession ball used for the limit dual value.
pub const CLIP: f64 = 1e-9;
/// Below this magnitude a margin counts as zero.
pub const CLASSIFY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DualCertificate {
    pub k: f64,
    pub sigma: CellField,
    /// `max_j |∫ σ : ∇φⱼ| / ‖∇φⱼ‖_{L¹}` over the nodal basis.
    pub feasibility_residual: f64,
    /// `−Σ |c| fₖ*(|T₀ + σ|)`.
    pub dual_value_reg: f64,
    /// `−Σ |c| f*(|T₀ + σ̂|)` with `T₀ + σ̂` clipped into the recession ball.
    pub dual_value_limit: f64,
    /// `𝔉ₖ[uₖ] − dual_value_reg`.
    pub gap_reg: f64,
    /// Cells where clipping was active.
    pub clipped_cells: usize,
}

pub fn sigma_from_primal(spec: &ProblemSpec, state: &PrimalState) -> Result<DualCertificate> {
    let grid = &spec.grid;
    let g = grid.gradient(&state.u)?;
    let sigma = flux(spec, &g, Some(state.k));
    let w = grid.cell_volume();
    let reg = Regularised { base: &spec.integrand, k: state.k };
    let finf = spec.integrand.recession_coeff();
    let cap = finf * (1.0 - CLIP);
    let mut dual_reg = 0.0;
    let mut dual_lim = 0.0;
    let mut clipped = 0;
    for c in 0..g.len() {
        let s: Vec<f64> = sigma.cell(c).iter().zip(spec.t0.cell(c)).map(|(a, b)| a + b).collect();
        let m = norm(&s);
        dual_reg -= w * conjugate(&reg, m, CONJ_TOL)?;
        let mc = if m > cap {
            clipped += 1;
            cap
        } else {
            m
        };
        dual_lim -= w * spec.integrand.conjugate(mc, CONJ_TOL)?;
    }
    let primal = energy_of_gradient(spec, &g, Some(state.k));
    Ok(DualCertificate {
        k: state.k,
        feasibility_residual: feasibility_residual(spec, &sigma)?,
        sigma,
        dual_value_reg: dual_reg,
        dual_value_limit: dual_lim,
        gap_reg: primal - dual_reg,
        clipped_cells: clipped,
    })
}

/// Dual-norm defect of `σ` against gradients of the nodal basis.
pub fn feasibility_residual(spec: &ProblemSpec, sigma: &CellField) -> Result<f64> {
    let grid = &spec.grid;
    let r = grid.gradient_adjoint(sigma)?;
    let (m, d) = (grid.nodes_per_cell(), grid.dim());
    let b = grid.stencil();
    let w = grid.cell_volume();
    let mut basis_l1 = vec![0.0; grid.n_nodes()];
    for c in 0..grid.n_cells() {
        for (l, &node) in grid.cell_node_slots(c).iter().enumerate() {
            let g2: f64 = (0..d).map(|s| b[s * m + l] * b[s * m + l]).sum();
            basis_l1[node] += w * g2.sqrt();
        }
    }
    let nn = grid.components();
    Ok((0..r.values.len()).map(|i| r.values[i].abs() / basis_l1[i / nn]).fold(0.0, f64::max))
}

/// `max_c |fₖ(|z|) + fₖ*(|Aₖ(z)|) − Aₖ(z) : z|` at `z = ∇uₖ`.
pub fn pointwise_duality_check(spec: &ProblemSpec, state: &PrimalState) -> Result<f64> {
    let g = spec.grid.gradient(&state.u)?;
    let reg = Regularised { base: &spec.integrand, k: state.k };
    let mut worst: f64 = 0.0;
    for c in 0..g.len() {
        let z = g.cell(c);
        let a = spec.integrand.tensor_a_k(z, state.k);
        let t = norm(z);
        let gap = reg.f(t) + conjugate(&reg, norm(&a), CONJ_TOL)? - dot(&a, z);
        worst = worst.max(gap.abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoercivityMode {
    Radial,
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Coercive,
    Borderline,
    Supercritical,
}

impl Classification {
    pub fn from_margin(margin: f64) -> Self {
        if margin > CLASSIFY_TOL {
            Classification::Coercive
        } else if margin >= -CLASSIFY_TOL {
            Classification::Borderline
        } else {
            Classification::Supercritical
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Classification::Coercive => "coercive",
            Classification::Borderline => "borderline",
            Classification::Supercritical => "supercritical",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoercivityReport {
    pub mode: CoercivityMode,
    /// Radial: `f∞(1) − ‖T₀‖∞`. General: sampled minimum of `F∞(ξ) − T₀ : ξ`.
    pub margin: f64,
    /// `margin / 4`, zero unless coercive.
    pub delta: f64,
    /// Smallest `ℓ ≥ 1` with `F(ℓξ)/ℓ ≥ F∞(ξ) − δ` on the net, when computable.
    pub ell0: Option<f64>,
    /// `c` in `𝔉[w] ≥ c‖∇w‖₁ − const`.
    pub lower_bound_constant: f64,
    pub classification: Classification,
    /// Radial only: `min{t : f(t)/t ≥ (f∞(1) + ‖T₀‖∞)/2}`.
    pub r0: Option<f64>,
    /// General only: margin minus the net's Lipschitz correction.
    pub certified_bound: Option<f64>,
}

/// Smallest `t > 0` with `f(t)/t ≥ target`, for `target < f∞(1)`.
fn ratio_level<P: Profile + ?Sized>(p: &P, target: f64, start: f64) -> Option<f64> {
    let ratio = |t: f64| p.f(t) / t;
    if ratio(start) >= target {
        return Some(start);
    }
    let (mut lo, mut hi) = (start, 2.0 * start.max(1.0));
    while ratio(hi) < target {
        lo = hi;
        hi *= 2.0;
        if hi > 1e15 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if ratio(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// `R₀ = min{t : f(t)/t ≥ (f∞(1) + ‖T₀‖∞)/2}`; `None` unless `‖T₀‖∞ < f∞(1)`.
pub fn radial_level(f: &RadialIntegrand, t0_sup: f64) -> Option<f64> {
    let finf = f.recession_coeff();
    if t0_sup >= finf {
        return None;
    }
    ratio_level(f, 0.5 * (finf + t0_sup), f64::MIN_POSITIVE.sqrt())
}

pub fn coercivity_radial(spec: &ProblemSpec) -> CoercivityReport {
    let f = &spec.integrand;
    let finf = f.recession_coeff();
    let sup = spec.t0_sup();
    let margin = finf - sup;
    let classification = Classification::from_margin(margin);
    let coercive = classification == Classification::Coercive;
    let delta = if coercive { 0.25 * margin } else { 0.0 };
    CoercivityReport {
        mode: CoercivityMode::Radial,
        margin,
        delta,
        ell0: if coercive { ratio_level(f, finf - delta, 1.0) } else { None },
        lower_bound_constant: if coercive { 0.5 * margin } else { 0.0 },
        classification,
        r0: if coercive { radial_level(f, sup) } else { None },
        certified_bound: None,
    }
}

/// A scalar function on `ℝ^{N×n}`, row-major.
pub type MatrixFn<'a> = &'a dyn Fn(&[f64]) -> f64;

/// Inputs for the general (non-radial) coercivity test on `ℝ^{N×n}`.
pub struct GeneralCoercivity<'a> {
    /// `F∞` on the unit sphere of `ℝ^{N×n}`.
    pub recession: MatrixFn<'a>,
    /// Lipschitz constant of `F∞` on the sphere.
    pub lipschitz: f64,
    /// The integrand `F` itself, needed only for `ℓ₀`.
    pub integrand: Option<MatrixFn<'a>>,
    /// Seed of the random net used above three dimensions.
    pub seed: u64,
}

const MAX_NET: usize = 200_000;

/// Points on the unit sphere of `ℝ^d` with spacing about `mesh`.
pub fn sphere_net(d: usize, mesh: f64, seed: u64) -> Vec<Vec<f64>> {
    use std::f64::consts::{PI, TAU};
    match d {
        0 => Vec::new(),
        1 => vec![vec![1.0], vec![-1.0]],
        2 => {
            let n = ((TAU / mesh).ceil() as usize).clamp(4, MAX_NET);
            (0..n)
                .map(|i| {
                    let a = TAU * i as f64 / n as f64;
                    vec![a.cos(), a.sin()]
                })
                .collect()
        }
        3 => {
            let n = ((8.0 * PI / (mesh * mesh)).ceil() as usize).clamp(8, MAX_NET);
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let a = golden * i as f64;
                    vec![r * a.cos(), r * a.sin(), z]
                })
                .collect()
        }
        _ => {
            let n = ((2.0 / mesh).powi(d as i32 - 1).ceil() as usize).clamp(2 * d, MAX_NET);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::with_capacity(n + 2 * d);
            for i in 0..d {
                for s in [1.0, -1.0] {
                    let mut e = vec![0.0; d];
                    e[i] = s;
                    out.push(e);
                }
            }
            while out.len() < n + 2 * d {
                let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let m = norm(&v);
                if m > 1e-8 {
                    out.push(v.iter().map(|x| x / m).collect());
                }
            }
            out
        }
    }
}

/// Samples `F∞(ξ) − T₀(x) : ξ` over a sphere net and all cells.
pub fn coercivity_general(input: &GeneralCoercivity, t0: &CellField, mesh: f64) -> Result<CoercivityReport> {
    if !(mesh > 0.0) {
        return Err(Error::Domain { what: "sphere net mesh", value: mesh });
    }
    let d = t0.stride();
    let net = sphere_net(d, mesh, input.seed);
    let finf: Vec<f64> = net.iter().map(|xi| (input.recession)(xi)).collect();
    let mut loads: Vec<&[f64]> = (0..t0.len()).map(|c| t0.cell(c)).collect();
    loads.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    loads.dedup();
    let mut sampled = f64::INFINITY;
    for load in &loads {
        for (xi, fi) in net.iter().zip(&finf) {
            sampled = sampled.min(fi - dot(load, xi));
        }
    }
    let t0_sup = loads.iter().map(|l| norm(l)).fold(0.0, f64::max);
    let certified = sampled - (input.lipschitz + t0_sup) * mesh;
    let classification = Classification::from_margin(sampled);
    let coercive = classification == Classification::Coercive;
    let delta = if coercive { 0.25 * sampled } else { 0.0 };
    let ell0 = match (coercive, input.integrand) {
        (true, Some(f)) => general_ell0(f, &net, &finf, delta),
        _ => None,
    };
    Ok(CoercivityReport {
        mode: CoercivityMode::General,
        margin: sampled,
        delta,
        ell0,
        lower_bound_constant: if coercive { 0.5 * sampled } else { 0.0 },
        classification,
        r0: None,
        certified_bound: Some(certified),
    })
}

fn general_ell0(f: &dyn Fn(&[f64]) -> f64, net: &[Vec<f64>], finf: &[f64], delta: f64) -> Option<f64> {
    let ok = |l: f64| {
        net.iter().zip(finf).all(|(xi, fi)| {
            let z: Vec<f64> = xi.iter().map(|x| l * x).collect();
            f(&z) / l >= fi - delta
        })
    };
    if ok(1.0) {
        return Some(1.0);
    }
    let (mut lo, mut hi) = (1.0, 2.0);
    while !ok(hi) {
        lo = hi;
        hi *= 2.0;
        if hi > 1e15 {
            return None;
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Grid;
    use crate::solver::{newton_solve, NewtonConfig};

    fn line(t0: f64) -> ProblemSpec {
        ProblemSpec::constant(Grid::interval(-1.0, 1.0, 32, 1).unwrap(), RadialIntegrand::area(), &[t0]).unwrap()
    }

    #[test]
    fn radial_classification() {
        assert_eq!(coercivity_radial(&line(1.0)).classification, Classification::Borderline);
        assert_eq!(coercivity_radial(&line(1.5)).classification, Classification::Supercritical);
        let rep = coercivity_radial(&line(0.5));
        assert_eq!(rep.classification, Classification::Coercive);
        assert!((rep.margin - 0.5).abs() < 1e-15);
        // (√(1+t²) − 1)/t = 3/4 ⇔ t = 24/7
        assert!((rep.r0.unwrap() - 24.0 / 7.0).abs() < 1e-10);
        let ell0 = rep.ell0.unwrap();
        assert!(ell0 >= 1.0 && (RadialIntegrand::area().f(ell0) / ell0 - 0.875).abs() < 1e-10);
    }

    #[test]
    fn zero_load_certificate() {
        let spec = line(0.0);
        let st = newton_solve(&spec, 4.0, &spec.grid.zero_nodes(), &NewtonConfig::default()).unwrap();
        let cert = sigma_from_primal(&spec, &st).unwrap();
        assert!(cert.sigma.values.iter().all(|v| v.abs() < 1e-12));
        assert!(cert.dual_value_reg.abs() < 1e-12 && cert.dual_value_limit.abs() < 1e-12);
        assert!(pointwise_duality_check(&spec, &st).unwrap() < 1e-14);
    }

    #[test]
    fn coercive_certificate_matches_primal() {
        let spec = line(0.5);
        let st = newton_solve(&spec, 1e8, &spec.grid.zero_nodes(), &NewtonConfig::default()).unwrap();
        let cert = sigma_from_primal(&spec, &st).unwrap();
        assert!(cert.sigma.values.iter().all(|v| v.abs() < 1e-6));
        assert!((cert.dual_value_reg - st.energy).abs() < 1e-6);
        assert!(cert.gap_reg >= -1e-10);
        assert!(pointwise_duality_check(&spec, &st).unwrap() < 1e-8);
    }

    #[test]
    fn general_radial_case_approaches_margin() {
        let grid = Grid::rectangle((0.0, 1.0), (0.0, 1.0), 2, 2, &crate::domain::Mask::Full, 1).unwrap();
        let t0 = grid.cell_field_from_fn(1, 2, |_| vec![0.6, 0.0]);
        let one = |_: &[f64]| 1.0;
        let input = GeneralCoercivity { recession: &one, lipschitz: 0.0, integrand: None, seed: 1 };
        let coarse = coercivity_general(&input, &t0, 0.1).unwrap();
        let fine = coercivity_general(&input, &t0, 0.001).unwrap();
        assert!((fine.margin - 0.4).abs() < 1e-12);
        let (c, f) = (coarse.certified_bound.unwrap(), fine.certified_bound.unwrap());
        assert!(c < f && f <= 0.4 && (f - 0.4).abs() < 1e-3);
    }

    #[test]
    fn general_one_dimensional_borderline() {
        let grid = Grid::interval(0.0, 1.0, 3, 1).unwrap();
        let t0 = grid.cell_field_from_fn(1, 1, |_| vec![1.0]);
        let one = |_: &[f64]| 1.0;
        let input = GeneralCoercivity { recession: &one, lipschitz: 0.0, integrand: None, seed: 0 };
        let rep = coercivity_general(&input, &t0, 0.5).unwrap();
        assert_eq!(rep.margin, 0.0);
        assert_eq!(rep.classification, Classification::Borderline);
    }

    #[test]
    fn sphere_nets_are_unit() {
        for d in 1..=5 {
            for p in sphere_net(d, 0.3, 7) {
                assert!((norm(&p) - 1.0).abs() < 1e-12);
            }
        }
    }
}
