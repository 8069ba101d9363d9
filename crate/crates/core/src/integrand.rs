//! Radially symmetric integrands `z ↦ f(|z|)` of linear growth.
//!
//! Three families are provided: the shifted area integrand
//! `f(t) = √(1+t²) − 1`, the μ-elliptic prototypes with
//! `f′(t) = t(1+t^{μ−1})^{−1/(μ−1)}`, and tabulated profiles read from a
//! two-column CSV file and interpolated by a monotone cubic.
//!
//! Tensors `z ∈ ℝ^{N×n}` are passed as flat row-major slices; all norms are
//! Frobenius norms.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::quadrature;
use crate::{Error, Result};

/// Below this magnitude `A` and its derivative are replaced by their limits at the origin.
pub const ZERO_THRESHOLD: f64 = 1e-12;

/// Absolute tolerance of the quadrature used for μ-elliptic profiles.
pub const QUAD_TOL: f64 = 1e-12;

/// Default tolerance for inverting `f′`.
pub const INV_TOL: f64 = 1e-14;

/// Cap on the doubling sequence used for the conjugate at `s = f∞(1)`.
pub const CONJUGATE_CAP: f64 = 1e9;

/// A scalar convex profile on `[0, ∞)` with `f(0) = f′(0) = 0`.
///
/// Implemented by [`RadialIntegrand`] and by the viscous regularisation
/// [`Regularised`]; the conjugate and inverse-derivative routines are generic
/// over it.
pub trait Profile {
    fn f(&self, t: f64) -> f64;
    fn df(&self, t: f64) -> f64;
    fn ddf(&self, t: f64) -> f64;
    /// `lim f′(t)`; `+∞` when `f′` is unbounded.
    fn slope_limit(&self) -> f64;
}

/// `fₖ(t) = f(t) + t²/(2k)`.
#[derive(Debug, Clone, Copy)]
pub struct Regularised<'a> {
    pub base: &'a RadialIntegrand,
    pub k: f64,
}

impl Profile for Regularised<'_> {
    fn f(&self, t: f64) -> f64 {
        self.base.f(t) + 0.5 * t * t / self.k
    }
    fn df(&self, t: f64) -> f64 {
        self.base.df(t) + t / self.k
    }
    fn ddf(&self, t: f64) -> f64 {
        self.base.ddf(t) + 1.0 / self.k
    }
    fn slope_limit(&self) -> f64 {
        f64::INFINITY
    }
}

/// Solves `f′(t) = s` by bisection on an exponentially expanded bracket.
pub fn inv_df<P: Profile + ?Sized>(p: &P, s: f64, tol: f64) -> Result<f64> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(Error::Domain { what: "inverse of f′", value: s });
    }
    let limit = p.slope_limit();
    if s >= limit {
        return Err(Error::OutOfRange { value: s, limit });
    }
    if s == 0.0 {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while p.df(hi) < s {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::OutOfRange { value: s, limit });
        }
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        let g = p.df(mid) - s;
        if g.abs() <= tol || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        if g < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Convex conjugate `f*(s) = sup_t (s t − f(t))` for `s ≥ 0`.
///
/// Returns `f64::INFINITY` above the recession slope. Exactly at the slope the
/// value is the limit along `t = 2ʲ` after one Richardson step, stopped when
/// successive extrapolations agree within `tol`, or `+∞` once `t` passes
/// [`CONJUGATE_CAP`].
pub fn conjugate<P: Profile + ?Sized>(p: &P, s: f64, tol: f64) -> Result<f64> {
    if !(s >= 0.0) {
        return Err(Error::Domain { what: "conjugate", value: s });
    }
    let limit = p.slope_limit();
    if s > limit {
        return Ok(f64::INFINITY);
    }
    if s == limit {
        // s t − f(t) typically approaches its limit like c/t; extrapolate the
        // doubling sequence instead of pushing t into cancellation territory
        let mut t = 1.0;
        let mut prev = s * t - p.f(t);
        let mut prev_extra = f64::NAN;
        while t < CONJUGATE_CAP {
            t *= 2.0;
            let next = s * t - p.f(t);
            let extra = 2.0 * next - prev;
            if (extra - prev_extra).abs() < tol {
                return Ok(extra);
            }
            prev = next;
            prev_extra = extra;
        }
        return Ok(f64::INFINITY);
    }
    let t = inv_df(p, s, INV_TOL)?;
    Ok(s * t - p.f(t))
}

/// Monotone cubic (Fritsch–Carlson) interpolant of a sampled profile.
#[derive(Debug, Clone)]
pub struct Table {
    t: Vec<f64>,
    f: Vec<f64>,
    d: Vec<f64>,
    source: Option<PathBuf>,
}

impl Table {
    /// Builds the interpolant. The first sample must be `(0, 0)`; the slope
    /// there is pinned to zero.
    pub fn new(t: Vec<f64>, f: Vec<f64>) -> Result<Self> {
        if t.len() != f.len() || t.len() < 3 {
            return Err(Error::Table("need at least three (t, f) pairs".into()));
        }
        if t[0] != 0.0 || f[0] != 0.0 {
            return Err(Error::Table("first row must be t = 0, f = 0".into()));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Table("t column must be strictly increasing".into()));
        }
        if t.iter().chain(f.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Table("non-finite entry".into()));
        }
        let m = t.len();
        let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..m - 1).map(|i| (f[i + 1] - f[i]) / h[i]).collect();
        let mut d = vec![0.0; m];
        for i in 1..m - 1 {
            if delta[i - 1] * delta[i] <= 0.0 {
                d[i] = 0.0;
            } else {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        d[m - 1] = delta[m - 2];
        Ok(Self { t, f, d, source: None })
    }

    /// Reads `t,f` rows from a CSV file; a non-numeric first row is treated as a header.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let err = |e: csv::Error| Error::Table(format!("{}: {e}", path.display()));
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_path(path)
            .map_err(err)?;
        let mut t = Vec::new();
        let mut f = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(err)?;
            if record.len() < 2 {
                return Err(Error::Table(format!("row {}: expected two columns", row + 1)));
            }
            match (record[0].parse::<f64>(), record[1].parse::<f64>()) {
                (Ok(a), Ok(b)) => {
                    t.push(a);
                    f.push(b);
                }
                _ if row == 0 => continue,
                _ => return Err(Error::Table(format!("row {}: not a number", row + 1))),
            }
        }
        let mut table = Self::new(t, f)?;
        table.source = Some(path.to_path_buf());
        Ok(table)
    }

    fn locate(&self, x: f64) -> usize {
        let i = self.t.partition_point(|&v| v <= x);
        i.saturating_sub(1).min(self.t.len() - 2)
    }

    /// Value, first and second derivative. Linear continuation past the last sample.
    fn eval(&self, x: f64) -> (f64, f64, f64) {
        let last = self.t.len() - 1;
        if x >= self.t[last] {
            let slope = self.d[last];
            return (self.f[last] + slope * (x - self.t[last]), slope, 0.0);
        }
        let i = self.locate(x);
        let h = self.t[i + 1] - self.t[i];
        let s = (x - self.t[i]) / h;
        let (f0, f1, d0, d1) = (self.f[i], self.f[i + 1], self.d[i] * h, self.d[i + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        let val =
            (2.0 * s3 - 3.0 * s2 + 1.0) * f0 + (s3 - 2.0 * s2 + s) * d0 + (-2.0 * s3 + 3.0 * s2) * f1 + (s3 - s2) * d1;
        let der = ((6.0 * s2 - 6.0 * s) * f0
            + (3.0 * s2 - 4.0 * s + 1.0) * d0
            + (-6.0 * s2 + 6.0 * s) * f1
            + (3.0 * s2 - 2.0 * s) * d1)
            / h;
        let der2 =
            ((12.0 * s - 6.0) * f0 + (6.0 * s - 4.0) * d0 + (-12.0 * s + 6.0) * f1 + (6.0 * s - 2.0) * d1) / (h * h);
        (val, der, der2)
    }
}

#[derive(Debug, Clone)]
pub enum Family {
    Area,
    MuElliptic { mu: f64 },
    Tabulated(Table),
}

/// Cumulative integrals of `f′` at fixed knots; `f(t)` is then one short
/// adaptive integral away from the nearest knot below `t`.
#[derive(Debug, Clone)]
struct CumulativeCache {
    knots: Vec<f64>,
    values: Vec<f64>,
}

/// Logarithmic sample grid `{0} ∪ {2ʲ·10⁻³ : j = 0..40}`.
pub fn sample_grid() -> Vec<f64> {
    std::iter::once(0.0).chain((0..=40).map(|j| 1e-3 * 2f64.powi(j))).collect()
}

#[derive(Debug, Clone)]
pub struct RadialIntegrand {
    family: Family,
    nu: f64,
    l: f64,
    finf: f64,
    cache: Option<CumulativeCache>,
}

impl RadialIntegrand {
    /// `f(t) = √(1+t²) − 1` with `ν = 1`.
    ///
    /// `L = 1` suffices for linear growth, but `f″(t)(1+t)` peaks at
    /// `t* = (√17 − 3)/4` with value ≈ 1.1429, so `L` is set to that maximum.
    pub fn area() -> Self {
        let t = (17f64.sqrt() - 3.0) / 4.0;
        let l = (1.0 + t) * (1.0 + t * t).powf(-1.5);
        Self { family: Family::Area, nu: 1.0, l, finf: 1.0, cache: None }
    }

    /// `f(t) = ∫₀ᵗ (1+τ^{μ−1})^{−1/(μ−1)} τ dτ`.
    pub fn mu_elliptic(mu: f64) -> Result<Self> {
        if !(mu > 1.0) || !mu.is_finite() {
            return Err(Error::Domain { what: "μ-elliptic exponent", value: mu });
        }
        let mut me = Self { family: Family::MuElliptic { mu }, nu: 0.5, l: 1.0, finf: 1.0, cache: None };
        me.cache = Some(me.build_cache());
        me.l = me.fitted_upper_constant();
        Ok(me)
    }

    pub fn tabulated(table: Table) -> Result<Self> {
        let mut me = Self { family: Family::Tabulated(table), nu: 0.0, l: 0.0, finf: 0.0, cache: None };
        me.finf = me.numeric_recession()?;
        me.nu = 0.5 * me.finf;
        me.l = me.fitted_upper_constant();
        Ok(me)
    }

    /// Overrides the growth constants `ν ≤ L`.
    pub fn with_growth_constants(mut self, nu: f64, l: f64) -> Result<Self> {
        if !(nu > 0.0) || !(l >= nu) {
            return Err(Error::Invalid(format!("growth constants need 0 < ν ≤ L, got ν={nu}, L={l}")));
        }
        self.nu = nu;
        self.l = l;
        Ok(self)
    }

    /// Parses `area`, `mu_elliptic:<μ>` or `tabulated:<path>`.
    pub fn from_key(key: &str) -> Result<Self> {
        let key = key.trim();
        if key == "area" {
            return Ok(Self::area());
        }
        if let Some(rest) = key.strip_prefix("mu_elliptic:") {
            let mu: f64 = rest.trim().parse().map_err(|_| Error::Invalid(format!("bad μ in integrand key {key:?}")))?;
            return Self::mu_elliptic(mu);
        }
        if let Some(rest) = key.strip_prefix("tabulated:") {
            return Self::tabulated(Table::from_csv(Path::new(rest.trim()))?);
        }
        Err(Error::Invalid(format!("unknown integrand key {key:?}")))
    }

    pub fn key(&self) -> String {
        match &self.family {
            Family::Area => "area".to_string(),
            Family::MuElliptic { mu } => format!("mu_elliptic:{mu:?}"),
            Family::Tabulated(t) => match &t.source {
                Some(p) => format!("tabulated:{}", p.display()),
                None => "tabulated:<memory>".to_string(),
            },
        }
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn upper_constant(&self) -> f64 {
        self.l
    }

    /// `f∞(1) = lim f(t)/t`, cached at construction.
    pub fn recession_coeff(&self) -> f64 {
        self.finf
    }

    fn mu_df(mu: f64, t: f64) -> f64 {
        let m = mu - 1.0;
        t * (1.0 + t.powf(m)).powf(-1.0 / m)
    }

    fn build_cache(&self) -> CumulativeCache {
        let Family::MuElliptic { mu } = self.family else {
            unreachable!("cache is only built for μ-elliptic profiles")
        };
        let knots = sample_grid();
        let mut values = Vec::with_capacity(knots.len());
        let mut acc = 0.0;
        values.push(0.0);
        for w in knots.windows(2) {
            acc += quadrature::integrate(&|x| Self::mu_df(mu, x), w[0], w[1], 0.1 * QUAD_TOL);
            values.push(acc);
        }
        CumulativeCache { knots, values }
    }

    /// Smallest `L ≥ max(ν, f∞)` compatible with `f″(t)(1+t) ≤ L` and
    /// `f(t) ≤ L(1+t)` on the sample grid, padded by 1%.
    fn fitted_upper_constant(&self) -> f64 {
        let mut l = self.nu.max(self.finf);
        for t in sample_grid() {
            l = l.max(self.ddf(t) * (1.0 + t)).max(self.f(t) / (1.0 + t));
        }
        l * 1.01
    }

    fn numeric_recession(&self) -> Result<f64> {
        let at_1e6 = self.f(1e6) / 1e6;
        let at_1e7 = self.f(1e7) / 1e7;
        if (at_1e6 - at_1e7).abs() <= 1e-4 && at_1e7 > 0.0 && at_1e7.is_finite() {
            Ok(at_1e7)
        } else {
            Err(Error::RecessionEstimate { at_1e6, at_1e7 })
        }
    }

    pub fn eval_f(&self, t: f64) -> Result<f64> {
        check_nonneg("f", t)?;
        Ok(self.f(t))
    }

    pub fn eval_df(&self, t: f64) -> Result<f64> {
        check_nonneg("f′", t)?;
        Ok(self.df(t))
    }

    pub fn eval_ddf(&self, t: f64) -> Result<f64> {
        check_nonneg("f″", t)?;
        Ok(self.ddf(t))
    }

    /// `f′(t)/t`, continuously extended by `f″(0)` at the origin.
    pub fn df_over_t(&self, t: f64) -> f64 {
        match &self.family {
            Family::Area => 1.0 / (1.0 + t * t).sqrt(),
            Family::MuElliptic { mu } => {
                let m = mu - 1.0;
                (1.0 + t.powf(m)).powf(-1.0 / m)
            }
            Family::Tabulated(_) => {
                if t <= ZERO_THRESHOLD {
                    self.ddf(0.0)
                } else {
                    self.df(t) / t
                }
            }
        }
    }

    pub fn inv_df(&self, s: f64, tol: f64) -> Result<f64> {
        inv_df(self, s, tol)
    }

    pub fn conjugate(&self, s: f64, tol: f64) -> Result<f64> {
        conjugate(self, s, tol)
    }

    /// `h(t) = min{f″(t), f′(t)/t}` with `h(0) = f″(0)`.
    pub fn h_monotone(&self, t: f64) -> Result<f64> {
        check_nonneg("h", t)?;
        if t <= ZERO_THRESHOLD {
            return Ok(self.ddf(0.0));
        }
        Ok(self.ddf(t).min(self.df_over_t(t)))
    }

    /// `A(z) = f′(|z|) z/|z|`.
    pub fn tensor_a(&self, z: &[f64]) -> Vec<f64> {
        let t = norm(z);
        let scale = if t <= ZERO_THRESHOLD { self.ddf(0.0) } else { self.df_over_t(t) };
        z.iter().map(|v| scale * v).collect()
    }

    /// `Aₖ(z) = A(z) + z/k`.
    pub fn tensor_a_k(&self, z: &[f64], k: f64) -> Vec<f64> {
        let t = norm(z);
        let scale = if t <= ZERO_THRESHOLD { self.ddf(0.0) } else { self.df_over_t(t) };
        z.iter().map(|v| (scale + 1.0 / k) * v).collect()
    }

    /// `D_z A(z)` as an eigen-pair form: `f″(|z|)` along `z`, `f′(|z|)/|z|` across.
    pub fn hessian(&self, z: &[f64]) -> HessianAtZ {
        let t = norm(z);
        if t <= ZERO_THRESHOLD {
            let e = self.ddf(0.0);
            return HessianAtZ { direction: vec![0.0; z.len()], radial_eig: e, tangential_eig: e };
        }
        HessianAtZ {
            direction: z.iter().map(|v| v / t).collect(),
            radial_eig: self.ddf(t),
            tangential_eig: self.df_over_t(t),
        }
    }

    /// `S₀ = (T₀/|T₀|)(f′)⁻¹(|T₀|)`, the gradient value with `A(S₀) = T₀`.
    pub fn attainability_s0(&self, t0: &[f64]) -> Result<Vec<f64>> {
        let m = norm(t0);
        if m >= self.finf {
            return Err(Error::CoercivityViolation { norm: m, limit: self.finf });
        }
        if m == 0.0 {
            return Ok(vec![0.0; t0.len()]);
        }
        let t = self.inv_df(m, INV_TOL)?;
        Ok(t0.iter().map(|v| v / m * t).collect())
    }

    /// Checks the structural assumptions on the logarithmic sample grid.
    pub fn validate(&self) -> ValidationReport {
        let grid = sample_grid();
        let mut violations = Vec::new();
        let mut push =
            |what: &str, t: f64, detail: String| violations.push(Violation { check: what.to_string(), t, detail });

        let f0 = self.f(0.0);
        let d0 = self.df(0.0);
        if f0.abs() > 1e-14 {
            push("f(0) = 0", 0.0, format!("f(0) = {f0:e}"));
        }
        if d0.abs() > 1e-14 {
            push("f′(0) = 0", 0.0, format!("f′(0) = {d0:e}"));
        }
        let mut prev_df = f64::NEG_INFINITY;
        let mut prev_ratio = f64::NEG_INFINITY;
        let slack = 1e-12;
        for &t in &grid {
            let (f, df, ddf) = (self.f(t), self.df(t), self.ddf(t));
            // f′ saturates at f∞(1) in floating point for very large t
            if t > 0.0 && (df < prev_df || (df == prev_df && df < self.finf)) {
                push("f′ strictly increasing", t, format!("f′ = {df:e} after {prev_df:e}"));
            }
            prev_df = df;
            if df < -slack || df > self.finf * (1.0 + slack) {
                push("0 ≤ f′ ≤ f∞(1)", t, format!("f′ = {df:e}"));
            }
            if self.nu * t - self.l > f * (1.0 + slack) + slack || f > self.l * (t + 1.0) * (1.0 + slack) {
                push("linear growth", t, format!("f = {f:e}, ν = {}, L = {}", self.nu, self.l));
            }
            if ddf > self.l / (1.0 + t) * (1.0 + slack) {
                push("f″ ≤ L/(1+t)", t, format!("f″ = {ddf:e}"));
            }
            if t > 0.0 {
                let ratio = f / t;
                if ratio < prev_ratio - slack * prev_ratio.abs().max(1.0) {
                    push("f(t)/t non-decreasing", t, format!("{ratio:e} after {prev_ratio:e}"));
                }
                if ratio > self.finf * (1.0 + 1e-9) {
                    push("f(t)/t ≤ f∞(1)", t, format!("{ratio:e}"));
                }
                prev_ratio = ratio;
            }
        }
        ValidationReport { samples: grid.len(), violations }
    }
}

impl Profile for RadialIntegrand {
    fn f(&self, t: f64) -> f64 {
        match &self.family {
            Family::Area => t * t / ((1.0 + t * t).sqrt() + 1.0),
            Family::MuElliptic { mu } => {
                let cache = self.cache.as_ref().expect("μ-elliptic cache is built at construction");
                let i = cache.knots.partition_point(|&k| k <= t).saturating_sub(1);
                let mu = *mu;
                cache.values[i] + quadrature::integrate(&|x| Self::mu_df(mu, x), cache.knots[i], t, QUAD_TOL)
            }
            Family::Tabulated(tab) => tab.eval(t).0,
        }
    }

    fn df(&self, t: f64) -> f64 {
        match &self.family {
            Family::Area => t / (1.0 + t * t).sqrt(),
            Family::MuElliptic { mu } => Self::mu_df(*mu, t),
            Family::Tabulated(tab) => tab.eval(t).1,
        }
    }

    fn ddf(&self, t: f64) -> f64 {
        match &self.family {
            Family::Area => (1.0 + t * t).powf(-1.5),
            Family::MuElliptic { mu } => {
                let m = mu - 1.0;
                (1.0 + t.powf(m)).powf(-mu / m)
            }
            Family::Tabulated(tab) => tab.eval(t).2,
        }
    }

    fn slope_limit(&self) -> f64 {
        self.finf
    }
}

impl fmt::Display for RadialIntegrand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// `D_z A(z)` in spectral form.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianAtZ {
    /// `z/|z|`, or zero at the origin where the form is isotropic.
    pub direction: Vec<f64>,
    pub radial_eig: f64,
    pub tangential_eig: f64,
}

impl HessianAtZ {
    /// `f″(z·ζ)²/|z|² + (f′/|z|)(|ζ|² − (z·ζ)²/|z|²)`.
    pub fn form(&self, zeta: &[f64]) -> f64 {
        let p = dot(&self.direction, zeta);
        self.radial_eig * p * p + self.tangential_eig * (dot(zeta, zeta) - p * p)
    }

    pub fn apply(&self, zeta: &[f64]) -> Vec<f64> {
        let p = dot(&self.direction, zeta);
        zeta.iter()
            .zip(&self.direction)
            .map(|(z, d)| self.tangential_eig * z + (self.radial_eig - self.tangential_eig) * p * d)
            .collect()
    }

    /// Dense row-major matrix of size `len × len`.
    pub fn matrix(&self) -> Vec<f64> {
        let m = self.direction.len();
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let dd = self.direction[i] * self.direction[j];
                out[i * m + j] =
                    (self.radial_eig - self.tangential_eig) * dd + if i == j { self.tangential_eig } else { 0.0 };
            }
        }
        out
    }

    pub fn min_eig(&self) -> f64 {
        self.radial_eig.min(self.tangential_eig)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub check: String,
    pub t: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub samples: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn check_nonneg(what: &'static str, t: f64) -> Result<()> {
    if t >= 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain { what, value: t })
    }
}

pub fn norm(z: &[f64]) -> f64 {
    dot(z, z).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
