//! Structured grids on intervals and masked rectangles.
//!
//! Solutions live on nodes, gradients on cells. In 1D the cell gradient is the
//! forward difference; in 2D it is the gradient of the bilinear interpolant
//! evaluated at the cell centre. Every quantity that integrates over the
//! domain uses one quadrature point per cell with weight equal to the cell
//! volume, so [`Grid::gradient_adjoint`] is the exact transpose of
//! [`Grid::gradient`] under that pairing.
//!
//! In 2D the centre gradient annihilates the checkerboard pattern
//! `(−1)^{i+j}` in addition to constants. On an edge-connected mask these two
//! span the kernel, and [`Grid::project_out_kernel`] removes both.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::Write;
use std::path::Path;

use crate::banded::BandMatrix;
use crate::{Error, Result};

const NONE: usize = usize::MAX;

type Edge = ((i64, i64), (i64, i64));

/// Cell activity pattern for a rectangle.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    Full,
    /// Cells whose centre lies at distance `r_in ≤ r ≤ r_out` from the rectangle centre.
    Annulus {
        r_in: f64,
        r_out: f64,
    },
    /// Row-major activity flags, row `j` holding cells `(0..nx, j)`.
    Explicit(Vec<bool>),
}

impl Mask {
    /// Reads a 0/1 matrix; row `j` of the file is row `j` of cells.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let err = |e: csv::Error| Error::Grid(format!("{}: {e}", path.display()));
        let mut reader =
            csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path).map_err(err)?;
        let mut flags = Vec::new();
        for record in reader.records() {
            for tok in record.map_err(err)?.iter() {
                match tok {
                    "0" => flags.push(false),
                    "1" => flags.push(true),
                    other => return Err(Error::Grid(format!("mask entry {other:?} is not 0 or 1"))),
                }
            }
        }
        Ok(Mask::Explicit(flags))
    }

    /// Parses `full`, `annulus(r_in, r_out)` or `file:<path>`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec == "full" {
            return Ok(Mask::Full);
        }
        if let Some(path) = spec.strip_prefix("file:") {
            return Mask::from_csv(Path::new(path.trim()));
        }
        if let Some(inner) = spec.strip_prefix("annulus(").and_then(|s| s.strip_suffix(')')) {
            let parts: Vec<f64> = inner
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Grid(format!("bad annulus radii in {spec:?}")))?;
            if parts.len() == 2 {
                return Ok(Mask::Annulus { r_in: parts[0], r_out: parts[1] });
            }
        }
        Err(Error::Grid(format!("unknown mask {spec:?}")))
    }
}

/// Values in `ℝᴺ` at every active node, node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeField {
    pub components: usize,
    pub values: Vec<f64>,
}

impl NodeField {
    pub fn zeros(nodes: usize, components: usize) -> Self {
        Self { components, values: vec![0.0; nodes * components] }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.components
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.components..(i + 1) * self.components]
    }

    pub fn max_abs_diff(&self, other: &NodeField) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// An `rows × cols` tensor at every active cell, cell-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl CellField {
    pub fn zeros(cells: usize, rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; cells * rows * cols] }
    }

    pub fn stride(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cell(&self, c: usize) -> &[f64] {
        let s = self.stride();
        &self.values[c * s..(c + 1) * s]
    }

    pub fn cell_mut(&mut self, c: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.values[c * s..(c + 1) * s]
    }

    /// Frobenius norm per cell.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.values.chunks(self.stride()).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    pub fn sub(&self, other: &CellField) -> CellField {
        CellField {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
    Linf,
}

/// Circulation of each row field around the four cell centres surrounding an interior node.
#[derive(Debug, Clone, PartialEq)]
pub struct Plaquette {
    pub node: (usize, usize),
    pub circulation: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Grid {
    dim: usize,
    extent: Vec<(f64, f64)>,
    cells: Vec<usize>,
    h: Vec<f64>,
    components: usize,
    mask: Vec<bool>,
    active_cells: Vec<usize>,
    cell_slot: Vec<usize>,
    active_nodes: Vec<usize>,
    node_slot: Vec<usize>,
    /// Active-node slots of each active cell, `2^dim` per cell.
    cell_nodes: Vec<usize>,
    /// Local gradient stencil, `dim × 2^dim`.
    stencil: Vec<f64>,
    node_weights: Vec<f64>,
    hole_count: usize,
}

impl Grid {
    /// Uniform grid on `(a, b)` with `cells` cells.
    pub fn interval(a: f64, b: f64, cells: usize, components: usize) -> Result<Self> {
        if !(b > a) || cells == 0 || components == 0 {
            return Err(Error::Grid(format!("need a < b, cells ≥ 1, N ≥ 1 (got ({a}, {b}), {cells}, {components})")));
        }
        let h = (b - a) / cells as f64;
        Self::build(1, vec![(a, b)], vec![cells], vec![h], components, vec![true; cells])
    }

    /// Rectangle `(x0, x1) × (y0, y1)` split into `nx × ny` cells, restricted to `mask`.
    pub fn rectangle(
        x: (f64, f64),
        y: (f64, f64),
        nx: usize,
        ny: usize,
        mask: &Mask,
        components: usize,
    ) -> Result<Self> {
        if !(x.1 > x.0) || !(y.1 > y.0) || nx == 0 || ny == 0 || components == 0 {
            return Err(Error::Grid("need non-degenerate extents, nx, ny, N ≥ 1".into()));
        }
        let hx = (x.1 - x.0) / nx as f64;
        let hy = (y.1 - y.0) / ny as f64;
        let flags = match mask {
            Mask::Full => vec![true; nx * ny],
            Mask::Annulus { r_in, r_out } => {
                let (cx, cy) = (0.5 * (x.0 + x.1), 0.5 * (y.0 + y.1));
                let mut v = Vec::with_capacity(nx * ny);
                for j in 0..ny {
                    for i in 0..nx {
                        let px = x.0 + (i as f64 + 0.5) * hx - cx;
                        let py = y.0 + (j as f64 + 0.5) * hy - cy;
                        let r = px.hypot(py);
                        v.push(r >= *r_in && r <= *r_out);
                    }
                }
                v
            }
            Mask::Explicit(v) => {
                if v.len() != nx * ny {
                    return Err(Error::Grid(format!("mask has {} entries, expected {}", v.len(), nx * ny)));
                }
                v.clone()
            }
        };
        Self::build(2, vec![x, y], vec![nx, ny], vec![hx, hy], components, flags)
    }

    fn build(
        dim: usize,
        extent: Vec<(f64, f64)>,
        cells: Vec<usize>,
        h: Vec<f64>,
        components: usize,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let ncells: usize = cells.iter().product();
        let nnodes: usize = cells.iter().map(|c| c + 1).product();
        let mut cell_slot = vec![NONE; ncells];
        let mut active_cells = Vec::new();
        for (c, &on) in mask.iter().enumerate() {
            if on {
                cell_slot[c] = active_cells.len();
                active_cells.push(c);
            }
        }
        if active_cells.is_empty() {
            return Err(Error::Grid("mask has no active cells".into()));
        }
        let nloc = 1 << dim;
        let corner_ids = |c: usize| -> Vec<usize> {
            if dim == 1 {
                vec![c, c + 1]
            } else {
                let nx = cells[0];
                let (i, j) = (c % nx, c / nx);
                let stride = nx + 1;
                vec![j * stride + i, j * stride + i + 1, (j + 1) * stride + i, (j + 1) * stride + i + 1]
            }
        };
        let mut node_used = vec![false; nnodes];
        for &c in &active_cells {
            for n in corner_ids(c) {
                node_used[n] = true;
            }
        }
        let mut node_slot = vec![NONE; nnodes];
        let mut active_nodes = Vec::new();
        for (n, &used) in node_used.iter().enumerate() {
            if used {
                node_slot[n] = active_nodes.len();
                active_nodes.push(n);
            }
        }
        let mut cell_nodes = Vec::with_capacity(active_cells.len() * nloc);
        let vol: f64 = h.iter().product();
        let mut node_weights = vec![0.0; active_nodes.len()];
        for &c in &active_cells {
            for n in corner_ids(c) {
                let s = node_slot[n];
                cell_nodes.push(s);
                node_weights[s] += vol / nloc as f64;
            }
        }
        let stencil = if dim == 1 {
            vec![-1.0 / h[0], 1.0 / h[0]]
        } else {
            let (ax, ay) = (0.5 / h[0], 0.5 / h[1]);
            vec![-ax, ax, -ax, ax, -ay, -ay, ay, ay]
        };
        let mut grid = Grid {
            dim,
            extent,
            cells,
            h,
            components,
            mask,
            active_cells,
            cell_slot,
            active_nodes,
            node_slot,
            cell_nodes,
            stencil,
            node_weights,
            hole_count: 0,
        };
        if dim == 2 {
            if !grid.edge_connected() {
                return Err(Error::Grid("active cells are not edge-connected".into()));
            }
            grid.hole_count = grid.euler_holes();
        }
        Ok(grid)
    }

    fn edge_connected(&self) -> bool {
        let mut seen = vec![false; self.active_cells.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(s) = queue.pop_front() {
            let (i, j) = self.cell_ij(s);
            for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                if let Some(t) = self.cell_at(i as i64 + di, j as i64 + dj) {
                    if !seen[t] {
                        seen[t] = true;
                        count += 1;
                        queue.push_back(t);
                    }
                }
            }
        }
        count == self.active_cells.len()
    }

    /// `1 − (V − E + F)` of the closed-square complex of active cells.
    fn euler_holes(&self) -> usize {
        let nx = self.cells[0];
        let ny = self.cells[1];
        let v = self.active_nodes.len() as i64;
        let f = self.active_cells.len() as i64;
        let on = |i: i64, j: i64| {
            i >= 0 && j >= 0 && (i as usize) < nx && (j as usize) < ny && self.mask[j as usize * nx + i as usize]
        };
        let mut e = 0i64;
        // horizontal edges between nodes (i, j) and (i+1, j)
        for j in 0..=ny as i64 {
            for i in 0..nx as i64 {
                if on(i, j - 1) || on(i, j) {
                    e += 1;
                }
            }
        }
        for i in 0..=nx as i64 {
            for j in 0..ny as i64 {
                if on(i - 1, j) || on(i, j) {
                    e += 1;
                }
            }
        }
        (1 - (v - e + f)).max(0) as usize
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn cells_per_axis(&self) -> &[usize] {
        &self.cells
    }

    pub fn spacing(&self) -> &[f64] {
        &self.h
    }

    pub fn extent(&self) -> &[(f64, f64)] {
        &self.extent
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.iter().product()
    }

    pub fn n_cells(&self) -> usize {
        self.active_cells.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.active_nodes.len()
    }

    /// `|Ω|` of the active region.
    pub fn measure(&self) -> f64 {
        self.cell_volume() * self.n_cells() as f64
    }

    pub fn hole_count(&self) -> usize {
        self.hole_count
    }

    pub fn simply_connected(&self) -> bool {
        self.hole_count == 0
    }

    pub fn node_weights(&self) -> &[f64] {
        &self.node_weights
    }

    pub fn nodes_per_cell(&self) -> usize {
        1 << self.dim
    }

    /// Active-node slots at the corners of active cell `c`.
    pub fn cell_node_slots(&self, c: usize) -> &[usize] {
        let m = self.nodes_per_cell();
        &self.cell_nodes[c * m..(c + 1) * m]
    }

    /// `stencil[s * 2^dim + local]`: derivative in direction `s` of the local basis function.
    pub fn stencil(&self) -> &[f64] {
        &self.stencil
    }

    /// Lattice coordinates of active cell `c`.
    pub fn cell_ij(&self, c: usize) -> (usize, usize) {
        let id = self.active_cells[c];
        if self.dim == 1 {
            (id, 0)
        } else {
            (id % self.cells[0], id / self.cells[0])
        }
    }

    /// Active-cell slot at lattice position `(i, j)`, if any.
    pub fn cell_at(&self, i: i64, j: i64) -> Option<usize> {
        if i < 0 || j < 0 {
            return None;
        }
        let (i, j) = (i as usize, j as usize);
        let ny = if self.dim == 1 { 1 } else { self.cells[1] };
        if i >= self.cells[0] || j >= ny {
            return None;
        }
        let s = self.cell_slot[j * self.cells[0] + i];
        (s != NONE).then_some(s)
    }

    pub fn node_ij(&self, n: usize) -> (usize, usize) {
        let id = self.active_nodes[n];
        if self.dim == 1 {
            (id, 0)
        } else {
            (id % (self.cells[0] + 1), id / (self.cells[0] + 1))
        }
    }

    pub fn node_at(&self, i: usize, j: usize) -> Option<usize> {
        let stride = self.cells[0] + 1;
        if i >= stride || (self.dim == 1 && j > 0) || (self.dim == 2 && j > self.cells[1]) {
            return None;
        }
        let s = self.node_slot[j * stride + i];
        (s != NONE).then_some(s)
    }

    pub fn cell_center(&self, c: usize) -> Vec<f64> {
        let (i, j) = self.cell_ij(c);
        let mut p = vec![self.extent[0].0 + (i as f64 + 0.5) * self.h[0]];
        if self.dim == 2 {
            p.push(self.extent[1].0 + (j as f64 + 0.5) * self.h[1]);
        }
        p
    }

    pub fn node_coords(&self, n: usize) -> Vec<f64> {
        let (i, j) = self.node_ij(n);
        let mut p = vec![self.extent[0].0 + i as f64 * self.h[0]];
        if self.dim == 2 {
            p.push(self.extent[1].0 + j as f64 * self.h[1]);
        }
        p
    }

    /// Distance in cells from `c` to the nearest inactive or out-of-grid cell
    /// (Chebyshev metric), capped at `cap`.
    pub fn cell_margin(&self, c: usize, cap: usize) -> usize {
        let (i, j) = self.cell_ij(c);
        for r in 1..=cap as i64 {
            let (i, j) = (i as i64, j as i64);
            let span_j: Vec<i64> = if self.dim == 1 { vec![0] } else { (-r..=r).collect() };
            for &dj in &span_j {
                for di in -r..=r {
                    if self.cell_at(i + di, j + dj).is_none() {
                        return (r - 1) as usize;
                    }
                }
            }
        }
        cap
    }

    pub fn zero_nodes(&self) -> NodeField {
        NodeField::zeros(self.n_nodes(), self.components)
    }

    pub fn node_field_from_fn<F: Fn(&[f64]) -> Vec<f64>>(&self, f: F) -> NodeField {
        let mut out = self.zero_nodes();
        for n in 0..self.n_nodes() {
            let v = f(&self.node_coords(n));
            assert_eq!(v.len(), self.components, "node function returned wrong arity");
            out.values[n * self.components..(n + 1) * self.components].copy_from_slice(&v);
        }
        out
    }

    /// Gradient-shaped (`N × n`) field from a function of the cell centre.
    pub fn cell_field_from_fn<F: Fn(&[f64]) -> Vec<f64>>(&self, rows: usize, cols: usize, f: F) -> CellField {
        let mut out = CellField::zeros(self.n_cells(), rows, cols);
        for c in 0..self.n_cells() {
            let v = f(&self.cell_center(c));
            assert_eq!(v.len(), rows * cols, "cell function returned wrong arity");
            out.cell_mut(c).copy_from_slice(&v);
        }
        out
    }

    fn check_nodes(&self, u: &NodeField) -> Result<()> {
        if u.components != self.components || u.values.len() != self.n_nodes() * self.components {
            return Err(Error::Shape(format!(
                "node field has {} values with N = {}, grid needs {} × {}",
                u.values.len(),
                u.components,
                self.n_nodes(),
                self.components
            )));
        }
        Ok(())
    }

    fn check_gradient_shaped(&self, e: &CellField) -> Result<()> {
        if e.rows != self.components || e.cols != self.dim || e.values.len() != self.n_cells() * e.stride() {
            return Err(Error::Shape(format!(
                "cell field {}×{} with {} values, grid needs {}×{} on {} cells",
                e.rows,
                e.cols,
                e.values.len(),
                self.components,
                self.dim,
                self.n_cells()
            )));
        }
        Ok(())
    }

    /// Cell gradient of the nodal interpolant.
    pub fn gradient(&self, u: &NodeField) -> Result<CellField> {
        self.check_nodes(u)?;
        let (nn, d, m) = (self.components, self.dim, self.nodes_per_cell());
        let mut g = CellField::zeros(self.n_cells(), nn, d);
        for c in 0..self.n_cells() {
            let slots = self.cell_node_slots(c);
            let out = g.cell_mut(c);
            for a in 0..nn {
                for s in 0..d {
                    let mut acc = 0.0;
                    for (l, &node) in slots.iter().enumerate() {
                        acc += self.stencil[s * m + l] * u.values[node * nn + a];
                    }
                    out[a * d + s] = acc;
                }
            }
        }
        Ok(g)
    }

    /// `Gᵀ W χ`: the nodal load `∫ χ : ∇φⱼ` for every basis function `φⱼ`.
    pub fn gradient_adjoint(&self, chi: &CellField) -> Result<NodeField> {
        self.check_gradient_shaped(chi)?;
        let (nn, d, m) = (self.components, self.dim, self.nodes_per_cell());
        let w = self.cell_volume();
        let mut r = self.zero_nodes();
        for c in 0..self.n_cells() {
            let slots = self.cell_node_slots(c);
            let x = chi.cell(c);
            for (l, &node) in slots.iter().enumerate() {
                for a in 0..nn {
                    let mut acc = 0.0;
                    for s in 0..d {
                        acc += x[a * d + s] * self.stencil[s * m + l];
                    }
                    r.values[node * nn + a] += w * acc;
                }
            }
        }
        Ok(r)
    }

    /// `∫ χ : ∇u` with cell-centre quadrature.
    pub fn divergence_pairing(&self, chi: &CellField, u: &NodeField) -> Result<f64> {
        self.check_gradient_shaped(chi)?;
        let g = self.gradient(u)?;
        Ok(self.cell_inner(chi, &g))
    }

    /// `Σ_c |c| χ_c : ψ_c`.
    pub fn cell_inner(&self, a: &CellField, b: &CellField) -> f64 {
        self.cell_volume() * a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum::<f64>()
    }

    /// Volume-weighted nodal average per component.
    pub fn mean(&self, u: &NodeField) -> Vec<f64> {
        let nn = u.components;
        let total: f64 = self.node_weights.iter().sum();
        let mut m = vec![0.0; nn];
        for (n, w) in self.node_weights.iter().enumerate() {
            for a in 0..nn {
                m[a] += w * u.values[n * nn + a];
            }
        }
        m.iter_mut().for_each(|v| *v /= total);
        m
    }

    pub fn mean_zero_project(&self, u: &NodeField) -> NodeField {
        let m = self.mean(u);
        let nn = u.components;
        let mut out = u.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            *v -= m[i % nn];
        }
        out
    }

    /// Basis of the gradient kernel per component: constants, plus the
    /// checkerboard in 2D, orthonormalised in the node-weighted inner product.
    fn kernel_basis(&self) -> Vec<Vec<f64>> {
        let w = &self.node_weights;
        let ip = |a: &[f64], b: &[f64]| a.iter().zip(b).zip(w).map(|((x, y), w)| x * y * w).sum::<f64>();
        let mut basis: Vec<Vec<f64>> = vec![vec![1.0; self.n_nodes()]];
        if self.dim == 2 {
            basis.push(
                (0..self.n_nodes())
                    .map(|n| {
                        let (i, j) = self.node_ij(n);
                        if (i + j) % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    })
                    .collect(),
            );
        }
        let mut ortho: Vec<Vec<f64>> = Vec::new();
        for mut v in basis {
            for q in &ortho {
                let c = ip(&v, q);
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
            let nrm = ip(&v, &v).sqrt();
            if nrm > 1e-12 {
                v.iter_mut().for_each(|x| *x /= nrm);
                ortho.push(v);
            }
        }
        ortho
    }

    /// Removes every component of `u` in the kernel of [`Grid::gradient`];
    /// the result has zero weighted mean and the same gradient.
    pub fn project_out_kernel(&self, u: &NodeField) -> NodeField {
        let nn = u.components;
        let mut out = u.clone();
        for q in self.kernel_basis() {
            for a in 0..nn {
                let c: f64 = (0..self.n_nodes()).map(|n| out.values[n * nn + a] * q[n] * self.node_weights[n]).sum();
                for n in 0..self.n_nodes() {
                    out.values[n * nn + a] -= c * q[n];
                }
            }
        }
        out
    }

    /// One node per component fixes the kernel: a single node in 1D, a node
    /// and an edge neighbour (opposite checkerboard parity) in 2D.
    pub fn pinned_nodes(&self) -> Vec<usize> {
        let mut pins = vec![self.cell_node_slots(0)[0]];
        if self.dim == 2 {
            pins.push(self.cell_node_slots(0)[1]);
        }
        pins
    }

    /// Nodal dofs (`node * N + component`) pinned to remove the kernel.
    pub fn pinned_dofs(&self) -> Vec<usize> {
        let nn = self.components;
        self.pinned_nodes().iter().flat_map(|&p| (0..nn).map(move |a| p * nn + a)).collect()
    }

    fn bandwidth(&self) -> usize {
        let n = self.components;
        let mut bw = 0;
        for c in 0..self.n_cells() {
            let s = self.cell_node_slots(c);
            let (lo, hi) = (s.iter().min().unwrap(), s.iter().max().unwrap());
            bw = bw.max((hi - lo) * n + n - 1);
        }
        bw
    }

    /// Assembles `Gᵀ W D G` where `block(c)` is the symmetric `Nn × Nn`
    /// matrix `D` on cell `c`, indexed by `(component, direction)` pairs.
    pub fn stiffness<F: FnMut(usize) -> Vec<f64>>(&self, mut block: F) -> BandMatrix {
        let (nn, d, m) = (self.components, self.dim, self.nodes_per_cell());
        let nd = nn * d;
        let b = &self.stencil;
        let w = self.cell_volume();
        let mut h = BandMatrix::zeros(self.n_nodes() * nn, self.bandwidth());
        let lm = m * nn;
        let mut local = vec![0.0; lm * lm];
        for c in 0..self.n_cells() {
            let dm = block(c);
            for l in 0..m {
                for a in 0..nn {
                    for q in 0..m {
                        for bb in 0..nn {
                            let mut acc = 0.0;
                            for s in 0..d {
                                for t in 0..d {
                                    acc += b[s * m + l] * dm[(a * d + s) * nd + bb * d + t] * b[t * m + q];
                                }
                            }
                            local[(l * nn + a) * lm + q * nn + bb] = w * acc;
                        }
                    }
                }
            }
            let slots = self.cell_node_slots(c);
            for l in 0..m {
                for a in 0..nn {
                    let i = slots[l] * nn + a;
                    for q in 0..m {
                        for bb in 0..nn {
                            let j = slots[q] * nn + bb;
                            if i >= j {
                                h.add(i, j, local[(l * nn + a) * lm + q * nn + bb]);
                            }
                        }
                    }
                }
            }
        }
        h
    }

    /// Solves `K x = rhs` for a stiffness matrix whose kernel is the gradient
    /// kernel; `rhs` must be orthogonal to it. The answer has the kernel removed.
    pub fn solve_singular(&self, mut k: BandMatrix, rhs: &[f64]) -> Result<NodeField> {
        let mut rhs = rhs.to_vec();
        for p in self.pinned_dofs() {
            k.pin(p);
            rhs[p] = 0.0;
        }
        let x = k.factor()?.solve(&rhs);
        Ok(self.project_out_kernel(&NodeField { components: self.components, values: x }))
    }

    pub fn cell_norm(&self, e: &CellField, p: Norm) -> f64 {
        let mags = e.magnitudes();
        let w = self.cell_volume();
        match p {
            Norm::L1 => w * mags.iter().sum::<f64>(),
            Norm::L2 => (w * mags.iter().map(|m| m * m).sum::<f64>()).sqrt(),
            Norm::Linf => mags.iter().copied().fold(0.0, f64::max),
        }
    }

    pub fn node_norm(&self, u: &NodeField, p: Norm) -> f64 {
        let nn = u.components;
        let mags = (0..u.len()).map(|n| u.values[n * nn..(n + 1) * nn].iter().map(|v| v * v).sum::<f64>().sqrt());
        match p {
            Norm::L1 => mags.zip(&self.node_weights).map(|(m, w)| m * w).sum(),
            Norm::L2 => mags.zip(&self.node_weights).map(|(m, w)| m * m * w).sum::<f64>().sqrt(),
            Norm::Linf => mags.fold(0.0, f64::max),
        }
    }

    /// `Σ_{|E_c| ≥ ℓ} |c| |E_c|`.
    pub fn tail_mass(&self, e: &CellField, level: f64) -> f64 {
        self.cell_volume() * e.magnitudes().into_iter().filter(|&m| m >= level).sum::<f64>()
    }

    /// `|{|E| ≥ ℓ}|`.
    pub fn exceptional_measure(&self, e: &CellField, level: f64) -> f64 {
        self.cell_volume() * e.magnitudes().into_iter().filter(|&m| m >= level).count() as f64
    }

    fn require_2d(&self) -> Result<()> {
        if self.dim != 2 {
            return Err(Error::Grid("operation needs a 2D grid".into()));
        }
        Ok(())
    }

    /// Trapezoidal line integral of row field `a` from centre of `c` to the
    /// centre of its edge neighbour `d`.
    fn segment(&self, e: &CellField, c: usize, d: usize) -> Vec<f64> {
        let (ci, cj) = self.cell_ij(c);
        let (di, dj) = self.cell_ij(d);
        let (s, len) =
            if ci != di { (0, (di as f64 - ci as f64) * self.h[0]) } else { (1, (dj as f64 - cj as f64) * self.h[1]) };
        let n = self.dim;
        (0..e.rows).map(|a| 0.5 * (e.cell(c)[a * n + s] + e.cell(d)[a * n + s]) * len).collect()
    }

    /// Counter-clockwise circulation around every interior node whose four
    /// surrounding cells are active.
    pub fn plaquette_curl(&self, e: &CellField) -> Result<Vec<Plaquette>> {
        self.require_2d()?;
        self.check_gradient_shaped(e)?;
        let (nx, ny) = (self.cells[0], self.cells[1]);
        let mut out = Vec::new();
        for j in 1..ny {
            for i in 1..nx {
                let (i, j) = (i as i64, j as i64);
                let quad =
                    [self.cell_at(i - 1, j - 1), self.cell_at(i, j - 1), self.cell_at(i, j), self.cell_at(i - 1, j)];
                if let [Some(a), Some(b), Some(c), Some(d)] = quad {
                    let mut circ = vec![0.0; e.rows];
                    for (p, q) in [(a, b), (b, c), (c, d), (d, a)] {
                        for (acc, v) in circ.iter_mut().zip(self.segment(e, p, q)) {
                            *acc += v;
                        }
                    }
                    out.push(Plaquette { node: (i as usize, j as usize), circulation: circ });
                }
            }
        }
        Ok(out)
    }

    /// Circulation of each row field along a closed path of edge-adjacent
    /// active cells. The closing edge from the last to the first cell is
    /// implied; repeating the first cell at the end is also accepted.
    pub fn loop_circulation(&self, e: &CellField, path: &[(usize, usize)]) -> Result<Vec<f64>> {
        self.require_2d()?;
        self.check_gradient_shaped(e)?;
        let mut path = path.to_vec();
        if path.len() > 1 && path.first() == path.last() {
            path.pop();
        }
        if path.len() < 4 {
            return Err(Error::OpenPath(format!("{} cells cannot close a loop", path.len())));
        }
        let slots: Vec<usize> = path
            .iter()
            .map(|&(i, j)| {
                self.cell_at(i as i64, j as i64)
                    .ok_or_else(|| Error::OpenPath(format!("cell ({i}, {j}) is not active")))
            })
            .collect::<Result<_>>()?;
        let mut total = vec![0.0; e.rows];
        for k in 0..path.len() {
            let (p, q) = (path[k], path[(k + 1) % path.len()]);
            let step = p.0.abs_diff(q.0) + p.1.abs_diff(q.1);
            if step != 1 {
                return Err(Error::OpenPath(format!("cells {p:?} and {q:?} are not edge neighbours")));
            }
            for (acc, v) in total.iter_mut().zip(self.segment(e, slots[k], slots[(k + 1) % path.len()])) {
                *acc += v;
            }
        }
        Ok(total)
    }

    /// One counter-clockwise cell loop around each hole of the mask.
    ///
    /// A hole is an 8-connected set of inactive cells not touching the grid
    /// border. The loop is the outer boundary of the union of dual squares
    /// centred at the hole's corner nodes; every cell on it is active.
    pub fn hole_loops(&self) -> Vec<Vec<(usize, usize)>> {
        if self.dim != 2 {
            return Vec::new();
        }
        let (nx, ny) = (self.cells[0], self.cells[1]);
        let mut label = vec![NONE; nx * ny];
        let mut loops = Vec::new();
        for start in 0..nx * ny {
            if self.mask[start] || label[start] != NONE {
                continue;
            }
            let mut comp = Vec::new();
            let mut touches_border = false;
            let mut queue = VecDeque::from([start]);
            label[start] = start;
            while let Some(c) = queue.pop_front() {
                comp.push(c);
                let (i, j) = ((c % nx) as i64, (c / nx) as i64);
                if i == 0 || j == 0 || i as usize == nx - 1 || j as usize == ny - 1 {
                    touches_border = true;
                }
                for dj in -1..=1 {
                    for di in -1..=1 {
                        let (a, b) = (i + di, j + dj);
                        if a < 0 || b < 0 || a as usize >= nx || b as usize >= ny {
                            continue;
                        }
                        let id = b as usize * nx + a as usize;
                        if !self.mask[id] && label[id] == NONE {
                            label[id] = start;
                            queue.push_back(id);
                        }
                    }
                }
            }
            if !touches_border {
                if let Some(l) = self.loop_around(&comp) {
                    loops.push(l);
                }
            }
        }
        loops
    }

    fn loop_around(&self, hole: &[usize]) -> Option<Vec<(usize, usize)>> {
        let nx = self.cells[0];
        let mut corners: Vec<(i64, i64)> = Vec::new();
        for &c in hole {
            let (i, j) = ((c % nx) as i64, (c / nx) as i64);
            corners.extend([(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)]);
        }
        corners.sort_unstable();
        corners.dedup();
        // directed boundary edges between cell lattice points
        let mut edges: HashSet<Edge> = HashSet::new();
        let mut order: Vec<Edge> = Vec::new();
        for &(qi, qj) in &corners {
            let sq = [(qi - 1, qj - 1), (qi, qj - 1), (qi, qj), (qi - 1, qj)];
            for k in 0..4 {
                let (a, b) = (sq[k], sq[(k + 1) % 4]);
                if !edges.remove(&(b, a)) {
                    edges.insert((a, b));
                    order.push((a, b));
                }
            }
        }
        let mut out_edges: HashMap<(i64, i64), Vec<(i64, i64)>> = HashMap::new();
        for e in order.iter().filter(|e| edges.contains(e)) {
            out_edges.entry(e.0).or_default().push(e.1);
        }
        let mut starts: Vec<(i64, i64)> = out_edges.keys().copied().collect();
        starts.sort_unstable();
        let mut best: Option<(f64, Vec<(i64, i64)>)> = None;
        for s in starts {
            while out_edges.get(&s).is_some_and(|v| !v.is_empty()) {
                let mut cycle = vec![s];
                let mut cur = s;
                loop {
                    let next = out_edges.get_mut(&cur).and_then(|v| v.pop());
                    let Some(next) = next else { break };
                    if next == s {
                        break;
                    }
                    cycle.push(next);
                    cur = next;
                }
                let area: f64 = (0..cycle.len())
                    .map(|k| {
                        let (a, b) = (cycle[k], cycle[(k + 1) % cycle.len()]);
                        (a.0 * b.1 - b.0 * a.1) as f64
                    })
                    .sum::<f64>()
                    * 0.5;
                if best.as_ref().is_none_or(|(ba, _)| area > *ba) {
                    best = Some((area, cycle));
                }
            }
        }
        let (area, cycle) = best?;
        if area <= 0.0 || cycle.iter().any(|&(i, j)| self.cell_at(i, j).is_none()) {
            return None;
        }
        Some(cycle.into_iter().map(|(i, j)| (i as usize, j as usize)).collect())
    }

    /// CSV dump with header `i[,j],c0,c1,…`, one row per active node.
    pub fn write_node_csv<W: Write>(&self, u: &NodeField, w: W) -> csv::Result<()> {
        let rows = (0..u.len()).map(|n| (self.node_ij(n), u.node(n)));
        self.write_csv(w, u.components, rows)
    }

    /// CSV dump with header `i[,j],c0,c1,…`, one row per active cell.
    pub fn write_cell_csv<W: Write>(&self, e: &CellField, w: W) -> csv::Result<()> {
        let rows = (0..e.len()).map(|c| (self.cell_ij(c), e.cell(c)));
        self.write_csv(w, e.stride(), rows)
    }

    fn write_csv<'a, W: Write, I>(&self, w: W, width: usize, rows: I) -> csv::Result<()>
    where
        I: Iterator<Item = ((usize, usize), &'a [f64])>,
    {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["i".to_string()];
        if self.dim == 2 {
            header.push("j".to_string());
        }
        header.extend((0..width).map(|k| format!("c{k}")));
        out.write_record(&header)?;
        for ((i, j), vals) in rows {
            let mut rec = vec![i.to_string()];
            if self.dim == 2 {
                rec.push(j.to_string());
            }
            rec.extend(vals.iter().map(|v| format!("{v:e}")));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}
