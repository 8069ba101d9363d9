//! Symmetric positive definite band matrices with an in-place Cholesky solve.

use crate::{Error, Result};

/// Lower band of a symmetric matrix: entry `(i, j)` with `i − bw ≤ j ≤ i`
/// lives at `data[i * (bw + 1) + (j + bw − i)]`.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Adds `v` to the symmetric pair `(i, j)`/`(j, i)`; only one call is
    /// needed per off-diagonal pair.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(i - j <= self.bw, "entry ({i}, {j}) outside band {}", self.bw);
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Replaces row and column `i` by the identity row.
    pub fn pin(&mut self, i: usize) {
        for j in i.saturating_sub(self.bw)..i {
            let k = self.idx(i, j);
            self.data[k] = 0.0;
        }
        for r in i + 1..(i + self.bw + 1).min(self.n) {
            let k = self.idx(r, i);
            self.data[k] = 0.0;
        }
        let k = self.idx(i, i);
        self.data[k] = 1.0;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            for j in i.saturating_sub(self.bw)..=i {
                let a = self.data[self.idx(i, j)];
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    /// Cholesky factorisation `A = L Lᵀ`, overwriting the band with `L`.
    pub fn factor(mut self) -> Result<CholeskyBand> {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut s = self.data[self.idx(i, j)];
                let klo = lo.max(j.saturating_sub(bw));
                for k in klo..j {
                    s -= self.data[self.idx(i, k)] * self.data[self.idx(j, k)];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::NotPositiveDefinite { row: i });
                    }
                    let k = self.idx(i, i);
                    self.data[k] = s.sqrt();
                } else {
                    let k = self.idx(i, j);
                    self.data[k] = s / self.data[self.idx(j, j)];
                }
            }
        }
        Ok(CholeskyBand { l: self })
    }
}

#[derive(Debug, Clone)]
pub struct CholeskyBand {
    l: BandMatrix,
}

impl CholeskyBand {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let l = &self.l;
        let (n, bw) = (l.n, l.bw);
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= l.data[l.idx(i, k)] * y[k];
            }
            y[i] = s / l.data[l.idx(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for r in i + 1..(i + bw + 1).min(n) {
                s -= l.data[l.idx(r, i)] * y[r];
            }
            y[i] = s / l.data[l.idx(i, i)];
        }
        y
    }
}
