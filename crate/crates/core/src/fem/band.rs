//! Symmetric banded matrix storage and Cholesky factorization.
//!
//! The stiffness matrix couples only degrees of freedom whose elements lie
//! within the interaction horizon, so it is banded with half-bandwidth
//! proportional to delta / h. Only the lower band is stored, row-major by
//! lag: entry (i, j) with j <= i sits at `data[i * (hbw + 1) + (i - j)]`.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

#[derive(Debug, Clone)]
pub struct BandMatrix {
    pub dim: usize,
    pub half_bandwidth: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(dim: usize, half_bandwidth: usize) -> Self {
        assert!(half_bandwidth < dim.max(1));
        BandMatrix {
            dim,
            half_bandwidth,
            data: vec![0.0; dim * (half_bandwidth + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.half_bandwidth + 1) + (i - j)
    }

    /// Symmetric read; zero outside the band.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        if r - c > self.half_bandwidth {
            0.0
        } else {
            self.data[self.idx(r, c)]
        }
    }

    /// Writes the lower-triangle entry (i >= j).
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i >= j && i - j <= self.half_bandwidth);
        let at = self.idx(i, j);
        self.data[at] = v;
    }

    /// Matrix-vector product of the full symmetric matrix.
    pub fn sym_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        let mut y = vec![0.0; self.dim];
        for i in 0..self.dim {
            let lo = i.saturating_sub(self.half_bandwidth);
            for j in lo..=i {
                let v = self.data[self.idx(i, j)];
                y[i] += v * x[j];
                if j < i {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    /// Returns the matrix with every entry negated.
    pub fn negated(&self) -> BandMatrix {
        BandMatrix {
            dim: self.dim,
            half_bandwidth: self.half_bandwidth,
            data: self.data.iter().map(|v| -v).collect(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    /// In-place banded Cholesky A = L L^T; fails on a non-positive pivot.
    pub fn cholesky(mut self) -> Result<BandCholesky> {
        let n = self.dim;
        let hbw = self.half_bandwidth;
        for j in 0..n {
            let lo = j.saturating_sub(hbw);
            let mut d = self.data[self.idx(j, j)];
            for k in lo..j {
                let l = self.data[self.idx(j, k)];
                d -= l * l;
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::NotCoercive { row: j, pivot: d });
            }
            let d = d.sqrt();
            let at_jj = self.idx(j, j);
            self.data[at_jj] = d;
            let hi = (j + hbw).min(n - 1);
            for i in j + 1..=hi {
                let lo_i = i.saturating_sub(hbw).max(lo);
                let at_ij = self.idx(i, j);
                let mut s = self.data[at_ij];
                for k in lo_i..j {
                    s -= self.data[self.idx(i, k)] * self.data[self.idx(j, k)];
                }
                self.data[at_ij] = s / d;
            }
        }
        Ok(BandCholesky {
            dim: n,
            half_bandwidth: hbw,
            data: self.data,
        })
    }
}

/// Lower Cholesky factor in band storage.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    dim: usize,
    half_bandwidth: usize,
    data: Vec<f64>,
}

impl BandCholesky {
    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.half_bandwidth + 1) + (i - j)
    }

    /// Solves L L^T x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.dim);
        let n = self.dim;
        let hbw = self.half_bandwidth;
        let mut x = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(hbw);
            let mut s = x[i];
            for k in lo..i {
                s -= self.data[self.idx(i, k)] * x[k];
            }
            x[i] = s / self.data[self.idx(i, i)];
        }
        for i in (0..n).rev() {
            let hi = (i + hbw).min(n - 1);
            let mut s = x[i];
            for k in i + 1..=hi {
                s -= self.data[self.idx(k, i)] * x[k];
            }
            x[i] = s / self.data[self.idx(i, i)];
        }
        x
    }
}
