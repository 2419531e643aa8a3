//! Small dense linear algebra for the p x p systems, plus compensated sums.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative pivot floor for the symmetric positive-definite factorization.
pub const PIVOT_FLOOR: f64 = 1e-12;

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &Neumaier) {
        self.add(other.sum);
        self.add(other.comp);
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated accumulator of `sum x x^T` (upper triangle) and `sum x y`.
#[derive(Debug, Clone)]
pub struct GramAccumulator {
    dim: usize,
    xx: Vec<Neumaier>,
    xy: Vec<Neumaier>,
}

impl GramAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            xx: vec![Neumaier::default(); dim * (dim + 1) / 2],
            xy: vec![Neumaier::default(); dim],
        }
    }

    #[inline]
    pub fn push(&mut self, x: &[f64], y: f64) {
        debug_assert_eq!(x.len(), self.dim);
        let mut k = 0;
        for a in 0..self.dim {
            let xa = x[a];
            for &xb in &x[a..] {
                self.xx[k].add(xa * xb);
                k += 1;
            }
            self.xy[a].add(xa * y);
        }
    }

    pub fn merge(&mut self, other: &GramAccumulator) {
        for (s, o) in self.xx.iter_mut().zip(&other.xx) {
            s.merge(o);
        }
        for (s, o) in self.xy.iter_mut().zip(&other.xy) {
            s.merge(o);
        }
    }

    pub fn gram(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        let mut k = 0;
        for a in 0..self.dim {
            for b in a..self.dim {
                let v = self.xx[k].value();
                m[(a, b)] = v;
                m[(b, a)] = v;
                k += 1;
            }
        }
        m
    }

    pub fn cross(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim, self.xy.iter().map(Neumaier::value))
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Fails with `SingularDesign` when a pivot drops below
    /// `PIVOT_FLOOR * max_k a[k][k]`.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "Cholesky of a non-square matrix");
        let max_diag = (0..n).map(|k| a[(k, k)]).fold(0.0_f64, f64::max);
        let floor = PIVOT_FLOOR * max_diag;
        let mut l = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > floor) || !d.is_finite() {
                return Err(Error::SingularDesign { pivot: d, floor });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.l.nrows();
        let mut z = b.clone();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= self.l[(i, k)] * z[k];
            }
            z[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * z[k];
            }
            z[i] = s / self.l[(i, i)];
        }
        z
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        let mut inv = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut e = DVector::zeros(n);
            e[c] = 1.0;
            inv.set_column(c, &self.solve(&e));
        }
        symmetrize(&inv)
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix; `+inf` for an empty matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// The matrix with its first row and column removed.
pub fn trailing_block(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n <= 1 {
        return DMatrix::zeros(0, 0);
    }
    m.view((1, 1), (n - 1, n - 1)).into_owned()
}

/// `a^{-1} b a^{-1}` given `a^{-1}`.
pub fn sandwich(bread_inv: &DMatrix<f64>, meat: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(bread_inv * meat * bread_inv))
}

/// Relative Frobenius discrepancy `||a - b|| / max(||b||, tiny)`.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    num.sqrt() / den.sqrt().max(f64::MIN_POSITIVE)
}
