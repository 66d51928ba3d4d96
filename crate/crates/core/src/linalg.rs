//! Small dense kernels on row-major `f64` slices.
//!
//! The likelihood hot paths work on matrices of a few dozen to a few hundred
//! rows, where a hand-rolled Cholesky on a flat buffer beats the generic
//! containers. Everything else uses `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// In-place lower Cholesky factorisation of a symmetric positive-definite
/// row-major matrix. Only the lower triangle is read; on success the lower
/// triangle holds `L` and the strict upper triangle is zeroed.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let row_j = j * n;
        let mut d = a[row_j + j];
        for k in 0..j {
            let l = a[row_j + k];
            d -= l * l;
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite(format!(
                "pivot {j} of {n} is {d:e}"
            )));
        }
        let djj = d.sqrt();
        a[row_j + j] = djj;
        let inv = 1.0 / djj;
        for i in (j + 1)..n {
            let row_i = i * n;
            let mut s = a[row_i + j];
            for k in 0..j {
                s -= a[row_i + k] * a[row_j + k];
            }
            a[row_i + j] = s * inv;
        }
        for k in (j + 1)..n {
            a[row_j + k] = 0.0;
        }
    }
    Ok(())
}

/// `log det(A)` from its Cholesky factor.
pub fn chol_logdet(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

/// Solves `L x = b` in place.
pub fn solve_lower_in_place(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let row = i * n;
        let mut s = b[i];
        for k in 0..i {
            s -= l[row + k] * b[k];
        }
        b[i] = s / l[row + i];
    }
}

/// Solves `Lᵀ x = b` in place.
pub fn solve_upper_t_in_place(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Dense Cholesky factor of a small SPD matrix, kept for repeated solves.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn new(mut a: Vec<f64>, n: usize) -> Result<Self> {
        cholesky_in_place(&mut a, n)?;
        Ok(Self { n, l: a })
    }

    pub fn from_dmatrix(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(a[(i, j)]);
            }
        }
        Self::new(data, n)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn logdet(&self) -> f64 {
        chol_logdet(&self.l, self.n)
    }

    /// Entry `(i, j)` of the lower factor.
    pub fn l(&self, i: usize, j: usize) -> f64 {
        self.l[i * self.n + j]
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        solve_lower_in_place(&self.l, self.n, &mut x);
        solve_upper_t_in_place(&self.l, self.n, &mut x);
        x
    }

    /// Returns `L⁻¹ b`, so that `|L⁻¹ b|² = bᵀ A⁻¹ b`.
    pub fn whiten(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        solve_lower_in_place(&self.l, self.n, &mut x);
        x
    }

    /// Returns `L z`.
    pub fn mul_lower(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| (0..=i).map(|k| self.l[i * n + k] * z[k]).sum())
            .collect()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut inv = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }
}

/// Ordinary least squares via the normal equations.
pub fn ols(x: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>> {
    let p = x.ncols();
    if x.nrows() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "X has {} rows but y has {}",
            x.nrows(),
            y.len()
        )));
    }
    let xtx = x.tr_mul(x);
    let xty = x.tr_mul(&DVector::from_column_slice(y));
    let chol = Cholesky::from_dmatrix(&xtx)
        .map_err(|_| Error::RankDeficient(format!("XᵀX ({p}×{p}) is singular")))?;
    // Near-singular XᵀX passes the pivot check but yields garbage.
    let scale = (0..p).map(|i| xtx[(i, i)]).fold(0.0_f64, f64::max);
    let min_pivot = (0..p).map(|i| chol.l(i, i).powi(2)).fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e-12 * scale {
        return Err(Error::RankDeficient(format!(
            "XᵀX ({p}×{p}) is numerically singular"
        )));
    }
    Ok(chol.solve(xty.as_slice()))
}

/// `Aᵀ A` for a column-major `nalgebra` matrix, returned row-major.
pub fn gram_row_major(a: &DMatrix<f64>) -> Vec<f64> {
    let g = a.tr_mul(a);
    let q = g.nrows();
    let mut out = vec![0.0; q * q];
    for i in 0..q {
        for j in 0..q {
            out[i * q + j] = g[(i, j)];
        }
    }
    out
}
