//! Index maps and matrix-free application for Kronecker products.
//!
//! Conventions used throughout the crate:
//!
//! * `vec` stacks matrix **columns** into one vector.
//! * For factors `U_a ∈ R^{n×n}` (activation side) and `U_g ∈ R^{m×m}`
//!   (gradient side), the product `U_a ⊗ U_g` has row index
//!   `i = m(α−1) + γ` with `α` the activation-side row and `γ` the
//!   gradient-side row. The index maps below are therefore **1-based**;
//!   everything else in the crate is 0-based.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Row-index arithmetic for a Kronecker product with an `n`-dimensional left
/// (activation) factor and an `m`-dimensional right (gradient) factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KronIndex {
    /// Left (activation-side) dimension.
    pub n: usize,
    /// Right (gradient-side) dimension.
    pub m: usize,
}

impl KronIndex {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Contract("KronIndex dimensions must be >= 1".into()));
        }
        Ok(Self { n, m })
    }

    /// Total product dimension `n*m`.
    pub fn len(&self) -> usize {
        self.n * self.m
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row index `i = m(α−1) + γ` for 1-based `α ∈ 1..=n`, `γ ∈ 1..=m`.
    pub fn row_index(&self, alpha: usize, gamma: usize) -> Result<usize> {
        if alpha < 1 || alpha > self.n {
            return Err(Error::IndexOutOfRange(format!("alpha={alpha} not in 1..={}", self.n)));
        }
        if gamma < 1 || gamma > self.m {
            return Err(Error::IndexOutOfRange(format!("gamma={gamma} not in 1..={}", self.m)));
        }
        Ok(self.m * (alpha - 1) + gamma)
    }

    /// Inverse of [`row_index`](Self::row_index): recovers `(β, ζ)` with
    /// `i = m(β−1) + ζ`, `β ∈ 1..=n`, `ζ ∈ 1..=m`.
    ///
    /// Computed as `β = ⌊(i−1)/m⌋ + 1`, `ζ = i − m(β−1)`; the naive
    /// `⌊i/m⌋ + 1` would produce `ζ = 0` whenever `m` divides `i`.
    pub fn row_inverse(&self, i: usize) -> Result<(usize, usize)> {
        if i < 1 || i > self.len() {
            return Err(Error::IndexOutOfRange(format!("i={i} not in 1..={}", self.len())));
        }
        let beta = (i - 1) / self.m + 1;
        let zeta = i - self.m * (beta - 1);
        Ok((beta, zeta))
    }
}

/// Column-stacked `vec` of a matrix.
pub fn vec_cols(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.rows() * m.cols());
    for j in 0..m.cols() {
        for i in 0..m.rows() {
            out.push(m.get(i, j));
        }
    }
    out
}

/// Inverse of [`vec_cols`]: reshape into `rows × cols` in column order.
pub fn unvec_cols(x: &[f64], rows: usize, cols: usize) -> Result<Mat> {
    if x.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "unvec of length {} into {rows}x{cols}",
            x.len()
        )));
    }
    let mut m = Mat::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m.set(i, j, x[j * rows + i]);
        }
    }
    Ok(m)
}

/// Apply `(U_left ⊗ U_right)` — or its transpose — to a vector without
/// materializing the product, via `(A ⊗ B) vec(X) = vec(B X Aᵀ)`.
///
/// `U_left` is `n×a`, `U_right` is `m×g`. The forward map takes a length
/// `a·g` vector to length `n·m`; with `transpose` set, the directions swap.
pub fn kron_apply(u_left: &Mat, u_right: &Mat, x: &[f64], transpose: bool) -> Result<Vec<f64>> {
    let (n, a) = (u_left.rows(), u_left.cols());
    let (m, g) = (u_right.rows(), u_right.cols());
    if transpose {
        if x.len() != n * m {
            return Err(Error::ShapeMismatch(format!(
                "kron_apply^T expects length {}, got {}",
                n * m,
                x.len()
            )));
        }
        // (A ⊗ B)ᵀ vec(X) = vec(Bᵀ X A), X is m×n.
        let xm = unvec_cols(x, m, n)?;
        let t = u_right.transpose().matmul(&xm).matmul(u_left);
        Ok(vec_cols(&t))
    } else {
        if x.len() != a * g {
            return Err(Error::ShapeMismatch(format!(
                "kron_apply expects length {}, got {}",
                a * g,
                x.len()
            )));
        }
        // (A ⊗ B) vec(X) = vec(B X Aᵀ), X is g×a.
        let xm = unvec_cols(x, g, a)?;
        let t = u_right.matmul(&xm).matmul(&u_left.transpose());
        Ok(vec_cols(&t))
    }
}

/// Column `g*(p) + q` of `(U_left ⊗ U_right)`, i.e. `u_left[:,p] ⊗ u_right[:,q]`
/// (0-based column indices), written into `out` of length `n·m`.
pub fn kron_column(u_left: &Mat, u_right: &Mat, p: usize, q: usize, out: &mut [f64]) {
    let (n, m) = (u_left.rows(), u_right.rows());
    debug_assert_eq!(out.len(), n * m);
    for alpha in 0..n {
        let ua = u_left.get(alpha, p);
        for gamma in 0..m {
            out[m * alpha + gamma] = ua * u_right.get(gamma, q);
        }
    }
}

/// Dense `U_left ⊗ U_right`. Desk-scale oracle and report helper; the
/// library's sampling and diagonal paths never call this.
pub fn materialize(u_left: &Mat, u_right: &Mat) -> Mat {
    let (n, a) = (u_left.rows(), u_left.cols());
    let (m, g) = (u_right.rows(), u_right.cols());
    Mat::from_fn(n * m, a * g, |i, j| {
        let (alpha, gamma) = (i / m, i % m);
        let (beta, zeta) = (j / g, j % g);
        u_left.get(alpha, beta) * u_right.get(gamma, zeta)
    })
}

/// Dense `(U_left ⊗ U_right) diag(λ) (U_left ⊗ U_right)ᵀ`, a test/report
/// oracle for the matrix-free paths.
pub fn materialize_sandwich(u_left: &Mat, u_right: &Mat, lambda: &[f64]) -> Mat {
    let v = materialize(u_left, u_right);
    let nm = v.rows();
    let mut out = Mat::zeros(nm, nm);
    for (j, &l) in lambda.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        let col = v.col(j);
        for i in 0..nm {
            let ci = l * col[i];
            if ci == 0.0 {
                continue;
            }
            for k in 0..nm {
                let old = out.get(i, k);
                out.set(i, k, old + ci * col[k]);
            }
        }
    }
    out
}
