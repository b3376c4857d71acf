//! Dense matrices, symmetric eigendecomposition and Cholesky factorization.
//!
//! Everything here is plain `Vec<f64>`-backed, row-major dense algebra sized
//! for desk-scale problems (a few hundred rows). The eigensolver is a cyclic
//! Jacobi iteration: it is globally convergent on symmetric input and its
//! rotations are deterministic, so results replay bit-for-bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
// Resolves float math in no_std builds; std test builds see the inherent methods.
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("matrix rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self * other`. Panics on inner-dimension mismatch; the public
    /// operations validate shapes before reaching this.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "mul_vec dimension");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ * x` without forming the transpose.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len(), "tr_mul_vec dimension");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Keep the named columns (in the given order).
    pub fn select_cols(&self, cols: &[usize]) -> Mat {
        Mat::from_fn(self.rows, cols.len(), |i, j| self.get(i, cols[j]))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense symmetric matrix; both triangles are stored and kept exactly equal.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m.data[i * d.len() + i] = v;
        }
        m
    }

    /// Evaluate `f` on the upper triangle and mirror it, so the stored matrix
    /// is symmetric by construction.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                m.data[i * dim + j] = v;
                m.data[j * dim + i] = v;
            }
        }
        m
    }

    /// Validates that `m` is exactly symmetric as stored.
    pub fn from_mat(m: &Mat) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::ShapeMismatch(format!("{}x{} is not square", m.rows(), m.cols())));
        }
        for i in 0..m.rows() {
            for j in (i + 1)..m.cols() {
                if m.get(i, j) != m.get(j, i) {
                    return Err(Error::Contract(format!("entry ({i},{j}) != ({j},{i})")));
                }
            }
        }
        Ok(Self { dim: m.rows(), data: m.data().to_vec() })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Sets both mirror entries.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rank-1 update `self += s * v vᵀ`. The product `v[i]*v[j]` is identical
    /// for both mirror entries, so symmetry stays exact.
    pub fn add_scaled_outer(&mut self, v: &[f64], s: f64) {
        assert_eq!(v.len(), self.dim);
        for i in 0..self.dim {
            let svi = s * v[i];
            for j in 0..self.dim {
                self.data[i * self.dim + j] += svi * v[j];
            }
        }
    }

    pub fn add_diag(&mut self, d: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += d;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.dim, x.len());
        (0..self.dim).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Result of a symmetric eigendecomposition: orthonormal eigenvector columns
/// and eigenvalues sorted non-increasing (ties keep original pivot order).
#[derive(Debug, Clone)]
pub struct EigPair {
    /// Columns are unit eigenvectors, ordered to match `values`.
    pub vectors: Mat,
    /// Eigenvalues, descending. Round-off negatives in `[-1e-10, 0)` are
    /// clamped to zero so PSD input yields a PSD spectrum.
    pub values: Vec<f64>,
}

const JACOBI_MAX_SWEEPS: usize = 64;
const JACOBI_REL_TOL: f64 = 1e-14;
const PSD_CLAMP: f64 = 1e-10;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Postcondition: `M = V diag(s) Vᵀ` to ~1e-14 relative Frobenius error,
/// values descending. Fails with the residual if the sweep limit is hit.
pub fn sym_eig(m: &SymMatrix) -> Result<EigPair> {
    if !m.is_finite() {
        return Err(Error::Contract("sym_eig: non-finite entries".into()));
    }
    let n = m.dim();
    let mut a = m.data().to_vec();
    let mut v = Mat::identity(n);
    let norm = m.frobenius_norm();
    let tol = JACOBI_REL_TOL * norm;

    let mut converged = false;
    let mut residual = off_diag_norm(&a, n);
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        residual = off_diag_norm(&a, n);
        if residual <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                // Skip rotations that cannot move the result at this scale.
                if apq.abs() < JACOBI_REL_TOL * norm / (n * n) as f64 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                rotate(&mut a, n, p, q, c, s);
                // Accumulate V <- V * J(p, q, c, s).
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    if !converged {
        let residual = off_diag_norm(&a, n);
        if residual > tol {
            return Err(Error::EigNonConvergence { residual, sweeps: JACOBI_MAX_SWEEPS });
        }
    }
    let _ = residual;

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: ties keep the original pivot order, making downstream
    // top-K selections deterministic.
    order.sort_by(|&i, &j| {
        let (vi, vj) = (a[i * n + i], a[j * n + j]);
        vj.partial_cmp(&vi).expect("finite eigenvalues")
    });
    let mut values = Vec::with_capacity(n);
    let mut vectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut val = a[src * n + src];
        if val < 0.0 && val >= -PSD_CLAMP {
            val = 0.0;
        }
        values.push(val);
        for r in 0..n {
            vectors.set(r, dst, v.get(r, src));
        }
    }
    Ok(EigPair { vectors, values })
}

fn off_diag_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let x = a[i * n + j];
            s += 2.0 * x * x;
        }
    }
    s.sqrt()
}

/// One two-sided Jacobi rotation in the (p, q) plane, applied to the packed
/// symmetric working array.
fn rotate(a: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    let app = a[p * n + p];
    let aqq = a[q * n + q];
    let apq = a[p * n + q];
    for i in 0..n {
        if i == p || i == q {
            continue;
        }
        let aip = a[i * n + p];
        let aiq = a[i * n + q];
        let nip = c * aip - s * aiq;
        let niq = s * aip + c * aiq;
        a[i * n + p] = nip;
        a[p * n + i] = nip;
        a[i * n + q] = niq;
        a[q * n + i] = niq;
    }
    a[p * n + p] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
    a[q * n + q] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = M`.
///
/// A non-positive pivot reports the failing row index, mirroring the leading
/// principal minor that breaks positive definiteness.
pub fn cholesky(m: &SymMatrix) -> Result<Mat> {
    let n = m.dim();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = m.get(j, j);
        for k in 0..j {
            let ljk = l.get(j, k);
            d -= ljk * ljk;
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::PositiveDefinitenessViolation { pivot: j, value: d });
        }
        let ljj = d.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut v = m.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / ljj);
        }
    }
    Ok(l)
}

/// Forward substitution: `L⁻¹ b` for lower-triangular `L`.
pub fn ltri_solve_vec(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    assert_eq!(b.len(), n);
    let mut x = b.to_vec();
    for i in 0..n {
        let mut v = x[i];
        for k in 0..i {
            v -= l.get(i, k) * x[k];
        }
        x[i] = v / l.get(i, i);
    }
    x
}

/// Backward substitution: `L⁻ᵀ b` for lower-triangular `L`.
pub fn ltri_solve_t_vec(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    assert_eq!(b.len(), n);
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut v = x[i];
        for k in (i + 1)..n {
            v -= l.get(k, i) * x[k];
        }
        x[i] = v / l.get(i, i);
    }
    x
}

/// `L⁻¹ B` column by column.
pub fn ltri_solve_mat(l: &Mat, b: &Mat) -> Mat {
    assert_eq!(l.rows(), b.rows());
    let mut out = Mat::zeros(b.rows(), b.cols());
    for j in 0..b.cols() {
        let x = ltri_solve_vec(l, &b.col(j));
        for i in 0..b.rows() {
            out.set(i, j, x[i]);
        }
    }
    out
}

/// `L⁻ᵀ B` column by column.
pub fn ltri_solve_t_mat(l: &Mat, b: &Mat) -> Mat {
    assert_eq!(l.rows(), b.rows());
    let mut out = Mat::zeros(b.rows(), b.cols());
    for j in 0..b.cols() {
        let x = ltri_solve_t_vec(l, &b.col(j));
        for i in 0..b.rows() {
            out.set(i, j, x[i]);
        }
    }
    out
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
/// Desk-scale helper; used by oracles and dense fallbacks, not hot paths.
pub fn spd_inverse(m: &SymMatrix) -> Result<SymMatrix> {
    let l = cholesky(m)?;
    let linv = ltri_solve_mat(&l, &Mat::identity(m.dim()));
    // M⁻¹ = L⁻ᵀ L⁻¹; symmetrize the last bit of round-off away.
    let inv = ltri_solve_t_mat(&l, &linv);
    Ok(SymMatrix::from_fn(m.dim(), |i, j| {
        0.5 * (inv.get(i, j) + inv.get(j, i))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn reconstruct(e: &EigPair) -> Mat {
        let n = e.values.len();
        let mut vs = e.vectors.clone();
        for j in 0..n {
            for i in 0..n {
                vs.set(i, j, vs.get(i, j) * e.values[j]);
            }
        }
        vs.matmul(&e.vectors.transpose())
    }

    #[test]
    fn eig_identity() {
        let e = sym_eig(&SymMatrix::identity(3)).unwrap();
        assert_eq!(e.values, alloc::vec![1.0, 1.0, 1.0]);
        // Any orthonormal basis is acceptable: check VᵀV = I.
        let vtv = e.vectors.transpose().matmul(&e.vectors);
        let diff = vtv.sub(&Mat::identity(3));
        assert!(diff.frobenius_norm() < 1e-10);
    }

    #[test]
    fn eig_diagonal_sorted() {
        let e = sym_eig(&SymMatrix::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.values, alloc::vec![3.0, 1.0]);
        // Axis-aligned eigenvectors, possibly sign-flipped.
        assert!((e.vectors.get(1, 0).abs() - 1.0).abs() < 1e-14);
        assert!((e.vectors.get(0, 1).abs() - 1.0).abs() < 1e-14);
        assert!(e.vectors.get(0, 0).abs() < 1e-14);
    }

    #[test]
    fn eig_reconstruction_random() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = SymMatrix::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let e = sym_eig(&m).unwrap();
            let err = reconstruct(&e).sub(&m.to_mat()).frobenius_norm();
            assert!(err <= 1e-8 * m.frobenius_norm().max(1.0), "residual {err}");
            for w in e.values.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn eig_zero_matrix() {
        let e = sym_eig(&SymMatrix::zeros(3)).unwrap();
        assert_eq!(e.values, alloc::vec![0.0; 3]);
    }

    #[test]
    fn eig_psd_clamps_tiny_negatives() {
        // Rank-1 PSD matrix: two eigenvalues are exact zeros up to round-off.
        let v = [0.6, -0.8, 0.2];
        let mut m = SymMatrix::zeros(3);
        m.add_scaled_outer(&v, 1.0);
        let e = sym_eig(&m).unwrap();
        assert!(e.values.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn eig_rejects_non_finite() {
        let mut m = SymMatrix::zeros(2);
        m.set(0, 1, f64::NAN);
        assert!(matches!(sym_eig(&m), Err(Error::Contract(_))));
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&SymMatrix::identity(4)).unwrap();
        assert_eq!(l, Mat::identity(4));
    }

    #[test]
    fn cholesky_diagonal() {
        let l = cholesky(&SymMatrix::diag(&[4.0, 9.0])).unwrap();
        assert_eq!(l.get(0, 0), 2.0);
        assert_eq!(l.get(1, 1), 3.0);
        assert_eq!(l.get(1, 0), 0.0);
    }

    #[test]
    fn cholesky_random_spd_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let b = Mat::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        // BᵀB + I is safely positive definite.
        let mut spd = SymMatrix::zeros(5);
        for i in 0..5 {
            for j in i..5 {
                let v = dot(&b.col(i), &b.col(j)) + if i == j { 1.0 } else { 0.0 };
                spd.set(i, j, v);
            }
        }
        let l = cholesky(&spd).unwrap();
        let err = l.matmul(&l.transpose()).sub(&spd.to_mat()).frobenius_norm();
        assert!(err <= 1e-10 * spd.frobenius_norm());
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let m = SymMatrix::diag(&[1.0, -2.0, 3.0]);
        match cholesky(&m) {
            Err(Error::PositiveDefinitenessViolation { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected pivot failure, got {other:?}"),
        }
    }

    #[test]
    fn triangular_solves_invert() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut l = Mat::zeros(4, 4);
        for i in 0..4 {
            for j in 0..=i {
                l.set(i, j, if i == j { rng.random_range(0.5..2.0) } else { rng.random_range(-1.0..1.0) });
            }
        }
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = ltri_solve_vec(&l, &b);
        let back = l.mul_vec(&x);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        let y = ltri_solve_t_vec(&l, &b);
        let back = l.transpose().mul_vec(&y);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn spd_inverse_roundtrip() {
        let m = SymMatrix::from_fn(3, |i, j| if i == j { 3.0 } else { 0.5 });
        let inv = spd_inverse(&m).unwrap();
        let prod = m.to_mat().matmul(&inv.to_mat());
        let err = prod.sub(&Mat::identity(3)).frobenius_norm();
        assert!(err < 1e-12);
    }
}
