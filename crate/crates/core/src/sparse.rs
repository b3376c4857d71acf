//! Spectral sparsification that preserves the Kronecker structure of the
//! eigenbasis, and assembly of the low-rank information-form posterior.
//!
//! Keeping the top-K eigenvalues forces keeping every (activation-side,
//! gradient-side) eigenvector either index touches, so the stored spectrum
//! inflates from `K` to `L = a·g ≥ K` — the cross product of the kept index
//! sets. The diagonal correction `D` is recomputed against the reduced
//! basis, which keeps the parameter-space diagonal of the assembled matrix
//! exact at any rank.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fisher::{diagonal_correction, efb_diagonal, KronEigenbasis};
use crate::kron::KronIndex;
use crate::linalg::Mat;

/// Default clipping floor for repaired diagonal-correction entries.
pub const D_CLIP_EPSILON: f64 = 1e-8;

/// Output of [`spectral_sparsify`]: column subsets of the eigenbasis plus
/// the gathered spectrum over their cross product.
#[derive(Debug, Clone)]
pub struct Sparsified {
    /// `n × a` column subset of `U_A`.
    pub u_a: Mat,
    /// `m × g` column subset of `U_G`.
    pub u_g: Mat,
    /// Length `L = a·g`, Kronecker column order over `kept_a × kept_g`:
    /// position `g(p−1)+q` holds `Λ[m(kept_a[p]−1) + kept_g[q]]`.
    pub lambda_l: Vec<f64>,
    /// Kept activation-side eigenvector indices, 1-based ascending.
    pub kept_a: Vec<usize>,
    /// Kept gradient-side eigenvector indices, 1-based ascending.
    pub kept_g: Vec<usize>,
    pub k_requested: usize,
}

impl Sparsified {
    pub fn realized_rank(&self) -> usize {
        self.kept_a.len() * self.kept_g.len()
    }
}

/// Keep the top-K eigenvalues and every eigenvector column their indices
/// decompose into.
///
/// Ties in the top-K selection break toward the smaller index, so kept sets
/// are deterministic. Works for any eigenvalue layout, descending or not.
pub fn spectral_sparsify(
    u_a: &Mat,
    u_g: &Mat,
    lambda: &[f64],
    k: usize,
) -> Result<Sparsified> {
    let n = u_a.cols();
    let m = u_g.cols();
    if u_a.rows() != n || u_g.rows() != m {
        return Err(Error::ShapeMismatch("full eigenbasis factors must be square".into()));
    }
    let total = n * m;
    if lambda.len() != total {
        return Err(Error::ShapeMismatch("lambda length vs basis size".into()));
    }
    if k < 1 || k > total {
        return Err(Error::Contract(alloc::format!("K={k} not in 1..={total}")));
    }

    let mut order: Vec<usize> = (0..total).collect();
    // Stable: equal eigenvalues keep ascending index order.
    order.sort_by(|&i, &j| lambda[j].partial_cmp(&lambda[i]).expect("finite eigenvalues"));

    let ix = KronIndex::new(n, m)?;
    let mut keep_a = alloc::vec![false; n];
    let mut keep_g = alloc::vec![false; m];
    for &idx in order.iter().take(k) {
        let (beta, zeta) = ix.row_inverse(idx + 1)?;
        keep_a[beta - 1] = true;
        keep_g[zeta - 1] = true;
    }
    let kept_a: Vec<usize> = (1..=n).filter(|&b| keep_a[b - 1]).collect();
    let kept_g: Vec<usize> = (1..=m).filter(|&z| keep_g[z - 1]).collect();

    let g_len = kept_g.len();
    let mut lambda_l = Vec::with_capacity(kept_a.len() * g_len);
    for &beta in &kept_a {
        for &zeta in &kept_g {
            lambda_l.push(lambda[ix.row_index(beta, zeta)? - 1]);
        }
    }
    let cols_a: Vec<usize> = kept_a.iter().map(|&b| b - 1).collect();
    let cols_g: Vec<usize> = kept_g.iter().map(|&z| z - 1).collect();
    Ok(Sparsified {
        u_a: u_a.select_cols(&cols_a),
        u_g: u_g.select_cols(&cols_g),
        lambda_l,
        kept_a,
        kept_g,
        k_requested: k,
    })
}

/// The low-rank information-form posterior precision of one layer:
/// `(U_a ⊗ U_g) Λ_L (U_a ⊗ U_g)ᵀ + diag(D)`.
#[derive(Debug, Clone)]
pub struct SparseInfoForm {
    pub u_a: Mat,
    pub u_g: Mat,
    /// Length `L`, Kronecker column order (see [`Sparsified::lambda_l`]).
    pub lambda_l: Vec<f64>,
    /// Diagonal correction, length `N`, recomputed against the reduced basis.
    pub d: Vec<f64>,
    /// The exact Fisher diagonal the correction was computed from.
    pub exact_diag: Vec<f64>,
    pub kept_a: Vec<usize>,
    pub kept_g: Vec<usize>,
    pub k_requested: usize,
    /// 0-based positions of the strictly positive entries of `lambda_l`;
    /// repair drops zero eigenvalues here while keeping the layout.
    pub active: Vec<usize>,
}

impl SparseInfoForm {
    /// Realized rank `L = a·g`.
    pub fn realized_rank(&self) -> usize {
        self.lambda_l.len()
    }

    /// Parameter count `N = n·m`.
    pub fn param_count(&self) -> usize {
        self.u_a.rows() * self.u_g.rows()
    }

    pub fn index(&self) -> KronIndex {
        KronIndex { n: self.u_a.rows(), m: self.u_g.rows() }
    }

    /// Dense `N×N` assembly. Oracle/report helper, desk scale only.
    pub fn materialize(&self) -> Mat {
        let mut dense = crate::kron::materialize_sandwich(&self.u_a, &self.u_g, &self.lambda_l);
        for (i, &di) in self.d.iter().enumerate() {
            dense.set(i, i, dense.get(i, i) + di);
        }
        dense
    }
}

/// Recompute the diagonal correction against the reduced basis and assemble
/// the sparse information form. `D` is added after the low-rank step, so
/// the assembled diagonal equals `exact_diag` identically.
pub fn assemble_inf(sparsified: Sparsified, exact_diag: &[f64]) -> Result<SparseInfoForm> {
    let n_params = sparsified.u_a.rows() * sparsified.u_g.rows();
    if exact_diag.len() != n_params {
        return Err(Error::ShapeMismatch("exact_diag length vs layer size".into()));
    }
    let lowrank_diag = efb_diagonal(&sparsified.u_a, &sparsified.u_g, &sparsified.lambda_l)?;
    let d = diagonal_correction(exact_diag, &lowrank_diag)?;
    let active = (0..sparsified.lambda_l.len()).collect();
    Ok(SparseInfoForm {
        u_a: sparsified.u_a,
        u_g: sparsified.u_g,
        lambda_l: sparsified.lambda_l,
        d,
        exact_diag: exact_diag.to_vec(),
        kept_a: sparsified.kept_a,
        kept_g: sparsified.kept_g,
        k_requested: sparsified.k_requested,
        active,
    })
}

/// Sparsify a full per-layer eigenbasis and assemble the posterior form.
pub fn sparsify_basis(basis: &KronEigenbasis, k: usize) -> Result<SparseInfoForm> {
    let s = spectral_sparsify(&basis.u_a, &basis.u_g, &basis.lambda, k)?;
    assemble_inf(s, &basis.exact_diag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// All `D > 0` and no zero eigenvalues: the assembled precision is
    /// positive definite by the sufficient condition.
    Valid,
    /// Non-positive `D` entries were clipped to the floor and/or zero
    /// eigenvalues dropped from the active set.
    Repaired,
    /// `exact_diag` itself has zeros (dead directions); the sufficient
    /// condition cannot hold and the posterior module's degenerate policy
    /// must decide.
    Degenerate,
}

/// Check the positive-definiteness sufficient condition and repair the form
/// if it fails. Verdicts, not errors: the caller routes `Degenerate` through
/// its policy.
pub fn check_validity(form: SparseInfoForm) -> (Verdict, SparseInfoForm) {
    check_validity_with_floor(form, D_CLIP_EPSILON)
}

pub fn check_validity_with_floor(mut form: SparseInfoForm, floor: f64) -> (Verdict, SparseInfoForm) {
    if form.exact_diag.iter().any(|&e| e == 0.0) {
        return (Verdict::Degenerate, form);
    }
    // Eigenvalues below machine-level relative size are zeros that merely
    // survived round-off; keeping them would poison the sampler's gram.
    let lambda_max = form.lambda_l.iter().cloned().fold(0.0f64, f64::max);
    let zero_tol = 1e-14 * lambda_max;
    let d_ok = form.d.iter().all(|&d| d > 0.0);
    let lambda_ok = form.lambda_l.iter().all(|&l| l > zero_tol);
    if d_ok && lambda_ok {
        return (Verdict::Valid, form);
    }
    for d in form.d.iter_mut() {
        if *d <= 0.0 {
            *d = floor;
        }
    }
    form.active = form
        .lambda_l
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > zero_tol)
        .map(|(i, _)| i)
        .collect();
    (Verdict::Repaired, form)
}
