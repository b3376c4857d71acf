//! Analytical sampling from the sparse information form. Every cubic-cost
//! step (Cholesky, eigendecomposition, inversion) runs in the low-rank
//! dimension `L`; nothing of size `N×N` is ever formed.
//!
//! With `V_s = D^{-1/2} (U_a ⊗ U_g) Λ^{1/2}`, the posterior covariance is
//! `Σ = D^{-1/2} (I + V_s V_sᵀ)^{-1} D^{-1/2}` and samples are
//! `θ = θ_MAP + F X` for `X ~ N(0, I)`, where `F = D^{-1/2} W^{-1}` and
//! `W = I + V_s C V_sᵀ`. For `F Fᵀ = Σ` the middle factor must satisfy
//! `C + Cᵀ + Cᵀ (V_sᵀV_s) C = I_L`; writing `C = A_c^{-T} S A_c^{-1}` with
//! `A_c A_cᵀ = V_sᵀV_s`, the unique symmetric solution is
//! `S = (I + A_cᵀA_c)^{1/2} − I`. That matrix square root (an `L×L`
//! eigendecomposition) also gives `(C^{-1} + V_sᵀV_s)^{-1}` directly as
//! `A_c^{-T} Q diag(1 − μ^{-1/2}) Qᵀ A_c^{-1}` without ever inverting `C`,
//! which stays stable as `Λ → 0`.
//!
//! Deterministic (zero-information) coordinates are encoded as `D_i = +∞`:
//! their inverse scalings vanish, draws pin them to `θ_MAP` and their
//! marginal variance is exactly zero, while still consuming their normal
//! variate so replays stay aligned.

use alloc::vec;
use alloc::vec::Vec;
// Resolves float math in no_std builds; std test builds see the inherent methods.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kron::{kron_apply, kron_column};
use crate::linalg::{cholesky, ltri_solve_t_mat, ltri_solve_vec, sym_eig, Mat, SymMatrix};
use crate::sparse::SparseInfoForm;

/// Precomputed factors for O(L³) posterior draws. All dense members are at
/// most `L_act × L_act` where `L_act ≤ L` counts the active (positive)
/// eigenvalues.
#[derive(Debug, Clone)]
pub struct SamplerState {
    /// `V_sᵀV_s` on the active columns.
    pub v_s_gram: SymMatrix,
    /// Lower Cholesky factor of `v_s_gram`.
    pub a_c: Mat,
    /// Lower Cholesky factor of `v_s_gram + I`.
    pub b_c: Mat,
    /// Symmetric middle factor `A_c^{-T} ((I + A_cᵀA_c)^{1/2} − I) A_c^{-1}`.
    pub c: Mat,
    /// `(C^{-1} + V_sᵀV_s)^{-1}`, computed via the same eigen route.
    pub l_c: Mat,
    /// `Λ^{1/2} L_c Λ^{1/2}` on the active columns.
    pub p_c: Mat,
    /// `D^{-1/2}`, length `N` (zero where `D_i = +∞`).
    pub d_isqrt: Vec<f64>,
    /// `D^{-1}`, length `N`.
    pub d_inv: Vec<f64>,
    pub u_a: Mat,
    pub u_g: Mat,
    /// Full-layout spectrum of the form (length `L`).
    pub lambda_l: Vec<f64>,
    /// Active positions into `lambda_l`.
    pub active: Vec<usize>,
    pub theta_map: Vec<f64>,
}

impl SamplerState {
    pub fn param_count(&self) -> usize {
        self.theta_map.len()
    }

    pub fn active_rank(&self) -> usize {
        self.active.len()
    }
}

/// Build the sampler from a validated form (`D > 0`, active `Λ > 0`).
///
/// `V_sᵀV_s` is assembled column by column: each active Kronecker column is
/// produced on demand and scaled by `D^{-1/2} Λ^{1/2}`, so peak extra memory
/// is two `N`-vectors plus the `L×L` outputs.
pub fn build_sampler(form: &SparseInfoForm, theta_map: &[f64]) -> Result<SamplerState> {
    let n_params = form.param_count();
    if theta_map.len() != n_params {
        return Err(Error::ShapeMismatch("theta_map length vs layer size".into()));
    }
    if form.d.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Contract("build_sampler requires D > 0 elementwise".into()));
    }
    for &j in &form.active {
        if !(form.lambda_l[j] > 0.0) {
            return Err(Error::Contract("active eigenvalues must be positive".into()));
        }
    }
    let d_isqrt: Vec<f64> = form.d.iter().map(|&d| 1.0 / d.sqrt()).collect();
    let d_inv: Vec<f64> = form.d.iter().map(|&d| 1.0 / d).collect();

    let g_cols = form.u_g.cols();
    let l_act = form.active.len();
    let mut gram = SymMatrix::zeros(l_act);
    {
        let mut col_j = vec![0.0; n_params];
        let mut col_k = vec![0.0; n_params];
        for (jj, &j) in form.active.iter().enumerate() {
            fill_scaled_column(form, &d_isqrt, j, g_cols, &mut col_j);
            for (kk, &k) in form.active.iter().enumerate().take(jj + 1) {
                fill_scaled_column(form, &d_isqrt, k, g_cols, &mut col_k);
                gram.set(jj, kk, crate::linalg::dot(&col_j, &col_k));
            }
        }
    }

    let a_c = cholesky(&gram)?;
    let mut gram_plus = gram.clone();
    gram_plus.add_diag(1.0);
    let b_c = cholesky(&gram_plus)?;

    // I + A_cᵀA_c, eigendecomposed once; feeds both C and L_c.
    let ata = a_c.transpose().matmul(&a_c);
    let mut inner = SymMatrix::from_mat(&ata).expect("AᵀA is symmetric by construction");
    inner.add_diag(1.0);
    let eig = sym_eig(&inner)?;
    let mu: Vec<f64> = eig.values.iter().map(|&v| v.max(1.0)).collect();

    let sandwich = |diag: &[f64]| -> Mat {
        // A_c^{-T} (Q diag Qᵀ) A_c^{-1}, symmetrized against round-off.
        let mut scaled = eig.vectors.clone();
        for j in 0..diag.len() {
            for i in 0..diag.len() {
                scaled.set(i, j, scaled.get(i, j) * diag[j]);
            }
        }
        let core = scaled.matmul(&eig.vectors.transpose());
        let t1 = ltri_solve_t_mat(&a_c, &core);
        let x = ltri_solve_t_mat(&a_c, &t1.transpose());
        Mat::from_fn(diag.len(), diag.len(), |i, j| 0.5 * (x.get(i, j) + x.get(j, i)))
    };

    let s_diag: Vec<f64> = mu.iter().map(|&m| m.sqrt() - 1.0).collect();
    let c = sandwich(&s_diag);
    let lc_diag: Vec<f64> = mu.iter().map(|&m| 1.0 - 1.0 / m.sqrt()).collect();
    let l_c = sandwich(&lc_diag);

    let mut p_c = Mat::zeros(l_act, l_act);
    for (jj, &j) in form.active.iter().enumerate() {
        let sj = form.lambda_l[j].sqrt();
        for (kk, &k) in form.active.iter().enumerate() {
            let sk = form.lambda_l[k].sqrt();
            p_c.set(jj, kk, sj * l_c.get(jj, kk) * sk);
        }
    }

    Ok(SamplerState {
        v_s_gram: gram,
        a_c,
        b_c,
        c,
        l_c,
        p_c,
        d_isqrt,
        d_inv,
        u_a: form.u_a.clone(),
        u_g: form.u_g.clone(),
        lambda_l: form.lambda_l.clone(),
        active: form.active.clone(),
        theta_map: theta_map.to_vec(),
    })
}

/// Column `j` of `V_s` (active indexing is the caller's business).
fn fill_scaled_column(form: &SparseInfoForm, d_isqrt: &[f64], j: usize, g_cols: usize, out: &mut [f64]) {
    let (p, q) = (j / g_cols, j % g_cols);
    kron_column(&form.u_a, &form.u_g, p, q, out);
    let s = form.lambda_l[j].sqrt();
    for (o, &di) in out.iter_mut().zip(d_isqrt) {
        *o *= s * di;
    }
}

/// Apply the symmetrical factor: `F x` with
/// `F = D^{-1/2} − D^{-1} (U_a ⊗ U_g) P_c (U_a ⊗ U_g)ᵀ D^{-1/2}`,
/// evaluated through two small Kronecker applications (the `vec` trick) and
/// one `L×L` product. `F(0) = 0` exactly.
pub fn apply_factor(state: &SamplerState, x: &[f64]) -> Result<Vec<f64>> {
    let n = state.param_count();
    if x.len() != n {
        return Err(Error::ShapeMismatch("factor input length".into()));
    }
    let x_d: Vec<f64> = x.iter().zip(&state.d_isqrt).map(|(v, s)| v * s).collect();
    let t_full = kron_apply(&state.u_a, &state.u_g, &x_d, true)?;
    let l_act = state.active.len();
    let mut t_act = vec![0.0; l_act];
    for (jj, &j) in state.active.iter().enumerate() {
        t_act[jj] = t_full[j];
    }
    let y_act = state.p_c.mul_vec(&t_act);
    let mut y_full = vec![0.0; state.lambda_l.len()];
    for (jj, &j) in state.active.iter().enumerate() {
        y_full[j] = y_act[jj];
    }
    let z = kron_apply(&state.u_a, &state.u_g, &y_full, false)?;
    Ok(x_d
        .iter()
        .zip(z.iter().zip(&state.d_inv))
        .map(|(xd, (zi, di))| xd - di * zi)
        .collect())
}

/// One posterior draw. Consumes exactly `N` standard normals from `rng` in
/// coordinate order, so a fixed stream replays bit-for-bit.
pub fn draw<R: Rng + ?Sized>(state: &SamplerState, rng: &mut R) -> Result<Vec<f64>> {
    let n = state.param_count();
    let mut x = vec![0.0; n];
    for xi in x.iter_mut() {
        *xi = StandardNormal.sample(rng);
    }
    let f = apply_factor(state, &x)?;
    Ok(state.theta_map.iter().zip(&f).map(|(m, v)| m + v).collect())
}

/// Marginal posterior standard deviations: the square root of
/// `diag(Σ) = D^{-1} − diag(D^{-1/2} V_s (I + V_sᵀV_s)^{-1} V_sᵀ D^{-1/2})`,
/// evaluated row by row with only factor-sized intermediates (the `(I+G)`
/// solve reuses `B_c`).
pub fn marginal_std(state: &SamplerState) -> Vec<f64> {
    let n = state.param_count();
    let m_rows = state.u_g.rows();
    let g_cols = state.u_g.cols();
    let l_act = state.active.len();
    let mut out = vec![0.0; n];
    let mut row = vec![0.0; l_act];
    for i in 0..n {
        if state.d_inv[i] == 0.0 {
            continue; // deterministic coordinate
        }
        let (alpha, gamma) = (i / m_rows, i % m_rows);
        for (jj, &j) in state.active.iter().enumerate() {
            let (p, q) = (j / g_cols, j % g_cols);
            row[jj] = state.lambda_l[j].sqrt() * state.u_a.get(alpha, p) * state.u_g.get(gamma, q);
        }
        let solved = ltri_solve_vec(&state.b_c, &row);
        let quad: f64 = solved.iter().map(|v| v * v).sum();
        let var = state.d_inv[i] - state.d_inv[i] * state.d_inv[i] * quad;
        out[i] = var.max(0.0).sqrt();
    }
    out
}

/// Quadratic form `jᵀ Σ j` against the posterior covariance, matrix-free.
/// This is the epistemic term of the linearized predictive variance.
pub fn quadratic_form(state: &SamplerState, j: &[f64]) -> Result<f64> {
    let n = state.param_count();
    if j.len() != n {
        return Err(Error::ShapeMismatch("quadratic form input length".into()));
    }
    let mut direct = 0.0;
    let mut scaled = vec![0.0; n];
    for (i, &ji) in j.iter().enumerate() {
        direct += ji * ji * state.d_inv[i];
        scaled[i] = ji * state.d_inv[i];
    }
    let t_full = kron_apply(&state.u_a, &state.u_g, &scaled, true)?;
    let mut y = vec![0.0; state.active.len()];
    for (jj, &jx) in state.active.iter().enumerate() {
        y[jj] = state.lambda_l[jx].sqrt() * t_full[jx];
    }
    let solved = ltri_solve_vec(&state.b_c, &y);
    let corr: f64 = solved.iter().map(|v| v * v).sum();
    Ok((direct - corr).max(0.0))
}
