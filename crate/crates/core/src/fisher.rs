//! Information-matrix estimators for one layer: the exact block (a dense
//! oracle, desk scale only), the diagonal, KFAC, the eigenvalue-corrected
//! Kronecker basis, and the diagonal correction that makes the parameter-
//! space diagonal exact.
//!
//! All expectations are batch means over the same per-sample factors, taken
//! with a two-pass mean (sum, then accumulate residuals against the first
//! estimate) to limit cancellation in the diagonal correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kron::{kron_apply, KronIndex};
use crate::linalg::{sym_eig, Mat, SymMatrix};
use crate::net::LayerFactorBatch;

/// Largest `N` for which the dense `N×N` exact block may be materialized.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// Dense exact information matrix of one layer. Test/report oracle — the
/// sampling and posterior paths never need it.
#[derive(Debug, Clone)]
pub struct ExactBlockIm {
    pub matrix: SymMatrix,
    pub sample_count: usize,
}

/// Two-pass batch mean over per-sample vectors written by `fill`.
fn two_pass_mean(count: usize, dim: usize, mut fill: impl FnMut(usize, &mut [f64])) -> Vec<f64> {
    let mut scratch = vec![0.0; dim];
    let mut mean = vec![0.0; dim];
    for t in 0..count {
        fill(t, &mut scratch);
        for (m, s) in mean.iter_mut().zip(&scratch) {
            *m += s;
        }
    }
    let inv = 1.0 / count as f64;
    for m in mean.iter_mut() {
        *m *= inv;
    }
    let mut resid = vec![0.0; dim];
    for t in 0..count {
        fill(t, &mut scratch);
        for (r, (s, m)) in resid.iter_mut().zip(scratch.iter().zip(&mean)) {
            *r += s - m;
        }
    }
    for (m, r) in mean.iter_mut().zip(&resid) {
        *m += r * inv;
    }
    mean
}

/// `(1/T) Σ_t vec(g_t a_tᵀ) vec(g_t a_tᵀ)ᵀ` with the default size cap.
pub fn exact_block_im(factors: &LayerFactorBatch) -> Result<ExactBlockIm> {
    exact_block_im_with_cap(factors, DEFAULT_DENSE_CAP)
}

pub fn exact_block_im_with_cap(factors: &LayerFactorBatch, cap: usize) -> Result<ExactBlockIm> {
    let n = factors.param_count();
    if n > cap {
        return Err(Error::BlockOverCap { n, cap });
    }
    let count = factors.count();
    let flat = two_pass_mean(count, n * n, |t, buf| {
        let v = factors.grad_vec(t);
        for i in 0..n {
            let vi = v[i];
            for j in 0..n {
                buf[i * n + j] = vi * v[j];
            }
        }
    });
    let matrix = SymMatrix::from_fn(n, |i, j| flat[i * n + j]);
    Ok(ExactBlockIm { matrix, sample_count: count })
}

/// The two Kronecker moment factors `A = E[a aᵀ]`, `G = E[g gᵀ]`.
#[derive(Debug, Clone)]
pub struct KronFactors {
    pub a: SymMatrix,
    pub g: SymMatrix,
}

impl KronFactors {
    /// Layer parameter count `N = n·m`.
    pub fn param_count(&self) -> usize {
        self.a.dim() * self.g.dim()
    }
}

pub fn kfac(factors: &LayerFactorBatch) -> KronFactors {
    let count = factors.count();
    let (n, m) = (factors.a_dim(), factors.g_dim());
    let a_flat = two_pass_mean(count, n * n, |t, buf| {
        let a = factors.a.row(t);
        for i in 0..n {
            for j in 0..n {
                buf[i * n + j] = a[i] * a[j];
            }
        }
    });
    let g_flat = two_pass_mean(count, m * m, |t, buf| {
        let g = factors.g.row(t);
        for i in 0..m {
            for j in 0..m {
                buf[i * m + j] = g[i] * g[j];
            }
        }
    });
    KronFactors {
        a: SymMatrix::from_fn(n, |i, j| a_flat[i * n + j]),
        g: SymMatrix::from_fn(m, |i, j| g_flat[i * m + j]),
    }
}

/// Eigenbasis of the Kronecker factors with batch-corrected eigenvalues:
/// `Λ_i = E[((U_A ⊗ U_G)ᵀ δθ)_i²]`.
#[derive(Debug, Clone)]
pub struct EfbBasis {
    pub u_a: Mat,
    pub u_g: Mat,
    pub lambda: Vec<f64>,
}

/// Eigendecompose `A` and `G` and correct the eigenvalues against the batch.
/// The rotated gradients are produced per sample through [`kron_apply`]; the
/// `N×N` basis is never materialized.
pub fn efb(kron: &KronFactors, factors: &LayerFactorBatch) -> Result<EfbBasis> {
    let ea = sym_eig(&kron.a)?;
    let eg = sym_eig(&kron.g)?;
    let n_total = factors.param_count();
    let count = factors.count();
    let mut lambda = two_pass_mean(count, n_total, |t, buf| {
        let v = factors.grad_vec(t);
        let rot = kron_apply(&ea.vectors, &eg.vectors, &v, true).expect("shapes fixed per layer");
        for (b, r) in buf.iter_mut().zip(&rot) {
            *b = r * r;
        }
    });
    // Means of squares; the residual pass can leave a tiny negative crumb.
    for l in lambda.iter_mut() {
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    Ok(EfbBasis { u_a: ea.vectors, u_g: eg.vectors, lambda })
}

/// Diagonal of `(U_a ⊗ U_g) diag(λ) (U_a ⊗ U_g)ᵀ` without materializing the
/// Kronecker basis.
///
/// With `P = U_a ∘ U_a`, `Q = U_g ∘ U_g` and `λ` reshaped to the `a×g` grid
/// of Kronecker column pairs, the diagonal is `P Λ Qᵀ` read out under the
/// row map `i = m·α + γ`: two small matrix products instead of an `N×N`
/// object. Accepts the rectangular column subsets produced by
/// sparsification.
pub fn efb_diagonal(u_a: &Mat, u_g: &Mat, lambda: &[f64]) -> Result<Vec<f64>> {
    let (n, a) = (u_a.rows(), u_a.cols());
    let (m, g) = (u_g.rows(), u_g.cols());
    if lambda.len() != a * g {
        return Err(Error::ShapeMismatch("lambda length vs factor columns".into()));
    }
    let p = Mat::from_fn(n, a, |i, j| {
        let v = u_a.get(i, j);
        v * v
    });
    let q = Mat::from_fn(m, g, |i, j| {
        let v = u_g.get(i, j);
        v * v
    });
    let lmat = Mat::from_fn(a, g, |i, j| lambda[i * g + j]);
    let t = p.matmul(&lmat).matmul(&q.transpose());
    let mut out = vec![0.0; n * m];
    for alpha in 0..n {
        for gamma in 0..m {
            out[m * alpha + gamma] = t.get(alpha, gamma);
        }
    }
    Ok(out)
}

/// `D = exact_diag − efb_diag`, elementwise. Entries may be negative; the
/// validity check downstream decides what to do with them.
pub fn diagonal_correction(exact_diag: &[f64], efb_diag: &[f64]) -> Result<Vec<f64>> {
    if exact_diag.len() != efb_diag.len() {
        return Err(Error::ShapeMismatch("diagonal lengths".into()));
    }
    Ok(exact_diag.iter().zip(efb_diag).map(|(e, f)| e - f).collect())
}

/// Mean elementwise-squared per-sample gradient: the exact Fisher diagonal
/// (and the Diag baseline estimator).
pub fn diag_fisher(factors: &LayerFactorBatch) -> Vec<f64> {
    let n = factors.param_count();
    two_pass_mean(factors.count(), n, |t, buf| {
        let v = factors.grad_vec(t);
        for (b, x) in buf.iter_mut().zip(&v) {
            *b = x * x;
        }
    })
}

/// The full per-layer decomposition: EFB basis, corrected eigenvalues, the
/// exactly computed Fisher diagonal and the diagonal correction.
#[derive(Debug, Clone)]
pub struct KronEigenbasis {
    pub u_a: Mat,
    pub u_g: Mat,
    /// Corrected eigenvalues, length `N`, Kronecker column order.
    pub lambda: Vec<f64>,
    /// `E[δθ_i²]`, length `N`.
    pub exact_diag: Vec<f64>,
    /// `exact_diag − efb_diag`, length `N`.
    pub d: Vec<f64>,
    pub sample_count: usize,
}

impl KronEigenbasis {
    pub fn index(&self) -> KronIndex {
        KronIndex { n: self.u_a.rows(), m: self.u_g.rows() }
    }

    pub fn param_count(&self) -> usize {
        self.lambda.len()
    }
}

/// Build the whole [`KronEigenbasis`] for one layer from its factor batch.
pub fn kron_eigenbasis(factors: &LayerFactorBatch) -> Result<KronEigenbasis> {
    let kron = kfac(factors);
    kron_eigenbasis_from(kron, factors)
}

pub fn kron_eigenbasis_from(kron: KronFactors, factors: &LayerFactorBatch) -> Result<KronEigenbasis> {
    let basis = efb(&kron, factors)?;
    let efb_diag = efb_diagonal(&basis.u_a, &basis.u_g, &basis.lambda)?;
    let exact_diag = diag_fisher(factors);
    let d = diagonal_correction(&exact_diag, &efb_diag)?;
    Ok(KronEigenbasis {
        u_a: basis.u_a,
        u_g: basis.u_g,
        lambda: basis.lambda,
        exact_diag,
        d,
        sample_count: factors.count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kron::materialize_sandwich;
    use crate::net::{per_sample_factors, Activation, Dataset, FisherMode, Loss, NetworkSpec, Target, Weights};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_factors(n_in: usize, m_out: usize, count: usize, seed: u64) -> LayerFactorBatch {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let a = Mat::from_fn(count, n_in + 1, |_, j| {
            if j == n_in {
                1.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        let g = Mat::from_fn(count, m_out, |_, _| rng.random_range(-1.0..1.0));
        LayerFactorBatch::new(a, g).unwrap()
    }

    #[test]
    fn exact_single_sample_is_rank_one() {
        let f = random_factors(2, 2, 1, 1);
        let im = exact_block_im(&f).unwrap();
        let v = f.grad_vec(0);
        for i in 0..v.len() {
            for j in 0..v.len() {
                assert!((im.matrix.get(i, j) - v[i] * v[j]).abs() < 1e-15);
            }
        }
        assert_eq!(im.sample_count, 1);
    }

    #[test]
    fn exact_two_samples_hand_average() {
        // 1-1 net: a = [x, 1], g scalar; average of two outer products by hand.
        let a = Mat::from_rows(&[alloc::vec![2.0, 1.0], alloc::vec![-1.0, 1.0]]).unwrap();
        let g = Mat::from_rows(&[alloc::vec![0.5], alloc::vec![2.0]]).unwrap();
        let f = LayerFactorBatch::new(a, g).unwrap();
        let im = exact_block_im(&f).unwrap();
        // grads: v1 = [1.0, 0.5], v2 = [-2.0, 2.0] (vec(g aᵀ) = a ⊗ g).
        let hand = [
            [(1.0f64 + 4.0) / 2.0, (0.5 - 4.0) / 2.0],
            [(0.5 - 4.0) / 2.0, (0.25 + 4.0) / 2.0],
        ];
        for i in 0..2 {
            for j in 0..2 {
                assert!((im.matrix.get(i, j) - hand[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_diag_is_mean_squared_gradient() {
        let f = random_factors(3, 2, 5, 2);
        let im = exact_block_im(&f).unwrap();
        let n = f.param_count();
        for i in 0..n {
            let hand: f64 = (0..5)
                .map(|t| {
                    let v = f.grad_vec(t);
                    v[i] * v[i]
                })
                .sum::<f64>()
                / 5.0;
            assert!((im.matrix.get(i, i) - hand).abs() < 1e-13);
        }
    }

    #[test]
    fn exact_refuses_over_cap() {
        let f = random_factors(3, 2, 2, 3);
        match exact_block_im_with_cap(&f, 4) {
            Err(Error::BlockOverCap { n, cap }) => {
                assert_eq!(n, 8);
                assert_eq!(cap, 4);
            }
            other => panic!("expected cap refusal, got {other:?}"),
        }
    }

    #[test]
    fn kfac_single_sample_factorizes_exactly() {
        let f = random_factors(2, 2, 1, 4);
        let k = kfac(&f);
        let im = exact_block_im(&f).unwrap();
        let dense = crate::kron::materialize(&k.a.to_mat(), &k.g.to_mat());
        let err = dense.sub(&im.matrix.to_mat()).frobenius_norm();
        assert!(err < 1e-12 * im.matrix.frobenius_norm().max(1.0));
    }

    #[test]
    fn kfac_exact_when_a_constant() {
        // Constant activation rows make the independence assumption exact.
        let row = alloc::vec![0.7, 1.0];
        let a = Mat::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let g = Mat::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let f = LayerFactorBatch::new(a, g).unwrap();
        let k = kfac(&f);
        let im = exact_block_im(&f).unwrap();
        let dense = crate::kron::materialize(&k.a.to_mat(), &k.g.to_mat());
        let err = dense.sub(&im.matrix.to_mat()).frobenius_norm();
        assert!(err < 1e-12 * im.matrix.frobenius_norm().max(1.0));
    }

    #[test]
    fn kfac_generally_has_positive_error() {
        let f = random_factors(3, 3, 16, 6);
        let k = kfac(&f);
        let im = exact_block_im(&f).unwrap();
        let dense = crate::kron::materialize(&k.a.to_mat(), &k.g.to_mat());
        let err = dense.sub(&im.matrix.to_mat()).frobenius_norm();
        assert!(err > 0.0);
    }

    #[test]
    fn efb_single_sample_is_squared_rotation() {
        let f = random_factors(2, 2, 1, 7);
        let k = kfac(&f);
        let b = efb(&k, &f).unwrap();
        let rot = kron_apply(&b.u_a, &b.u_g, &f.grad_vec(0), true).unwrap();
        for (l, r) in b.lambda.iter().zip(&rot) {
            assert!((l - r * r).abs() < 1e-14);
        }
    }

    #[test]
    fn efb_lambda_matches_materialized_rotation() {
        let f = random_factors(2, 2, 6, 8); // n = 3, m = 2
        let k = kfac(&f);
        let b = efb(&k, &f).unwrap();
        let im = exact_block_im(&f).unwrap();
        let v = crate::kron::materialize(&b.u_a, &b.u_g);
        let rotated = v.transpose().matmul(&im.matrix.to_mat()).matmul(&v);
        for (i, &l) in b.lambda.iter().enumerate() {
            assert!((l - rotated.get(i, i)).abs() < 1e-10, "i={i}");
        }
    }

    #[test]
    fn efb_beats_kfac_in_frobenius() {
        // Same basis, eigenvalues re-fit to the batch: EFB error can't exceed
        // KFAC's.
        for seed in 0..20 {
            let spec = NetworkSpec::new(alloc::vec![2, 3, 2], Activation::Tanh, Loss::Mse).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(100 + seed);
            let w = Weights::random_init(&spec, &mut rng);
            let inputs = Mat::from_fn(8, 2, |_, _| rng.random_range(-2.0..2.0));
            let targets = (0..8).map(|_| Target::Value(alloc::vec![0.0, 0.0])).collect();
            let data = Dataset::new(inputs, targets).unwrap();
            let factors =
                per_sample_factors(&spec, &w, &data, FisherMode::ModelSampled, &mut rng).unwrap();
            for f in &factors {
                let k = kfac(f);
                let b = efb(&k, f).unwrap();
                let im = exact_block_im(f).unwrap().matrix.to_mat();
                let kfac_dense = crate::kron::materialize(&k.a.to_mat(), &k.g.to_mat());
                let efb_dense = materialize_sandwich(&b.u_a, &b.u_g, &b.lambda);
                let e_kfac = kfac_dense.sub(&im).frobenius_norm();
                let e_efb = efb_dense.sub(&im).frobenius_norm();
                assert!(
                    e_efb <= e_kfac + 1e-12 * im.frobenius_norm(),
                    "seed {seed}: efb {e_efb} kfac {e_kfac}"
                );
            }
        }
    }

    #[test]
    fn efb_diagonal_identity_factors_returns_lambda() {
        let lambda: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let d = efb_diagonal(&Mat::identity(3), &Mat::identity(2), &lambda).unwrap();
        assert_eq!(d, lambda);
    }

    #[test]
    fn efb_diagonal_matches_materialized() {
        let f = random_factors(2, 2, 5, 9);
        let k = kfac(&f);
        let b = efb(&k, &f).unwrap();
        let diag = efb_diagonal(&b.u_a, &b.u_g, &b.lambda).unwrap();
        let dense = materialize_sandwich(&b.u_a, &b.u_g, &b.lambda);
        for (i, &v) in diag.iter().enumerate() {
            assert!((v - dense.get(i, i)).abs() < 1e-12);
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn efb_diagonal_zero_lambda() {
        let d = efb_diagonal(&Mat::identity(3), &Mat::identity(2), &[0.0; 6]).unwrap();
        assert_eq!(d, alloc::vec![0.0; 6]);
    }

    #[test]
    fn correction_zero_when_diagonals_match() {
        let d = diagonal_correction(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(d, alloc::vec![0.0, 0.0]);
    }

    #[test]
    fn full_rank_inf_diagonal_is_exact() {
        let f = random_factors(2, 2, 4, 10);
        let basis = kron_eigenbasis(&f).unwrap();
        let efb_diag = efb_diagonal(&basis.u_a, &basis.u_g, &basis.lambda).unwrap();
        let scale = basis.exact_diag.iter().fold(0.0f64, |acc, &b| acc.max(b.abs()));
        for i in 0..basis.param_count() {
            let inf_diag = efb_diag[i] + basis.d[i];
            assert!((inf_diag - basis.exact_diag[i]).abs() <= 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn correction_improves_efb() {
        let f = random_factors(3, 2, 12, 11);
        let basis = kron_eigenbasis(&f).unwrap();
        let im = exact_block_im(&f).unwrap().matrix.to_mat();
        let mut dense = materialize_sandwich(&basis.u_a, &basis.u_g, &basis.lambda);
        let e_efb = dense.sub(&im).frobenius_norm();
        for i in 0..basis.param_count() {
            dense.set(i, i, dense.get(i, i) + basis.d[i]);
        }
        let e_inf = dense.sub(&im).frobenius_norm();
        assert!(e_inf <= e_efb + 1e-14);
    }

    #[test]
    fn diag_fisher_matches_exact_block_diagonal() {
        let f = random_factors(3, 2, 9, 12);
        let d = diag_fisher(&f);
        let im = exact_block_im(&f).unwrap();
        for (i, &v) in d.iter().enumerate() {
            assert_eq!(v, im.matrix.get(i, i), "two-pass means should agree bitwise");
        }
    }

    #[test]
    fn diag_fisher_single_and_zero_cases() {
        let f = random_factors(2, 1, 1, 13);
        let d = diag_fisher(&f);
        let v = f.grad_vec(0);
        for (dv, x) in d.iter().zip(&v) {
            assert!((dv - x * x).abs() < 1e-15);
        }
        let a = Mat::from_rows(&[alloc::vec![0.4, 1.0]]).unwrap();
        let g = Mat::from_rows(&[alloc::vec![0.0]]).unwrap();
        let z = LayerFactorBatch::new(a, g).unwrap();
        assert_eq!(diag_fisher(&z), alloc::vec![0.0, 0.0]);
    }

    #[test]
    fn lambda_is_spectrum_product_under_exact_independence() {
        // Product empirical measure over {a1,a2} × {g1,g2}: the Kronecker
        // independence assumption holds exactly and Λ = S_A ⊗ S_G.
        let a1 = alloc::vec![0.3, 1.0];
        let a2 = alloc::vec![-1.1, 1.0];
        let g1 = alloc::vec![0.8, -0.2];
        let g2 = alloc::vec![0.1, 0.9];
        let a = Mat::from_rows(&[a1.clone(), a1, a2.clone(), a2]).unwrap();
        let g = Mat::from_rows(&[g1.clone(), g2.clone(), g1, g2]).unwrap();
        let f = LayerFactorBatch::new(a, g).unwrap();
        let k = kfac(&f);
        let b = efb(&k, &f).unwrap();
        let sa = sym_eig(&k.a).unwrap().values;
        let sg = sym_eig(&k.g).unwrap().values;
        let ix = KronIndex::new(2, 2).unwrap();
        for beta in 1..=2usize {
            for zeta in 1..=2usize {
                let i = ix.row_index(beta, zeta).unwrap() - 1;
                let prod = sa[beta - 1] * sg[zeta - 1];
                assert!((b.lambda[i] - prod).abs() < 1e-12, "({beta},{zeta})");
            }
        }
    }

    #[test]
    fn small_batches_leave_low_rank_blocks() {
        // rank(I) <= sample count: the rest of the spectrum is numerically zero.
        let f = random_factors(3, 3, 3, 14);
        let im = exact_block_im(&f).unwrap();
        let eig = sym_eig(&im.matrix).unwrap();
        let tol = 1e-10 * eig.values[0].max(1e-300);
        let above: usize = eig.values.iter().filter(|&&v| v > tol).count();
        assert!(above <= 3, "rank {above} from 3 samples");
    }

    #[test]
    fn chunked_accumulation_merges() {
        let f = random_factors(2, 2, 8, 15);
        let whole = exact_block_im(&f).unwrap().matrix;
        let split = |lo: usize, hi: usize| {
            let a = Mat::from_fn(hi - lo, f.a_dim(), |t, j| f.a.get(lo + t, j));
            let g = Mat::from_fn(hi - lo, f.g_dim(), |t, j| f.g.get(lo + t, j));
            LayerFactorBatch::new(a, g).unwrap()
        };
        let first = exact_block_im(&split(0, 3)).unwrap();
        let second = exact_block_im(&split(3, 8)).unwrap();
        let n = whole.dim();
        for i in 0..n {
            for j in 0..n {
                let merged = (3.0 * first.matrix.get(i, j) + 5.0 * second.matrix.get(i, j)) / 8.0;
                let err = (merged - whole.get(i, j)).abs();
                assert!(err <= 1e-13 * whole.frobenius_norm().max(1.0));
            }
        }
    }
}
