//! Layer-wise Gaussian posteriors across the estimator families, with the
//! `(N, τ)` hyperparameters applied, plus the two predictive routes
//! (Monte-Carlo integration and linearization) and the active-learning
//! acquisition rule.
//!
//! Zero-information directions are handled by the configured degenerate
//! policy: `DeterministicDims` pins them to the MAP value (they contribute
//! exactly zero predictive variance), `Clip` floors the offending precision
//! entries instead.

use alloc::vec;
use alloc::vec::Vec;
// Resolves float math in no_std builds; std test builds see the inherent methods.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fisher::{diag_fisher, kfac, kron_eigenbasis, KronEigenbasis, KronFactors};
use crate::kron::{kron_apply, KronIndex};
use crate::linalg::{sym_eig, Mat};
use crate::net::{backprop, forward, Dataset, LayerFactorBatch, Loss, NetworkSpec, Target, Weights};
use crate::sampler::{build_sampler, draw as sampler_draw, quadratic_form, SamplerState};
use crate::sparse::{check_validity, sparsify_basis, SparseInfoForm, Verdict, D_CLIP_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Diag,
    /// KFAC with the factored prior shift `(√N A + √τ I) ⊗ (√N G + √τ I)`.
    KfacRitter,
    /// KFAC with the exact prior `N (A ⊗ G) + τ I`, handled in the
    /// Kronecker eigenbasis without materialization.
    KfacExact,
    Efb,
    Inf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankSpec {
    Full,
    Count(usize),
    Fraction(f64),
}

impl RankSpec {
    /// Requested rank `K` for a layer with `n` parameters.
    pub fn resolve(&self, n: usize) -> Result<usize> {
        match *self {
            RankSpec::Full => Ok(n),
            RankSpec::Count(k) => {
                if k < 1 || k > n {
                    Err(Error::Contract(alloc::format!("rank {k} not in 1..={n}")))
                } else {
                    Ok(k)
                }
            }
            RankSpec::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    Err(Error::Contract("rank fraction must be in (0, 1]".into()))
                } else {
                    // Ceiling keeps at least one eigenvalue at any fraction.
                    Ok((((n as f64) * f).ceil() as usize).clamp(1, n))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegeneratePolicy {
    /// Zero-information coordinates stay at the MAP estimate.
    DeterministicDims,
    /// Floor offending precision entries at the clipping epsilon.
    Clip,
}

#[derive(Debug, Clone)]
pub struct PosteriorConfig {
    /// Pseudo-observation scale `N` multiplying the information matrix.
    pub n_scale: f64,
    /// Prior precision `τ` added to the diagonal.
    pub tau: f64,
    pub rank: RankSpec,
    /// Monte-Carlo samples per prediction.
    pub k_mc: usize,
    pub estimator: EstimatorKind,
    pub degenerate_policy: DegeneratePolicy,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self {
            n_scale: 1.0,
            tau: 0.0,
            rank: RankSpec::Full,
            k_mc: 100,
            estimator: EstimatorKind::Inf,
            degenerate_policy: DegeneratePolicy::DeterministicDims,
        }
    }
}

impl PosteriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_scale > 0.0) {
            return Err(Error::Contract("n_scale must be positive".into()));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::Contract("tau must be non-negative".into()));
        }
        if self.k_mc < 1 {
            return Err(Error::Contract("k_mc must be at least 1".into()));
        }
        if let RankSpec::Fraction(f) = self.rank {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Contract("rank fraction must be in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Unscaled per-layer Fisher estimate, one variant per estimator family.
#[derive(Debug, Clone)]
pub enum FisherEstimate {
    Diag(Vec<f64>),
    Kfac(KronFactors),
    Efb(KronEigenbasis),
    Inf(SparseInfoForm),
}

/// Per-layer precision after `(N, τ)` are applied, still in structured form.
#[derive(Debug, Clone)]
pub enum ScaledPrecision {
    /// `N f + τ`, elementwise; `+∞` marks pinned coordinates.
    Diag(Vec<f64>),
    /// Shifted factors `(√N A + √τ I)`, `(√N G + √τ I)`.
    KfacFactors(KronFactors),
    /// Spectrum `λ'` in the orthonormal basis `U_a ⊗ U_g`; covers both the
    /// eigenvalue-corrected family (`λ' = N Λ + τ`) and the exact-prior
    /// KFAC (`λ' = N s_A s_G + τ`).
    Spectrum { u_a: Mat, u_g: Mat, lambda: Vec<f64> },
    /// Scaled sparse form: `Λ' = N Λ_L`, `D' = N D + τ`.
    LowRank(SparseInfoForm),
}

/// Fold the hyperparameters into an estimate.
pub fn apply_hyperparameters(
    estimate: &FisherEstimate,
    n_scale: f64,
    tau: f64,
) -> Result<ScaledPrecision> {
    if !(n_scale > 0.0) || !(tau >= 0.0) {
        return Err(Error::Contract("invalid hyperparameters".into()));
    }
    match estimate {
        FisherEstimate::Diag(f) => {
            Ok(ScaledPrecision::Diag(f.iter().map(|&v| n_scale * v + tau).collect()))
        }
        FisherEstimate::Kfac(k) => {
            let rn = n_scale.sqrt();
            let rt = tau.sqrt();
            let mut a = k.a.clone();
            a.scale(rn);
            a.add_diag(rt);
            let mut g = k.g.clone();
            g.scale(rn);
            g.add_diag(rt);
            Ok(ScaledPrecision::KfacFactors(KronFactors { a, g }))
        }
        FisherEstimate::Efb(basis) => Ok(ScaledPrecision::Spectrum {
            u_a: basis.u_a.clone(),
            u_g: basis.u_g.clone(),
            lambda: basis.lambda.iter().map(|&l| n_scale * l + tau).collect(),
        }),
        FisherEstimate::Inf(form) => {
            let mut scaled = form.clone();
            for l in scaled.lambda_l.iter_mut() {
                *l *= n_scale;
            }
            for d in scaled.d.iter_mut() {
                *d = n_scale * *d + tau;
            }
            for e in scaled.exact_diag.iter_mut() {
                *e = n_scale * *e + tau;
            }
            Ok(ScaledPrecision::LowRank(scaled))
        }
    }
}

/// Exact-prior KFAC: eigendecompose the unshifted factors and shift the
/// product spectrum, `λ'_{(β,ζ)} = N s_A(β) s_G(ζ) + τ`.
pub fn okf_spectrum(k: &KronFactors, n_scale: f64, tau: f64) -> Result<ScaledPrecision> {
    let ea = sym_eig(&k.a)?;
    let eg = sym_eig(&k.g)?;
    let (n, m) = (k.a.dim(), k.g.dim());
    let mut lambda = vec![0.0; n * m];
    for b in 0..n {
        for z in 0..m {
            lambda[m * b + z] = n_scale * ea.values[b] * eg.values[z] + tau;
        }
    }
    Ok(ScaledPrecision::Spectrum { u_a: ea.vectors, u_g: eg.vectors, lambda })
}

/// One layer's posterior in a sampling-ready representation.
#[derive(Debug, Clone)]
pub enum LayerPosterior {
    Diag {
        theta_map: Vec<f64>,
        precision: Vec<f64>,
    },
    /// Covariance half-factors `U_A s_A'^{-1/2} ⊗ U_G s_G'^{-1/2}`.
    KronProduct {
        theta_map: Vec<f64>,
        factor_a: Mat,
        factor_g: Mat,
    },
    /// Orthonormal basis with inverse-square-root spectrum (zeros mark
    /// pinned directions).
    Spectrum {
        theta_map: Vec<f64>,
        u_a: Mat,
        u_g: Mat,
        inv_sqrt: Vec<f64>,
    },
    LowRank(SamplerState),
}

impl LayerPosterior {
    pub fn param_count(&self) -> usize {
        match self {
            LayerPosterior::Diag { theta_map, .. } => theta_map.len(),
            LayerPosterior::KronProduct { theta_map, .. } => theta_map.len(),
            LayerPosterior::Spectrum { theta_map, .. } => theta_map.len(),
            LayerPosterior::LowRank(s) => s.param_count(),
        }
    }
}

/// Build-side diagnostics for one layer, for manifests and reports.
#[derive(Debug, Clone)]
pub struct LayerBuildInfo {
    /// Validity verdict of the scaled form before the degenerate policy ran
    /// (always `Valid` for families without a validity notion).
    pub verdict: Verdict,
    pub requested_rank: Option<usize>,
    pub realized_rank: Option<usize>,
    pub active_rank: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct NetworkPosterior {
    pub spec: NetworkSpec,
    pub map: Weights,
    pub layers: Vec<LayerPosterior>,
    pub build_info: Vec<LayerBuildInfo>,
    pub config: PosteriorConfig,
}

fn pin_or_clip(values: &mut [f64], policy: DegeneratePolicy) {
    for v in values.iter_mut() {
        if *v <= 0.0 {
            *v = match policy {
                DegeneratePolicy::DeterministicDims => f64::INFINITY,
                DegeneratePolicy::Clip => D_CLIP_EPSILON,
            };
        }
    }
}

/// Inverse square roots of a spectrum; non-positive entries go through the
/// degenerate policy (pin → zero coefficient, clip → floored precision).
fn spectrum_inv_sqrt(lambda: &[f64], policy: DegeneratePolicy) -> Vec<f64> {
    lambda
        .iter()
        .map(|&l| {
            if l > 0.0 {
                1.0 / l.sqrt()
            } else {
                match policy {
                    DegeneratePolicy::DeterministicDims => 0.0,
                    DegeneratePolicy::Clip => 1.0 / D_CLIP_EPSILON.sqrt(),
                }
            }
        })
        .collect()
}

fn build_layer(
    scaled: ScaledPrecision,
    theta_map: Vec<f64>,
    policy: DegeneratePolicy,
    requested_rank: Option<usize>,
) -> Result<(LayerPosterior, LayerBuildInfo)> {
    let mut info = LayerBuildInfo {
        verdict: Verdict::Valid,
        requested_rank,
        realized_rank: None,
        active_rank: None,
    };
    let layer = match scaled {
        ScaledPrecision::Diag(mut p) => {
            if p.iter().any(|&v| v <= 0.0) {
                info.verdict = Verdict::Repaired;
                pin_or_clip(&mut p, policy);
            }
            LayerPosterior::Diag { theta_map, precision: p }
        }
        ScaledPrecision::KfacFactors(k) => {
            let ea = sym_eig(&k.a)?;
            let eg = sym_eig(&k.g)?;
            if ea.values.iter().chain(&eg.values).any(|&v| v <= 0.0) {
                info.verdict = Verdict::Repaired;
            }
            let sa = spectrum_inv_sqrt(&ea.values, policy);
            let sg = spectrum_inv_sqrt(&eg.values, policy);
            let mut factor_a = ea.vectors;
            for j in 0..sa.len() {
                for i in 0..sa.len() {
                    factor_a.set(i, j, factor_a.get(i, j) * sa[j]);
                }
            }
            let mut factor_g = eg.vectors;
            for j in 0..sg.len() {
                for i in 0..sg.len() {
                    factor_g.set(i, j, factor_g.get(i, j) * sg[j]);
                }
            }
            LayerPosterior::KronProduct { theta_map, factor_a, factor_g }
        }
        ScaledPrecision::Spectrum { u_a, u_g, lambda } => {
            if lambda.iter().any(|&v| v <= 0.0) {
                info.verdict = Verdict::Repaired;
            }
            let inv_sqrt = spectrum_inv_sqrt(&lambda, policy);
            LayerPosterior::Spectrum { theta_map, u_a, u_g, inv_sqrt }
        }
        ScaledPrecision::LowRank(mut form) => {
            info.realized_rank = Some(form.realized_rank());
            // The raw verdict is reported; the policy then resolves dead
            // coordinates before the sampler is built.
            let (raw_verdict, checked) = check_validity(form);
            info.verdict = raw_verdict;
            form = checked;
            if raw_verdict == Verdict::Degenerate {
                for i in 0..form.exact_diag.len() {
                    if form.exact_diag[i] == 0.0 {
                        match policy {
                            DegeneratePolicy::DeterministicDims => {
                                form.d[i] = f64::INFINITY;
                                form.exact_diag[i] = f64::INFINITY;
                            }
                            DegeneratePolicy::Clip => {
                                form.exact_diag[i] = D_CLIP_EPSILON;
                                if form.d[i] <= 0.0 {
                                    form.d[i] = D_CLIP_EPSILON;
                                }
                            }
                        }
                    }
                }
                // Re-run the repair for the remaining entries.
                let (_, fixed) = check_validity(form);
                form = fixed;
            }
            info.active_rank = Some(form.active.len());
            LayerPosterior::LowRank(build_sampler(&form, &theta_map)?)
        }
    };
    Ok((layer, info))
}

/// Per-layer estimates matching the configured estimator family; the
/// serializable intermediate between factor capture and posterior assembly.
pub fn make_estimates(
    factors: &[LayerFactorBatch],
    config: &PosteriorConfig,
) -> Result<Vec<FisherEstimate>> {
    config.validate()?;
    factors
        .iter()
        .map(|f| match config.estimator {
            EstimatorKind::Diag => Ok(FisherEstimate::Diag(diag_fisher(f))),
            EstimatorKind::KfacRitter | EstimatorKind::KfacExact => {
                Ok(FisherEstimate::Kfac(kfac(f)))
            }
            EstimatorKind::Efb => Ok(FisherEstimate::Efb(kron_eigenbasis(f)?)),
            EstimatorKind::Inf => {
                let basis = kron_eigenbasis(f)?;
                let k = config.rank.resolve(basis.param_count())?;
                Ok(FisherEstimate::Inf(sparsify_basis(&basis, k)?))
            }
        })
        .collect()
}

/// Assemble a posterior from previously built (or deserialized) estimates.
pub fn build_posterior_from_estimates(
    spec: &NetworkSpec,
    map: &Weights,
    estimates: &[FisherEstimate],
    config: &PosteriorConfig,
) -> Result<NetworkPosterior> {
    config.validate()?;
    if estimates.len() != spec.num_layers() {
        return Err(Error::ShapeMismatch("estimates vs layers".into()));
    }
    let mut layers = Vec::with_capacity(estimates.len());
    let mut build_info = Vec::with_capacity(estimates.len());
    for (l, estimate) in estimates.iter().enumerate() {
        let theta_map = map.layer_vec(l);
        let scaled = match (config.estimator, estimate) {
            (EstimatorKind::KfacExact, FisherEstimate::Kfac(k)) => {
                okf_spectrum(k, config.n_scale, config.tau)?
            }
            _ => apply_hyperparameters(estimate, config.n_scale, config.tau)?,
        };
        let requested = match estimate {
            FisherEstimate::Inf(form) => Some(form.k_requested),
            _ => None,
        };
        let (layer, info) = build_layer(scaled, theta_map, config.degenerate_policy, requested)?;
        layers.push(layer);
        build_info.push(info);
        let _ = l;
    }
    Ok(NetworkPosterior {
        spec: spec.clone(),
        map: map.clone(),
        layers,
        build_info,
        config: config.clone(),
    })
}

/// Assemble the posterior for every layer from captured factors.
pub fn build_posterior(
    spec: &NetworkSpec,
    map: &Weights,
    factors: &[LayerFactorBatch],
    config: &PosteriorConfig,
) -> Result<NetworkPosterior> {
    if factors.len() != spec.num_layers() {
        return Err(Error::ShapeMismatch("factor batches vs layers".into()));
    }
    let estimates = make_estimates(factors, config)?;
    build_posterior_from_estimates(spec, map, &estimates, config)
}

/// Draw one full set of weights; layer `l` consumes exactly `N_l` standard
/// normals from its own stream.
pub fn draw_weights<R, F>(posterior: &NetworkPosterior, mut layer_stream: F) -> Result<Weights>
where
    R: Rng,
    F: FnMut(usize) -> R,
{
    let mut weights = posterior.map.clone();
    for (l, layer) in posterior.layers.iter().enumerate() {
        let mut rng = layer_stream(l);
        let theta = draw_layer(layer, &mut rng)?;
        weights.set_layer_from_vec(l, &theta)?;
    }
    Ok(weights)
}

fn draw_layer<R: Rng + ?Sized>(layer: &LayerPosterior, rng: &mut R) -> Result<Vec<f64>> {
    match layer {
        LayerPosterior::Diag { theta_map, precision } => {
            let mut out = Vec::with_capacity(theta_map.len());
            for (m, p) in theta_map.iter().zip(precision) {
                let z: f64 = StandardNormal.sample(rng);
                out.push(m + z / p.sqrt());
            }
            Ok(out)
        }
        LayerPosterior::KronProduct { theta_map, factor_a, factor_g } => {
            let n = theta_map.len();
            let mut z = vec![0.0; n];
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(rng);
            }
            let moved = kron_apply(factor_a, factor_g, &z, false)?;
            Ok(theta_map.iter().zip(&moved).map(|(m, v)| m + v).collect())
        }
        LayerPosterior::Spectrum { theta_map, u_a, u_g, inv_sqrt } => {
            let n = theta_map.len();
            let mut z = vec![0.0; n];
            for (zi, s) in z.iter_mut().zip(inv_sqrt) {
                let v: f64 = StandardNormal.sample(rng);
                *zi = v * s;
            }
            let moved = kron_apply(u_a, u_g, &z, false)?;
            Ok(theta_map.iter().zip(&moved).map(|(m, v)| m + v).collect())
        }
        LayerPosterior::LowRank(state) => sampler_draw(state, rng),
    }
}

/// Default deterministic stream splitter: sample `t`, layer `l` maps to
/// ChaCha stream `t·1024 + l` under the given seed.
pub fn chacha_streams(seed: u64) -> impl FnMut(usize, usize) -> ChaCha12Rng {
    move |sample, layer| {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream((sample as u64) * 1024 + layer as u64);
        rng
    }
}

/// Predictive summary of one input.
#[derive(Debug, Clone)]
pub enum PredictiveSummary {
    Regression {
        mean: Vec<f64>,
        /// Epistemic (sample) variance plus the aleatoric term.
        variance: Vec<f64>,
        epistemic_variance: Vec<f64>,
    },
    Classification {
        /// Mean softmax probabilities over draws; sums to one.
        probs: Vec<f64>,
    },
}

/// Monte-Carlo predictive distribution: average the network output over
/// `k_mc` weight draws. Stream assignment is per (sample, layer), so results
/// do not depend on evaluation order.
pub fn predict_mc<R, F>(
    posterior: &NetworkPosterior,
    x: &[f64],
    k_mc: usize,
    sigma_alea: f64,
    mut streams: F,
) -> Result<PredictiveSummary>
where
    R: Rng,
    F: FnMut(usize, usize) -> R,
{
    if k_mc < 1 {
        return Err(Error::Contract("k_mc must be at least 1".into()));
    }
    let out_dim = posterior.spec.output_dim();
    let mut outputs = Mat::zeros(k_mc, out_dim);
    for t in 0..k_mc {
        let weights = draw_weights(posterior, |l| streams(t, l))?;
        let (y, _) = forward(&posterior.spec, &weights, x)?;
        let y = match posterior.spec.loss {
            Loss::Mse => y,
            Loss::CrossEntropy => crate::net::softmax(&y),
        };
        for (j, &v) in y.iter().enumerate() {
            outputs.set(t, j, v);
        }
    }
    match posterior.spec.loss {
        Loss::CrossEntropy => {
            let mut probs = vec![0.0; out_dim];
            for t in 0..k_mc {
                for (j, p) in probs.iter_mut().enumerate() {
                    *p += outputs.get(t, j);
                }
            }
            for p in probs.iter_mut() {
                *p /= k_mc as f64;
            }
            Ok(PredictiveSummary::Classification { probs })
        }
        Loss::Mse => {
            let mut mean = vec![0.0; out_dim];
            for t in 0..k_mc {
                for (j, m) in mean.iter_mut().enumerate() {
                    *m += outputs.get(t, j);
                }
            }
            for m in mean.iter_mut() {
                *m /= k_mc as f64;
            }
            let mut epistemic = vec![0.0; out_dim];
            if k_mc > 1 {
                for t in 0..k_mc {
                    for (j, e) in epistemic.iter_mut().enumerate() {
                        let d = outputs.get(t, j) - mean[j];
                        *e += d * d;
                    }
                }
                for e in epistemic.iter_mut() {
                    *e /= (k_mc - 1) as f64;
                }
            }
            let variance = epistemic.iter().map(|&e| e + sigma_alea * sigma_alea).collect();
            Ok(PredictiveSummary::Regression { mean, variance, epistemic_variance: epistemic })
        }
    }
}

/// Per-layer output gradients `(a, g)` of the scalar regression head at the
/// MAP weights, plus the MAP prediction.
fn output_jacobian(
    posterior: &NetworkPosterior,
    x: &[f64],
) -> Result<(f64, Vec<(Vec<f64>, Vec<f64>)>)> {
    if posterior.spec.output_dim() != 1 || posterior.spec.loss != Loss::Mse {
        return Err(Error::Contract("linearized prediction requires a scalar regression head".into()));
    }
    let (y, cache) = forward(&posterior.spec, &posterior.map, x)?;
    let grads = backprop(&posterior.spec, &posterior.map, &cache, vec![1.0]);
    let pairs = cache.inputs.iter().cloned().zip(grads).collect();
    Ok((y[0], pairs))
}

fn layer_quadratic_form(layer: &LayerPosterior, a: &[f64], g: &[f64]) -> Result<f64> {
    // Flat layer gradient is a ⊗ g in the Kronecker column convention.
    let flat = || {
        let mut v = Vec::with_capacity(a.len() * g.len());
        for &av in a {
            for &gv in g {
                v.push(av * gv);
            }
        }
        v
    };
    match layer {
        LayerPosterior::Diag { precision, .. } => {
            Ok(flat().iter().zip(precision).map(|(j, p)| j * j / p).sum())
        }
        LayerPosterior::KronProduct { factor_a, factor_g, .. } => {
            // (a ⊗ g)ᵀ (A'⁻¹ ⊗ G'⁻¹) (a ⊗ g) factorizes per side.
            let ta = factor_a.tr_mul_vec(a);
            let tg = factor_g.tr_mul_vec(g);
            let qa: f64 = ta.iter().map(|v| v * v).sum();
            let qg: f64 = tg.iter().map(|v| v * v).sum();
            Ok(qa * qg)
        }
        LayerPosterior::Spectrum { u_a, u_g, inv_sqrt, .. } => {
            let rot = kron_apply(u_a, u_g, &flat(), true)?;
            Ok(rot.iter().zip(inv_sqrt).map(|(r, s)| {
                let v = r * s;
                v * v
            }).sum())
        }
        LayerPosterior::LowRank(state) => quadratic_form(state, &flat()),
    }
}

/// Linearized predictive distribution for a scalar regression head:
/// mean `f(x*; θ_MAP)`, variance `σ²_alea + Σ_l J_lᵀ Σ_l J_l` with the
/// quadratic forms evaluated through each family's structure (never a dense
/// covariance).
pub fn predict_linearized(
    posterior: &NetworkPosterior,
    x: &[f64],
    sigma_alea: f64,
) -> Result<(f64, f64)> {
    let (mean, pairs) = output_jacobian(posterior, x)?;
    let mut var = sigma_alea * sigma_alea;
    for (layer, (a, g)) in posterior.layers.iter().zip(&pairs) {
        var += layer_quadratic_form(layer, a, g)?;
    }
    Ok((mean, var))
}

/// Index of the pool point with the largest linearized predictive variance;
/// ties break to the smallest index. Aleatoric noise shifts every score
/// equally, so it cannot change the winner.
pub fn acquire(posterior: &NetworkPosterior, pool: &Mat) -> Result<usize> {
    if pool.rows() == 0 {
        return Err(Error::EmptyInput("acquisition pool".into()));
    }
    let mut best = 0usize;
    let mut best_var = f64::NEG_INFINITY;
    for i in 0..pool.rows() {
        let (_, var) = predict_linearized(posterior, pool.row(i), 0.0)?;
        if var > best_var {
            best_var = var;
            best = i;
        }
    }
    Ok(best)
}

/// Aleatoric noise estimate: root-mean-square training residual at the MAP.
pub fn estimate_aleatoric_std(spec: &NetworkSpec, weights: &Weights, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("residual dataset".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..data.len() {
        let (y, _) = forward(spec, weights, data.inputs.row(t))?;
        match &data.targets[t] {
            Target::Value(target) => {
                for (f, v) in y.iter().zip(target) {
                    sum += (f - v) * (f - v);
                    count += 1;
                }
            }
            Target::Class(_) => {
                return Err(Error::Contract("residual std needs regression targets".into()));
            }
        }
    }
    Ok((sum / count as f64).sqrt())
}

/// Materialized covariance index helper shared by the dense test oracles.
pub fn kron_index_of(layer: &LayerPosterior) -> Option<KronIndex> {
    match layer {
        LayerPosterior::Spectrum { u_a, u_g, .. } => {
            Some(KronIndex { n: u_a.rows(), m: u_g.rows() })
        }
        LayerPosterior::LowRank(s) => Some(KronIndex { n: s.u_a.rows(), m: s.u_g.rows() }),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::{exact_block_im, kron_eigenbasis};
    use crate::kron::materialize;
    use crate::linalg::{spd_inverse, SymMatrix};
    use crate::net::{per_sample_factors, train_map, Activation, FisherMode, OptimizerConfig};
    use rand::Rng;

    fn toy_setup(seed: u64) -> (NetworkSpec, Weights, Dataset, Vec<LayerFactorBatch>) {
        let spec = NetworkSpec::new(vec![1, 4, 1], Activation::Tanh, Loss::Mse).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..24).map(|_| vec![rng.random_range(-3.0..3.0)]).collect();
        let targets = xs
            .iter()
            .map(|x| Target::Value(vec![x[0] * x[0] * x[0] + rng.random_range(-1.0..1.0)]))
            .collect();
        let data = Dataset::new(Mat::from_rows(&xs).unwrap(), targets).unwrap();
        let cfg = OptimizerConfig { epochs: 300, ..OptimizerConfig::default() };
        let trained = train_map(&spec, &data, &cfg, &mut rng).unwrap();
        let factors =
            per_sample_factors(&spec, &trained.weights, &data, FisherMode::ModelSampled, &mut rng)
                .unwrap();
        (spec, trained.weights, data, factors)
    }

    fn config(estimator: EstimatorKind, n: f64, tau: f64) -> PosteriorConfig {
        PosteriorConfig {
            n_scale: n,
            tau,
            estimator,
            ..PosteriorConfig::default()
        }
    }

    #[test]
    fn unit_hyperparameters_leave_structure() {
        let f = FisherEstimate::Diag(vec![0.5, 2.0]);
        match apply_hyperparameters(&f, 1.0, 0.0).unwrap() {
            ScaledPrecision::Diag(p) => assert_eq!(p, vec![0.5, 2.0]),
            _ => panic!(),
        }
    }

    #[test]
    fn diag_dead_direction_gets_prior_precision() {
        // τ = 0.45 with a zero Fisher entry: the prior is all that remains.
        let f = FisherEstimate::Diag(vec![0.0, 1.0]);
        match apply_hyperparameters(&f, 1.0, 0.45).unwrap() {
            ScaledPrecision::Diag(p) => {
                assert_eq!(p[0], 0.45);
                assert_eq!(p[1], 1.45);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn okf_matches_materialized_exact_prior() {
        let (_, _, _, factors) = toy_setup(1);
        let k = kfac(&factors[0]);
        let (n_scale, tau) = (3.0, 0.2);
        let spectrum = okf_spectrum(&k, n_scale, tau).unwrap();
        let (u_a, u_g, lambda) = match &spectrum {
            ScaledPrecision::Spectrum { u_a, u_g, lambda } => (u_a, u_g, lambda),
            _ => panic!(),
        };
        let rebuilt = crate::kron::materialize_sandwich(u_a, u_g, lambda);
        let mut want = materialize(&k.a.to_mat(), &k.g.to_mat());
        want.scale(n_scale);
        for i in 0..want.rows() {
            want.set(i, i, want.get(i, i) + tau);
        }
        let err = rebuilt.sub(&want).frobenius_norm() / want.frobenius_norm();
        assert!(err < 1e-10, "okf mismatch {err}");

        // The Ritter-shifted variant is a different matrix at the same (N, τ).
        let ritter = apply_hyperparameters(&FisherEstimate::Kfac(k), n_scale, tau).unwrap();
        let ritter_dense = match &ritter {
            ScaledPrecision::KfacFactors(kf) => materialize(&kf.a.to_mat(), &kf.g.to_mat()),
            _ => panic!(),
        };
        assert!(ritter_dense.sub(&want).frobenius_norm() > 1e-6 * want.frobenius_norm());
    }

    #[test]
    fn mc_prediction_with_pinned_posterior_is_deterministic_output() {
        // All-deterministic Diag posterior: every draw is the MAP estimate.
        let (spec, weights, _, factors) = toy_setup(2);
        let mut posterior = build_posterior(
            &spec,
            &weights,
            &factors,
            &config(EstimatorKind::Diag, 1.0, 1.0),
        )
        .unwrap();
        for layer in posterior.layers.iter_mut() {
            if let LayerPosterior::Diag { precision, .. } = layer {
                for p in precision.iter_mut() {
                    *p = f64::INFINITY;
                }
            }
        }
        let x = [0.4];
        let (want, _) = forward(&spec, &weights, &x).unwrap();
        match predict_mc(&posterior, &x, 1, 0.0, chacha_streams(7)).unwrap() {
            PredictiveSummary::Regression { mean, epistemic_variance, .. } => {
                assert_eq!(mean[0], want[0]);
                assert_eq!(epistemic_variance[0], 0.0);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn mc_mean_consistent_in_data_dense_region() {
        let (spec, weights, data, factors) = toy_setup(3);
        let posterior = build_posterior(
            &spec,
            &weights,
            &factors,
            &config(EstimatorKind::Inf, data.len() as f64, 0.1),
        )
        .unwrap();
        let x = [0.0];
        let (det, _) = forward(&spec, &weights, &x).unwrap();
        match predict_mc(&posterior, &x, 200, 0.0, chacha_streams(11)).unwrap() {
            PredictiveSummary::Regression { mean, epistemic_variance, .. } => {
                let se = (epistemic_variance[0] / 200.0).sqrt();
                assert!(
                    (mean[0] - det[0]).abs() <= 3.0 * se.max(1e-6),
                    "mc mean {} vs deterministic {} (se {se})",
                    mean[0],
                    det[0]
                );
            }
            _ => panic!(),
        }
    }

    #[test]
    fn classification_probs_sum_to_one() {
        let spec = NetworkSpec::new(vec![2, 5, 3], Activation::Relu, Loss::CrossEntropy).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let weights = Weights::random_init(&spec, &mut rng);
        let inputs = Mat::from_fn(12, 2, |_, _| rng.random_range(-1.0..1.0));
        let targets = (0..12).map(|i| Target::Class(i % 3)).collect();
        let data = Dataset::new(inputs, targets).unwrap();
        let factors =
            per_sample_factors(&spec, &weights, &data, FisherMode::ModelSampled, &mut rng).unwrap();
        let posterior = build_posterior(
            &spec,
            &weights,
            &factors,
            &config(EstimatorKind::Efb, 12.0, 0.3),
        )
        .unwrap();
        match predict_mc(&posterior, &[0.2, -0.4], 25, 0.0, chacha_streams(9)).unwrap() {
            PredictiveSummary::Classification { probs } => {
                let s: f64 = probs.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(probs.iter().all(|&p| p >= 0.0));
            }
            _ => panic!(),
        }
    }

    #[test]
    fn linearized_variance_reduces_to_aleatoric_when_pinned() {
        let (spec, weights, _, factors) = toy_setup(5);
        let mut posterior = build_posterior(
            &spec,
            &weights,
            &factors,
            &config(EstimatorKind::Diag, 1.0, 1.0),
        )
        .unwrap();
        for layer in posterior.layers.iter_mut() {
            if let LayerPosterior::Diag { precision, .. } = layer {
                for p in precision.iter_mut() {
                    *p = f64::INFINITY;
                }
            }
        }
        let (_, var) = predict_linearized(&posterior, &[0.3], 0.7).unwrap();
        assert!((var - 0.49).abs() < 1e-12);
    }

    #[test]
    fn linearized_quadratic_form_matches_dense_oracle() {
        // Lightly trained fixture: the dense-inverse oracle loses roughly
        // κ²·ε digits, so the comparison needs a mildly conditioned Fisher.
        let spec = NetworkSpec::new(vec![1, 4, 1], Activation::Tanh, Loss::Mse).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let xs: Vec<Vec<f64>> = (0..24).map(|_| vec![rng.random_range(-3.0..3.0)]).collect();
        let targets = xs
            .iter()
            .map(|x| Target::Value(vec![x[0] * x[0] * x[0] + rng.random_range(-1.0..1.0)]))
            .collect();
        let data = Dataset::new(Mat::from_rows(&xs).unwrap(), targets).unwrap();
        let cfg = OptimizerConfig { epochs: 120, ..OptimizerConfig::default() };
        let trained = train_map(&spec, &data, &cfg, &mut rng).unwrap();
        let weights = trained.weights;
        let factors =
            per_sample_factors(&spec, &weights, &data, FisherMode::ModelSampled, &mut rng).unwrap();
        for estimator in [
            EstimatorKind::Diag,
            EstimatorKind::KfacRitter,
            EstimatorKind::KfacExact,
            EstimatorKind::Efb,
            EstimatorKind::Inf,
        ] {
            let posterior = build_posterior(
                &spec,
                &weights,
                &factors,
                &config(estimator, 4.0, 1.0),
            )
            .unwrap();
            let x = [0.8];
            let (_, pairs) = output_jacobian(&posterior, &x).unwrap();
            let (_, var) = predict_linearized(&posterior, &x, 0.0).unwrap();
            // Dense route: materialize each layer's covariance and contract.
            let mut want = 0.0;
            for (layer, (a, g)) in posterior.layers.iter().zip(&pairs) {
                let mut j = Vec::new();
                for &av in a {
                    for &gv in g {
                        j.push(av * gv);
                    }
                }
                let n = j.len();
                let prec = match layer {
                    LayerPosterior::Diag { precision, .. } => SymMatrix::diag(precision),
                    LayerPosterior::KronProduct { factor_a, factor_g, .. } => {
                        // covariance = (F_A F_Aᵀ) ⊗ (F_G F_Gᵀ); invert to precision.
                        let ca = factor_a.matmul(&factor_a.transpose());
                        let cg = factor_g.matmul(&factor_g.transpose());
                        let cov = materialize(&ca, &cg);
                        let sym = SymMatrix::from_fn(n, |i, jj| 0.5 * (cov.get(i, jj) + cov.get(jj, i)));
                        spd_inverse(&sym).unwrap()
                    }
                    LayerPosterior::Spectrum { u_a, u_g, inv_sqrt, .. } => {
                        let lam: Vec<f64> = inv_sqrt.iter().map(|&s| 1.0 / (s * s)).collect();
                        let dense = crate::kron::materialize_sandwich(u_a, u_g, &lam);
                        SymMatrix::from_fn(n, |i, jj| 0.5 * (dense.get(i, jj) + dense.get(jj, i)))
                    }
                    LayerPosterior::LowRank(state) => {
                        let mut dense =
                            crate::kron::materialize_sandwich(&state.u_a, &state.u_g, &state.lambda_l);
                        for i in 0..n {
                            dense.set(i, i, dense.get(i, i) + 1.0 / state.d_inv[i]);
                        }
                        SymMatrix::from_fn(n, |i, jj| 0.5 * (dense.get(i, jj) + dense.get(jj, i)))
                    }
                };
                let cov = spd_inverse(&prec).unwrap();
                for i in 0..n {
                    for k in 0..n {
                        want += j[i] * cov.get(i, k) * j[k];
                    }
                }
            }
            assert!(
                (var - want).abs() <= 1e-8 * want.max(1e-12),
                "{estimator:?}: {var} vs {want}"
            );
        }
    }

    #[test]
    fn extrapolation_variance_exceeds_interpolation() {
        // ReLU net trained on the cubic toy task: away from the data the
        // output gradients keep growing, so the linearized band must widen.
        let spec = NetworkSpec::new(vec![1, 7, 1], Activation::Relu, Loss::Mse).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let xs: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(-4.0..4.0)]).collect();
        let targets = xs
            .iter()
            .map(|x| Target::Value(vec![x[0] * x[0] * x[0] + 3.0 * rng.random_range(-1.0..1.0)]))
            .collect();
        let data = Dataset::new(Mat::from_rows(&xs).unwrap(), targets).unwrap();
        let cfg = OptimizerConfig { epochs: 1500, ..OptimizerConfig::default() };
        let trained = train_map(&spec, &data, &cfg, &mut rng).unwrap();
        let factors =
            per_sample_factors(&spec, &trained.weights, &data, FisherMode::ModelSampled, &mut rng)
                .unwrap();
        let posterior = build_posterior(
            &spec,
            &trained.weights,
            &factors,
            &config(EstimatorKind::Inf, data.len() as f64, 0.01),
        )
        .unwrap();
        let (_, var_far) = predict_linearized(&posterior, &[6.0], 0.0).unwrap();
        let (_, var_near) = predict_linearized(&posterior, &[0.0], 0.0).unwrap();
        assert!(var_far > var_near, "far {var_far} vs near {var_near}");
    }

    #[test]
    fn full_rank_inf_matches_dense_fisher_la_oracle() {
        // rank = full, τ = 0, N = 1: the low-rank posterior materializes to
        // I_efb + diag(D), whose inverse is the dense Laplace covariance.
        let (spec, weights, _, factors) = toy_setup(8);
        let posterior = build_posterior(
            &spec,
            &weights,
            &factors,
            &config(EstimatorKind::Inf, 1.0, 0.0),
        )
        .unwrap();
        let x = [0.5];
        let (_, pairs) = output_jacobian(&posterior, &x).unwrap();
        let (_, var) = predict_linearized(&posterior, &x, 0.0).unwrap();
        let mut want = 0.0;
        for (l, (a, g)) in pairs.iter().enumerate() {
            let basis = kron_eigenbasis(&factors[l]).unwrap();
            let n = basis.param_count();
            let mut dense = crate::kron::materialize_sandwich(&basis.u_a, &basis.u_g, &basis.lambda);
            for i in 0..n {
                // The build path clips non-positive D to the epsilon floor.
                let d = basis.d[i];
                let d = if d > 0.0 { d } else { D_CLIP_EPSILON };
                dense.set(i, i, dense.get(i, i) + d);
            }
            let sym = SymMatrix::from_fn(n, |i, j| 0.5 * (dense.get(i, j) + dense.get(j, i)));
            let cov = spd_inverse(&sym).unwrap();
            let mut j = Vec::new();
            for &av in a {
                for &gv in g {
                    j.push(av * gv);
                }
            }
            for i in 0..n {
                for k in 0..n {
                    want += j[i] * cov.get(i, k) * j[k];
                }
            }
        }
        assert!(
            (var - want).abs() <= 1e-6 * want.max(1e-12),
            "inf {var} vs dense {want}"
        );
    }

    #[test]
    fn marginal_std_monotone_in_tau() {
        let (spec, weights, _, factors) = toy_setup(9);
        let taus = [0.01, 0.1, 1.0, 10.0];
        let mut last: Option<Vec<f64>> = None;
        for &tau in &taus {
            let posterior = build_posterior(
                &spec,
                &weights,
                &factors,
                &config(EstimatorKind::Inf, 24.0, tau),
            )
            .unwrap();
            let mut stds = Vec::new();
            for layer in &posterior.layers {
                if let LayerPosterior::LowRank(state) = layer {
                    stds.extend(crate::sampler::marginal_std(state));
                }
            }
            if let Some(prev) = &last {
                for (s, p) in stds.iter().zip(prev) {
                    assert!(s <= &(p + 1e-12), "std increased with tau: {s} > {p}");
                }
            }
            last = Some(stds);
        }
    }

    #[test]
    fn deterministic_dims_policy_pins_and_zeroes() {
        // A dead ReLU unit: its weights never receive gradient, so their
        // exact Fisher diagonal is zero.
        let spec = NetworkSpec::new(vec![1, 2, 1], Activation::Relu, Loss::Mse).unwrap();
        let w0 = Mat::from_rows(&[vec![0.5, 1.0], vec![-0.5, -10.0]]).unwrap();
        let w1 = Mat::from_rows(&[vec![1.0, 0.2, 0.0]]).unwrap();
        let weights = Weights::from_layers(&spec, vec![w0, w1]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let xs: Vec<Vec<f64>> = (0..16).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
        let targets = xs.iter().map(|x| Target::Value(vec![x[0]])).collect();
        let data = Dataset::new(Mat::from_rows(&xs).unwrap(), targets).unwrap();
        let factors =
            per_sample_factors(&spec, &weights, &data, FisherMode::ModelSampled, &mut rng).unwrap();
        let dead = diag_fisher(&factors[0]);
        assert!(dead.iter().any(|&v| v == 0.0), "setup should have a dead unit");

        let posterior = build_posterior(
            &spec,
            &weights,
            &factors,
            &config(EstimatorKind::Inf, 1.0, 0.0),
        )
        .unwrap();
        assert_eq!(posterior.build_info[0].verdict, Verdict::Degenerate);
        if let LayerPosterior::LowRank(state) = &posterior.layers[0] {
            let stds = crate::sampler::marginal_std(state);
            let draw1 = sampler_draw(state, &mut ChaCha12Rng::seed_from_u64(3)).unwrap();
            for (i, &v) in dead.iter().enumerate() {
                if v == 0.0 {
                    assert_eq!(stds[i], 0.0);
                    assert_eq!(draw1[i], state.theta_map[i]);
                }
            }
        } else {
            panic!("expected low-rank layer");
        }
    }

    #[test]
    fn acquire_prefers_far_point_and_ignores_constant_noise() {
        let (spec, weights, data, factors) = toy_setup(11);
        let posterior = build_posterior(
            &spec,
            &weights,
            &factors,
            &config(EstimatorKind::Inf, data.len() as f64, 0.05),
        )
        .unwrap();
        // Duplicate of a training point vs a far extrapolation point.
        let pool = Mat::from_rows(&[vec![data.inputs.get(0, 0)], vec![6.0]]).unwrap();
        assert_eq!(acquire(&posterior, &pool).unwrap(), 1);
        let single = Mat::from_rows(&[vec![1.0]]).unwrap();
        assert_eq!(acquire(&posterior, &single).unwrap(), 0);
    }

    #[test]
    fn estimator_draws_replay_per_stream() {
        let (spec, weights, _, factors) = toy_setup(12);
        for estimator in [
            EstimatorKind::Diag,
            EstimatorKind::KfacRitter,
            EstimatorKind::KfacExact,
            EstimatorKind::Efb,
            EstimatorKind::Inf,
        ] {
            let posterior = build_posterior(
                &spec,
                &weights,
                &factors,
                &config(estimator, 10.0, 0.2),
            )
            .unwrap();
            let w1 = draw_weights(&posterior, |l| chacha_streams(42)(0, l)).unwrap();
            let w2 = draw_weights(&posterior, |l| chacha_streams(42)(0, l)).unwrap();
            for (a, b) in w1.layers().iter().zip(w2.layers()) {
                assert_eq!(a.data(), b.data());
            }
        }
    }

    #[test]
    fn exact_block_oracle_consistency_for_efb_family() {
        // Spectrum posterior at N=1, τ=0 reproduces the EFB matrix exactly.
        let (_, _, _, factors) = toy_setup(13);
        let basis = kron_eigenbasis(&factors[1]).unwrap();
        let scaled = apply_hyperparameters(&FisherEstimate::Efb(basis.clone()), 1.0, 0.0).unwrap();
        if let ScaledPrecision::Spectrum { u_a, u_g, lambda } = scaled {
            let dense = crate::kron::materialize_sandwich(&u_a, &u_g, &lambda);
            let want = crate::kron::materialize_sandwich(&basis.u_a, &basis.u_g, &basis.lambda);
            assert_eq!(dense.data(), want.data());
        } else {
            panic!();
        }
        let _ = exact_block_im(&factors[1]).unwrap();
    }

    #[test]
    fn rank_spec_resolution() {
        assert_eq!(RankSpec::Full.resolve(10).unwrap(), 10);
        assert_eq!(RankSpec::Count(3).resolve(10).unwrap(), 3);
        assert_eq!(RankSpec::Fraction(0.5).resolve(10).unwrap(), 5);
        assert_eq!(RankSpec::Fraction(0.05).resolve(10).unwrap(), 1);
        assert!(RankSpec::Count(11).resolve(10).is_err());
        assert!(RankSpec::Fraction(1.5).resolve(10).is_err());
    }
}
