//! Evaluation metrics: normalized Frobenius errors with a diagonal /
//! off-diagonal split, expected calibration error, normalized predictive
//! entropy, and regression metrics with Gaussian log-likelihood.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
// Resolves float math in no_std builds; std test builds see the inherent methods.
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Normalized Frobenius errors of an estimate against the exact matrix.
/// Each part is normalized by the same part of the exact matrix, so a
/// purely diagonal estimate scores exactly 1.0 off-diagonal. `None` marks an
/// undefined ratio (zero-norm reference), deliberately distinct from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FrobeniusReport {
    pub diag_err: Option<f64>,
    pub offdiag_err: Option<f64>,
    pub estimator: String,
    pub rank_fraction: Option<f64>,
}

impl FrobeniusReport {
    pub fn with_label(mut self, estimator: &str, rank_fraction: Option<f64>) -> Self {
        self.estimator = String::from(estimator);
        self.rank_fraction = rank_fraction;
        self
    }
}

pub fn frobenius_errors(exact: &Mat, approx: &Mat) -> Result<FrobeniusReport> {
    if exact.rows() != exact.cols() || approx.rows() != approx.cols() {
        return Err(Error::ShapeMismatch("frobenius_errors expects square matrices".into()));
    }
    if exact.rows() != approx.rows() {
        return Err(Error::ShapeMismatch("matrix sizes differ".into()));
    }
    let n = exact.rows();
    let mut diag_num = 0.0;
    let mut diag_den = 0.0;
    let mut off_num = 0.0;
    let mut off_den = 0.0;
    for i in 0..n {
        for j in 0..n {
            let e = exact.get(i, j);
            let d = e - approx.get(i, j);
            if i == j {
                diag_num += d * d;
                diag_den += e * e;
            } else {
                off_num += d * d;
                off_den += e * e;
            }
        }
    }
    let ratio = |num: f64, den: f64| {
        if den == 0.0 {
            None
        } else {
            Some((num / den).sqrt())
        }
    };
    Ok(FrobeniusReport {
        diag_err: ratio(diag_num, diag_den),
        offdiag_err: ratio(off_num, off_den),
        estimator: String::new(),
        rank_fraction: None,
    })
}

/// One confidence bin of a reliability diagram.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub mean_accuracy: f64,
}

/// Expected calibration error over equal-width confidence bins of the
/// max-class probability.
pub fn ece(probs: &Mat, labels: &[usize], n_bins: usize) -> Result<f64> {
    Ok(ece_with_bins(probs, labels, n_bins)?.0)
}

pub fn ece_with_bins(probs: &Mat, labels: &[usize], n_bins: usize) -> Result<(f64, Vec<CalibrationBin>)> {
    if probs.rows() == 0 {
        return Err(Error::EmptyInput("ece probabilities".into()));
    }
    if probs.rows() != labels.len() {
        return Err(Error::ShapeMismatch("probs rows vs labels".into()));
    }
    if n_bins < 1 {
        return Err(Error::Contract("n_bins must be at least 1".into()));
    }
    let classes = probs.cols();
    let mut conf_sum = vec![0.0; n_bins];
    let mut acc_sum = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for t in 0..probs.rows() {
        let row = probs.row(t);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(alloc::format!("row {t} sums to {sum}, not 1")));
        }
        if labels[t] >= classes {
            return Err(Error::IndexOutOfRange(alloc::format!("label {} of {}", labels[t], classes)));
        }
        let (mut arg, mut conf) = (0usize, f64::NEG_INFINITY);
        for (j, &p) in row.iter().enumerate() {
            if p > conf {
                conf = p;
                arg = j;
            }
        }
        let mut b = (conf * n_bins as f64) as usize;
        if b >= n_bins {
            b = n_bins - 1; // confidence 1.0 lands in the last bin
        }
        conf_sum[b] += conf;
        acc_sum[b] += if arg == labels[t] { 1.0 } else { 0.0 };
        counts[b] += 1;
    }
    let total = probs.rows() as f64;
    let mut e = 0.0;
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let (lower, upper) = (b as f64 / n_bins as f64, (b + 1) as f64 / n_bins as f64);
        if counts[b] == 0 {
            bins.push(CalibrationBin { lower, upper, count: 0, mean_confidence: 0.0, mean_accuracy: 0.0 });
            continue;
        }
        let c = counts[b] as f64;
        let conf = conf_sum[b] / c;
        let acc = acc_sum[b] / c;
        e += c / total * (acc - conf).abs();
        bins.push(CalibrationBin {
            lower,
            upper,
            count: counts[b],
            mean_confidence: conf,
            mean_accuracy: acc,
        });
    }
    Ok((e, bins))
}

/// `−Σ p ln p / ln(C)`, in `[0, 1]`; `0·ln 0` counts as zero. Degenerate
/// single-class inputs score 0.
pub fn normalized_entropy(probs: &[f64]) -> f64 {
    if probs.len() < 2 {
        return 0.0;
    }
    let mut h = 0.0;
    for &p in probs {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h / (probs.len() as f64).ln()
}

/// RMSE and mean Gaussian predictive log-likelihood per point.
/// `preds` pairs each predictive mean with its (strictly positive) variance.
pub fn regression_metrics(preds: &[(f64, f64)], targets: &[f64]) -> Result<(f64, f64)> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("regression predictions".into()));
    }
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch("predictions vs targets".into()));
    }
    let mut se = 0.0;
    let mut ll = 0.0;
    for (&(mean, var), &t) in preds.iter().zip(targets) {
        if !(var > 0.0) {
            return Err(Error::Contract("predictive variance must be positive".into()));
        }
        let r = mean - t;
        se += r * r;
        ll += -0.5 * (2.0 * PI * var).ln() - r * r / (2.0 * var);
    }
    let n = preds.len() as f64;
    Ok(((se / n).sqrt(), ll / n))
}
