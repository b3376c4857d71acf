//! Minimal fully-connected network with per-sample capture of the factors
//! that feed the Fisher estimators: layer inputs `a` (bias-augmented) and
//! pre-activation gradients `g`.
//!
//! Per-sample loss conventions: MSE is `½‖f(x) − y‖²` (so the output
//! gradient is `f − y`), cross-entropy is `−log softmax(z)[y]` computed from
//! logits. Training is plain SGD or Adam, single-threaded and
//! seed-deterministic.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
// Resolves float math in no_std builds; std test builds see the inherent methods.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if h > 0.0 {
                    h
                } else {
                    0.0
                }
            }
            Activation::Tanh => h.tanh(),
            Activation::Identity => h,
        }
    }

    #[inline]
    fn derivative(self, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = h.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Gaussian regression head; the output layer is linear.
    Mse,
    /// Classification head; the output layer produces logits.
    CrossEntropy,
}

/// Architecture of a fully-connected network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, loss: Loss) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Contract("need at least input and output sizes".into()));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Contract("layer sizes must be positive".into()));
        }
        Ok(Self { layer_sizes, activation, loss })
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    /// `(fan_in, fan_out)` of layer `l` (0-based).
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l], self.layer_sizes[l + 1])
    }

    /// Parameter count of layer `l`, bias column included.
    pub fn layer_param_count(&self, l: usize) -> usize {
        let (fan_in, fan_out) = self.layer_dims(l);
        (fan_in + 1) * fan_out
    }
}

/// Per-layer weight matrices of shape `out × (in + 1)`; the bias sits in the
/// trailing column, matching the augmented inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    layers: Vec<Mat>,
}

impl Weights {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = (0..spec.num_layers())
            .map(|l| {
                let (fan_in, fan_out) = spec.layer_dims(l);
                Mat::zeros(fan_out, fan_in + 1)
            })
            .collect();
        Self { layers }
    }

    /// Gaussian init scaled by `sqrt(2 / fan_in)` (He) for ReLU and
    /// `sqrt(1 / fan_in)` otherwise; biases start at zero.
    pub fn random_init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut w = Self::zeros(spec);
        for l in 0..spec.num_layers() {
            let (fan_in, fan_out) = spec.layer_dims(l);
            let scale = match spec.activation {
                Activation::Relu => (2.0 / fan_in as f64).sqrt(),
                _ => (1.0 / fan_in as f64).sqrt(),
            };
            for i in 0..fan_out {
                for j in 0..fan_in {
                    let z: f64 = StandardNormal.sample(rng);
                    w.layers[l].set(i, j, scale * z);
                }
            }
        }
        w
    }

    pub fn from_layers(spec: &NetworkSpec, layers: Vec<Mat>) -> Result<Self> {
        if layers.len() != spec.num_layers() {
            return Err(Error::ShapeMismatch("layer count".into()));
        }
        for (l, m) in layers.iter().enumerate() {
            let (fan_in, fan_out) = spec.layer_dims(l);
            if m.rows() != fan_out || m.cols() != fan_in + 1 {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l}: expected {}x{}, got {}x{}",
                    fan_out,
                    fan_in + 1,
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Contract(format!("layer {l}: non-finite weight")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layer(&self, l: usize) -> &Mat {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Mat] {
        &self.layers
    }

    /// Layer weights as the column-stacked vector `θ_l = vec(W_l)`, the
    /// ordering the Kronecker index maps assume.
    pub fn layer_vec(&self, l: usize) -> Vec<f64> {
        crate::kron::vec_cols(&self.layers[l])
    }

    pub fn set_layer_from_vec(&mut self, l: usize, theta: &[f64]) -> Result<()> {
        let m = &mut self.layers[l];
        if theta.len() != m.rows() * m.cols() {
            return Err(Error::ShapeMismatch(format!("layer {l} vector length")));
        }
        let rows = m.rows();
        for j in 0..m.cols() {
            for i in 0..rows {
                m.set(i, j, theta[j * rows + i]);
            }
        }
        Ok(())
    }
}

/// Activations recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Augmented layer inputs `a_{l-1}` (trailing entry is exactly 1).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activations `h_l`.
    pub pre_activations: Vec<Vec<f64>>,
}

fn augment(x: &[f64]) -> Vec<f64> {
    let mut a = Vec::with_capacity(x.len() + 1);
    a.extend_from_slice(x);
    a.push(1.0);
    a
}

/// Deterministic forward pass; the cache holds every augmented input and
/// pre-activation. The output layer is linear (logits for classification).
pub fn forward(spec: &NetworkSpec, weights: &Weights, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    if x.len() != spec.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input length {} != {}",
            x.len(),
            spec.input_dim()
        )));
    }
    let n_layers = spec.num_layers();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre_activations = Vec::with_capacity(n_layers);
    let mut act = x.to_vec();
    for l in 0..n_layers {
        let a = augment(&act);
        let h = weights.layer(l).mul_vec(&a);
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: l });
        }
        act = if l + 1 == n_layers {
            h.clone()
        } else {
            h.iter().map(|&v| spec.activation.apply(v)).collect()
        };
        inputs.push(a);
        pre_activations.push(h);
    }
    Ok((act, ForwardCache { inputs, pre_activations }))
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.iter().map(|&v| v / s).collect()
}

/// Output-layer gradient `∂loss/∂h_last` for one sample.
fn output_loss_grad(spec: &NetworkSpec, output: &[f64], target: &Target) -> Result<Vec<f64>> {
    match (spec.loss, target) {
        (Loss::Mse, Target::Value(y)) => {
            if y.len() != output.len() {
                return Err(Error::ShapeMismatch("target length".into()));
            }
            Ok(output.iter().zip(y).map(|(f, t)| f - t).collect())
        }
        (Loss::CrossEntropy, Target::Class(c)) => {
            if *c >= output.len() {
                return Err(Error::IndexOutOfRange(format!("class {c}")));
            }
            let mut g = softmax(output);
            g[*c] -= 1.0;
            Ok(g)
        }
        _ => Err(Error::Contract("loss/target kind mismatch".into())),
    }
}

/// Backpropagate an output-layer gradient through the cache, returning the
/// pre-activation gradient `g_l` for every layer.
pub(crate) fn backprop(
    spec: &NetworkSpec,
    weights: &Weights,
    cache: &ForwardCache,
    out_grad: Vec<f64>,
) -> Vec<Vec<f64>> {
    let n_layers = spec.num_layers();
    let mut grads = vec![Vec::new(); n_layers];
    let mut g = out_grad;
    for l in (0..n_layers).rev() {
        grads[l] = g.clone();
        if l == 0 {
            break;
        }
        // Push through W_l (the bias column does not feed back) and the
        // activation derivative at h_{l-1}.
        let w = weights.layer(l);
        let (fan_in, _) = spec.layer_dims(l);
        let mut prev = vec![0.0; fan_in];
        for i in 0..w.rows() {
            let gi = g[i];
            if gi == 0.0 {
                continue;
            }
            let row = w.row(i);
            for (p, item) in prev.iter_mut().enumerate() {
                *item += row[p] * gi;
            }
        }
        let h_prev = &cache.pre_activations[l - 1];
        for (p, item) in prev.iter_mut().enumerate() {
            *item *= spec.activation.derivative(h_prev[p]);
        }
        g = prev;
    }
    grads
}

/// One regression target or class label.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Value(Vec<f64>),
    Class(usize),
}

/// A batch of inputs with matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Mat,
    pub targets: Vec<Target>,
}

impl Dataset {
    pub fn new(inputs: Mat, targets: Vec<Target>) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::ShapeMismatch("inputs vs targets count".into()));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-sample factors of one layer: rows of `a` are augmented inputs, rows
/// of `g` are pre-activation gradients, in dataset order.
#[derive(Debug, Clone)]
pub struct LayerFactorBatch {
    pub a: Mat,
    pub g: Mat,
}

impl LayerFactorBatch {
    pub fn new(a: Mat, g: Mat) -> Result<Self> {
        if a.rows() != g.rows() {
            return Err(Error::ShapeMismatch("factor sample counts".into()));
        }
        if a.rows() == 0 {
            return Err(Error::EmptyInput("factor batch".into()));
        }
        for t in 0..a.rows() {
            if a.get(t, a.cols() - 1) != 1.0 {
                return Err(Error::Contract(format!("sample {t}: augmented input must end in 1")));
            }
        }
        Ok(Self { a, g })
    }

    pub fn count(&self) -> usize {
        self.a.rows()
    }

    /// Activation-side dimension `n = in + 1`.
    pub fn a_dim(&self) -> usize {
        self.a.cols()
    }

    /// Gradient-side dimension `m = out`.
    pub fn g_dim(&self) -> usize {
        self.g.cols()
    }

    /// Parameter count `N = n·m` of this layer.
    pub fn param_count(&self) -> usize {
        self.a_dim() * self.g_dim()
    }

    /// Per-sample gradient `vec(g aᵀ) = a ⊗ g` for sample `t`.
    pub fn grad_vec(&self, t: usize) -> Vec<f64> {
        let a = self.a.row(t);
        let g = self.g.row(t);
        let mut out = Vec::with_capacity(a.len() * g.len());
        for &av in a {
            for &gv in g {
                out.push(av * gv);
            }
        }
        out
    }
}

/// Which distribution the Fisher expectation runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherMode {
    /// Labels drawn from the model's own predictive distribution — the
    /// unbiased (true) Fisher estimator. One draw per input.
    ModelSampled,
    /// Dataset labels; the empirical Fisher, kept for ablations.
    Empirical,
}

/// Capture per-sample `(a, g)` at every layer for the given batch.
///
/// In [`FisherMode::ModelSampled`] the regression target is `f(x) + ε` with
/// `ε ~ N(0, 1)` per output (the unit-variance Gaussian likelihood implied
/// by the squared-error loss); classification labels are drawn from the
/// softmax. Samples are processed in dataset order.
pub fn per_sample_factors<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    weights: &Weights,
    data: &Dataset,
    mode: FisherMode,
    rng: &mut R,
) -> Result<Vec<LayerFactorBatch>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("factor batch".into()));
    }
    let n_layers = spec.num_layers();
    let count = data.len();
    let mut a_mats: Vec<Mat> = (0..n_layers)
        .map(|l| Mat::zeros(count, spec.layer_dims(l).0 + 1))
        .collect();
    let mut g_mats: Vec<Mat> = (0..n_layers)
        .map(|l| Mat::zeros(count, spec.layer_dims(l).1))
        .collect();

    for t in 0..count {
        let (out, cache) = forward(spec, weights, data.inputs.row(t))?;
        let target = match mode {
            FisherMode::Empirical => data.targets[t].clone(),
            FisherMode::ModelSampled => match spec.loss {
                Loss::Mse => {
                    let y = out
                        .iter()
                        .map(|&f| {
                            let z: f64 = StandardNormal.sample(rng);
                            f + z
                        })
                        .collect();
                    Target::Value(y)
                }
                Loss::CrossEntropy => {
                    let p = softmax(&out);
                    let u: f64 = rng.random_range(0.0..1.0);
                    let mut acc = 0.0;
                    let mut c = p.len() - 1;
                    for (k, &pk) in p.iter().enumerate() {
                        acc += pk;
                        if u < acc {
                            c = k;
                            break;
                        }
                    }
                    Target::Class(c)
                }
            },
        };
        let out_grad = output_loss_grad(spec, &out, &target)?;
        let grads = backprop(spec, weights, &cache, out_grad);
        for l in 0..n_layers {
            for (j, &v) in cache.inputs[l].iter().enumerate() {
                a_mats[l].set(t, j, v);
            }
            for (j, &v) in grads[l].iter().enumerate() {
                g_mats[l].set(t, j, v);
            }
        }
    }

    Ok(a_mats
        .into_iter()
        .zip(g_mats)
        .map(|(a, g)| LayerFactorBatch { a, g })
        .collect())
}

/// Per-sample loss used by training and by the finite-difference oracles.
pub fn per_sample_loss(spec: &NetworkSpec, weights: &Weights, x: &[f64], target: &Target) -> Result<f64> {
    let (out, _) = forward(spec, weights, x)?;
    match (spec.loss, target) {
        (Loss::Mse, Target::Value(y)) => {
            if y.len() != out.len() {
                return Err(Error::ShapeMismatch("target length".into()));
            }
            Ok(0.5 * out.iter().zip(y).map(|(f, t)| (f - t) * (f - t)).sum::<f64>())
        }
        (Loss::CrossEntropy, Target::Class(c)) => {
            if *c >= out.len() {
                return Err(Error::IndexOutOfRange(format!("class {c}")));
            }
            let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_z = out.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
            Ok(log_z - out[*c])
        }
        _ => Err(Error::Contract("loss/target kind mismatch".into())),
    }
}

/// Mean per-sample loss gradient over `idx`, as `out × (in+1)` matrices.
fn batch_gradients(
    spec: &NetworkSpec,
    weights: &Weights,
    data: &Dataset,
    idx: &[usize],
) -> Result<(f64, Vec<Mat>)> {
    let mut grads: Vec<Mat> = (0..spec.num_layers())
        .map(|l| {
            let (fan_in, fan_out) = spec.layer_dims(l);
            Mat::zeros(fan_out, fan_in + 1)
        })
        .collect();
    let mut loss = 0.0;
    for &t in idx {
        let x = data.inputs.row(t);
        let (out, cache) = forward(spec, weights, x)?;
        let target = &data.targets[t];
        loss += per_sample_loss(spec, weights, x, target)?;
        let out_grad = output_loss_grad(spec, &out, target)?;
        let gs = backprop(spec, weights, &cache, out_grad);
        for l in 0..spec.num_layers() {
            let a = &cache.inputs[l];
            let g = &gs[l];
            let gm = &mut grads[l];
            for i in 0..gm.rows() {
                let gi = g[i];
                if gi == 0.0 {
                    continue;
                }
                for (j, &av) in a.iter().enumerate() {
                    gm.set(i, j, gm.get(i, j) + gi * av);
                }
            }
        }
    }
    let inv = 1.0 / idx.len() as f64;
    for gm in &mut grads {
        gm.scale(inv);
    }
    Ok((loss * inv, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptMethod {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub method: OptMethod,
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` trains full-batch (deterministic order); otherwise indices are
    /// reshuffled every epoch from the training RNG.
    pub batch_size: Option<usize>,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: OptMethod::Adam,
            learning_rate: 1e-3,
            epochs: 2000,
            batch_size: None,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub weights: Weights,
    /// Mean training loss recorded once per epoch.
    pub loss_trace: Vec<f64>,
}

/// Train to the MAP estimate. Initialization and any shuffling come from
/// `rng`, so a fixed seed replays bit-for-bit.
pub fn train_map<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    data: &Dataset,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<TrainResult> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training dataset".into()));
    }
    let mut weights = Weights::random_init(spec, rng);
    let n_layers = spec.num_layers();
    let mut adam_m: Vec<Mat> = weights.layers.iter().map(|w| Mat::zeros(w.rows(), w.cols())).collect();
    let mut adam_v = adam_m.clone();
    let mut step = 0usize;
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);

    let all: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = all.clone();
        if cfg.batch_size.is_some() {
            shuffle(&mut order, rng);
        }
        let chunk = cfg.batch_size.unwrap_or(data.len()).max(1);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(chunk) {
            let (loss, grads) = batch_gradients(spec, &weights, data, idx)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += loss;
            batches += 1;
            step += 1;
            for l in 0..n_layers {
                let w = &mut weights.layers[l];
                for i in 0..w.rows() {
                    for j in 0..w.cols() {
                        let mut g = grads[l].get(i, j) + cfg.weight_decay * w.get(i, j);
                        if let OptMethod::Adam = cfg.method {
                            let m = beta1 * adam_m[l].get(i, j) + (1.0 - beta1) * g;
                            let v = beta2 * adam_v[l].get(i, j) + (1.0 - beta2) * g * g;
                            adam_m[l].set(i, j, m);
                            adam_v[l].set(i, j, v);
                            let mh = m / (1.0 - beta1.powi(step as i32));
                            let vh = v / (1.0 - beta2.powi(step as i32));
                            g = mh / (vh.sqrt() + eps);
                        }
                        w.set(i, j, w.get(i, j) - cfg.learning_rate * g);
                    }
                }
            }
        }
        trace.push(epoch_loss / batches as f64);
    }
    Ok(TrainResult { weights, loss_trace: trace })
}

/// Fisher–Yates with the caller's RNG stream.
fn shuffle<R: Rng + ?Sized>(idx: &mut [usize], rng: &mut R) {
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn spec_1_1() -> NetworkSpec {
        NetworkSpec::new(vec![1, 1], Activation::Identity, Loss::Mse).unwrap()
    }

    #[test]
    fn forward_zero_weights_identity() {
        let spec = NetworkSpec::new(vec![2, 3, 1], Activation::Identity, Loss::Mse).unwrap();
        let w = Weights::zeros(&spec);
        let (y, _) = forward(&spec, &w, &[0.3, -0.7]).unwrap();
        assert_eq!(y, vec![0.0]);
    }

    #[test]
    fn forward_affine_by_hand() {
        // W = [2, 1]: weight 2, bias 1, x = 3 -> 7.
        let spec = spec_1_1();
        let w = Weights::from_layers(&spec, vec![Mat::from_rows(&[vec![2.0, 1.0]]).unwrap()]).unwrap();
        let (y, cache) = forward(&spec, &w, &[3.0]).unwrap();
        assert_eq!(y, vec![7.0]);
        assert_eq!(cache.inputs[0], vec![3.0, 1.0]);
    }

    #[test]
    fn forward_matches_duplicate_implementation() {
        // Independent straightforward re-implementation of a 2-3-1 ReLU net.
        let spec = NetworkSpec::new(vec![2, 3, 1], Activation::Relu, Loss::Mse).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let w = Weights::random_init(&spec, &mut rng);
        let x = [0.4, -1.2];

        let w0 = w.layer(0);
        let mut hidden = [0.0f64; 3];
        for i in 0..3 {
            let mut h = w0.get(i, 2); // bias
            h += w0.get(i, 0) * x[0] + w0.get(i, 1) * x[1];
            hidden[i] = if h > 0.0 { h } else { 0.0 };
        }
        let w1 = w.layer(1);
        let mut out = w1.get(0, 3);
        for (i, &hv) in hidden.iter().enumerate() {
            out += w1.get(0, i) * hv;
        }

        let (y, _) = forward(&spec, &w, &x).unwrap();
        assert!((y[0] - out).abs() < 1e-12);
    }

    #[test]
    fn factors_hand_gradient_identity_net() {
        // 1-1 identity net with MSE: g = prediction - label.
        let spec = spec_1_1();
        let w = Weights::from_layers(&spec, vec![Mat::from_rows(&[vec![2.0, 1.0]]).unwrap()]).unwrap();
        let data = Dataset::new(
            Mat::from_rows(&[vec![3.0]]).unwrap(),
            vec![Target::Value(vec![5.0])],
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let f = per_sample_factors(&spec, &w, &data, FisherMode::Empirical, &mut rng).unwrap();
        assert_eq!(f.len(), 1);
        // prediction = 7, label = 5 -> g = 2.
        assert_eq!(f[0].g.row(0), &[2.0]);
        assert_eq!(f[0].a.row(0), &[3.0, 1.0]);
    }

    #[test]
    fn factors_count_and_augmentation() {
        let spec = NetworkSpec::new(vec![2, 3, 2], Activation::Tanh, Loss::Mse).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let w = Weights::random_init(&spec, &mut rng);
        let data = Dataset::new(
            Mat::from_rows(&[vec![0.1, 0.2], vec![-0.5, 0.9]]).unwrap(),
            vec![Target::Value(vec![0.0, 0.0]), Target::Value(vec![1.0, -1.0])],
        )
        .unwrap();
        let f = per_sample_factors(&spec, &w, &data, FisherMode::Empirical, &mut rng).unwrap();
        for lf in &f {
            assert_eq!(lf.count(), 2);
            for t in 0..2 {
                let a = lf.a.row(t);
                assert_eq!(a[a.len() - 1], 1.0);
            }
        }
    }

    #[test]
    fn grad_vec_matches_finite_differences() {
        // Central finite differences of the per-sample loss, all layers.
        let spec = NetworkSpec::new(vec![2, 3, 2], Activation::Tanh, Loss::Mse).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let w = Weights::random_init(&spec, &mut rng);
        let x = vec![0.3, -0.8];
        let target = Target::Value(vec![0.5, 0.1]);
        let data = Dataset::new(Mat::from_rows(&[x.clone()]).unwrap(), vec![target.clone()]).unwrap();
        let factors =
            per_sample_factors(&spec, &w, &data, FisherMode::Empirical, &mut rng).unwrap();

        let h = 1e-6;
        for l in 0..spec.num_layers() {
            let analytic = factors[l].grad_vec(0);
            let wm = w.layer(l);
            let (rows, cols) = (wm.rows(), wm.cols());
            for j in 0..cols {
                for i in 0..rows {
                    let mut wp = w.clone();
                    let mut m = wm.clone();
                    m.set(i, j, wm.get(i, j) + h);
                    wp.layers[l] = m;
                    let lp = per_sample_loss(&spec, &wp, &x, &target).unwrap();
                    let mut wn = w.clone();
                    let mut m = wm.clone();
                    m.set(i, j, wm.get(i, j) - h);
                    wn.layers[l] = m;
                    let ln = per_sample_loss(&spec, &wn, &x, &target).unwrap();
                    let fd = (lp - ln) / (2.0 * h);
                    let idx = j * rows + i; // vec(g aᵀ) is column-stacked
                    assert!(
                        (analytic[idx] - fd).abs() < 1e-5,
                        "layer {l} ({i},{j}): {} vs {}",
                        analytic[idx],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn model_sampled_ignores_dataset_labels() {
        let spec = NetworkSpec::new(vec![1, 4, 1], Activation::Tanh, Loss::Mse).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let w = Weights::random_init(&spec, &mut rng);
        let inputs = Mat::from_rows(&[vec![0.5], vec![-0.25]]).unwrap();
        let d1 = Dataset::new(
            inputs.clone(),
            vec![Target::Value(vec![0.0]), Target::Value(vec![0.0])],
        )
        .unwrap();
        let d2 = Dataset::new(
            inputs,
            vec![Target::Value(vec![9.0]), Target::Value(vec![-9.0])],
        )
        .unwrap();
        let mut r1 = ChaCha12Rng::seed_from_u64(77);
        let mut r2 = ChaCha12Rng::seed_from_u64(77);
        let f1 = per_sample_factors(&spec, &w, &d1, FisherMode::ModelSampled, &mut r1).unwrap();
        let f2 = per_sample_factors(&spec, &w, &d2, FisherMode::ModelSampled, &mut r2).unwrap();
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(a.g.data(), b.g.data());
            assert_eq!(a.a.data(), b.a.data());
        }
    }

    #[test]
    fn train_linear_regression_recovers_slope() {
        // y = 2x with no noise; a linear 1-1 net must find weight 2.
        let spec = spec_1_1();
        let xs: Vec<Vec<f64>> = (0..16).map(|i| vec![i as f64 / 8.0 - 1.0]).collect();
        let targets = xs.iter().map(|x| Target::Value(vec![2.0 * x[0]])).collect();
        let data = Dataset::new(Mat::from_rows(&xs).unwrap(), targets).unwrap();
        let cfg = OptimizerConfig {
            method: OptMethod::Sgd,
            learning_rate: 0.2,
            epochs: 2000,
            ..OptimizerConfig::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let result = train_map(&spec, &data, &cfg, &mut rng).unwrap();
        let w = result.weights.layer(0);
        assert!((w.get(0, 0) - 2.0).abs() < 1e-2, "slope {}", w.get(0, 0));
        assert!(w.get(0, 1).abs() < 1e-2, "bias {}", w.get(0, 1));
    }

    #[test]
    fn train_loss_decreases_on_cubic() {
        let spec = NetworkSpec::new(vec![1, 7, 1], Activation::Tanh, Loss::Mse).unwrap();
        let xs: Vec<Vec<f64>> = (0..32).map(|i| vec![i as f64 / 4.0 - 4.0]).collect();
        let targets = xs.iter().map(|x| Target::Value(vec![x[0] * x[0] * x[0]])).collect();
        let data = Dataset::new(Mat::from_rows(&xs).unwrap(), targets).unwrap();
        let cfg = OptimizerConfig { epochs: 500, ..OptimizerConfig::default() };
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let result = train_map(&spec, &data, &cfg, &mut rng).unwrap();
        assert!(result.loss_trace.last().unwrap() < result.loss_trace.first().unwrap());
    }

    #[test]
    fn train_is_bitwise_deterministic() {
        let spec = NetworkSpec::new(vec![1, 5, 1], Activation::Relu, Loss::Mse).unwrap();
        let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let targets = xs.iter().map(|x| Target::Value(vec![x[0] * 0.5])).collect();
        let data = Dataset::new(Mat::from_rows(&xs).unwrap(), targets).unwrap();
        let cfg = OptimizerConfig {
            epochs: 50,
            batch_size: Some(3),
            ..OptimizerConfig::default()
        };
        let r1 = train_map(&spec, &data, &cfg, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        let r2 = train_map(&spec, &data, &cfg, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        for (a, b) in r1.weights.layers().iter().zip(r2.weights.layers()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn cross_entropy_gradient_check() {
        let spec = NetworkSpec::new(vec![2, 4, 3], Activation::Tanh, Loss::CrossEntropy).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let w = Weights::random_init(&spec, &mut rng);
        let x = vec![0.2, 0.7];
        let target = Target::Class(1);
        let data = Dataset::new(Mat::from_rows(&[x.clone()]).unwrap(), vec![target.clone()]).unwrap();
        let factors = per_sample_factors(&spec, &w, &data, FisherMode::Empirical, &mut rng).unwrap();
        let h = 1e-6;
        let l = 1;
        let analytic = factors[l].grad_vec(0);
        let wm = w.layer(l);
        for j in 0..wm.cols() {
            for i in 0..wm.rows() {
                let mut wp = w.clone();
                let mut m = wm.clone();
                m.set(i, j, wm.get(i, j) + h);
                wp.layers[l] = m;
                let mut wn = w.clone();
                let mut m = wm.clone();
                m.set(i, j, wm.get(i, j) - h);
                wn.layers[l] = m;
                let fd = (per_sample_loss(&spec, &wp, &x, &target).unwrap()
                    - per_sample_loss(&spec, &wn, &x, &target).unwrap())
                    / (2.0 * h);
                assert!((analytic[j * wm.rows() + i] - fd).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn layer_vec_roundtrip() {
        let spec = NetworkSpec::new(vec![2, 3], Activation::Identity, Loss::Mse).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let w = Weights::random_init(&spec, &mut rng);
        let v = w.layer_vec(0);
        let mut w2 = Weights::zeros(&spec);
        w2.set_layer_from_vec(0, &v).unwrap();
        assert_eq!(w.layer(0).data(), w2.layer(0).data());
    }

    #[test]
    fn factor_batch_rejects_missing_augmentation() {
        let a = Mat::from_rows(&[vec![1.0, 0.5]]).unwrap();
        let g = Mat::from_rows(&[vec![1.0]]).unwrap();
        assert!(LayerFactorBatch::new(a, g).is_err());
    }
}
