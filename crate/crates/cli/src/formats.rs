//! File formats: dataset CSV, checkpoint JSON, posterior containers,
//! prediction/sweep CSVs and report files.
//!
//! Every structured file carries a `schema_version` field. CSV floats are
//! written with 17 significant digits so they round-trip exactly; JSON
//! numbers round-trip through serde_json's shortest representation.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use infoform::linalg::Mat;
use infoform::net::{Activation, Dataset, Loss, NetworkSpec, Target, Weights};
use infoform::posterior::{DegeneratePolicy, EstimatorKind, PosteriorConfig, RankSpec};
use infoform::sparse::SparseInfoForm;

pub const SCHEMA_VERSION: u32 = 1;

/// 17 significant digits: enough to reproduce any f64 bit pattern.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn fmt_opt_f64(v: Option<f64>) -> String {
    match v {
        Some(x) => fmt_f64(x),
        None => "nan".to_string(),
    }
}

// ---------------------------------------------------------------------------
// enum <-> string mappings shared by CLI flags and files

pub fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
        Activation::Identity => "identity",
    }
}

pub fn parse_activation(s: &str) -> Result<Activation> {
    Ok(match s {
        "relu" => Activation::Relu,
        "tanh" => Activation::Tanh,
        "identity" => Activation::Identity,
        other => bail!("unknown activation '{other}'"),
    })
}

pub fn loss_name(l: Loss) -> &'static str {
    match l {
        Loss::Mse => "mse",
        Loss::CrossEntropy => "cross_entropy",
    }
}

pub fn parse_loss(s: &str) -> Result<Loss> {
    Ok(match s {
        "mse" => Loss::Mse,
        "cross_entropy" => Loss::CrossEntropy,
        other => bail!("unknown loss '{other}'"),
    })
}

pub fn estimator_name(e: EstimatorKind) -> &'static str {
    match e {
        EstimatorKind::Diag => "diag",
        EstimatorKind::KfacRitter => "kfac-ritter",
        EstimatorKind::KfacExact => "kfac-exact",
        EstimatorKind::Efb => "efb",
        EstimatorKind::Inf => "inf",
    }
}

pub fn parse_estimator(s: &str) -> Result<EstimatorKind> {
    Ok(match s {
        "diag" => EstimatorKind::Diag,
        "kfac-ritter" => EstimatorKind::KfacRitter,
        "kfac-exact" => EstimatorKind::KfacExact,
        "efb" => EstimatorKind::Efb,
        "inf" => EstimatorKind::Inf,
        other => bail!("unknown estimator '{other}'"),
    })
}

pub fn policy_name(p: DegeneratePolicy) -> &'static str {
    match p {
        DegeneratePolicy::DeterministicDims => "deterministic-dims",
        DegeneratePolicy::Clip => "clip",
    }
}

pub fn parse_policy(s: &str) -> Result<DegeneratePolicy> {
    Ok(match s {
        "deterministic-dims" => DegeneratePolicy::DeterministicDims,
        "clip" => DegeneratePolicy::Clip,
        other => bail!("unknown degenerate policy '{other}'"),
    })
}

/// `full`, a fraction in `(0, 1]` (with a decimal point), or an integer count.
pub fn parse_rank(s: &str) -> Result<RankSpec> {
    if s == "full" {
        return Ok(RankSpec::Full);
    }
    if s.contains('.') {
        let f: f64 = s.parse().context("rank fraction")?;
        return Ok(RankSpec::Fraction(f));
    }
    let k: usize = s.parse().context("rank count")?;
    Ok(RankSpec::Count(k))
}

pub fn rank_name(r: RankSpec) -> String {
    match r {
        RankSpec::Full => "full".to_string(),
        RankSpec::Fraction(f) => format!("{f}"),
        RankSpec::Count(k) => format!("{k}"),
    }
}

// ---------------------------------------------------------------------------
// JSON building blocks

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatJson {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

impl MatJson {
    pub fn from_mat(m: &Mat) -> Self {
        Self { rows: m.rows(), cols: m.cols(), data: m.data().to_vec() }
    }

    pub fn to_mat(&self) -> Result<Mat> {
        if self.data.len() != self.rows * self.cols {
            bail!("matrix payload length {} != {}x{}", self.data.len(), self.rows, self.cols);
        }
        Ok(Mat::from_fn(self.rows, self.cols, |i, j| self.data[i * self.cols + j]))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecJson {
    pub layer_sizes: Vec<usize>,
    pub activation: String,
    pub loss: String,
}

impl SpecJson {
    pub fn from_spec(spec: &NetworkSpec) -> Self {
        Self {
            layer_sizes: spec.layer_sizes.clone(),
            activation: activation_name(spec.activation).to_string(),
            loss: loss_name(spec.loss).to_string(),
        }
    }

    pub fn to_spec(&self) -> Result<NetworkSpec> {
        Ok(NetworkSpec::new(
            self.layer_sizes.clone(),
            parse_activation(&self.activation)?,
            parse_loss(&self.loss)?,
        )?)
    }
}

// ---------------------------------------------------------------------------
// checkpoint

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub schema_version: u32,
    pub spec: SpecJson,
    /// Per-layer row-major `out × (in+1)` weight entries.
    pub weights: Vec<Vec<f64>>,
    pub seed: u64,
}

pub fn save_checkpoint(path: &Path, spec: &NetworkSpec, weights: &Weights, seed: u64) -> Result<()> {
    let file = CheckpointFile {
        schema_version: SCHEMA_VERSION,
        spec: SpecJson::from_spec(spec),
        weights: weights.layers().iter().map(|m| m.data().to_vec()).collect(),
        seed,
    };
    write_json(path, &file)
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkSpec, Weights, u64)> {
    let file: CheckpointFile = read_json(path)?;
    if file.schema_version != SCHEMA_VERSION {
        bail!("unsupported checkpoint schema {}", file.schema_version);
    }
    let spec = file.spec.to_spec()?;
    let mut layers = Vec::with_capacity(file.weights.len());
    for (l, flat) in file.weights.iter().enumerate() {
        let (fan_in, fan_out) = spec.layer_dims(l);
        let cols = fan_in + 1;
        if flat.len() != fan_out * cols {
            bail!("layer {l} weight payload has wrong length");
        }
        layers.push(Mat::from_fn(fan_out, cols, |i, j| flat[i * cols + j]));
    }
    let weights = Weights::from_layers(&spec, layers)?;
    Ok((spec, weights, file.seed))
}

// ---------------------------------------------------------------------------
// posterior container

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankJson {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl RankJson {
    pub fn from_rank(r: RankSpec) -> Self {
        match r {
            RankSpec::Full => Self { kind: "full".into(), value: None },
            RankSpec::Fraction(f) => Self { kind: "fraction".into(), value: Some(f) },
            RankSpec::Count(k) => Self { kind: "count".into(), value: Some(k as f64) },
        }
    }

    pub fn to_rank(&self) -> Result<RankSpec> {
        Ok(match self.kind.as_str() {
            "full" => RankSpec::Full,
            "fraction" => RankSpec::Fraction(self.value.context("fraction value")?),
            "count" => RankSpec::Count(self.value.context("count value")? as usize),
            other => bail!("unknown rank kind '{other}'"),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigJson {
    pub n_scale: f64,
    pub tau: f64,
    pub rank: RankJson,
    pub k_mc: usize,
    pub estimator: String,
    pub degenerate_policy: String,
}

impl ConfigJson {
    pub fn from_config(c: &PosteriorConfig) -> Self {
        Self {
            n_scale: c.n_scale,
            tau: c.tau,
            rank: RankJson::from_rank(c.rank),
            k_mc: c.k_mc,
            estimator: estimator_name(c.estimator).to_string(),
            degenerate_policy: policy_name(c.degenerate_policy).to_string(),
        }
    }

    pub fn to_config(&self) -> Result<PosteriorConfig> {
        Ok(PosteriorConfig {
            n_scale: self.n_scale,
            tau: self.tau,
            rank: self.rank.to_rank()?,
            k_mc: self.k_mc,
            estimator: parse_estimator(&self.estimator)?,
            degenerate_policy: parse_policy(&self.degenerate_policy)?,
        })
    }
}

/// Serialized `KronEigenbasis`: shapes, row-major arrays, sample count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenbasisJson {
    pub schema_version: u32,
    pub u_a: MatJson,
    pub u_g: MatJson,
    pub lambda: Vec<f64>,
    pub exact_diag: Vec<f64>,
    pub d: Vec<f64>,
    pub sample_count: usize,
}

impl EigenbasisJson {
    pub fn from_basis(b: &infoform::fisher::KronEigenbasis) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            u_a: MatJson::from_mat(&b.u_a),
            u_g: MatJson::from_mat(&b.u_g),
            lambda: b.lambda.clone(),
            exact_diag: b.exact_diag.clone(),
            d: b.d.clone(),
            sample_count: b.sample_count,
        }
    }

    pub fn to_basis(&self) -> Result<infoform::fisher::KronEigenbasis> {
        Ok(infoform::fisher::KronEigenbasis {
            u_a: self.u_a.to_mat()?,
            u_g: self.u_g.to_mat()?,
            lambda: self.lambda.clone(),
            exact_diag: self.exact_diag.clone(),
            d: self.d.clone(),
            sample_count: self.sample_count,
        })
    }
}

/// Serialized `SparseInfoForm`: the eigenbasis container plus kept-index
/// bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseFormJson {
    pub schema_version: u32,
    pub u_a: MatJson,
    pub u_g: MatJson,
    pub lambda_l: Vec<f64>,
    pub d: Vec<f64>,
    pub exact_diag: Vec<f64>,
    pub kept_a: Vec<usize>,
    pub kept_g: Vec<usize>,
    pub k_requested: usize,
    pub active: Vec<usize>,
    pub sample_count: usize,
}

impl SparseFormJson {
    pub fn from_form(f: &SparseInfoForm, sample_count: usize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            u_a: MatJson::from_mat(&f.u_a),
            u_g: MatJson::from_mat(&f.u_g),
            lambda_l: f.lambda_l.clone(),
            d: f.d.clone(),
            exact_diag: f.exact_diag.clone(),
            kept_a: f.kept_a.clone(),
            kept_g: f.kept_g.clone(),
            k_requested: f.k_requested,
            active: f.active.clone(),
            sample_count,
        }
    }

    pub fn to_form(&self) -> Result<SparseInfoForm> {
        Ok(SparseInfoForm {
            u_a: self.u_a.to_mat()?,
            u_g: self.u_g.to_mat()?,
            lambda_l: self.lambda_l.clone(),
            d: self.d.clone(),
            exact_diag: self.exact_diag.clone(),
            kept_a: self.kept_a.clone(),
            kept_g: self.kept_g.clone(),
            k_requested: self.k_requested,
            active: self.active.clone(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerEstimateJson {
    #[serde(rename = "diag")]
    Diag { fisher_diag: Vec<f64>, sample_count: usize },
    #[serde(rename = "kfac")]
    Kfac { a: MatJson, g: MatJson, sample_count: usize },
    #[serde(rename = "efb")]
    Efb { basis: EigenbasisJson },
    #[serde(rename = "inf")]
    Inf { form: SparseFormJson },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorFile {
    pub schema_version: u32,
    pub spec: SpecJson,
    pub config: ConfigJson,
    pub sigma_alea: f64,
    pub seed: u64,
    /// Per-layer row-major MAP weights, identical layout to the checkpoint.
    pub map_weights: Vec<Vec<f64>>,
    pub layers: Vec<LayerEstimateJson>,
}

pub fn save_posterior(path: &Path, file: &PosteriorFile) -> Result<()> {
    write_json(path, file)
}

pub fn load_posterior(path: &Path) -> Result<PosteriorFile> {
    let file: PosteriorFile = read_json(path)?;
    if file.schema_version != SCHEMA_VERSION {
        bail!("unsupported posterior schema {}", file.schema_version);
    }
    Ok(file)
}

pub fn weights_from_flat(spec: &NetworkSpec, flat: &[Vec<f64>]) -> Result<Weights> {
    let mut layers = Vec::with_capacity(flat.len());
    for (l, data) in flat.iter().enumerate() {
        let (fan_in, fan_out) = spec.layer_dims(l);
        let cols = fan_in + 1;
        if data.len() != fan_out * cols {
            bail!("layer {l} weight payload has wrong length");
        }
        layers.push(Mat::from_fn(fan_out, cols, |i, j| data[i * cols + j]));
    }
    Ok(Weights::from_layers(spec, layers)?)
}

// ---------------------------------------------------------------------------
// dataset CSV

/// Write `x_0..x_{d-1},y` (regression) or `x_0..x_{d-1},label` rows.
pub fn save_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {path:?}"))?;
    let d = data.inputs.cols();
    let mut header: Vec<String> = (0..d).map(|j| format!("x_{j}")).collect();
    let classification = matches!(data.targets.first(), Some(Target::Class(_)));
    header.push(if classification { "label".into() } else { "y".into() });
    w.write_record(&header)?;
    for t in 0..data.len() {
        let mut rec: Vec<String> = data.inputs.row(t).iter().map(|&v| fmt_f64(v)).collect();
        match &data.targets[t] {
            Target::Value(v) => {
                if v.len() != 1 {
                    bail!("dataset CSV supports scalar regression targets");
                }
                rec.push(fmt_f64(v[0]));
            }
            Target::Class(c) => rec.push(format!("{c}")),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {path:?}"))?;
    let headers = r.headers()?.clone();
    if headers.is_empty() {
        bail!("dataset CSV has no header");
    }
    let last = headers.iter().last().unwrap().to_string();
    let classification = match last.as_str() {
        "label" => true,
        "y" => false,
        other => bail!("last column must be 'y' or 'label', got '{other}'"),
    };
    let d = headers.len() - 1;
    for (j, h) in headers.iter().take(d).enumerate() {
        if h != format!("x_{j}") {
            bail!("unexpected feature column '{h}', wanted 'x_{j}'");
        }
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<Target> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != d + 1 {
            bail!("row has {} fields, expected {}", rec.len(), d + 1);
        }
        let mut x = Vec::with_capacity(d);
        for j in 0..d {
            x.push(rec[j].parse::<f64>().with_context(|| format!("field x_{j}"))?);
        }
        rows.push(x);
        if classification {
            targets.push(Target::Class(rec[d].parse::<usize>().context("label")?));
        } else {
            targets.push(Target::Value(vec![rec[d].parse::<f64>().context("target")?]));
        }
    }
    let inputs = if rows.is_empty() {
        Mat::zeros(0, d)
    } else {
        Mat::from_rows(&rows)?
    };
    Ok(Dataset::new(inputs, targets)?)
}

// ---------------------------------------------------------------------------
// generic JSON helpers

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut out = serde_json::to_string_pretty(value)?;
    out.push('\n');
    fs::write(path, out).with_context(|| format!("writing {path:?}"))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {path:?}"))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn checkpoint_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let spec =
            NetworkSpec::new(vec![2, 3, 1], Activation::Tanh, Loss::Mse).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let weights = Weights::random_init(&spec, &mut rng);
        save_checkpoint(&path, &spec, &weights, 42).unwrap();
        let (spec2, weights2, seed) = load_checkpoint(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(seed, 42);
        for (a, b) in weights.layers().iter().zip(weights2.layers()) {
            assert_eq!(a.data(), b.data(), "bitwise weight round-trip");
        }
    }

    #[test]
    fn dataset_csv_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| vec![rng.random_range(-4.0..4.0), rng.random::<f64>() * 1e-17])
            .collect();
        let targets = rows.iter().map(|r| Target::Value(vec![r[0] * 3.0 + 1e-13])).collect();
        let data = Dataset::new(Mat::from_rows(&rows).unwrap(), targets).unwrap();
        save_dataset_csv(&path, &data).unwrap();
        let loaded = load_dataset_csv(&path).unwrap();
        assert_eq!(data.inputs.data(), loaded.inputs.data());
        assert_eq!(data.targets, loaded.targets);
    }

    #[test]
    fn classification_csv_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let rows = vec![vec![0.1, 0.2], vec![0.3, -0.4]];
        let targets = vec![Target::Class(0), Target::Class(2)];
        let data = Dataset::new(Mat::from_rows(&rows).unwrap(), targets).unwrap();
        save_dataset_csv(&path, &data).unwrap();
        let loaded = load_dataset_csv(&path).unwrap();
        assert_eq!(data.targets, loaded.targets);
    }

    #[test]
    fn rank_parsing() {
        assert_eq!(parse_rank("full").unwrap(), RankSpec::Full);
        assert_eq!(parse_rank("0.5").unwrap(), RankSpec::Fraction(0.5));
        assert_eq!(parse_rank("7").unwrap(), RankSpec::Count(7));
        assert!(parse_rank("x").is_err());
    }

    #[test]
    fn f64_formatting_roundtrips() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v: f64 = rng.random_range(-1e6..1e6) * rng.random::<f64>();
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{s}");
        }
    }
}
