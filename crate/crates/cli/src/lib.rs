//! Command-line front end for the sparse information-form posterior library:
//! dataset generation, MAP training, posterior construction across estimator
//! families, sampling, prediction, rank and hyperparameter sweeps, active
//! learning, and the theorem-verification gate. This crate owns every file
//! format; the math lives in the `infoform` core crate.

pub mod commands;
pub mod formats;
pub mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{
    ActiveLearnParams, PosteriorParams, PredictInputs, PredictParams, RunParams, Strategy,
    TrainParams,
};
use infoform::verify::VerifyConfig;

#[derive(Parser)]
#[command(name = "infoform", version, about = "Sparse information-form posteriors for small networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the cubic toy regression dataset.
    GenToy(GenToyArgs),
    /// Train a fully-connected network to its MAP estimate.
    Train(TrainArgs),
    /// Build a posterior container from a checkpoint and dataset.
    Posterior(PosteriorArgs),
    /// Draw parameter samples from a posterior container.
    Sample(SampleArgs),
    /// Predictive means and uncertainties on a grid or dataset.
    Predict(PredictArgs),
    /// Normalized Frobenius errors across estimators and ranks.
    SweepRank(SweepRankArgs),
    /// Log-grid sweep over the (N, tau) hyperparameters.
    SweepHyper(SweepHyperArgs),
    /// Active learning on the toy task: variance vs random acquisition.
    ActiveLearn(ActiveLearnArgs),
    /// Run the theorem suite; nonzero exit on any violation.
    Verify(VerifyArgs),
    /// Full pipeline: data -> train -> posterior -> predictions -> metrics.
    Run(RunArgs),
}

#[derive(Args)]
pub struct GenToyArgs {
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub n_points: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated layer sizes, e.g. 1,7,1.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, default_value = "relu")]
    pub activation: String,
    #[arg(long, default_value = "mse")]
    pub loss: String,
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

impl TrainArgs {
    fn params(&self) -> TrainParams {
        TrainParams {
            layer_sizes: self.layers.clone(),
            activation: self.activation.clone(),
            loss: self.loss.clone(),
            optimizer: self.optimizer.clone(),
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Args)]
pub struct PosteriorArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// diag | kfac-ritter | kfac-exact | efb | inf
    #[arg(long, default_value = "inf")]
    pub estimator: String,
    #[arg(long, default_value_t = 1.0)]
    pub n_scale: f64,
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    /// full, a fraction like 0.5, or an integer count.
    #[arg(long, default_value = "full")]
    pub rank: String,
    #[arg(long, default_value_t = 100)]
    pub k_mc: usize,
    /// deterministic-dims | clip
    #[arg(long, default_value = "deterministic-dims")]
    pub degenerate_policy: String,
    /// model-sampled | empirical
    #[arg(long, default_value = "model-sampled")]
    pub fisher_mode: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

impl PosteriorArgs {
    fn params(&self) -> PosteriorParams {
        PosteriorParams {
            estimator: self.estimator.clone(),
            n_scale: self.n_scale,
            tau: self.tau,
            rank: self.rank.clone(),
            k_mc: self.k_mc,
            degenerate_policy: self.degenerate_policy.clone(),
            fisher_mode: self.fisher_mode.clone(),
        }
    }
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub posterior: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub num: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub posterior: PathBuf,
    /// Input dataset CSV (mutually exclusive with --grid).
    #[arg(long, conflicts_with = "grid")]
    pub data: Option<PathBuf>,
    /// 1-d input grid lo:hi:steps.
    #[arg(long)]
    pub grid: Option<String>,
    /// linearized | mc
    #[arg(long, default_value = "linearized")]
    pub mode: String,
    #[arg(long)]
    pub k_mc: Option<usize>,
    /// Override the stored aleatoric std.
    #[arg(long)]
    pub sigma_alea: Option<f64>,
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    /// Reliability-diagram bins CSV (classification).
    #[arg(long)]
    pub bins_out: Option<PathBuf>,
    /// Normalized-entropy histogram CSV (classification).
    #[arg(long)]
    pub entropy_hist_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Args)]
pub struct SweepRankArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated rank fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75, 1.0])]
    pub ranks: Vec<f64>,
    #[arg(long, default_value = "model-sampled")]
    pub fisher_mode: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Args)]
pub struct SweepHyperArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "inf")]
    pub estimator: String,
    #[arg(long, default_value = "full")]
    pub rank: String,
    /// Log grid lo:hi:steps for the pseudo-observation scale N.
    #[arg(long, default_value = "1:1000:4")]
    pub n_grid: String,
    /// Log grid lo:hi:steps for the prior precision tau.
    #[arg(long, default_value = "0.001:100:4")]
    pub tau_grid: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Args)]
pub struct ActiveLearnArgs {
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// variance | random | both
    #[arg(long, default_value = "both")]
    pub strategy: String,
    #[arg(long, default_value = "full")]
    pub rank: String,
    #[arg(long, default_value_t = 140)]
    pub n_points: usize,
    #[arg(long, default_value_t = 12)]
    pub initial_train: usize,
    #[arg(long, default_value_t = 60)]
    pub test_size: usize,
    #[arg(long, default_value_t = 400)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 16)]
    pub max_width: usize,
    #[arg(long, default_value_t = 8)]
    pub min_batch: usize,
    #[arg(long, default_value_t = 256)]
    pub max_batch: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Test-only: corrupt the diagonal correction so checks must fail.
    #[arg(long, hide = true, default_value_t = false)]
    pub inject_fault: bool,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Args)]
pub struct RunArgs {
    /// Dataset CSV; omitted = generate the builtin toy set.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub toy_points: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 7, 1])]
    pub layers: Vec<usize>,
    #[arg(long, default_value = "relu")]
    pub activation: String,
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long, default_value_t = 5e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 8000)]
    pub epochs: usize,
    #[arg(long, default_value = "inf")]
    pub estimator: String,
    #[arg(long, default_value_t = 1.0)]
    pub n_scale: f64,
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    #[arg(long, default_value = "full")]
    pub rank: String,
    #[arg(long, default_value_t = 100)]
    pub k_mc: usize,
    #[arg(long, default_value = "deterministic-dims")]
    pub degenerate_policy: String,
    #[arg(long, default_value = "model-sampled")]
    pub fisher_mode: String,
    /// Prediction grid lo:hi:steps.
    #[arg(long, default_value = "-6:6:121")]
    pub grid: String,
    /// Output directory (env INFOFORM_OUT_DIR overrides).
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

/// Dispatch a parsed command; returns the process exit code.
pub fn run_cli(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenToy(a) => {
            commands::gen_toy(&a.out, a.seed, a.n_points)?;
            Ok(0)
        }
        Command::Train(a) => {
            commands::cmd_train(&a.data, &a.params(), &a.out, a.seed)?;
            Ok(0)
        }
        Command::Posterior(a) => {
            commands::cmd_posterior(&a.checkpoint, &a.data, &a.params(), &a.out, a.seed)?;
            Ok(0)
        }
        Command::Sample(a) => {
            commands::cmd_sample(&a.posterior, a.num, &a.out, a.seed)?;
            Ok(0)
        }
        Command::Predict(a) => {
            let inputs = match (&a.data, &a.grid) {
                (Some(path), None) => PredictInputs::Csv(path.clone()),
                (None, Some(grid)) => {
                    let (lo, hi, steps) = commands::parse_grid(grid)?;
                    PredictInputs::Grid { lo, hi, steps }
                }
                _ => anyhow::bail!("predict needs exactly one of --data or --grid"),
            };
            let params = PredictParams {
                mode: a.mode.clone(),
                k_mc: a.k_mc,
                sigma_alea: a.sigma_alea,
                metrics_out: a.metrics_out.clone(),
                bins_out: a.bins_out.clone(),
                entropy_hist_out: a.entropy_hist_out.clone(),
            };
            commands::cmd_predict(&a.posterior, &inputs, &params, &a.out, a.seed)?;
            Ok(0)
        }
        Command::SweepRank(a) => {
            commands::cmd_sweep_rank(&a.checkpoint, &a.data, &a.ranks, &a.fisher_mode, &a.out, a.seed)?;
            Ok(0)
        }
        Command::SweepHyper(a) => {
            commands::cmd_sweep_hyper(
                &a.checkpoint,
                &a.data,
                &a.estimator,
                &a.rank,
                commands::parse_grid(&a.n_grid)?,
                commands::parse_grid(&a.tau_grid)?,
                &a.out,
                a.seed,
            )?;
            Ok(0)
        }
        Command::ActiveLearn(a) => {
            let strategies = match a.strategy.as_str() {
                "variance" => vec![Strategy::Variance],
                "random" => vec![Strategy::Random],
                "both" => vec![Strategy::Variance, Strategy::Random],
                other => anyhow::bail!("unknown strategy '{other}'"),
            };
            let params = ActiveLearnParams {
                n_points: a.n_points,
                initial_train: a.initial_train,
                test_size: a.test_size,
                iterations: a.iterations,
                seeds: a.seeds,
                rank: formats::parse_rank(&a.rank)?,
                n_scale_is_train_size: true,
                tau: a.tau,
                epochs: a.epochs,
            };
            commands::cmd_active_learn(&params, &strategies, &a.out, a.seed)?;
            Ok(0)
        }
        Command::Verify(a) => {
            let cfg = VerifyConfig {
                trials: a.trials,
                max_width: a.max_width,
                min_batch: a.min_batch,
                max_batch: a.max_batch,
                inject_fault: a.inject_fault,
                ..VerifyConfig::default()
            };
            let report = commands::cmd_verify(&cfg, a.seed, a.out.as_deref(), a.csv.as_deref())?;
            Ok(if report.all_passed() { 0 } else { 1 })
        }
        Command::Run(a) => {
            let params = RunParams {
                data: a.data.clone(),
                toy_points: a.toy_points,
                train: TrainParams {
                    layer_sizes: a.layers.clone(),
                    activation: a.activation.clone(),
                    loss: "mse".to_string(),
                    optimizer: a.optimizer.clone(),
                    learning_rate: a.learning_rate,
                    epochs: a.epochs,
                    batch_size: None,
                    weight_decay: 0.0,
                },
                posterior: PosteriorParams {
                    estimator: a.estimator.clone(),
                    n_scale: a.n_scale,
                    tau: a.tau,
                    rank: a.rank.clone(),
                    k_mc: a.k_mc,
                    degenerate_policy: a.degenerate_policy.clone(),
                    fisher_mode: a.fisher_mode.clone(),
                },
                grid: commands::parse_grid(&a.grid)?,
                out_dir: a.out_dir.clone(),
            };
            let dir = commands::cmd_run(&params, a.seed)?;
            println!("pipeline artifacts in {}", dir.display());
            Ok(0)
        }
    }
}
