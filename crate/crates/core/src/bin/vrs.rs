//! Command-line front end. Flags override values from an optional flat
//! `key=value` config file; every run is deterministic given `--seed`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vrs_core::cli::{
    self, cmd_eval, cmd_grid_kl, cmd_toy_poisson, cmd_train_sbn, parse_config_file,
    parse_threshold_list, CliError, ConfigMap, DataSource, EvalOpts, GridKlOpts, ToyPoissonOpts,
    TrainSbnOpts,
};
use vrs_core::data::BinarizeMode;
use vrs_core::train::OptimizerKind;

#[derive(Parser)]
#[command(
    name = "vrs",
    about = "Variational rejection sampling: resampled-proposal training and evaluation for discrete latent variable models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact partition/divergence/bound sweep over thresholds on the built-in 5x5 grid fixture.
    GridKl(GridKlArgs),
    /// Fit a Poisson proposal's log-rate to the truncated-Poisson target at a fixed threshold.
    ToyPoisson(ToyPoissonArgs),
    /// Train a sigmoid belief network on binarized images.
    TrainSbn(TrainSbnArgs),
    /// Evaluate held-out lower bounds (importance-sampled and resampled) from a checkpoint.
    Eval(EvalArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value config file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Attempt cap per accepted sample.
    #[arg(long)]
    max_attempts: Option<u32>,
    /// Output directory for CSV/checkpoint files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl CommonArgs {
    fn config_map(&self) -> Result<ConfigMap, CliError> {
        match &self.config {
            Some(path) => parse_config_file(path),
            None => Ok(ConfigMap::new()),
        }
    }
}

#[derive(Args)]
struct GridKlArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated thresholds; `inf` disables rejection.
    #[arg(long = "T", allow_hyphen_values = true)]
    thresholds: Option<String>,
}

#[derive(Args)]
struct ToyPoissonArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<u32>,
    /// Fixed threshold used for the whole run.
    #[arg(long = "T", allow_negative_numbers = true)]
    threshold: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Accepted samples per gradient estimate.
    #[arg(long = "S")]
    cov_samples: Option<usize>,
    /// Initial log-rate.
    #[arg(long, allow_negative_numbers = true)]
    phi0: Option<f64>,
}

#[derive(Args)]
struct TrainSbnArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// IDX image file, or `synthetic[:COUNT]` for the built-in corpus.
    #[arg(long)]
    data_images: Option<String>,
    /// Optional IDX label file (propagated into the dataset, unused by training).
    #[arg(long)]
    data_labels: Option<PathBuf>,
    /// Pixel binarization: threshold | sample.
    #[arg(long)]
    binarize: Option<String>,
    /// Train on the first N images only.
    #[arg(long)]
    subset: Option<usize>,
    /// Comma-separated hidden layer sizes, bottom-up.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Accepted samples per datapoint per gradient estimate.
    #[arg(long = "S")]
    cov_samples: Option<usize>,
    /// Proposal draws per datapoint for quantile estimation.
    #[arg(long = "N")]
    quantile_samples: Option<usize>,
    /// Optimizer steps between threshold refreshes (default: once per epoch).
    #[arg(long)]
    refresh_steps: Option<u64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// sgd | adam
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint produced by train-sbn.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data_images: Option<String>,
    #[arg(long)]
    data_labels: Option<PathBuf>,
    #[arg(long)]
    binarize: Option<String>,
    /// Evaluate the first N images only.
    #[arg(long)]
    subset: Option<usize>,
    /// Importance-sampling draws per example.
    #[arg(long)]
    eval_k: Option<usize>,
    /// Accepted samples per example for the resampled bound.
    #[arg(long)]
    eval_accepted: Option<usize>,
    /// Raw draws for the partition-function estimate.
    #[arg(long)]
    zr_samples: Option<usize>,
}

fn parse_binarize(raw: &str, seed: u64) -> Result<BinarizeMode, CliError> {
    match raw {
        "threshold" => Ok(BinarizeMode::Threshold),
        "sample" => Ok(BinarizeMode::Sample { seed }),
        other => Err(CliError::Config(format!(
            "binarize must be threshold or sample, got {other:?}"
        ))),
    }
}

fn parse_optimizer(
    kind: &str,
    lr: f64,
    momentum: f64,
) -> Result<OptimizerKind, CliError> {
    match kind {
        "sgd" => Ok(OptimizerKind::sgd_momentum(lr, momentum)),
        "adam" => Ok(OptimizerKind::adam(lr)),
        other => Err(CliError::Config(format!(
            "optimizer must be sgd or adam, got {other:?}"
        ))),
    }
}

fn parse_hidden(raw: &str) -> Result<Vec<usize>, CliError> {
    let dims: Vec<usize> = raw
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("bad hidden size {s:?}")))
        })
        .collect::<Result<_, _>>()?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(CliError::Config(format!("bad hidden spec {raw:?}")));
    }
    Ok(dims)
}

fn run(cli: Cli) -> Result<(), CliError> {
    use vrs_core::cli::{resolve as get, resolve_opt as get_opt};
    match cli.command {
        Command::GridKl(args) => {
            let cfg = args.common.config_map()?;
            let raw = match args.thresholds {
                Some(t) => t,
                None => cfg
                    .get("T")
                    .cloned()
                    .ok_or_else(|| CliError::Config("grid-kl needs --T".into()))?,
            };
            let opts = GridKlOpts {
                thresholds: parse_threshold_list(&raw)?,
                out_dir: args.common.out_dir.clone(),
            };
            let csv = cmd_grid_kl(&opts)?;
            print!("{csv}");
            Ok(())
        }
        Command::ToyPoisson(args) => {
            let cfg = args.common.config_map()?;
            let defaults = ToyPoissonOpts::default();
            let opts = ToyPoissonOpts {
                steps: get(args.steps, &cfg, "steps", defaults.steps)?,
                threshold: get(args.threshold, &cfg, "T", defaults.threshold)?,
                lr: get(args.lr, &cfg, "lr", defaults.lr)?,
                momentum: get(args.momentum, &cfg, "momentum", defaults.momentum)?,
                cov_samples: get(args.cov_samples, &cfg, "S", defaults.cov_samples)?,
                phi0: get(args.phi0, &cfg, "phi0", defaults.phi0)?,
                seed: get(args.common.seed, &cfg, "seed", defaults.seed)?,
                max_attempts: get(
                    args.common.max_attempts,
                    &cfg,
                    "max-attempts",
                    defaults.max_attempts,
                )?,
                out_dir: args.common.out_dir.clone(),
            };
            let outcome = cmd_toy_poisson(&opts)?;
            println!(
                "final phi {:.6} (target {:.6}); acceptance {:.4} -> {:.4}",
                outcome.final_phi,
                10f64.ln(),
                outcome.accept_rate_first_decile,
                outcome.accept_rate_last_decile
            );
            if opts.out_dir.is_none() {
                print!("{}", outcome.csv);
            }
            Ok(())
        }
        Command::TrainSbn(args) => {
            let cfg = args.common.config_map()?;
            let seed = get(args.common.seed, &cfg, "seed", 0)?;
            let data_raw = match args.data_images {
                Some(d) => d,
                None => cfg
                    .get("data-images")
                    .cloned()
                    .ok_or_else(|| CliError::Config("train-sbn needs --data-images".into()))?,
            };
            let binarize_raw = get(args.binarize, &cfg, "binarize", "threshold".to_string())?;
            let hidden_raw = get(args.hidden, &cfg, "hidden", "200".to_string())?;
            let optimizer_raw = get(args.optimizer, &cfg, "optimizer", "adam".to_string())?;
            let lr = get(args.lr, &cfg, "lr", 3e-4)?;
            let momentum = get(args.momentum, &cfg, "momentum", 0.5)?;
            let opts = TrainSbnOpts {
                data: DataSource::parse(&data_raw, args.data_labels.clone(), seed)?,
                binarize: parse_binarize(&binarize_raw, seed)?,
                subset: get_opt(args.subset, &cfg, "subset")?,
                hidden: parse_hidden(&hidden_raw)?,
                gamma: get(args.gamma, &cfg, "gamma", 0.9)?,
                cov_samples: get(args.cov_samples, &cfg, "S", 5)?,
                quantile_samples: get(args.quantile_samples, &cfg, "N", 50)?,
                refresh_steps: get_opt(args.refresh_steps, &cfg, "refresh-steps")?,
                epochs: get(args.epochs, &cfg, "epochs", 5)?,
                batch_size: get(args.batch_size, &cfg, "batch-size", 50)?,
                optimizer: parse_optimizer(&optimizer_raw, lr, momentum)?,
                seed,
                max_attempts: get(args.common.max_attempts, &cfg, "max-attempts", 10_000)?,
                out_dir: args
                    .common
                    .out_dir
                    .clone()
                    .or_else(|| cfg.get("out-dir").map(PathBuf::from))
                    .ok_or_else(|| CliError::Config("train-sbn needs --out-dir".into()))?,
            };
            let outcome = cmd_train_sbn(&opts)?;
            println!(
                "trained; signal slope {:.6}, acceptance {:.4} -> {:.4}",
                outcome.signal_slope,
                outcome.accept_rate_first_decile,
                outcome.accept_rate_last_decile
            );
            println!("metrics: {}", outcome.metrics_path.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            Ok(())
        }
        Command::Eval(args) => {
            let cfg = args.common.config_map()?;
            let seed = get(args.common.seed, &cfg, "seed", 0)?;
            let checkpoint = args
                .checkpoint
                .or_else(|| cfg.get("checkpoint").map(PathBuf::from))
                .ok_or_else(|| CliError::Config("eval needs --checkpoint".into()))?;
            let data_raw = match args.data_images {
                Some(d) => d,
                None => cfg
                    .get("data-images")
                    .cloned()
                    .ok_or_else(|| CliError::Config("eval needs --data-images".into()))?,
            };
            let binarize_raw = get(args.binarize, &cfg, "binarize", "threshold".to_string())?;
            let opts = EvalOpts {
                checkpoint,
                data: DataSource::parse(&data_raw, args.data_labels.clone(), seed)?,
                binarize: parse_binarize(&binarize_raw, seed)?,
                subset: get_opt(args.subset, &cfg, "subset")?,
                eval_k: get(args.eval_k, &cfg, "eval-k", 25)?,
                eval_accepted: get(args.eval_accepted, &cfg, "eval-accepted", 25)?,
                zr_samples: get(args.zr_samples, &cfg, "zr-samples", 100)?,
                seed,
                max_attempts: get(args.common.max_attempts, &cfg, "max-attempts", 10_000)?,
                out_dir: args.common.out_dir.clone(),
            };
            let outcome = cmd_eval(&opts)?;
            println!(
                "mean negative bound: IS {:.4}, RS {:.4} over {} examples",
                outcome.mean_neg_is,
                outcome.mean_neg_rs,
                outcome.rows.len()
            );
            if opts.out_dir.is_none() {
                print!("{}", outcome.csv);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(cli::EXIT_OK as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
