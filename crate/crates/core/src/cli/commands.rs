//! The four experiment drivers. Each returns its primary output as a value
//! (CSV text plus summary numbers) and optionally writes files under an
//! output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::CliError;
use crate::data::{binarize_images, ingest_idx, synthetic_digits, BinarizeMode, Dataset};
use crate::dist::{
    GenerativeSbn, GridTarget, PoissonProposal, RecognitionSbn, TruncatedPoissonTarget,
    UniformProposal,
};
use crate::oracle::{self, EnumerableSpace};
use crate::resample::ResampledProposal;
use crate::rng::{derive_rng, mix, stream};
use crate::threshold::{estimate_threshold, format_threshold};
use crate::train::{
    eval_is_bound, eval_rs_bound, Checkpoint, OptimizerKind, TrainConfig, Trainer,
};

const SYNTHETIC_SIDE: usize = 28;

/// Where images come from: an IDX file pair, or the built-in deterministic
/// synthetic corpus.
#[derive(Debug, Clone)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: Option<PathBuf>,
    },
    Synthetic {
        count: usize,
        seed: u64,
    },
}

impl DataSource {
    /// `synthetic` or `synthetic:COUNT` select the built-in corpus; anything
    /// else is an IDX image path.
    pub fn parse(raw: &str, labels: Option<PathBuf>, seed: u64) -> Result<Self, CliError> {
        if raw == "synthetic" {
            return Ok(DataSource::Synthetic { count: 1100, seed });
        }
        if let Some(count) = raw.strip_prefix("synthetic:") {
            let count = count
                .parse()
                .map_err(|_| CliError::Config(format!("bad synthetic count {count:?}")))?;
            return Ok(DataSource::Synthetic { count, seed });
        }
        Ok(DataSource::Idx {
            images: PathBuf::from(raw),
            labels,
        })
    }

    pub fn load(&self, binarize: BinarizeMode) -> Result<Dataset, CliError> {
        match self {
            DataSource::Idx { images, labels } => {
                Ok(ingest_idx(images, labels.as_deref(), binarize)?)
            }
            DataSource::Synthetic { count, seed } => {
                let raw = synthetic_digits(*count, SYNTHETIC_SIDE, *seed);
                Ok(Dataset {
                    images: binarize_images(&raw, binarize),
                    rows: SYNTHETIC_SIDE,
                    cols: SYNTHETIC_SIDE,
                    labels: None,
                    source: format!("synthetic:{count}"),
                    binarize,
                })
            }
        }
    }
}

fn write_out(dir: Option<&Path>, name: &str, text: &str) -> Result<Option<PathBuf>, CliError> {
    let Some(dir) = dir else {
        return Ok(None);
    };
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    Ok(Some(path))
}

// ---------------------------------------------------------------------------
// grid-kl

#[derive(Debug, Clone)]
pub struct GridKlOpts {
    pub thresholds: Vec<f64>,
    pub out_dir: Option<PathBuf>,
}

/// Exact partition function, divergence to the posterior, and bound value of
/// the built-in 5x5 fixture under a uniform proposal, one row per threshold.
pub fn cmd_grid_kl(opts: &GridKlOpts) -> Result<String, CliError> {
    if opts.thresholds.is_empty() {
        return Err(CliError::Config("grid-kl needs at least one threshold".into()));
    }
    let target = GridTarget::two_mode_5x5();
    let proposal = UniformProposal::new(target.n_cells());
    let space = EnumerableSpace::grid(target.side());
    let mut csv = String::from("schema_version,T,exact_ZR,exact_KL,exact_RELBO\n");
    for &threshold in &opts.thresholds {
        let rp = ResampledProposal::new(&proposal, &target, threshold);
        let zr = oracle::exact_zr(&rp, &[], &space)?;
        let kl = oracle::exact_kl_resampled_posterior(&rp, &[], &space)?;
        let relbo = oracle::exact_relbo(&rp, &[], &space)?;
        writeln!(
            csv,
            "1,{},{zr},{kl},{relbo}",
            format_threshold(threshold)
        )
        .expect("string write");
    }
    write_out(opts.out_dir.as_deref(), "grid_kl.csv", &csv)?;
    Ok(csv)
}

// ---------------------------------------------------------------------------
// toy-poisson

#[derive(Debug, Clone)]
pub struct ToyPoissonOpts {
    pub steps: u32,
    pub threshold: f64,
    pub lr: f64,
    pub momentum: f64,
    pub cov_samples: usize,
    pub phi0: f64,
    pub seed: u64,
    pub max_attempts: u32,
    pub out_dir: Option<PathBuf>,
}

impl Default for ToyPoissonOpts {
    fn default() -> Self {
        // The synthetic experiment settings: fixed threshold 50, SGD with
        // momentum 0.5, learning rate 0.01, started at log 4.
        ToyPoissonOpts {
            steps: 20_000,
            threshold: 50.0,
            lr: 0.01,
            momentum: 0.5,
            cov_samples: 10,
            phi0: 4f64.ln(),
            seed: 0,
            max_attempts: 10_000,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyPoissonOutcome {
    pub final_phi: f64,
    pub accept_rate_first_decile: f64,
    pub accept_rate_last_decile: f64,
    pub csv: String,
}

/// Fits the log-rate of a Poisson proposal to the truncated-Poisson target
/// with a fixed threshold, logging one CSV row per step.
pub fn cmd_toy_poisson(opts: &ToyPoissonOpts) -> Result<ToyPoissonOutcome, CliError> {
    let config = TrainConfig {
        gamma: 0.9,
        refresh_steps: 1,
        quantile_samples: 1,
        cov_samples: opts.cov_samples,
        epochs: opts.steps,
        batch_size: 1,
        optimizer: OptimizerKind::sgd_momentum(opts.lr, opts.momentum),
        seed: opts.seed,
        max_attempts: opts.max_attempts,
        fixed_threshold: Some(opts.threshold),
    };
    let dataset: Vec<Vec<u8>> = vec![vec![]];
    let mut trainer = Trainer::new(
        TruncatedPoissonTarget::standard(),
        PoissonProposal::new(opts.phi0),
        config,
        dataset.len(),
    )?;

    let mut csv =
        String::from("schema_version,step,phi,signal_mean,accept_rate,attempts,grad_phi_norm\n");
    for _ in 0..opts.steps {
        trainer.run_epoch(&dataset)?;
        let r = trainer.metrics().records().last().expect("one record per step");
        writeln!(
            csv,
            "1,{},{},{},{},{},{}",
            r.step,
            trainer.proposal().phi(),
            r.signal_mean,
            r.accept_rate,
            r.attempts,
            r.grad_norm_phi
        )
        .expect("string write");
    }
    let (first, last) = trainer.metrics().accept_rate_trend(0.1);
    write_out(opts.out_dir.as_deref(), "toy_poisson.csv", &csv)?;
    Ok(ToyPoissonOutcome {
        final_phi: trainer.proposal().phi(),
        accept_rate_first_decile: first,
        accept_rate_last_decile: last,
        csv,
    })
}

// ---------------------------------------------------------------------------
// train-sbn

#[derive(Debug, Clone)]
pub struct TrainSbnOpts {
    pub data: DataSource,
    pub binarize: BinarizeMode,
    /// Train on the first `n` images when set.
    pub subset: Option<usize>,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub cov_samples: usize,
    pub quantile_samples: usize,
    /// Steps between threshold refreshes; `None` refreshes once per epoch.
    pub refresh_steps: Option<u64>,
    pub epochs: u32,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub max_attempts: u32,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct TrainSbnOutcome {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub thresholds_path: PathBuf,
    pub signal_slope: f64,
    pub accept_rate_first_decile: f64,
    pub accept_rate_last_decile: f64,
    pub final_signal_mean: f64,
}

/// Trains a belief net on binarized images, checkpointing every epoch.
pub fn cmd_train_sbn(opts: &TrainSbnOpts) -> Result<TrainSbnOutcome, CliError> {
    let dataset = opts.data.load(opts.binarize)?;
    let dataset = match opts.subset {
        Some(n) => dataset.take(n),
        None => dataset,
    };
    if dataset.is_empty() {
        return Err(CliError::Config("training dataset is empty".into()));
    }
    let steps_per_epoch = dataset.len().div_ceil(opts.batch_size.max(1)) as u64;
    let config = TrainConfig {
        gamma: opts.gamma,
        refresh_steps: opts.refresh_steps.unwrap_or(steps_per_epoch),
        quantile_samples: opts.quantile_samples,
        cov_samples: opts.cov_samples,
        epochs: opts.epochs,
        batch_size: opts.batch_size,
        optimizer: opts.optimizer,
        seed: opts.seed,
        max_attempts: opts.max_attempts,
        fixed_threshold: None,
    };
    let mut init_rng = derive_rng(opts.seed, stream::GRAD, u64::MAX);
    let model = GenerativeSbn::random(dataset.image_dim(), &opts.hidden, 0.05, &mut init_rng);
    let proposal = RecognitionSbn::random(dataset.image_dim(), &opts.hidden, 0.05, &mut init_rng);
    let mut trainer = Trainer::new(model, proposal, config, dataset.len())?;

    std::fs::create_dir_all(&opts.out_dir)?;
    let metrics_path = opts.out_dir.join("metrics.csv");
    let checkpoint_path = opts.out_dir.join("latest.ckpt");
    let thresholds_path = opts.out_dir.join("thresholds.csv");
    for epoch in 0..opts.epochs {
        trainer.run_epoch(&dataset.images)?;
        trainer
            .to_checkpoint()
            .save(&opts.out_dir.join(format!("epoch{:04}.ckpt", epoch + 1)))?;
        trainer.to_checkpoint().save(&checkpoint_path)?;
        trainer.table().save_csv(&thresholds_path)?;
        let mut buf = Vec::new();
        trainer.metrics().write_csv(&mut buf)?;
        std::fs::write(&metrics_path, buf)?;
    }

    let (first, last) = trainer.metrics().accept_rate_trend(0.1);
    Ok(TrainSbnOutcome {
        metrics_path,
        checkpoint_path,
        thresholds_path,
        signal_slope: trainer.metrics().signal_slope(),
        accept_rate_first_decile: first,
        accept_rate_last_decile: last,
        final_signal_mean: trainer
            .metrics()
            .records()
            .last()
            .map(|r| r.signal_mean)
            .unwrap_or(f64::NAN),
    })
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone)]
pub struct EvalOpts {
    pub checkpoint: PathBuf,
    pub data: DataSource,
    pub binarize: BinarizeMode,
    /// Evaluate the first `n` images when set.
    pub subset: Option<usize>,
    /// Importance-sampling draw count per example.
    pub eval_k: usize,
    /// Accepted samples per example for the resampled bound.
    pub eval_accepted: usize,
    /// Raw proposal draws for the partition-function estimate.
    pub zr_samples: usize,
    pub seed: u64,
    pub max_attempts: u32,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub index: usize,
    pub neg_is_bound: f64,
    pub neg_rs_bound: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub rows: Vec<EvalRow>,
    pub mean_neg_is: f64,
    pub mean_neg_rs: f64,
    pub csv: String,
}

/// Per-example and mean negative bound under both estimators. Evaluation
/// thresholds are estimated on the fly with the checkpoint's quantile
/// settings, since held-out images have no table entry.
pub fn cmd_eval(opts: &EvalOpts) -> Result<EvalOutcome, CliError> {
    if !opts.checkpoint.exists() {
        return Err(CliError::Config(format!(
            "checkpoint not found: {}",
            opts.checkpoint.display()
        )));
    }
    let ck = Checkpoint::load(&opts.checkpoint)?;
    let (model, proposal) = crate::train::sbn_pair_from_checkpoint(&ck)?;
    let dataset = opts.data.load(opts.binarize)?;
    let dataset = match opts.subset {
        Some(n) => dataset.take(n),
        None => dataset,
    };
    if dataset.image_dim() != model.visible_dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects {} pixels, dataset has {}",
            model.visible_dim(),
            dataset.image_dim()
        )));
    }

    let mut rows = Vec::with_capacity(dataset.len());
    let mut csv = String::from("schema_version,index,neg_is_bound,neg_rs_bound,threshold\n");
    for (index, x) in dataset.images.iter().enumerate() {
        let mut t_rng = derive_rng(opts.seed, stream::EVAL, mix(index as u64, 0));
        let threshold = estimate_threshold(
            &proposal,
            &model,
            x,
            ck.gamma,
            ck.est_samples.max(1) as usize,
            &mut t_rng,
        )?;
        let mut is_rng = derive_rng(opts.seed, stream::EVAL, mix(index as u64, 1));
        let is_bound = eval_is_bound(&model, &proposal, x, opts.eval_k, &mut is_rng)?;
        let rp = ResampledProposal::new(&proposal, &model, threshold)
            .with_max_attempts(opts.max_attempts);
        let mut rs_rng = derive_rng(opts.seed, stream::EVAL, mix(index as u64, 2));
        let rs_bound = eval_rs_bound(&rp, x, opts.eval_accepted, opts.zr_samples, &mut rs_rng)
            .map_err(|e| CliError::Budget(e.to_string()))?;
        let row = EvalRow {
            index,
            neg_is_bound: -is_bound,
            neg_rs_bound: -rs_bound,
            threshold,
        };
        writeln!(
            csv,
            "1,{index},{},{},{}",
            row.neg_is_bound, row.neg_rs_bound, row.threshold
        )
        .expect("string write");
        rows.push(row);
    }
    let n = rows.len() as f64;
    let mean_neg_is = rows.iter().map(|r| r.neg_is_bound).sum::<f64>() / n;
    let mean_neg_rs = rows.iter().map(|r| r.neg_rs_bound).sum::<f64>() / n;
    if !mean_neg_is.is_finite() || !mean_neg_rs.is_finite() {
        return Err(CliError::Numeric(format!(
            "non-finite evaluation bound (IS {mean_neg_is}, RS {mean_neg_rs})"
        )));
    }
    write_out(opts.out_dir.as_deref(), "eval.csv", &csv)?;
    Ok(EvalOutcome {
        rows,
        mean_neg_is,
        mean_neg_rs,
        csv,
    })
}
