//! The training loop: per-datapoint thresholds refreshed on a step schedule,
//! batched covariance-form gradient estimates, and ascent steps on the bound.

mod checkpoint;
mod eval;
mod metrics;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use eval::{eval_is_bound, eval_rs_bound};
pub use metrics::{StepRecord, TrainMetrics, METRICS_HEADER};
pub use optim::{OptimError, OptimizerKind, OptimizerState};

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::dist::{DistError, GenerativeSbn, LatentModel, Proposal, RecognitionSbn};
use crate::grad::{self, GradError, GradEstimate};
use crate::oracle::{self, EnumerableSpace, OracleError};
use crate::params::{mean_of, ParamError, ParamVector};
use crate::resample::{ResampleError, ResampledProposal};
use crate::rng::{derive_rng, mix, stream};
use crate::threshold::{refresh_table, ThresholdError, ThresholdTable};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("sampling budget exhausted at epoch {epoch}, step {step}, datapoint {datapoint} ({attempts} attempts)")]
    Budget {
        epoch: u32,
        step: u64,
        datapoint: usize,
        attempts: u32,
    },
    #[error("non-finite gradient at epoch {epoch}, step {step} (|theta| = {norm_theta}, |phi| = {norm_phi})")]
    NonFiniteGradient {
        epoch: u32,
        step: u64,
        norm_theta: f64,
        norm_phi: f64,
    },
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Quantile for threshold selection, in (0, 1].
    pub gamma: f64,
    /// Optimizer steps between threshold refreshes. A refresh runs before any
    /// step whose index is a multiple of this period (including step 0), so a
    /// period of one epoch's steps refreshes at the start of every epoch.
    pub refresh_steps: u64,
    /// Proposal draws per datapoint for quantile estimation.
    pub quantile_samples: usize,
    /// Accepted samples per datapoint for the covariance estimator (>= 2).
    pub cov_samples: usize,
    pub epochs: u32,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub max_attempts: u32,
    /// When set, every datapoint uses this constant threshold and the
    /// quantile machinery is bypassed entirely.
    pub fixed_threshold: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(TrainError::Config(format!("gamma {} not in (0, 1]", self.gamma)));
        }
        if self.refresh_steps == 0 {
            return Err(TrainError::Config("refresh_steps must be positive".into()));
        }
        if self.quantile_samples == 0 {
            return Err(TrainError::Config("quantile_samples must be positive".into()));
        }
        if self.cov_samples < 2 {
            return Err(TrainError::Config(format!(
                "cov_samples must be at least 2, got {}",
                self.cov_samples
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.max_attempts == 0 {
            return Err(TrainError::Config("max_attempts must be positive".into()));
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

/// How per-datapoint gradients are produced.
pub enum GradMode<Z> {
    /// Monte Carlo estimates from accepted samples (the normal path).
    Sampled,
    /// Exact expectations by enumeration; for small-state diagnostics only.
    ExactEnumeration(EnumerableSpace<Z>),
}

/// Owns the models, optimizer state, and threshold table for a run.
pub struct Trainer<M, Q>
where
    M: LatentModel,
    Q: Proposal<Latent = M::Latent>,
{
    model: M,
    proposal: Q,
    config: TrainConfig,
    table: ThresholdTable,
    opt_theta: OptimizerState,
    opt_phi: OptimizerState,
    epoch: u32,
    step: u64,
    metrics: TrainMetrics,
    grad_mode: GradMode<M::Latent>,
}

impl<M, Q> Trainer<M, Q>
where
    M: LatentModel + Sync,
    Q: Proposal<Latent = M::Latent> + Sync,
{
    pub fn new(
        model: M,
        proposal: Q,
        config: TrainConfig,
        n_datapoints: usize,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let table = ThresholdTable::all_infinite(
            n_datapoints,
            config.gamma,
            config.quantile_samples,
            config.refresh_steps,
        )?;
        let opt_theta = OptimizerState::new(config.optimizer, model.params().len())?;
        let opt_phi = OptimizerState::new(config.optimizer, proposal.params().len())?;
        Ok(Trainer {
            model,
            proposal,
            config,
            table,
            opt_theta,
            opt_phi,
            epoch: 0,
            step: 0,
            metrics: TrainMetrics::default(),
            grad_mode: GradMode::Sampled,
        })
    }

    pub fn with_grad_mode(mut self, grad_mode: GradMode<M::Latent>) -> Self {
        self.grad_mode = grad_mode;
        self
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn proposal(&self) -> &Q {
        &self.proposal
    }

    pub fn table(&self) -> &ThresholdTable {
        &self.table
    }

    pub fn metrics(&self) -> &TrainMetrics {
        &self.metrics
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn threshold_for(&self, datapoint: usize) -> f64 {
        self.config
            .fixed_threshold
            .unwrap_or_else(|| self.table.get(datapoint))
    }

    fn estimate_for_datapoint<X: AsRef<[u8]>>(
        &self,
        global_index: usize,
        x: &X,
    ) -> Result<GradEstimate, TrainError> {
        let rp = ResampledProposal::new(&self.proposal, &self.model, self.threshold_for(global_index))
            .with_max_attempts(self.config.max_attempts);
        match &self.grad_mode {
            GradMode::Sampled => {
                let mut rng = derive_rng(
                    self.config.seed,
                    stream::GRAD,
                    mix(self.step, global_index as u64),
                );
                grad::relbo_grad_estimate(&rp, x.as_ref(), &mut rng, self.config.cov_samples).map_err(
                    |e| match e {
                        GradError::Resample(ResampleError::BudgetExhausted { attempts }) => {
                            TrainError::Budget {
                                epoch: self.epoch,
                                step: self.step,
                                datapoint: global_index,
                                attempts,
                            }
                        }
                        other => other.into(),
                    },
                )
            }
            GradMode::ExactEnumeration(space) => {
                let (d_theta, d_phi) = oracle::exact_relbo_grads(&rp, x.as_ref(), space)?;
                let relbo = oracle::exact_relbo(&rp, x.as_ref(), space)?;
                let log_zr = oracle::exact_log_zr(&rp, x.as_ref(), space)?;
                Ok(GradEstimate {
                    d_theta,
                    d_phi,
                    sample_count: 0,
                    attempts: 0,
                    signal_mean: relbo - log_zr,
                })
            }
        }
    }

    /// One optimizer update from one batch of datapoints. Per-datapoint
    /// estimates run in parallel on derived RNG streams and are reduced in
    /// index order.
    fn update_batch<X: AsRef<[u8]> + Sync>(
        &mut self,
        batch_start: usize,
        batch: &[X],
    ) -> Result<(), TrainError> {
        let started = Instant::now();
        let estimates: Vec<GradEstimate> = batch
            .par_iter()
            .enumerate()
            .map(|(i, x)| self.estimate_for_datapoint(batch_start + i, x))
            .collect::<Result<_, _>>()?;

        let n = estimates.len() as f64;
        let d_theta = mean_of(&estimates.iter().map(|e| e.d_theta.clone()).collect::<Vec<_>>())?;
        let d_phi = mean_of(&estimates.iter().map(|e| e.d_phi.clone()).collect::<Vec<_>>())?;
        let signal_mean = estimates.iter().map(|e| e.signal_mean).sum::<f64>() / n;
        let attempts: u64 = estimates.iter().map(|e| e.attempts).sum();
        let accepted: u64 = estimates.iter().map(|e| e.sample_count as u64).sum();

        let norm_theta = d_theta.norm();
        let norm_phi = d_phi.norm();
        if !norm_theta.is_finite() || !norm_phi.is_finite() {
            return Err(TrainError::NonFiniteGradient {
                epoch: self.epoch,
                step: self.step,
                norm_theta,
                norm_phi,
            });
        }

        // Ascent on the bound: descend on the negated estimates.
        let mut params_theta = self.model.params();
        self.opt_theta.descend(&mut params_theta, &d_theta.scaled(-1.0))?;
        self.model.set_params(&params_theta)?;
        let mut params_phi = self.proposal.params();
        self.opt_phi.descend(&mut params_phi, &d_phi.scaled(-1.0))?;
        self.proposal.set_params(&params_phi)?;

        self.metrics.push(StepRecord {
            epoch: self.epoch,
            step: self.step,
            signal_mean,
            accept_rate: if attempts > 0 {
                accepted as f64 / attempts as f64
            } else {
                1.0
            },
            attempts,
            grad_norm_theta: norm_theta,
            grad_norm_phi: norm_phi,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        self.step += 1;
        Ok(())
    }

    /// One pass over the dataset in fixed order, refreshing thresholds before
    /// any step whose index is a multiple of the refresh period.
    pub fn run_epoch<X: AsRef<[u8]> + Sync>(&mut self, dataset: &[X]) -> Result<(), TrainError> {
        if dataset.is_empty() {
            return Err(TrainError::Config("dataset is empty".into()));
        }
        if dataset.len() != self.table.len() {
            return Err(TrainError::Config(format!(
                "dataset has {} datapoints but the threshold table has {}",
                dataset.len(),
                self.table.len()
            )));
        }
        let mut start = 0;
        while start < dataset.len() {
            if self.config.fixed_threshold.is_none()
                && self.step.is_multiple_of(self.config.refresh_steps)
            {
                self.table = refresh_table(
                    &self.table,
                    &self.proposal,
                    &self.model,
                    dataset,
                    mix(self.config.seed, self.step),
                )?;
            }
            let end = (start + self.config.batch_size).min(dataset.len());
            self.update_batch(start, &dataset[start..end])?;
            start = end;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Runs the configured number of epochs.
    pub fn train<X: AsRef<[u8]> + Sync>(&mut self, dataset: &[X]) -> Result<(), TrainError> {
        for _ in 0..self.config.epochs {
            self.run_epoch(dataset)?;
        }
        Ok(())
    }
}

/// Rebuilds the generative/recognition pair stored in a checkpoint,
/// validating the parameter layout hashes.
pub fn sbn_pair_from_checkpoint(
    ck: &Checkpoint,
) -> Result<(GenerativeSbn, RecognitionSbn), TrainError> {
    let hidden: Vec<usize> = ck.hidden.iter().map(|&h| h as usize).collect();
    let mut model = GenerativeSbn::zeros(ck.visible as usize, &hidden);
    let mut proposal = RecognitionSbn::zeros(ck.visible as usize, &hidden);
    let theta_layout = model.params().layout().clone();
    let phi_layout = proposal.params().layout().clone();
    if theta_layout.spec_hash() != ck.theta_hash {
        return Err(CheckpointError::LayoutHash {
            file: ck.theta_hash,
            expected: theta_layout.spec_hash(),
        }
        .into());
    }
    if phi_layout.spec_hash() != ck.phi_hash {
        return Err(CheckpointError::LayoutHash {
            file: ck.phi_hash,
            expected: phi_layout.spec_hash(),
        }
        .into());
    }
    model.set_params(&ParamVector::from_values(theta_layout, ck.theta.clone())?)?;
    proposal.set_params(&ParamVector::from_values(phi_layout, ck.phi.clone())?)?;
    Ok((model, proposal))
}

impl Trainer<GenerativeSbn, RecognitionSbn> {
    /// Snapshot for resume; belief-net runs only.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let theta = self.model.params();
        let phi = self.proposal.params();
        Checkpoint {
            visible: self.model.visible_dim() as u32,
            hidden: self.model.hidden_dims().iter().map(|&h| h as u32).collect(),
            epoch: self.epoch,
            step: self.step,
            theta_hash: theta.layout().spec_hash(),
            theta: theta.values().to_vec(),
            phi_hash: phi.layout().spec_hash(),
            phi: phi.values().to_vec(),
            opt_theta: self.opt_theta.clone(),
            opt_phi: self.opt_phi.clone(),
            gamma: self.table.gamma,
            est_samples: self.table.est_samples as u64,
            refresh_every: self.table.refresh_every,
            thresholds: self.table.thresholds().to_vec(),
        }
    }

    /// Rebuilds a trainer mid-run from a checkpoint. The config must agree
    /// with the checkpoint on the architecture-independent hyperparameters.
    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let (model, proposal) = sbn_pair_from_checkpoint(ck)?;
        let mut trainer = Trainer::new(model, proposal, config, ck.thresholds.len())?;
        trainer.opt_theta = ck.opt_theta.clone();
        trainer.opt_phi = ck.opt_phi.clone();
        trainer.epoch = ck.epoch;
        trainer.step = ck.step;
        trainer.table = ck.threshold_table()?;
        Ok(trainer)
    }
}
