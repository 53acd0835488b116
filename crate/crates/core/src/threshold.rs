//! Quantile-based per-datapoint thresholds.
//!
//! For a datapoint `x`, the threshold is the empirical `gamma`-quantile of
//! the scalar `-log p(x,z) + log q(z|x)` over proposal draws. Between
//! refreshes the table is immutable and gradients treat thresholds as
//! constants.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::dist::{DistError, LatentModel, Proposal};
use crate::rng::{derive_rng, stream};

#[derive(Debug, Error)]
pub enum ThresholdError {
    #[error("quantile parameter {0} outside (0, 1]")]
    BadGamma(f64),
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("refresh period must be at least 1")]
    BadRefresh,
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("threshold table io: {0}")]
    Io(#[from] std::io::Error),
    #[error("threshold table parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Per-datapoint thresholds plus the estimation hyperparameters.
/// `refresh_every` counts optimizer steps (an epoch-based schedule maps to
/// steps-per-epoch times the epoch period).
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    thresholds: Vec<f64>,
    pub gamma: f64,
    pub est_samples: usize,
    pub refresh_every: u64,
}

impl ThresholdTable {
    /// Fresh table with every threshold at `+inf` (rejection disabled).
    pub fn all_infinite(
        n_datapoints: usize,
        gamma: f64,
        est_samples: usize,
        refresh_every: u64,
    ) -> Result<Self, ThresholdError> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(ThresholdError::BadGamma(gamma));
        }
        if est_samples == 0 {
            return Err(ThresholdError::NoSamples);
        }
        if refresh_every == 0 {
            return Err(ThresholdError::BadRefresh);
        }
        Ok(ThresholdTable {
            thresholds: vec![f64::INFINITY; n_datapoints],
            gamma,
            est_samples,
            refresh_every,
        })
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.thresholds[index]
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Restores stored thresholds when resuming from a checkpoint.
    pub(crate) fn thresholds_mut(&mut self) -> &mut [f64] {
        &mut self.thresholds
    }

    /// Writes `index,threshold` rows (with a schema-version header) so runs
    /// can resume with the thresholds they stopped with.
    pub fn save_csv(&self, path: &Path) -> Result<(), ThresholdError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "schema_version,index,threshold")?;
        for (i, t) in self.thresholds.iter().enumerate() {
            writeln!(file, "1,{i},{}", format_threshold(*t))?;
        }
        Ok(())
    }

    pub fn load_csv(
        path: &Path,
        gamma: f64,
        est_samples: usize,
        refresh_every: u64,
    ) -> Result<Self, ThresholdError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut thresholds = Vec::new();
        for (lineno, line) in file.lines().enumerate() {
            let line = line?;
            if lineno == 0 {
                continue; // header
            }
            let mut fields = line.split(',');
            let _schema = fields.next();
            let index: usize = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ThresholdError::Parse {
                    line: lineno + 1,
                    msg: "missing index".into(),
                })?;
            let value = fields.next().ok_or_else(|| ThresholdError::Parse {
                line: lineno + 1,
                msg: "missing threshold".into(),
            })?;
            let t = parse_threshold(value).ok_or_else(|| ThresholdError::Parse {
                line: lineno + 1,
                msg: format!("bad threshold {value:?}"),
            })?;
            if index != thresholds.len() {
                return Err(ThresholdError::Parse {
                    line: lineno + 1,
                    msg: format!("expected index {}, got {index}", thresholds.len()),
                });
            }
            thresholds.push(t);
        }
        let mut table = ThresholdTable::all_infinite(0, gamma, est_samples, refresh_every)?;
        table.thresholds = thresholds;
        Ok(table)
    }
}

pub(crate) fn format_threshold(t: f64) -> String {
    if t == f64::INFINITY {
        "inf".to_string()
    } else {
        // Shortest scientific form that parses back to the same value.
        format!("{t:e}")
    }
}

pub(crate) fn parse_threshold(s: &str) -> Option<f64> {
    match s.trim() {
        "inf" | "+inf" | "infinity" => Some(f64::INFINITY),
        // Finite or +inf only: -inf would reject every sample.
        other => other
            .parse()
            .ok()
            .filter(|t: &f64| !t.is_nan() && *t != f64::NEG_INFINITY),
    }
}

/// Draws `n` proposals and returns the scalar log-ratios
/// `-log p(x,z) + log q(z|x)`.
pub fn sample_log_ratios<Q, M>(
    proposal: &Q,
    model: &M,
    x: &[u8],
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<Vec<f64>, ThresholdError>
where
    Q: Proposal,
    M: LatentModel<Latent = Q::Latent>,
{
    if n == 0 {
        return Err(ThresholdError::NoSamples);
    }
    let mut ratios = Vec::with_capacity(n);
    for _ in 0..n {
        let z = proposal.sample(x, rng);
        ratios.push(-model.log_joint(x, &z)? + proposal.log_q(x, &z)?);
    }
    Ok(ratios)
}

/// Empirical `gamma`-quantile by the lower inverse-CDF convention: the order
/// statistic at rank `ceil(gamma * n)`.
pub fn empirical_quantile(values: &mut [f64], gamma: f64) -> Result<f64, ThresholdError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(ThresholdError::BadGamma(gamma));
    }
    if values.is_empty() {
        return Err(ThresholdError::NoSamples);
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = (gamma * values.len() as f64).ceil() as usize;
    Ok(values[rank.clamp(1, values.len()) - 1])
}

/// Monte Carlo threshold estimate for one datapoint at the current parameters.
pub fn estimate_threshold<Q, M>(
    proposal: &Q,
    model: &M,
    x: &[u8],
    gamma: f64,
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<f64, ThresholdError>
where
    Q: Proposal,
    M: LatentModel<Latent = Q::Latent>,
{
    let mut ratios = sample_log_ratios(proposal, model, x, n, rng)?;
    empirical_quantile(&mut ratios, gamma)
}

/// Re-estimates every datapoint's threshold with the current parameters,
/// returning a new table. Datapoints are processed in parallel with one
/// derived RNG stream each, so the result is independent of scheduling.
pub fn refresh_table<Q, M, X>(
    table: &ThresholdTable,
    proposal: &Q,
    model: &M,
    dataset: &[X],
    seed: u64,
) -> Result<ThresholdTable, ThresholdError>
where
    Q: Proposal + Sync,
    M: LatentModel<Latent = Q::Latent> + Sync,
    X: AsRef<[u8]> + Sync,
{
    let thresholds: Vec<f64> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = derive_rng(seed, stream::THRESHOLD_REFRESH, i as u64);
            estimate_threshold(
                proposal,
                model,
                x.as_ref(),
                table.gamma,
                table.est_samples,
                &mut rng,
            )
        })
        .collect::<Result<_, _>>()?;
    let mut new_table = table.clone();
    new_table.thresholds = thresholds;
    Ok(new_table)
}
