//! Resampled proposal distributions: a proposal combined with a smooth
//! accept/reject test against the model joint.
//!
//! A proposed `z` is accepted with probability
//! `a(z|x,T) = exp(-softplus(l))` where
//! `l = -log p(x,z) + log q(z|x) - T`.
//! The accepted draws follow the distribution with unnormalized density
//! `q(z|x) * a(z|x,T)`; its normalization constant equals the expected
//! acceptance probability under the proposal. `T = +inf` turns the test off
//! and recovers the raw proposal; lowering `T` pushes the accepted
//! distribution toward the model posterior at the price of more rejections.

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::dist::{DistError, LatentModel, Proposal};
use crate::numerics::{log_mean_exp, softplus};

/// Attempt cap per accepted sample; the accept/reject loop is otherwise
/// unbounded and a far-too-low threshold would hang training.
pub const DEFAULT_MAX_ATTEMPTS: u32 = 10_000;

#[derive(Debug, Error)]
pub enum ResampleError {
    #[error("sampling budget exhausted after {attempts} attempts without an accept")]
    BudgetExhausted { attempts: u32 },
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// A `(proposal, model, threshold)` triple. The threshold is a plain real
/// with `+inf` as the no-rejection sentinel.
pub struct ResampledProposal<'a, Q, M>
where
    Q: Proposal,
    M: LatentModel<Latent = Q::Latent>,
{
    pub proposal: &'a Q,
    pub model: &'a M,
    pub threshold: f64,
    pub max_attempts: u32,
}

/// Accepted draws plus the cost of producing them.
#[derive(Debug, Clone)]
pub struct SampleBatch<Z> {
    pub accepted: Vec<Z>,
    pub attempts: u64,
}

impl<Z> SampleBatch<Z> {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted.len() as f64 / self.attempts as f64
    }
}

impl<'a, Q, M> ResampledProposal<'a, Q, M>
where
    Q: Proposal,
    M: LatentModel<Latent = Q::Latent>,
{
    pub fn new(proposal: &'a Q, model: &'a M, threshold: f64) -> Self {
        ResampledProposal {
            proposal,
            model,
            threshold,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }

    pub fn with_max_attempts(mut self, max_attempts: u32) -> Self {
        assert!(max_attempts > 0);
        self.max_attempts = max_attempts;
        self
    }

    /// `l = -log p(x,z) + log q(z|x) - T`; `-inf` when `T = +inf`.
    pub fn log_ratio(&self, x: &[u8], z: &Q::Latent) -> Result<f64, DistError> {
        if self.threshold == f64::INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let log_p = self.model.log_joint(x, z)?;
        let log_q = self.proposal.log_q(x, z)?;
        Ok(-log_p + log_q - self.threshold)
    }

    /// `log a = -softplus(l)`, always in `(-inf, 0]`.
    pub fn log_accept_prob(&self, x: &[u8], z: &Q::Latent) -> Result<f64, DistError> {
        Ok(-softplus(self.log_ratio(x, z)?))
    }

    /// Log unnormalized density of the accepted distribution:
    /// `log q(z|x) + log a(z|x,T)`.
    pub fn log_unnorm_density(&self, x: &[u8], z: &Q::Latent) -> Result<f64, DistError> {
        Ok(self.proposal.log_q(x, z)? + self.log_accept_prob(x, z)?)
    }

    /// Draws until an accept, returning the sample and the attempt count.
    /// The accept test compares in log space to avoid exponentiating large
    /// negative log-acceptances.
    pub fn sample(
        &self,
        x: &[u8],
        rng: &mut dyn RngCore,
    ) -> Result<(Q::Latent, u32), ResampleError> {
        for attempt in 1..=self.max_attempts {
            let z = self.proposal.sample(x, rng);
            let log_a = self.log_accept_prob(x, &z)?;
            let u: f64 = rng.random();
            if u.ln() < log_a {
                return Ok((z, attempt));
            }
        }
        Err(ResampleError::BudgetExhausted {
            attempts: self.max_attempts,
        })
    }

    /// Draws `count` accepted samples, tracking total attempts.
    pub fn sample_batch(
        &self,
        x: &[u8],
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<SampleBatch<Q::Latent>, ResampleError> {
        let mut accepted = Vec::with_capacity(count);
        let mut attempts = 0u64;
        for _ in 0..count {
            let (z, tries) = self.sample(x, rng)?;
            attempts += tries as u64;
            accepted.push(z);
        }
        Ok(SampleBatch { accepted, attempts })
    }

    /// Monte Carlo estimate of the log normalization constant:
    /// log of the mean acceptance probability over `n` proposal draws.
    pub fn estimate_log_zr(
        &self,
        x: &[u8],
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Result<f64, DistError> {
        assert!(n >= 1);
        let mut log_accepts = Vec::with_capacity(n);
        for _ in 0..n {
            let z = self.proposal.sample(x, rng);
            log_accepts.push(self.log_accept_prob(x, &z)?);
        }
        Ok(log_mean_exp(&log_accepts))
    }
}
