//! Exact brute-force ground truth on small state spaces.
//!
//! Everything here is computed by full enumeration in log space (fixed
//! lexicographic state order, log-sum-exp reductions) or by central finite
//! differences. These routines are the reference the sampling-based
//! estimators are tested against; none of them are used on the training path.

use thiserror::Error;

use crate::dist::{DistError, LatentModel, Proposal};
use crate::numerics::{log_sum_exp, sigmoid, softplus};
use crate::params::{ParamError, ParamVector};
use crate::resample::ResampledProposal;

/// Hard cap on enumerable state counts.
pub const MAX_STATES: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("state space of size {0} exceeds the enumeration cap {MAX_STATES}")]
    SpaceTooLarge(usize),
    #[error("objective returned a non-finite value {0}")]
    NonFiniteObjective(f64),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// An explicit list of every latent state, in fixed order.
#[derive(Debug, Clone)]
pub struct EnumerableSpace<Z> {
    states: Vec<Z>,
}

impl<Z> EnumerableSpace<Z> {
    pub fn from_states(states: Vec<Z>) -> Result<Self, OracleError> {
        if states.len() > MAX_STATES {
            return Err(OracleError::SpaceTooLarge(states.len()));
        }
        Ok(EnumerableSpace { states })
    }

    pub fn states(&self) -> &[Z] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

impl EnumerableSpace<usize> {
    /// All cells of an `n x n` grid, row-major.
    pub fn grid(n: usize) -> Self {
        EnumerableSpace::from_states((0..n * n).collect()).unwrap()
    }

    /// Counts `0..=cap`.
    pub fn counts_up_to(cap: usize) -> Self {
        EnumerableSpace::from_states((0..=cap).collect()).unwrap()
    }
}

impl EnumerableSpace<Vec<u8>> {
    /// All binary vectors of the given dimension, lexicographic with the
    /// first coordinate most significant.
    pub fn binary_vectors(dim: usize) -> Result<Self, OracleError> {
        if dim >= 20 {
            return Err(OracleError::SpaceTooLarge(1usize << dim.min(60)));
        }
        let n = 1usize << dim;
        let mut states = Vec::with_capacity(n);
        for code in 0..n {
            let mut v = vec![0u8; dim];
            for (i, bit) in v.iter_mut().enumerate() {
                *bit = ((code >> (dim - 1 - i)) & 1) as u8;
            }
            states.push(v);
        }
        EnumerableSpace::from_states(states)
    }
}

/// Exact normalization constant of the resampled distribution:
/// the expected acceptance probability under the proposal.
pub fn exact_zr<Q, M>(
    rp: &ResampledProposal<'_, Q, M>,
    x: &[u8],
    space: &EnumerableSpace<Q::Latent>,
) -> Result<f64, OracleError>
where
    Q: Proposal,
    M: LatentModel<Latent = Q::Latent>,
{
    Ok(exact_log_zr(rp, x, space)?.exp())
}

pub fn exact_log_zr<Q, M>(
    rp: &ResampledProposal<'_, Q, M>,
    x: &[u8],
    space: &EnumerableSpace<Q::Latent>,
) -> Result<f64, OracleError>
where
    Q: Proposal,
    M: LatentModel<Latent = Q::Latent>,
{
    let mut terms = Vec::with_capacity(space.len());
    for z in space.states() {
        terms.push(rp.log_unnorm_density(x, z)?);
    }
    Ok(log_sum_exp(&terms))
}

/// Normalized masses of the resampled distribution over the space.
pub fn exact_resampled_masses<Q, M>(
    rp: &ResampledProposal<'_, Q, M>,
    x: &[u8],
    space: &EnumerableSpace<Q::Latent>,
) -> Result<Vec<f64>, OracleError>
where
    Q: Proposal,
    M: LatentModel<Latent = Q::Latent>,
{
    let mut log_unnorm = Vec::with_capacity(space.len());
    for z in space.states() {
        log_unnorm.push(rp.log_unnorm_density(x, z)?);
    }
    let log_z = log_sum_exp(&log_unnorm);
    Ok(log_unnorm.iter().map(|l| (l - log_z).exp()).collect())
}

/// Normalized posterior masses of the model over the space.
pub fn exact_posterior_masses<M>(
    model: &M,
    x: &[u8],
    space: &EnumerableSpace<M::Latent>,
) -> Result<Vec<f64>, OracleError>
where
    M: LatentModel,
{
    let mut log_joint = Vec::with_capacity(space.len());
    for z in space.states() {
        log_joint.push(model.log_joint(x, z)?);
    }
    let log_z = log_sum_exp(&log_joint);
    Ok(log_joint.iter().map(|l| (l - log_z).exp()).collect())
}

/// `log Σ_z p(x, z)` over the space.
pub fn exact_log_evidence<M>(
    model: &M,
    x: &[u8],
    space: &EnumerableSpace<M::Latent>,
) -> Result<f64, OracleError>
where
    M: LatentModel,
{
    let mut log_joint = Vec::with_capacity(space.len());
    for z in space.states() {
        log_joint.push(model.log_joint(x, z)?);
    }
    Ok(log_sum_exp(&log_joint))
}

fn kl_between(masses_a: &[f64], log_a_unnorm: &[f64], log_b_unnorm: &[f64]) -> f64 {
    // KL(A || B) from unnormalized log-masses; terms with zero A mass drop.
    let log_za = log_sum_exp(log_a_unnorm);
    let log_zb = log_sum_exp(log_b_unnorm);
    masses_a
        .iter()
        .zip(log_a_unnorm.iter().zip(log_b_unnorm))
        .filter(|(&m, _)| m > 0.0)
        .map(|(&m, (&la, &lb))| m * ((la - log_za) - (lb - log_zb)))
        .sum()
}

/// Exact KL divergence from the resampled distribution to the model posterior.
pub fn exact_kl_resampled_posterior<Q, M>(
    rp: &ResampledProposal<'_, Q, M>,
    x: &[u8],
    space: &EnumerableSpace<Q::Latent>,
) -> Result<f64, OracleError>
where
    Q: Proposal,
    M: LatentModel<Latent = Q::Latent>,
{
    let mut log_r = Vec::with_capacity(space.len());
    let mut log_p = Vec::with_capacity(space.len());
    for z in space.states() {
        log_r.push(rp.log_unnorm_density(x, z)?);
        log_p.push(rp.model.log_joint(x, z)?);
    }
    let log_zr = log_sum_exp(&log_r);
    let masses: Vec<f64> = log_r.iter().map(|l| (l - log_zr).exp()).collect();
    Ok(kl_between(&masses, &log_r, &log_p))
}

/// Exact KL divergence from the raw proposal to the model posterior.
pub fn exact_kl_proposal_posterior<Q, M>(
    proposal: &Q,
    model: &M,
    x: &[u8],
    space: &EnumerableSpace<Q::Latent>,
) -> Result<f64, OracleError>
where
    Q: Proposal,
    M: LatentModel<Latent = Q::Latent>,
{
    let mut log_q = Vec::with_capacity(space.len());
    let mut log_p = Vec::with_capacity(space.len());
    for z in space.states() {
        log_q.push(proposal.log_q(x, z)?);
        log_p.push(model.log_joint(x, z)?);
    }
    let log_zq = log_sum_exp(&log_q);
    let masses: Vec<f64> = log_q.iter().map(|l| (l - log_zq).exp()).collect();
    Ok(kl_between(&masses, &log_q, &log_p))
}

/// Exact evidence lower bound of the raw proposal:
/// `E_Q[log p(x,z) - log q(z|x)]`.
pub fn exact_elbo<Q, M>(
    proposal: &Q,
    model: &M,
    x: &[u8],
    space: &EnumerableSpace<Q::Latent>,
) -> Result<f64, OracleError>
where
    Q: Proposal,
    M: LatentModel<Latent = Q::Latent>,
{
    let mut total = 0.0;
    for z in space.states() {
        let lq = proposal.log_q(x, z)?;
        let m = lq.exp();
        if m > 0.0 {
            total += m * (model.log_joint(x, z)? - lq);
        }
    }
    Ok(total)
}

/// Exact resampled evidence lower bound:
/// `E_R[log p - log q + softplus(l)] + log Z_R`.
pub fn exact_relbo<Q, M>(
    rp: &ResampledProposal<'_, Q, M>,
    x: &[u8],
    space: &EnumerableSpace<Q::Latent>,
) -> Result<f64, OracleError>
where
    Q: Proposal,
    M: LatentModel<Latent = Q::Latent>,
{
    let masses = exact_resampled_masses(rp, x, space)?;
    let log_zr = exact_log_zr(rp, x, space)?;
    let mut expectation = 0.0;
    for (z, &m) in space.states().iter().zip(&masses) {
        if m == 0.0 {
            continue;
        }
        let log_p = rp.model.log_joint(x, z)?;
        let log_q = rp.proposal.log_q(x, z)?;
        let l = rp.log_ratio(x, z)?;
        expectation += m * (log_p - log_q + softplus(l));
    }
    Ok(expectation + log_zr)
}

/// Exact-expectation covariance-form gradients of the resampled bound,
/// computed by enumeration over the accepted distribution rather than
/// sampling. Returns `(d_theta, d_phi)`.
pub fn exact_relbo_grads<Q, M>(
    rp: &ResampledProposal<'_, Q, M>,
    x: &[u8],
    space: &EnumerableSpace<Q::Latent>,
) -> Result<(ParamVector, ParamVector), OracleError>
where
    Q: Proposal,
    M: LatentModel<Latent = Q::Latent>,
{
    let masses = exact_resampled_masses(rp, x, space)?;

    // First pass: exact means of the signal and of each score term.
    let mut mean_signal = 0.0;
    let mut mean_theta = ParamVector::zeros(rp.model.params().layout().clone());
    let mut mean_theta_cov = mean_theta.clone();
    let mut mean_phi = ParamVector::zeros(rp.proposal.params().layout().clone());
    let mut per_state: Vec<Option<(f64, f64)>> = vec![None; space.len()];
    for (idx, (z, &m)) in space.states().iter().zip(&masses).enumerate() {
        if m == 0.0 {
            continue;
        }
        let log_p = rp.model.log_joint(x, z)?;
        let log_q = rp.proposal.log_q(x, z)?;
        let l = rp.log_ratio(x, z)?;
        let signal = log_p - log_q + softplus(l);
        per_state[idx] = Some((signal, sigmoid(l)));
        mean_signal += m * signal;
        mean_theta.add_scaled(&rp.model.grad_theta_log_joint(x, z)?, m)?;
        mean_theta_cov.add_scaled(&rp.model.grad_theta_log_joint(x, z)?, m * sigmoid(l))?;
        mean_phi.add_scaled(&rp.proposal.grad_phi_log_q(x, z)?, m * (1.0 - sigmoid(l)))?;
    }

    // Second pass: exact covariances with the centered signal.
    let mut cov_theta = ParamVector::zeros(mean_theta.layout().clone());
    let mut cov_phi = ParamVector::zeros(mean_phi.layout().clone());
    for (idx, (z, &m)) in space.states().iter().zip(&masses).enumerate() {
        let Some((signal, sig_l)) = per_state[idx] else {
            continue;
        };
        let centered = signal - mean_signal;
        cov_theta.add_scaled(
            &rp.model.grad_theta_log_joint(x, z)?,
            m * centered * sig_l,
        )?;
        cov_phi.add_scaled(
            &rp.proposal.grad_phi_log_q(x, z)?,
            m * centered * (1.0 - sig_l),
        )?;
    }

    let mut d_theta = mean_theta;
    d_theta.add_scaled(&cov_theta, 1.0)?;
    Ok((d_theta, cov_phi))
}

/// Exact quantile of the log-ratio `-log p(x,z) + log q(z|x)` under the
/// proposal, by the lower inverse-CDF convention
/// `inf { w : gamma <= F(w) }`.
pub fn exact_log_ratio_quantile<Q, M>(
    proposal: &Q,
    model: &M,
    x: &[u8],
    space: &EnumerableSpace<Q::Latent>,
    gamma: f64,
) -> Result<f64, OracleError>
where
    Q: Proposal,
    M: LatentModel<Latent = Q::Latent>,
{
    assert!(gamma > 0.0 && gamma <= 1.0);
    let mut pairs = Vec::with_capacity(space.len());
    for z in space.states() {
        let lq = proposal.log_q(x, z)?;
        let w = -model.log_joint(x, z)? + lq;
        pairs.push((w, lq.exp()));
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut cdf = 0.0;
    for (w, mass) in &pairs {
        cdf += mass;
        if gamma <= cdf + 1e-15 {
            return Ok(*w);
        }
    }
    Ok(pairs.last().unwrap().0)
}

/// Exact probability under the proposal that the log-ratio test statistic is
/// at or below the threshold: `(P[l <= 0], P[l < 0])`.
pub fn exact_accept_region_mass<Q, M>(
    rp: &ResampledProposal<'_, Q, M>,
    x: &[u8],
    space: &EnumerableSpace<Q::Latent>,
) -> Result<(f64, f64), OracleError>
where
    Q: Proposal,
    M: LatentModel<Latent = Q::Latent>,
{
    let mut at_most = 0.0;
    let mut strictly = 0.0;
    for z in space.states() {
        let mass = rp.proposal.log_q(x, z)?.exp();
        let l = rp.log_ratio(x, z)?;
        if l <= 1e-12 {
            at_most += mass;
        }
        if l < -1e-12 {
            strictly += mass;
        }
    }
    Ok((at_most, strictly))
}

/// Central finite differences of a scalar function of the parameters.
pub fn fd_grad(
    f: &mut dyn FnMut(&ParamVector) -> Result<f64, DistError>,
    at: &ParamVector,
    step: f64,
) -> Result<ParamVector, OracleError> {
    let mut grad = ParamVector::zeros(at.layout().clone());
    let mut point = at.clone();
    for i in 0..at.len() {
        let original = point.values()[i];
        point.values_mut()[i] = original + step;
        let plus = f(&point)?;
        point.values_mut()[i] = original - step;
        let minus = f(&point)?;
        point.values_mut()[i] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(OracleError::NonFiniteObjective(if plus.is_finite() {
                minus
            } else {
                plus
            }));
        }
        grad.values_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}
