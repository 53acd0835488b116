//! Variational rejection sampling for discrete latent variable models.
//!
//! The library builds variational training around a resampled proposal: draws
//! from a recognition model pass through a smooth accept/reject test against
//! the generative joint, the accepted distribution defines a tighter evidence
//! lower bound, and unbiased covariance-form estimators give its gradients
//! even though the accepted distribution is only known up to normalization.
//!
//! Modules:
//! - [`dist`]: parameterized discrete distributions (sigmoid belief nets,
//!   grid targets, Poisson pairs) behind the [`dist::LatentModel`] and
//!   [`dist::Proposal`] traits.
//! - [`resample`]: the accept/reject test, the two-step sampler, and Monte
//!   Carlo partition-function estimates.
//! - [`grad`]: covariance-form gradient estimators with leave-one-out
//!   centering.
//! - [`threshold`]: per-datapoint quantile thresholds and their refresh.
//! - [`oracle`]: enumeration-exact ground truth for small state spaces.
//! - [`train`]: optimizers, the training loop, test-time bound evaluation,
//!   and checkpointing.
//! - [`data`]: IDX image ingestion and binarization.
//! - [`cli`]: command drivers shared by the `vrs` binary.

pub mod cli;
pub mod data;
pub mod dist;
pub mod grad;
pub mod numerics;
pub mod oracle;
pub mod params;
pub mod resample;
pub mod rng;
pub mod threshold;
pub mod train;

pub use params::{ParamLayout, ParamVector};
