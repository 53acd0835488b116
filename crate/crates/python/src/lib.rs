//! Python bindings: the three model systems (grid fixture, truncated-Poisson
//! pair, sigmoid belief nets) with their exact diagnostics, samplers,
//! gradient estimators, and short training drivers.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vrs_core::data::{binarize_images, synthetic_digits, BinarizeMode};
use vrs_core::dist::{
    GenerativeSbn, GridTarget, LatentModel, PoissonProposal, Proposal, RecognitionSbn,
    TruncatedPoissonTarget, UniformProposal,
};
use vrs_core::grad;
use vrs_core::oracle::{self, EnumerableSpace};
use vrs_core::resample::ResampledProposal;
use vrs_core::rng::{derive_rng, stream};
use vrs_core::threshold::estimate_threshold;
use vrs_core::train::{
    eval_is_bound, eval_rs_bound, OptimizerKind, TrainConfig, Trainer,
};

fn value_err(err: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn runtime_err(err: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(err.to_string())
}

/// The built-in 5x5 two-mode grid target under a uniform proposal, with
/// enumeration-exact diagnostics.
#[pyclass]
struct GridSystem {
    target: GridTarget,
    proposal: UniformProposal,
    space: EnumerableSpace<usize>,
}

#[pymethods]
impl GridSystem {
    /// Builds the default two-mode fixture, or a custom target from a square
    /// matrix of log-masses.
    #[new]
    #[pyo3(signature = (log_weights=None))]
    fn new(log_weights: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let target = match log_weights {
            None => GridTarget::two_mode_5x5(),
            Some(rows) => {
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(PyValueError::new_err("log_weights must be square"));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                GridTarget::new(n, flat).map_err(value_err)?
            }
        };
        let proposal = UniformProposal::new(target.n_cells());
        let space = EnumerableSpace::grid(target.side());
        Ok(GridSystem {
            target,
            proposal,
            space,
        })
    }

    fn exact_zr(&self, threshold: f64) -> PyResult<f64> {
        let rp = ResampledProposal::new(&self.proposal, &self.target, threshold);
        oracle::exact_zr(&rp, &[], &self.space).map_err(value_err)
    }

    fn exact_kl(&self, threshold: f64) -> PyResult<f64> {
        let rp = ResampledProposal::new(&self.proposal, &self.target, threshold);
        oracle::exact_kl_resampled_posterior(&rp, &[], &self.space).map_err(value_err)
    }

    fn exact_relbo(&self, threshold: f64) -> PyResult<f64> {
        let rp = ResampledProposal::new(&self.proposal, &self.target, threshold);
        oracle::exact_relbo(&rp, &[], &self.space).map_err(value_err)
    }

    fn exact_log_evidence(&self) -> PyResult<f64> {
        oracle::exact_log_evidence(&self.target, &[], &self.space).map_err(value_err)
    }

    /// `(threshold, exact_zr, exact_kl, exact_relbo)` rows, one per input.
    fn sweep(&self, thresholds: Vec<f64>) -> PyResult<Vec<(f64, f64, f64, f64)>> {
        thresholds
            .into_iter()
            .map(|t| Ok((t, self.exact_zr(t)?, self.exact_kl(t)?, self.exact_relbo(t)?)))
            .collect()
    }

    /// Draws `n` accepted cells; returns `(cells, total_attempts)`.
    #[pyo3(signature = (threshold, n, seed=0))]
    fn sample(&self, threshold: f64, n: usize, seed: u64) -> PyResult<(Vec<usize>, u64)> {
        let rp = ResampledProposal::new(&self.proposal, &self.target, threshold);
        let mut rng = derive_rng(seed, stream::GRAD, 0);
        let batch = rp.sample_batch(&[], n, &mut rng).map_err(runtime_err)?;
        Ok((batch.accepted, batch.attempts))
    }

    #[pyo3(signature = (threshold, n, seed=0))]
    fn estimate_log_zr(&self, threshold: f64, n: usize, seed: u64) -> PyResult<f64> {
        let rp = ResampledProposal::new(&self.proposal, &self.target, threshold);
        let mut rng = derive_rng(seed, stream::GRAD, 1);
        rp.estimate_log_zr(&[], n, &mut rng).map_err(value_err)
    }

    #[pyo3(signature = (gamma, n, seed=0))]
    fn estimate_threshold(&self, gamma: f64, n: usize, seed: u64) -> PyResult<f64> {
        let mut rng = derive_rng(seed, stream::THRESHOLD_REFRESH, 0);
        estimate_threshold(&self.proposal, &self.target, &[], gamma, n, &mut rng)
            .map_err(value_err)
    }
}

/// Truncated-Poisson target with a log-rate Poisson proposal.
#[pyclass]
struct ToySystem {
    target: TruncatedPoissonTarget,
    proposal: PoissonProposal,
}

#[pymethods]
impl ToySystem {
    /// Target fixed at rate 10 truncated below 5; `phi` is the proposal's
    /// initial log-rate.
    #[new]
    #[pyo3(signature = (phi))]
    fn new(phi: f64) -> PyResult<Self> {
        if !phi.is_finite() {
            return Err(PyValueError::new_err("phi must be finite"));
        }
        Ok(ToySystem {
            target: TruncatedPoissonTarget::standard(),
            proposal: PoissonProposal::new(phi),
        })
    }

    #[getter]
    fn phi(&self) -> f64 {
        self.proposal.phi()
    }

    fn log_joint(&self, z: usize) -> PyResult<f64> {
        self.target.log_joint(&[], &z).map_err(value_err)
    }

    fn log_q(&self, z: usize) -> PyResult<f64> {
        self.proposal.log_q(&[], &z).map_err(value_err)
    }

    /// One accepted draw: `(z, attempts)`.
    #[pyo3(signature = (threshold, seed=0))]
    fn sample(&self, threshold: f64, seed: u64) -> PyResult<(usize, u32)> {
        let rp = ResampledProposal::new(&self.proposal, &self.target, threshold);
        let mut rng = derive_rng(seed, stream::GRAD, 0);
        rp.sample(&[], &mut rng).map_err(runtime_err)
    }

    /// Covariance-form gradient estimate for the log-rate:
    /// `(d_phi, signal_mean, attempts)`.
    #[pyo3(signature = (threshold, s=10, seed=0))]
    fn grad_estimate(&self, threshold: f64, s: usize, seed: u64) -> PyResult<(f64, f64, u64)> {
        let rp = ResampledProposal::new(&self.proposal, &self.target, threshold);
        let mut rng = derive_rng(seed, stream::GRAD, 1);
        let est = grad::relbo_grad_estimate(&rp, &[], &mut rng, s).map_err(runtime_err)?;
        Ok((est.d_phi.values()[0], est.signal_mean, est.attempts))
    }

    #[pyo3(signature = (gamma, n, seed=0))]
    fn estimate_threshold(&self, gamma: f64, n: usize, seed: u64) -> PyResult<f64> {
        let mut rng = derive_rng(seed, stream::THRESHOLD_REFRESH, 0);
        estimate_threshold(&self.proposal, &self.target, &[], gamma, n, &mut rng)
            .map_err(value_err)
    }

    /// Exact bound value over the capped support at the current log-rate.
    fn exact_relbo(&self, threshold: f64) -> PyResult<f64> {
        let space = EnumerableSpace::counts_up_to(self.target.support_cap());
        let rp = ResampledProposal::new(&self.proposal, &self.target, threshold);
        oracle::exact_relbo(&rp, &[], &space).map_err(value_err)
    }

    /// Runs SGD-with-momentum ascent at a fixed threshold, updating `phi` in
    /// place. Returns a summary dict.
    #[pyo3(signature = (steps=2000, threshold=50.0, lr=0.01, momentum=0.5, s=10, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        steps: u32,
        threshold: f64,
        lr: f64,
        momentum: f64,
        s: usize,
        seed: u64,
    ) -> PyResult<Py<PyAny>> {
        let config = TrainConfig {
            gamma: 0.9,
            refresh_steps: 1,
            quantile_samples: 1,
            cov_samples: s,
            epochs: steps,
            batch_size: 1,
            optimizer: OptimizerKind::sgd_momentum(lr, momentum),
            seed,
            max_attempts: 10_000,
            fixed_threshold: Some(threshold),
        };
        let dataset: Vec<Vec<u8>> = vec![vec![]];
        let mut trainer = Trainer::new(self.target.clone(), self.proposal.clone(), config, 1)
            .map_err(value_err)?;
        trainer.train(&dataset).map_err(runtime_err)?;
        let (first, last) = trainer.metrics().accept_rate_trend(0.1);
        self.proposal = trainer.proposal().clone();

        let summary = pyo3::types::PyDict::new(py);
        summary.set_item("final_phi", self.proposal.phi())?;
        summary.set_item("steps", trainer.step())?;
        summary.set_item("accept_rate_first_decile", first)?;
        summary.set_item("accept_rate_last_decile", last)?;
        Ok(summary.into_any().unbind())
    }
}

/// A generative/recognition sigmoid belief net pair over binary images.
#[pyclass]
struct SbnSystem {
    model: GenerativeSbn,
    proposal: RecognitionSbn,
}

fn check_bits_arg(name: &str, bits: &[u8]) -> PyResult<()> {
    if bits.iter().any(|&b| b > 1) {
        return Err(PyValueError::new_err(format!("{name} must be 0/1 valued")));
    }
    Ok(())
}

#[pymethods]
impl SbnSystem {
    #[new]
    #[pyo3(signature = (visible, hidden, seed=0, init_scale=0.05))]
    fn new(visible: usize, hidden: Vec<usize>, seed: u64, init_scale: f64) -> PyResult<Self> {
        if visible == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(PyValueError::new_err("dimensions must be positive"));
        }
        let mut rng = derive_rng(seed, stream::GRAD, u64::MAX);
        Ok(SbnSystem {
            model: GenerativeSbn::random(visible, &hidden, init_scale, &mut rng),
            proposal: RecognitionSbn::random(visible, &hidden, init_scale, &mut rng),
        })
    }

    #[getter]
    fn visible(&self) -> usize {
        self.model.visible_dim()
    }

    #[getter]
    fn hidden(&self) -> Vec<usize> {
        self.model.hidden_dims().to_vec()
    }

    fn log_joint(&self, x: Vec<u8>, z: Vec<u8>) -> PyResult<f64> {
        check_bits_arg("x", &x)?;
        check_bits_arg("z", &z)?;
        self.model.log_joint(&x, &z).map_err(value_err)
    }

    fn log_q(&self, x: Vec<u8>, z: Vec<u8>) -> PyResult<f64> {
        check_bits_arg("x", &x)?;
        check_bits_arg("z", &z)?;
        self.proposal.log_q(&x, &z).map_err(value_err)
    }

    /// One recognition-network draw.
    #[pyo3(signature = (x, seed=0))]
    fn sample_latent(&self, x: Vec<u8>, seed: u64) -> PyResult<Vec<u8>> {
        check_bits_arg("x", &x)?;
        let mut rng = derive_rng(seed, stream::GRAD, 0);
        Ok(self.proposal.sample(&x, &mut rng))
    }

    /// One accepted draw through the rejection step: `(z, attempts)`.
    #[pyo3(signature = (x, threshold, seed=0))]
    fn sample_accepted(&self, x: Vec<u8>, threshold: f64, seed: u64) -> PyResult<(Vec<u8>, u32)> {
        check_bits_arg("x", &x)?;
        let rp = ResampledProposal::new(&self.proposal, &self.model, threshold);
        let mut rng = derive_rng(seed, stream::GRAD, 1);
        rp.sample(&x, &mut rng).map_err(runtime_err)
    }

    #[pyo3(signature = (x, gamma, n, seed=0))]
    fn estimate_threshold(&self, x: Vec<u8>, gamma: f64, n: usize, seed: u64) -> PyResult<f64> {
        check_bits_arg("x", &x)?;
        let mut rng = derive_rng(seed, stream::THRESHOLD_REFRESH, 0);
        estimate_threshold(&self.proposal, &self.model, &x, gamma, n, &mut rng).map_err(value_err)
    }

    /// Importance-sampled lower-bound estimate with `k` draws.
    #[pyo3(signature = (x, k=25, seed=0))]
    fn eval_is(&self, x: Vec<u8>, k: usize, seed: u64) -> PyResult<f64> {
        check_bits_arg("x", &x)?;
        let mut rng = derive_rng(seed, stream::EVAL, 0);
        eval_is_bound(&self.model, &self.proposal, &x, k, &mut rng).map_err(value_err)
    }

    /// Resampled lower-bound estimate from `accepted` accepted draws plus a
    /// `zr_samples`-draw partition estimate, at an on-the-fly threshold.
    #[pyo3(signature = (x, gamma=0.9, quantile_samples=50, accepted=25, zr_samples=100, seed=0))]
    fn eval_rs(
        &self,
        x: Vec<u8>,
        gamma: f64,
        quantile_samples: usize,
        accepted: usize,
        zr_samples: usize,
        seed: u64,
    ) -> PyResult<f64> {
        check_bits_arg("x", &x)?;
        let mut rng = derive_rng(seed, stream::EVAL, 1);
        let threshold = estimate_threshold(
            &self.proposal,
            &self.model,
            &x,
            gamma,
            quantile_samples,
            &mut rng,
        )
        .map_err(value_err)?;
        let rp = ResampledProposal::new(&self.proposal, &self.model, threshold);
        let mut rng = derive_rng(seed, stream::EVAL, 2);
        eval_rs_bound(&rp, &x, accepted, zr_samples, &mut rng).map_err(runtime_err)
    }

    /// Trains in place on binary images and returns a summary dict.
    #[pyo3(signature = (images, epochs=1, batch_size=50, gamma=0.9, s=5, quantile_samples=50, lr=3e-4, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        images: Vec<Vec<u8>>,
        epochs: u32,
        batch_size: usize,
        gamma: f64,
        s: usize,
        quantile_samples: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<Py<PyAny>> {
        for im in &images {
            check_bits_arg("images", im)?;
        }
        let steps_per_epoch = images.len().div_ceil(batch_size.max(1)) as u64;
        let config = TrainConfig {
            gamma,
            refresh_steps: steps_per_epoch,
            quantile_samples,
            cov_samples: s,
            epochs,
            batch_size,
            optimizer: OptimizerKind::adam(lr),
            seed,
            max_attempts: 10_000,
            fixed_threshold: None,
        };
        let mut trainer = Trainer::new(
            self.model.clone(),
            self.proposal.clone(),
            config,
            images.len(),
        )
        .map_err(value_err)?;
        trainer.train(&images).map_err(runtime_err)?;
        let (first, last) = trainer.metrics().accept_rate_trend(0.1);
        let slope = trainer.metrics().signal_slope();
        let final_signal = trainer
            .metrics()
            .records()
            .last()
            .map(|r| r.signal_mean)
            .unwrap_or(f64::NAN);
        self.model = trainer.model().clone();
        self.proposal = trainer.proposal().clone();

        let summary = pyo3::types::PyDict::new(py);
        summary.set_item("steps", trainer.step())?;
        summary.set_item("signal_slope", slope)?;
        summary.set_item("final_signal_mean", final_signal)?;
        summary.set_item("accept_rate_first_decile", first)?;
        summary.set_item("accept_rate_last_decile", last)?;
        Ok(summary.into_any().unbind())
    }
}

/// Deterministic digit-like binary images (thresholded), for demos and tests.
#[pyfunction]
#[pyo3(signature = (count, seed=0))]
fn synthetic_images(count: usize, seed: u64) -> Vec<Vec<u8>> {
    binarize_images(&synthetic_digits(count, 28, seed), BinarizeMode::Threshold)
}

#[pymodule]
fn vrs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<GridSystem>()?;
    m.add_class::<ToySystem>()?;
    m.add_class::<SbnSystem>()?;
    m.add_function(wrap_pyfunction!(synthetic_images, m)?)?;
    Ok(())
}
