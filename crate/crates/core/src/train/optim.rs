//! Flat-vector optimizers with deterministic updates.

use thiserror::Error;

use crate::params::{ParamError, ParamVector};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid optimizer hyperparameter: {0}")]
    BadHyper(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd_momentum(lr: f64, momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { lr, momentum }
    }

    /// Adam with the usual default moment decays.
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        match *self {
            OptimizerKind::SgdMomentum { lr, momentum } => {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(OptimError::BadHyper(format!("lr {lr}")));
                }
                if !(0.0..1.0).contains(&momentum) {
                    return Err(OptimError::BadHyper(format!("momentum {momentum}")));
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(OptimError::BadHyper(format!("lr {lr}")));
                }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(OptimError::BadHyper(format!("betas ({beta1}, {beta2})")));
                }
                if eps <= 0.0 {
                    return Err(OptimError::BadHyper(format!("eps {eps}")));
                }
            }
        }
        Ok(())
    }
}

/// Per-parameter accumulators for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    SgdMomentum {
        lr: f64,
        momentum: f64,
        velocity: Vec<f64>,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        first_moment: Vec<f64>,
        second_moment: Vec<f64>,
    },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Result<Self, OptimError> {
        kind.validate()?;
        Ok(match kind {
            OptimizerKind::SgdMomentum { lr, momentum } => OptimizerState::SgdMomentum {
                lr,
                momentum,
                velocity: vec![0.0; n_params],
            },
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => OptimizerState::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step: 0,
                first_moment: vec![0.0; n_params],
                second_moment: vec![0.0; n_params],
            },
        })
    }

    /// One descent step on the given gradient. Callers maximizing an
    /// objective pass the negated gradient.
    pub fn descend(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<(), OptimError> {
        if params.len() != grad.len() {
            return Err(ParamError::LengthMismatch {
                expected: params.len(),
                got: grad.len(),
            }
            .into());
        }
        match self {
            OptimizerState::SgdMomentum {
                lr,
                momentum,
                velocity,
            } => {
                debug_assert_eq!(velocity.len(), params.len());
                for ((p, g), v) in params
                    .values_mut()
                    .iter_mut()
                    .zip(grad.values())
                    .zip(velocity.iter_mut())
                {
                    *v = *momentum * *v + g;
                    *p -= *lr * *v;
                }
            }
            OptimizerState::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                first_moment,
                second_moment,
            } => {
                *step += 1;
                let bc1 = 1.0 - beta1.powi(*step as i32);
                let bc2 = 1.0 - beta2.powi(*step as i32);
                for (((p, g), m), v) in params
                    .values_mut()
                    .iter_mut()
                    .zip(grad.values())
                    .zip(first_moment.iter_mut())
                    .zip(second_moment.iter_mut())
                {
                    *m = *beta1 * *m + (1.0 - *beta1) * g;
                    *v = *beta2 * *v + (1.0 - *beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= *lr * m_hat / (v_hat.sqrt() + *eps);
                }
            }
        }
        Ok(())
    }
}
