//! Overflow-safe scalar primitives shared by every log-space computation.

/// Softplus `log(1 + e^x)`, computed in the branch form that never overflows.
///
/// `softplus(-inf) = 0`, `softplus(+inf) = +inf`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid `1 / (1 + e^-x)`, stable for large `|x|`.
///
/// `sigmoid(-inf) = 0`, `sigmoid(+inf) = 1`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log sigmoid(x) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Log-probability of a single Bernoulli bit under logit parameterization.
///
/// Finite for every finite logit; no probability clipping involved.
pub fn bernoulli_log_prob(logit: f64, bit: u8) -> f64 {
    if bit == 1 {
        log_sigmoid(logit)
    } else {
        log_sigmoid(-logit)
    }
}

/// `log Σ e^{x_i}` with the max factored out. Empty input yields `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        // All -inf (or empty): the sum is 0. +inf / NaN propagate.
        return m;
    }
    let sum: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + sum.ln()
}

/// `log (1/n) Σ e^{x_i}`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

/// Poisson log-pmf at count `z` with the given rate.
pub fn poisson_log_pmf(rate: f64, z: u64) -> f64 {
    let zf = z as f64;
    zf * rate.ln() - rate - statrs::function::gamma::ln_gamma(zf + 1.0)
}
