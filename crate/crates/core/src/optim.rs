//! Noisy gradient oracles and optimizer step rules.
//!
//! Steppers are pure: they take the current state and return the updated
//! state, so trajectories can be replayed and compared deterministically.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::core::ParamVector;
use crate::error::{Error, Result};

/// Writes a per-coordinate quantity of a (target, EMA) pair into `out`.
pub type FieldFn = Box<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Noisy gradient oracle: mean gradient plus Gaussian noise whose
/// per-coordinate variance shrinks linearly in the batch-scaling factor.
pub struct NgosSpec {
    pub dim: usize,
    /// Mean gradient as a function of (target, EMA) parameters.
    pub mean_grad: FieldFn,
    /// Per-coordinate noise covariance (diagonal), before the 1/kappa factor.
    pub cov_diag: FieldFn,
    /// Global noise scale multiplying the covariance square root.
    pub noise_scale: f64,
}

impl NgosSpec {
    /// Oracle with state-independent diagonal covariance.
    pub fn with_constant_cov(
        dim: usize,
        mean_grad: FieldFn,
        cov: Vec<f64>,
        noise_scale: f64,
    ) -> Result<Self> {
        if cov.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: cov.len(),
            });
        }
        if cov.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidArgument(
                "noise covariance entries must be non-negative".into(),
            ));
        }
        Ok(NgosSpec {
            dim,
            mean_grad,
            cov_diag: Box::new(move |_, _, out| out.copy_from_slice(&cov)),
            noise_scale,
        })
    }
}

/// Draw one noisy gradient sample at batch-scaling factor `kappa`.
///
/// The sample is mean + noise_scale * sqrt(cov / kappa) * N(0, I), matching
/// the variance reduction of averaging `kappa` independent micro-batches.
pub fn ngos_sample(
    spec: &NgosSpec,
    theta: &ParamVector,
    zeta: &ParamVector,
    kappa: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ParamVector> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scaling factor must be positive, got {kappa}"
        )));
    }
    theta.check_dim(spec.dim)?;
    zeta.check_dim(spec.dim)?;
    let mut g = vec![0.0; spec.dim];
    let mut cov = vec![0.0; spec.dim];
    (spec.mean_grad)(theta.as_slice(), zeta.as_slice(), &mut g);
    (spec.cov_diag)(theta.as_slice(), zeta.as_slice(), &mut cov);
    for (gi, ci) in g.iter_mut().zip(cov.iter()) {
        if *ci < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "negative noise covariance entry {ci}"
            )));
        }
        let z: f64 = rng.sample(StandardNormal);
        *gi += spec.noise_scale * (ci / kappa).sqrt() * z;
    }
    let g = ParamVector::from_raw(g);
    if !g.is_finite() {
        return Err(Error::NonFinite("ngos_sample"));
    }
    Ok(g)
}

/// Momentum / second-moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// Heavy-ball momentum or Adam first-moment buffer.
    pub m: ParamVector,
    /// RMSProp / Adam second-moment buffer.
    pub v: ParamVector,
    /// Number of completed steps.
    pub step: u64,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        OptimizerState {
            m: ParamVector::zeros(dim),
            v: ParamVector::zeros(dim),
            step: 0,
        }
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {eta}"
        )));
    }
    Ok(())
}

fn finite_or_err(v: Vec<f64>, context: &'static str) -> Result<ParamVector> {
    let v = ParamVector::from_raw(v);
    if !v.is_finite() {
        return Err(Error::NonFinite(context));
    }
    Ok(v)
}

/// Plain SGD: theta' = theta - eta * g.
pub fn sgd_step(theta: &ParamVector, grad: &ParamVector, eta: f64) -> Result<ParamVector> {
    check_eta(eta)?;
    grad.check_dim(theta.dim())?;
    let out: Vec<f64> = theta
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(t, g)| t - eta * g)
        .collect();
    finite_or_err(out, "sgd_step")
}

/// Heavy-ball momentum: m' = mu * m + g; theta' = theta - eta * m'.
pub fn heavy_ball_step(
    state: &OptimizerState,
    theta: &ParamVector,
    grad: &ParamVector,
    eta: f64,
    mu: f64,
) -> Result<(OptimizerState, ParamVector)> {
    check_eta(eta)?;
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::InvalidArgument(format!(
            "momentum coefficient must lie in [0, 1), got {mu}"
        )));
    }
    grad.check_dim(theta.dim())?;
    state.m.check_dim(theta.dim())?;
    let m: Vec<f64> = state
        .m
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(m, g)| mu * m + g)
        .collect();
    let out: Vec<f64> = theta
        .as_slice()
        .iter()
        .zip(&m)
        .map(|(t, m)| t - eta * m)
        .collect();
    let next = OptimizerState {
        m: finite_or_err(m, "heavy_ball_step")?,
        v: state.v.clone(),
        step: state.step + 1,
    };
    Ok((next, finite_or_err(out, "heavy_ball_step")?))
}

/// RMSProp with the update normalized by the *previous* second moment:
/// v' = gamma * v + (1 - gamma) * g^2; theta' = theta - eta * g / (sqrt(v) + eps).
pub fn rmsprop_step(
    state: &OptimizerState,
    theta: &ParamVector,
    grad: &ParamVector,
    eta: f64,
    gamma: f64,
    epsilon: f64,
) -> Result<(OptimizerState, ParamVector)> {
    check_eta(eta)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "second-moment coefficient must lie in [0, 1], got {gamma}"
        )));
    }
    grad.check_dim(theta.dim())?;
    state.v.check_dim(theta.dim())?;
    let mut v = vec![0.0; theta.dim()];
    let mut out = vec![0.0; theta.dim()];
    for i in 0..theta.dim() {
        let g = grad[i];
        v[i] = gamma * state.v[i] + (1.0 - gamma) * g * g;
        out[i] = theta[i] - eta * g / (state.v[i].sqrt() + epsilon);
    }
    let next = OptimizerState {
        m: state.m.clone(),
        v: finite_or_err(v, "rmsprop_step")?,
        step: state.step + 1,
    };
    Ok((next, finite_or_err(out, "rmsprop_step")?))
}

/// Adam with the denominator built from the *previous* bias-corrected second
/// moment. The first step has no previous moment, so it falls back to the
/// current bias-corrected one (standard Adam), which makes the first update
/// magnitude approach eta as epsilon -> 0.
pub fn adam_step(
    state: &OptimizerState,
    theta: &ParamVector,
    grad: &ParamVector,
    eta: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<(OptimizerState, ParamVector)> {
    check_eta(eta)?;
    for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
        if !(0.0..1.0).contains(&b) {
            return Err(Error::InvalidArgument(format!(
                "{name} must lie in [0, 1), got {b}"
            )));
        }
    }
    grad.check_dim(theta.dim())?;
    state.m.check_dim(theta.dim())?;
    state.v.check_dim(theta.dim())?;
    let k = state.step;
    let bc1 = 1.0 - beta1.powi(k as i32 + 1);
    let mut m = vec![0.0; theta.dim()];
    let mut v = vec![0.0; theta.dim()];
    let mut out = vec![0.0; theta.dim()];
    for i in 0..theta.dim() {
        let g = grad[i];
        m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = if k == 0 {
            v[i] / (1.0 - beta2)
        } else {
            state.v[i] / (1.0 - beta2.powi(k as i32))
        };
        out[i] = theta[i] - eta * m_hat / (v_hat.sqrt() + epsilon);
    }
    let next = OptimizerState {
        m: finite_or_err(m, "adam_step")?,
        v: finite_or_err(v, "adam_step")?,
        step: state.step + 1,
    };
    Ok((next, finite_or_err(out, "adam_step")?))
}

/// Weight decay, either coupled (scales the whole iterate by 1 - eta*lambda,
/// rejected when that factor is non-positive) or decoupled (AdamW style,
/// multiplies by 1 - lambda).
pub fn apply_weight_decay(
    theta: &ParamVector,
    eta: f64,
    lambda: f64,
    coupled: bool,
) -> Result<ParamVector> {
    check_eta(eta)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "weight decay must be non-negative, got {lambda}"
        )));
    }
    let factor = if coupled {
        if eta * lambda >= 1.0 {
            return Err(Error::UnstableDecay(eta * lambda));
        }
        1.0 - eta * lambda
    } else {
        if lambda >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "decoupled weight decay must lie in [0, 1), got {lambda}"
            )));
        }
        1.0 - lambda
    };
    let out: Vec<f64> = theta.as_slice().iter().map(|t| t * factor).collect();
    finite_or_err(out, "apply_weight_decay")
}
