//! Shared primitives: parameter vectors, hyperparameters, RNG streams,
//! continuous-time grids and scalar observables.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense vector of model parameters (or EMA parameters).
///
/// All entries are finite; constructors reject NaN/inf inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ParamVector::new"));
        }
        Ok(ParamVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    /// Construct without the finiteness check; callers must validate afterwards.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub(crate) fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: self.dim(),
            });
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// One optimizer configuration: learning rate, EMA momentum, batch size and
/// the Adam/RMSProp-specific knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta: f64,
    pub rho: f64,
    pub batch_size: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl HyperParams {
    /// Common case: SGD-style parameters with default Adam knobs.
    pub fn new(eta: f64, rho: f64, batch_size: u64) -> Result<Self> {
        let hp = HyperParams {
            eta,
            rho,
            batch_size,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {}",
                self.eta
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument(format!(
                "EMA momentum must lie in [0, 1), got {}",
                self.rho
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Handle for a reproducible, independent random stream.
///
/// Two streams with the same seed but different `stream_id` are independent;
/// the same (seed, stream_id) pair always yields the identical draw sequence,
/// regardless of thread count or interleaving with other streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    /// Instantiate the generator for this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Derived stream for sub-task `index` (e.g. one Monte Carlo replicate).
    pub fn substream(&self, index: u64) -> RngStream {
        // Streams are spaced so that independently-indexed families
        // (replicates, grid points, ...) never collide in practice.
        RngStream {
            seed: self.seed,
            stream_id: self
                .stream_id
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(index),
        }
    }
}

/// Which step-duration convention an optimizer family uses in continuous time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerFamily {
    /// SGD and heavy-ball momentum: one step advances time by eta-hat.
    SgdLike,
    /// RMSProp/Adam: one step advances time by eta-hat squared.
    Adaptive,
}

/// Duration of one optimizer step at batch-scaling factor `kappa`,
/// given base hyperparameters `hp`.
pub fn step_time(hp: &HyperParams, family: OptimizerFamily, kappa: f64) -> Result<f64> {
    step_time_from(hp.eta, family, kappa)
}

pub(crate) fn step_time_from(eta: f64, family: OptimizerFamily, kappa: f64) -> Result<f64> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scaling factor must be positive, got {kappa}"
        )));
    }
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {eta}"
        )));
    }
    Ok(match family {
        OptimizerFamily::SgdLike => kappa * eta,
        OptimizerFamily::Adaptive => {
            let eta_hat = kappa.sqrt() * eta;
            eta_hat * eta_hat
        }
    })
}

/// Continuous-time horizon shared by runs at different batch sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub total_time: f64,
    pub base_eta: f64,
    pub family: OptimizerFamily,
}

impl TimeGrid {
    pub fn new(total_time: f64, base_eta: f64, family: OptimizerFamily) -> Result<Self> {
        if !(total_time.is_finite() && total_time > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "total time must be positive, got {total_time}"
            )));
        }
        if !(base_eta.is_finite() && base_eta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "base learning rate must be positive, got {base_eta}"
            )));
        }
        Ok(TimeGrid {
            total_time,
            base_eta,
            family,
        })
    }

    /// Number of whole optimizer steps that fit in the horizon at scale `kappa`.
    pub fn iterations_for(&self, kappa: f64) -> Result<usize> {
        let dt = step_time_from(self.base_eta, self.family, kappa)?;
        let n = floor_ratio(self.total_time, dt);
        if n < 1 {
            return Err(Error::UnsupportedScaling(format!(
                "scale {kappa} leaves no whole step in horizon {}",
                self.total_time
            )));
        }
        Ok(n as usize)
    }
}

/// floor(num/den), robust to the ratio landing within floating-point error
/// of an integer (e.g. 1.0 / 1e-4 = 9999.999999999998).
pub(crate) fn floor_ratio(num: f64, den: f64) -> u64 {
    let q = num / den;
    let r = q.round();
    if (q - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r as u64
    } else {
        q.floor() as u64
    }
}

/// Scalar test function evaluated on a (target, EMA) parameter pair.
/// All variants read the EMA vector; target-model statistics are obtained by
/// passing the target in both positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Observable {
    /// Single coordinate of the EMA vector.
    Coordinate(usize),
    /// Square of a single EMA coordinate.
    CoordinateSquare(usize),
    /// Squared Euclidean norm of the EMA vector.
    SquaredNorm,
    /// Sum of integer powers of the EMA coordinates.
    PowerSum(i32),
}

impl Observable {
    pub fn evaluate(&self, theta: &ParamVector, zeta: &ParamVector) -> Result<f64> {
        theta.check_dim(zeta.dim())?;
        self.evaluate_slice(zeta.as_slice())
    }

    pub(crate) fn evaluate_slice(&self, zeta: &[f64]) -> Result<f64> {
        let check = |i: usize| -> Result<()> {
            if i >= zeta.len() {
                return Err(Error::InvalidArgument(format!(
                    "observable coordinate {i} out of range for dimension {}",
                    zeta.len()
                )));
            }
            Ok(())
        };
        Ok(match *self {
            Observable::Coordinate(i) => {
                check(i)?;
                zeta[i]
            }
            Observable::CoordinateSquare(i) => {
                check(i)?;
                zeta[i] * zeta[i]
            }
            Observable::SquaredNorm => zeta.iter().map(|v| v * v).sum(),
            Observable::PowerSum(p) => zeta.iter().map(|v| v.powi(p)).sum(),
        })
    }

    /// Short label used in trajectory output.
    pub fn label(&self) -> String {
        match *self {
            Observable::Coordinate(i) => format!("coord{i}"),
            Observable::CoordinateSquare(i) => format!("coord{i}_sq"),
            Observable::SquaredNorm => "sq_norm".into(),
            Observable::PowerSum(p) => format!("pow{p}_sum"),
        }
    }
}
