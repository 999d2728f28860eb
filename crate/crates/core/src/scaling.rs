//! Batch-size scaling rules for optimizer and EMA hyperparameters, table
//! emission, and progressive batch-size schedules.

use serde::{Deserialize, Serialize};

use crate::core::HyperParams;
use crate::error::{Error, Result};

/// Optimizer whose hyperparameters are being rescaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    HeavyBall,
    RmsProp,
    Adam,
    AdamW,
}

impl Optimizer {
    /// Whether the learning rate scales with sqrt(kappa) instead of kappa.
    pub fn uses_sqrt_lr_rule(self) -> bool {
        matches!(self, Optimizer::RmsProp | Optimizer::Adam | Optimizer::AdamW)
    }

    /// Whether weight decay is applied decoupled from the gradient step.
    pub fn decoupled_weight_decay(self) -> bool {
        matches!(self, Optimizer::AdamW)
    }
}

/// EMA momentum scaling variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmaVariant {
    /// rho-hat = rho^kappa (exact for constant targets, the default rule).
    Exponential,
    /// rho-hat = 1 - kappa * (1 - rho), the first-order approximation.
    Linear,
}

/// A request to rescale base hyperparameters to a new batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRequest {
    pub base: HyperParams,
    pub base_batch: u64,
    pub target_batch: u64,
    pub optimizer: Optimizer,
}

impl ScalingRequest {
    pub fn kappa(&self) -> Result<f64> {
        if self.base_batch == 0 || self.target_batch == 0 {
            return Err(Error::InvalidArgument(
                "batch sizes must be at least 1".into(),
            ));
        }
        Ok(self.target_batch as f64 / self.base_batch as f64)
    }
}

/// Scale the EMA momentum for a kappa-fold batch-size change.
pub fn scale_ema(rho: f64, kappa: f64, variant: EmaVariant) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!(
            "EMA momentum must lie in [0, 1), got {rho}"
        )));
    }
    check_kappa(kappa)?;
    match variant {
        EmaVariant::Exponential => Ok(rho.powf(kappa)),
        EmaVariant::Linear => {
            let scaled = 1.0 - kappa * (1.0 - rho);
            if !(0.0..1.0).contains(&scaled) {
                return Err(Error::ScalingOutOfRange {
                    rule: "linear EMA",
                    detail: format!("1 - {kappa} * (1 - {rho}) = {scaled} leaves [0, 1)"),
                });
            }
            Ok(scaled)
        }
    }
}

fn check_kappa(kappa: f64) -> Result<f64> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scaling factor must be positive, got {kappa}"
        )));
    }
    Ok(kappa)
}

fn scale_beta(name: &'static str, beta: f64, kappa: f64) -> Result<f64> {
    let scaled = 1.0 - kappa * (1.0 - beta);
    if !(0.0..1.0).contains(&scaled) {
        return Err(Error::ScalingOutOfRange {
            rule: name,
            detail: format!("1 - {kappa} * (1 - {beta}) = {scaled} leaves [0, 1)"),
        });
    }
    Ok(scaled)
}

/// Scale the weight decay coefficient.
///
/// Coupled decay (appears inside the gradient, SGD/Adam style) transforms as
/// lambda-hat = (eta / eta-hat) * kappa * lambda, so it is unchanged under
/// the linear learning-rate rule and grows by sqrt(kappa) under the
/// square-root rule. Decoupled decay (AdamW) composes multiplicative
/// shrink factors: lambda-hat = 1 - (1 - lambda)^kappa.
pub fn scale_weight_decay(
    lambda: f64,
    eta: f64,
    eta_hat: f64,
    kappa: f64,
    decoupled: bool,
) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "weight decay must be non-negative, got {lambda}"
        )));
    }
    check_kappa(kappa)?;
    if decoupled {
        if lambda >= 1.0 {
            return Err(Error::ScalingOutOfRange {
                rule: "decoupled weight decay",
                detail: format!("base decay {lambda} must lie in [0, 1)"),
            });
        }
        Ok(1.0 - (1.0 - lambda).powf(kappa))
    } else {
        if !(eta > 0.0 && eta_hat > 0.0) {
            return Err(Error::InvalidArgument(
                "coupled weight decay scaling needs positive learning rates".into(),
            ));
        }
        Ok(eta / eta_hat * kappa * lambda)
    }
}

/// Apply the full set of scaling rules for one optimizer.
///
/// SGD and heavy-ball use the linear learning-rate rule eta-hat = kappa*eta;
/// RMSProp/Adam/AdamW use the square-root rule together with the
/// 1 - kappa*(1 - beta) moment rules and epsilon-hat = epsilon / sqrt(kappa).
/// The EMA momentum always follows the exponential rule rho-hat = rho^kappa.
pub fn scale(req: &ScalingRequest) -> Result<HyperParams> {
    req.base.validate()?;
    let kappa = req.kappa()?;
    let mut hp = req.base.clone();
    hp.batch_size = req.target_batch;
    if req.optimizer.uses_sqrt_lr_rule() {
        hp.eta = kappa.sqrt() * req.base.eta;
        hp.beta1 = scale_beta("beta1", req.base.beta1, kappa)?;
        hp.beta2 = scale_beta("beta2", req.base.beta2, kappa)?;
        hp.epsilon = req.base.epsilon / kappa.sqrt();
    } else {
        hp.eta = kappa * req.base.eta;
    }
    hp.rho = scale_ema(req.base.rho, kappa, EmaVariant::Exponential)?;
    hp.weight_decay = scale_weight_decay(
        req.base.weight_decay,
        req.base.eta,
        hp.eta,
        kappa,
        req.optimizer.decoupled_weight_decay(),
    )?;
    hp.validate()?;
    Ok(hp)
}

/// Single-precision replica of [`scale`], matching reference tables that
/// were produced with 32-bit arithmetic. Returns the scaled values widened
/// back to f64 after the f32 computation.
pub fn scale_single_precision(req: &ScalingRequest) -> Result<HyperParams> {
    req.base.validate()?;
    let kappa = req.kappa()? as f32;
    let mut hp = req.base.clone();
    hp.batch_size = req.target_batch;
    if req.optimizer.uses_sqrt_lr_rule() {
        hp.eta = (kappa.sqrt() * req.base.eta as f32) as f64;
        hp.beta1 = (1.0f32 - kappa * (1.0f32 - req.base.beta1 as f32)) as f64;
        hp.beta2 = (1.0f32 - kappa * (1.0f32 - req.base.beta2 as f32)) as f64;
        hp.epsilon = (req.base.epsilon as f32 / kappa.sqrt()) as f64;
    } else {
        hp.eta = (kappa * req.base.eta as f32) as f64;
    }
    hp.rho = ((req.base.rho as f32).powf(kappa)) as f64;
    hp.weight_decay = if req.optimizer.decoupled_weight_decay() {
        (1.0f32 - (1.0f32 - req.base.weight_decay as f32).powf(kappa)) as f64
    } else if req.base.weight_decay == 0.0 {
        0.0
    } else {
        (req.base.eta as f32 / hp.eta as f32 * kappa * req.base.weight_decay as f32) as f64
    };
    hp.validate()?;
    Ok(hp)
}

/// Format a table value with five decimal places, trailing zeros trimmed,
/// the convention used by the reference tables.
pub fn format_table_value(v: f64) -> String {
    let s = format!("{v:.5}");
    let t = s.trim_end_matches('0').trim_end_matches('.');
    if t.is_empty() || t == "-" {
        "0".into()
    } else {
        t.to_string()
    }
}

/// One row of an emitted hyperparameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub batch_size: u64,
    pub kappa: f64,
    pub hparams: HyperParams,
}

/// Numeric precision used when emitting tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TablePrecision {
    /// Double-precision scaling (default).
    Exact,
    /// 32-bit scaling, for byte-compatibility with the reference tables.
    Single,
}

/// Default batch-size column of the reference tables: 32 to 65536.
pub fn default_batch_sizes() -> Vec<u64> {
    (5..=16).map(|p| 1u64 << p).collect()
}

/// Emit scaled hyperparameters for each target batch size.
pub fn emit_hparam_table(
    base: &HyperParams,
    optimizer: Optimizer,
    base_batch: u64,
    batch_sizes: &[u64],
    precision: TablePrecision,
) -> Result<Vec<TableRow>> {
    if batch_sizes.is_empty() {
        return Err(Error::InvalidArgument(
            "table needs at least one batch size".into(),
        ));
    }
    batch_sizes
        .iter()
        .map(|&b| {
            let req = ScalingRequest {
                base: base.clone(),
                base_batch,
                target_batch: b,
                optimizer,
            };
            let hparams = match precision {
                TablePrecision::Exact => scale(&req)?,
                TablePrecision::Single => scale_single_precision(&req)?,
            };
            Ok(TableRow {
                batch_size: b,
                kappa: req.kappa()?,
                hparams,
            })
        })
        .collect()
}

/// Range of batch-scaling factors over which rho^kappa is representable:
/// kappa above the upper bound drives rho-hat below machine epsilon, and
/// kappa below the lower bound leaves rho-hat within machine epsilon of 1.
/// Returns (kappa_min, kappa_max).
pub fn momentum_bounds(rho: f64, machine_epsilon: f64) -> Result<(f64, f64)> {
    if !(0.0 < rho && rho < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "EMA momentum must lie in (0, 1), got {rho}"
        )));
    }
    if !(0.0 < machine_epsilon && machine_epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "machine epsilon must lie in (0, 1), got {machine_epsilon}"
        )));
    }
    let ln_rho = rho.ln();
    Ok((
        (1.0 - machine_epsilon).ln() / ln_rho,
        machine_epsilon.ln() / ln_rho,
    ))
}

/// How a progressive schedule moves between breakpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    /// Jump to each breakpoint batch size at its epoch.
    Step,
    /// Insert one stage per whole epoch, linearly interpolating batch size.
    SmoothLinear,
}

/// One stage of a progressive batch-size schedule. Hyperparameters are
/// always rescaled from the base configuration, never chained stage to stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStage {
    pub start_epoch: f64,
    pub batch_size: u64,
    pub kappa: f64,
    pub hparams: HyperParams,
}

/// A progressive batch-size schedule with fully resolved hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPlan {
    pub optimizer: Optimizer,
    pub base_batch: u64,
    pub base: HyperParams,
    pub transition: Transition,
    pub stages: Vec<PlanStage>,
}

/// Build a progressive schedule from (epoch, batch size) breakpoints.
pub fn progressive_schedule(
    base: &HyperParams,
    optimizer: Optimizer,
    base_batch: u64,
    breakpoints: &[(f64, u64)],
    transition: Transition,
) -> Result<ScalingPlan> {
    base.validate()?;
    if base_batch == 0 {
        return Err(Error::InvalidArgument(
            "base batch size must be at least 1".into(),
        ));
    }
    if breakpoints.is_empty() {
        return Err(Error::InvalidArgument(
            "schedule needs at least one breakpoint".into(),
        ));
    }
    for (i, &(epoch, batch)) in breakpoints.iter().enumerate() {
        if !(epoch.is_finite() && epoch >= 0.0) {
            return Err(Error::StageOutOfRange {
                stage: i,
                detail: format!("epoch must be non-negative and finite, got {epoch}"),
            });
        }
        if batch == 0 {
            return Err(Error::StageOutOfRange {
                stage: i,
                detail: "batch size must be at least 1".into(),
            });
        }
        if i > 0 && epoch <= breakpoints[i - 1].0 {
            return Err(Error::StageOutOfRange {
                stage: i,
                detail: format!(
                    "epochs must be strictly increasing, got {} after {}",
                    epoch,
                    breakpoints[i - 1].0
                ),
            });
        }
    }

    let resolved: Vec<(f64, u64)> = match transition {
        Transition::Step => breakpoints.to_vec(),
        Transition::SmoothLinear => {
            let mut points = Vec::new();
            for pair in breakpoints.windows(2) {
                let (e0, b0) = pair[0];
                let (e1, b1) = pair[1];
                // One stage per whole epoch across the segment.
                let mut e = e0;
                while e < e1 {
                    let frac = (e - e0) / (e1 - e0);
                    let b = b0 as f64 + frac * (b1 as f64 - b0 as f64);
                    points.push((e, b.round().max(1.0) as u64));
                    e += 1.0;
                }
            }
            points.push(*breakpoints.last().unwrap());
            points
        }
    };

    let stages = resolved
        .iter()
        .enumerate()
        .map(|(i, &(start_epoch, batch_size))| {
            let req = ScalingRequest {
                base: base.clone(),
                base_batch,
                target_batch: batch_size,
                optimizer,
            };
            let hparams = scale(&req).map_err(|e| Error::StageOutOfRange {
                stage: i,
                detail: e.to_string(),
            })?;
            Ok(PlanStage {
                start_epoch,
                batch_size,
                kappa: req.kappa()?,
                hparams,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ScalingPlan {
        optimizer,
        base_batch,
        base: base.clone(),
        transition,
        stages,
    })
}
