//! Toy self-distillation: a quadratic loss whose gradient depends on the
//! EMA (stop-gradient teacher), so the optimization endpoint couples to
//! the EMA momentum.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{mc_mean_var, replicate_stream, TrajectoryRecord, TrajectoryRow};
use crate::core::{HyperParams, ParamVector, RngStream};
use crate::error::{Error, Result};
use crate::scaling::ScalingPlan;

const DIVERGENCE_NORM: f64 = 1e12;

/// Loss f(theta, zeta) = (w/2)|theta - y|^2 + (mu/2)|theta - zeta|^2 with
/// the EMA detached: gradients flow through theta only. Gradient noise is
/// additive Gaussian with per-coordinate variance (noise_std / kappa^0.5)^2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillProblem {
    pub target: ParamVector,
    pub supervised_weight: f64,
    pub distill_weight: f64,
    pub noise_std: f64,
}

impl DistillProblem {
    pub fn new(
        target: ParamVector,
        supervised_weight: f64,
        distill_weight: f64,
        noise_std: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("supervised weight", supervised_weight),
            ("distillation weight", distill_weight),
            ("noise scale", noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(DistillProblem {
            target,
            supervised_weight,
            distill_weight,
            noise_std,
        })
    }

    pub fn loss(&self, theta: &[f64], zeta: &[f64]) -> f64 {
        let mut sup = 0.0;
        let mut dis = 0.0;
        for i in 0..theta.len() {
            let ds = theta[i] - self.target[i];
            let dd = theta[i] - zeta[i];
            sup += ds * ds;
            dis += dd * dd;
        }
        0.5 * self.supervised_weight * sup + 0.5 * self.distill_weight * dis
    }
}

/// One stage of the run: learning rate, EMA momentum, noise divisor, and
/// the continuous time at which it becomes active.
struct Stage {
    t_start: f64,
    eta: f64,
    rho: f64,
    kappa: f64,
}

/// Progressive-schedule inputs: the resolved plan and the number of
/// "epochs" its breakpoints span, mapped linearly onto the run horizon.
#[derive(Clone, Copy)]
pub struct ProgressiveRun<'a> {
    pub plan: &'a ScalingPlan,
    pub plan_epochs: f64,
}

/// Train on the distillation loss for the continuous-time horizon implied
/// by `iterations_base` baseline steps.
///
/// The optimizer follows the linear learning-rate rule at each stage's
/// kappa; the EMA momentum follows rho-hat = rho^kappa only when
/// `use_rule` is set. Without a progressive plan there is a single stage
/// at the given `kappa`.
#[allow(clippy::too_many_arguments)]
pub fn toy_distill_train(
    problem: &DistillProblem,
    hp_base: &HyperParams,
    iterations_base: usize,
    kappa: u32,
    use_rule: bool,
    progressive: Option<ProgressiveRun<'_>>,
    theta0: &ParamVector,
    stream: RngStream,
) -> Result<TrajectoryRecord> {
    hp_base.validate()?;
    if kappa == 0 {
        return Err(Error::InvalidArgument(
            "scaling factor must be at least 1".into(),
        ));
    }
    let d = problem.target.dim();
    theta0.check_dim(d)?;
    let total_time = iterations_base as f64 * hp_base.eta;
    let rho_for = |kap: f64| {
        if use_rule {
            hp_base.rho.powf(kap)
        } else {
            hp_base.rho
        }
    };
    let stages: Vec<Stage> = match progressive {
        None => vec![Stage {
            t_start: 0.0,
            eta: hp_base.eta * kappa as f64,
            rho: rho_for(kappa as f64),
            kappa: kappa as f64,
        }],
        Some(p) => {
            if p.plan.stages.is_empty() || !(p.plan_epochs.is_finite() && p.plan_epochs > 0.0) {
                return Err(Error::InvalidArgument(
                    "progressive plan needs stages and a positive epoch span".into(),
                ));
            }
            p.plan
                .stages
                .iter()
                .map(|s| Stage {
                    t_start: s.start_epoch / p.plan_epochs * total_time,
                    eta: hp_base.eta * s.kappa,
                    rho: rho_for(s.kappa),
                    kappa: s.kappa,
                })
                .collect()
        }
    };
    if stages[0].t_start > 0.0 {
        return Err(Error::StageOutOfRange {
            stage: 0,
            detail: "first stage must start at the beginning of the run".into(),
        });
    }

    let mut theta = theta0.as_slice().to_vec();
    let mut zeta = theta.clone();
    let mut rng = stream.rng();
    let mut rows = Vec::new();
    let mut t = 0.0;
    let mut step = 0u64;
    let mut stage_idx = 0usize;
    let record =
        |t: f64, step: u64, theta: &[f64], zeta: &[f64], rows: &mut Vec<TrajectoryRow>| {
            rows.push(TrajectoryRow {
                t,
                step,
                metric: "loss",
                value: problem.loss(theta, zeta),
            });
            rows.push(TrajectoryRow {
                t,
                step,
                metric: "theta_sq_norm",
                value: theta.iter().map(|v| v * v).sum(),
            });
            rows.push(TrajectoryRow {
                t,
                step,
                metric: "zeta_sq_norm",
                value: zeta.iter().map(|v| v * v).sum(),
            });
        };
    record(t, step, &theta, &zeta, &mut rows);
    while t < total_time - 1e-12 {
        while stage_idx + 1 < stages.len() && stages[stage_idx + 1].t_start <= t + 1e-12 {
            stage_idx += 1;
        }
        let stage = &stages[stage_idx];
        let sd = problem.noise_std / stage.kappa.sqrt();
        let mut norm_sq = 0.0;
        for i in 0..d {
            let mut grad = problem.supervised_weight * (theta[i] - problem.target[i])
                + problem.distill_weight * (theta[i] - zeta[i]);
            if sd > 0.0 {
                grad += sd * rng.sample::<f64, _>(StandardNormal);
            }
            zeta[i] = stage.rho * zeta[i] + (1.0 - stage.rho) * theta[i];
            theta[i] -= stage.eta * grad;
            norm_sq += theta[i] * theta[i];
        }
        t += stage.eta;
        step += 1;
        if !(norm_sq.is_finite() && norm_sq <= DIVERGENCE_NORM * DIVERGENCE_NORM) {
            return Err(Error::Diverged {
                step: step as usize,
                time: t,
            });
        }
        record(t, step, &theta, &zeta, &mut rows);
    }
    Ok(TrajectoryRecord {
        kappa: kappa as f64,
        rows,
    })
}

/// Max aligned-time gap in E|zeta|^2 between a kappa-scaled distillation
/// run with EMA momentum `rho_hat` and the baseline, over Monte Carlo
/// replicates. Returns (err, ci_halfwidth).
#[allow(clippy::too_many_arguments)]
pub fn toy_distill_err(
    problem: &DistillProblem,
    hp_base: &HyperParams,
    iterations_base: usize,
    kappa: u32,
    rho_hat: f64,
    replicates: usize,
    theta0: &ParamVector,
    stream: RngStream,
) -> Result<(f64, f64)> {
    hp_base.validate()?;
    if kappa == 0 || iterations_base < kappa as usize {
        return Err(Error::UnsupportedScaling(format!(
            "scaling factor {kappa} leaves no aligned step in {iterations_base} iterations"
        )));
    }
    if !(0.0..1.0).contains(&rho_hat) {
        return Err(Error::InvalidArgument(format!(
            "EMA momentum must lie in [0, 1), got {rho_hat}"
        )));
    }
    let d = problem.target.dim();
    theta0.check_dim(d)?;
    let trace = |eta: f64, rho: f64, kap: f64, steps: usize, lane: u64, r: usize, out: &mut [f64]| {
        let mut rng = replicate_stream(stream, lane, r).rng();
        let mut theta = theta0.as_slice().to_vec();
        let mut zeta = theta.clone();
        let sd = problem.noise_std / kap.sqrt();
        out[0] = zeta.iter().map(|v| v * v).sum();
        for k in 0..steps {
            let mut norm_sq = 0.0;
            for i in 0..d {
                let mut grad = problem.supervised_weight * (theta[i] - problem.target[i])
                    + problem.distill_weight * (theta[i] - zeta[i]);
                if sd > 0.0 {
                    grad += sd * rng.sample::<f64, _>(StandardNormal);
                }
                zeta[i] = rho * zeta[i] + (1.0 - rho) * theta[i];
                theta[i] -= eta * grad;
                norm_sq += theta[i] * theta[i];
            }
            if !(norm_sq.is_finite() && norm_sq <= DIVERGENCE_NORM * DIVERGENCE_NORM) {
                return Err(Error::Diverged {
                    step: k + 1,
                    time: (k + 1) as f64 * eta,
                });
            }
            out[k + 1] = zeta.iter().map(|v| v * v).sum();
        }
        Ok(())
    };
    let (bm, bv) = mc_mean_var(iterations_base + 1, 0..replicates, |r, out| {
        trace(hp_base.eta, hp_base.rho, 1.0, iterations_base, 0, r, out)
    })?;
    let kap = kappa as usize;
    let n_hat = iterations_base / kap;
    let (sm, sv) = mc_mean_var(n_hat + 1, 0..replicates, |r, out| {
        trace(
            hp_base.eta * kappa as f64,
            rho_hat,
            kappa as f64,
            n_hat,
            1,
            r,
            out,
        )
    })?;
    let n = replicates as f64;
    let mut best = (0.0f64, 0usize);
    for (j, s) in sm.iter().enumerate() {
        let diff = (s - bm[j * kap]).abs();
        if diff > best.0 {
            best = (diff, j);
        }
    }
    let (err, j_star) = best;
    let ci = 1.96 * (bv[j_star * kap] / n + sv[j_star] / n).sqrt();
    Ok((err, ci))
}
