//! Exponential moving averages: the update rule, the closed-form
//! multi-step transition map, and limiting statistics of EMA iterates.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::{ParamVector, RngStream};
use crate::error::{Error, Result};

/// EMA tracker state: the averaged vector and its momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub zeta: ParamVector,
    pub rho: f64,
}

impl EmaState {
    pub fn new(zeta: ParamVector, rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidArgument(format!(
                "EMA momentum must lie in [0, 1), got {rho}"
            )));
        }
        Ok(EmaState { zeta, rho })
    }
}

/// One EMA update against the target iterate *before* the optimizer step:
/// zeta' = rho * zeta + (1 - rho) * theta.
pub fn ema_update(state: &EmaState, theta: &ParamVector) -> Result<EmaState> {
    theta.check_dim(state.zeta.dim())?;
    let rho = state.rho;
    let zeta: Vec<f64> = state
        .zeta
        .as_slice()
        .iter()
        .zip(theta.as_slice())
        .map(|(z, t)| rho * z + (1.0 - rho) * t)
        .collect();
    Ok(EmaState {
        zeta: ParamVector::new(zeta)?,
        rho,
    })
}

/// Same update formula, applied against the target iterate *after* the
/// optimizer step (the Polyak-averaging convention). Callers choose one
/// ordering and keep it consistent across a run.
pub fn ema_update_post(state: &EmaState, theta_updated: &ParamVector) -> Result<EmaState> {
    ema_update(state, theta_updated)
}

/// Affine one-step map on (theta, zeta, 1) for gradient descent with mean
/// gradient frozen at g = 1 (unit drift), paired with an EMA update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionMatrix(pub [[f64; 3]; 3]);

impl TransitionMatrix {
    /// Single-step map: theta' = theta - eta, zeta' = (1-rho) theta + rho zeta.
    pub fn base(eta: f64, rho: f64) -> TransitionMatrix {
        TransitionMatrix([
            [1.0, 0.0, -eta],
            [1.0 - rho, rho, 0.0],
            [0.0, 0.0, 1.0],
        ])
    }

    pub fn matmul(&self, other: &TransitionMatrix) -> TransitionMatrix {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        TransitionMatrix(out)
    }

    /// Apply to an augmented state (theta, zeta, 1).
    pub fn apply(&self, theta: f64, zeta: f64) -> (f64, f64) {
        let x = [theta, zeta, 1.0];
        let mut y = [0.0; 2];
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = (0..3).map(|k| self.0[i][k] * x[k]).sum();
        }
        (y[0], y[1])
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!(
            "EMA momentum must lie in [0, 1), got {rho}"
        )));
    }
    Ok(())
}

/// Closed form of the kappa-fold composition of the one-step map:
/// theta picks up -kappa*eta, zeta mixes with momentum rho^kappa, and the
/// cross term delta(eta, rho, kappa) captures the within-window drift the
/// EMA sees when the target moves during the kappa base steps.
pub fn transition_power(eta: f64, rho: f64, kappa: u32) -> Result<TransitionMatrix> {
    check_rho(rho)?;
    if kappa == 0 {
        return Err(Error::InvalidArgument(
            "transition power requires at least one step".into(),
        ));
    }
    let k = kappa as f64;
    let rho_k = rho.powi(kappa as i32);
    Ok(TransitionMatrix([
        [1.0, 0.0, -k * eta],
        [1.0 - rho_k, rho_k, delta_error(eta, rho, kappa)?],
        [0.0, 0.0, 1.0],
    ]))
}

/// The (zeta, constant) entry of the kappa-step map:
/// delta = -eta * (kappa - (1 - rho^kappa) / (1 - rho)).
///
/// This is exactly the mismatch between taking kappa unit-drift steps and the
/// single scaled step the EMA scaling rule replaces them with; it vanishes at
/// kappa = 1 and is O(kappa^2 * eta * (1 - rho)) for slow EMAs.
pub fn delta_error(eta: f64, rho: f64, kappa: u32) -> Result<f64> {
    check_rho(rho)?;
    if kappa == 0 {
        return Err(Error::InvalidArgument(
            "delta error requires at least one step".into(),
        ));
    }
    let k = kappa as f64;
    let rho_k = rho.powi(kappa as i32);
    Ok(-eta * (k - (1.0 - rho_k) / (1.0 - rho)))
}

/// Ratio Var[zeta] / Var[theta*] for an EMA of iid draws theta*:
/// after n updates from a cold start it is
/// [(1 - rho^{2n}) / (1 + rho^{2n})] * [(1 - rho) / (1 + rho)];
/// with `n = None` (stationarity) the first factor is 1.
pub fn limiting_variance_prefactor(rho: f64, n: Option<u64>) -> Result<f64> {
    check_rho(rho)?;
    let stationary = (1.0 - rho) / (1.0 + rho);
    Ok(match n {
        None => stationary,
        Some(n) => {
            let r2n = rho.powf(2.0 * n as f64);
            stationary * (1.0 - r2n) / (1.0 + r2n)
        }
    })
}

/// Empirical check of the limiting statistics against a user-supplied iid
/// sampler of the stationary target distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitingStats {
    /// Empirical mean of the EMA divided by the empirical mean of the target.
    pub mean_ratio: f64,
    /// Empirical variance of the EMA divided by that of the target.
    pub var_ratio: f64,
    /// Analytic stationary prediction for `var_ratio`.
    pub predicted_var_ratio: f64,
    /// Whether the horizon comfortably covers the EMA mixing time.
    pub converged: bool,
}

/// Run an EMA of `horizon` iid draws of the target and compare its mean and
/// variance with the target's, discarding a burn-in long enough for the EMA
/// to forget its cold start.
pub fn limiting_stats_check(
    rho: f64,
    horizon: u64,
    mut sampler: impl FnMut(&mut ChaCha8Rng) -> f64,
    stream: RngStream,
) -> Result<LimitingStats> {
    check_rho(rho)?;
    if horizon < 4 {
        return Err(Error::InvalidArgument(
            "horizon too short for limiting statistics".into(),
        ));
    }
    // Roughly 20 mixing times, but never more than half the horizon.
    let burn_in = ((20.0 / (1.0 - rho)).ceil() as u64).min(horizon / 2);
    let converged = (horizon - burn_in) as f64 * (1.0 - rho) >= 100.0;

    let mut rng = stream.rng();
    let mut zeta = 0.0;
    let mut started = false;
    // Welford accumulators for (theta draw, post-update EMA).
    let mut n = 0.0;
    let (mut mt, mut m2t) = (0.0, 0.0);
    let (mut mz, mut m2z) = (0.0, 0.0);
    for t in 0..horizon {
        let theta = sampler(&mut rng);
        if !theta.is_finite() {
            return Err(Error::NonFinite("limiting_stats_check sampler"));
        }
        if !started {
            zeta = theta;
            started = true;
        } else {
            zeta = rho * zeta + (1.0 - rho) * theta;
        }
        if t >= burn_in {
            n += 1.0;
            let d = theta - mt;
            mt += d / n;
            m2t += d * (theta - mt);
            let d = zeta - mz;
            mz += d / n;
            m2z += d * (zeta - mz);
        }
    }
    if m2t <= 0.0 || mt == 0.0 {
        return Err(Error::InsufficientSamples(
            "target sampler produced a degenerate distribution".into(),
        ));
    }
    Ok(LimitingStats {
        mean_ratio: mz / mt,
        var_ratio: m2z / m2t,
        predicted_var_ratio: limiting_variance_prefactor(rho, None)?,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn ema_update_mixes() {
        let state = EmaState::new(ParamVector::new(vec![0.0, 2.0]).unwrap(), 0.9).unwrap();
        let theta = ParamVector::new(vec![1.0, 1.0]).unwrap();
        let next = ema_update(&state, &theta).unwrap();
        assert_relative_eq!(next.zeta[0], 0.1);
        assert_relative_eq!(next.zeta[1], 1.9);
        // rho = 0 copies the target
        let copy = EmaState::new(ParamVector::zeros(2), 0.0).unwrap();
        let next = ema_update_post(&copy, &theta).unwrap();
        assert_eq!(next.zeta, theta);
        assert!(EmaState::new(ParamVector::zeros(1), 1.0).is_err());
    }

    #[test]
    fn transition_power_matches_repeated_composition() {
        for &(eta, rho, kappa) in &[(0.1, 0.9, 1u32), (0.1, 0.9, 7), (1e-3, 0.999, 64), (0.5, 0.0, 5)] {
            let closed = transition_power(eta, rho, kappa).unwrap();
            let base = TransitionMatrix::base(eta, rho);
            let mut brute = TransitionMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
            for _ in 0..kappa {
                brute = base.matmul(&brute);
            }
            for i in 0..3 {
                for j in 0..3 {
                    assert_relative_eq!(closed.0[i][j], brute.0[i][j], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn transition_power_kappa_one_is_base() {
        let p = transition_power(0.2, 0.8, 1).unwrap();
        let b = TransitionMatrix::base(0.2, 0.8);
        assert_eq!(p.0, b.0);
        assert_relative_eq!(delta_error(0.2, 0.8, 1).unwrap(), 0.0);
    }

    #[test]
    fn delta_error_shrinks_for_slow_ema() {
        // As rho -> 1 the EMA barely reads the moving target, so the
        // within-window drift term vanishes.
        let d_fast = delta_error(0.1, 0.9, 16).unwrap().abs();
        let d_slow = delta_error(0.1, 0.9999, 16).unwrap().abs();
        assert!(d_slow < d_fast);
        assert!(d_slow < 0.1 * 16.0 * 16.0 * 1e-4);
    }

    #[test]
    fn prefactor_values() {
        assert_relative_eq!(limiting_variance_prefactor(0.0, None).unwrap(), 1.0);
        assert_relative_eq!(
            limiting_variance_prefactor(0.9, None).unwrap(),
            0.1 / 1.9,
            epsilon = 1e-15
        );
        // cold start: n = 0 draws gives 0, and large n approaches stationarity
        assert_relative_eq!(limiting_variance_prefactor(0.9, Some(0)).unwrap(), 0.0);
        assert_relative_eq!(
            limiting_variance_prefactor(0.9, Some(500)).unwrap(),
            0.1 / 1.9,
            epsilon = 1e-15
        );
        assert!(limiting_variance_prefactor(1.0, None).is_err());
    }

    #[test]
    fn limiting_stats_match_prediction() {
        let stats = limiting_stats_check(
            0.9,
            200_000,
            |rng| 3.0 + 2.0 * rng.sample::<f64, _>(StandardNormal),
            RngStream::new(11, 0),
        )
        .unwrap();
        assert!(stats.converged);
        assert_relative_eq!(stats.mean_ratio, 1.0, epsilon = 0.01);
        assert_relative_eq!(
            stats.var_ratio,
            stats.predicted_var_ratio,
            max_relative = 0.05
        );
    }

    #[test]
    fn limiting_stats_identity_at_rho_zero() {
        // rho = 0 makes the EMA a copy of the target: ratios exactly 1.
        let stats = limiting_stats_check(
            0.0,
            10_000,
            |rng| 1.0 + rng.sample::<f64, _>(StandardNormal),
            RngStream::new(5, 1),
        )
        .unwrap();
        assert_eq!(stats.mean_ratio, 1.0);
        assert_eq!(stats.var_ratio, 1.0);
    }
}
