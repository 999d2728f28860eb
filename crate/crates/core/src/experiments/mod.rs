//! Desk-scale studies: noisy-parabola trajectory matching and momentum
//! search, a toy Polyak-Ruppert classifier, and a toy self-distillation
//! problem with the EMA in the loss.

mod classify;
mod distill;
mod parabola;

pub use classify::{generate_blobs, toy_polyak_train, BlobDataset, DatasetSpec};
pub use distill::{toy_distill_err, toy_distill_train, DistillProblem, ProgressiveRun};
pub use parabola::{
    approximation_error, parabola_run, rho_star_search, ErrResult, ParabolaProblem,
    RhoSearchResult,
};

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::core::RngStream;
use crate::error::{Error, Result};

/// One recorded metric sample of an experiment trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub step: u64,
    pub metric: &'static str,
    pub value: f64,
}

/// Time series of scalar metrics from a single run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub kappa: f64,
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryRecord {
    /// All values of one metric, in time order.
    pub fn metric(&self, name: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.metric == name)
            .map(|r| (r.t, r.value))
            .collect()
    }

    /// Long-format CSV: `t,step,kappa,metric_name,value`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "t,step,kappa,metric_name,value")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.t, r.step, self.kappa, r.metric, r.value)?;
        }
        Ok(())
    }
}

const REPLICATE_BLOCK: usize = 64;

/// Per-step mean and sample variance of a scalar trajectory over Monte
/// Carlo replicates `reps`. `run(r, out)` fills `out` for replicate `r`.
///
/// Replicates are processed in fixed-size blocks in parallel and reduced
/// in block order, so results are identical for any thread count.
pub(crate) fn mc_mean_var(
    len: usize,
    reps: std::ops::Range<usize>,
    run: impl Fn(usize, &mut [f64]) -> Result<()> + Sync,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let count = reps.len();
    if count < 2 {
        return Err(Error::InsufficientSamples(format!(
            "need at least 2 replicates, got {count}"
        )));
    }
    let n_blocks = count.div_ceil(REPLICATE_BLOCK);
    let start = reps.start;
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..n_blocks)
        .into_par_iter()
        .map(|blk| -> Result<(Vec<f64>, Vec<f64>)> {
            let lo = start + blk * REPLICATE_BLOCK;
            let hi = (lo + REPLICATE_BLOCK).min(reps.end);
            let mut sum = vec![0.0; len];
            let mut sumsq = vec![0.0; len];
            let mut tmp = vec![0.0; len];
            for r in lo..hi {
                run(r, &mut tmp)?;
                for k in 0..len {
                    sum[k] += tmp[k];
                    sumsq[k] += tmp[k] * tmp[k];
                }
            }
            Ok((sum, sumsq))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0; len];
    let mut sumsq = vec![0.0; len];
    for (s, q) in &blocks {
        for k in 0..len {
            sum[k] += s[k];
            sumsq[k] += q[k];
        }
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let var: Vec<f64> = mean
        .iter()
        .zip(&sumsq)
        .map(|(m, q)| ((q - n * m * m) / (n - 1.0)).max(0.0))
        .collect();
    Ok((mean, var))
}

/// Replicate `r` of the baseline process draws from one stream family and
/// replicate `r` of a scaled process from another, so the two processes
/// are independent while every candidate scaled run shares its noise.
pub(crate) fn replicate_stream(base: RngStream, lane: u64, r: usize) -> RngStream {
    base.substream(r as u64 * 2 + lane)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mc_mean_var_deterministic_and_correct() {
        let run = |r: usize, out: &mut [f64]| {
            out[0] = r as f64;
            out[1] = 1.0;
            Ok(())
        };
        let (mean, var) = mc_mean_var(2, 0..101, run).unwrap();
        assert!((mean[0] - 50.0).abs() < 1e-12);
        // population variance 850, Bessel-corrected by 101/100
        assert!((var[0] - 858.5).abs() < 1e-9);
        assert_eq!(mean[1], 1.0);
        assert_eq!(var[1], 0.0);
        let again = mc_mean_var(2, 0..101, run).unwrap();
        assert_eq!((mean, var), again);
    }

    #[test]
    fn trajectory_csv_layout() {
        let rec = TrajectoryRecord {
            kappa: 2.0,
            rows: vec![TrajectoryRow {
                t: 0.5,
                step: 5,
                metric: "loss",
                value: 1.25,
            }],
        };
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "t,step,kappa,metric_name,value\n0.5,5,2,loss,1.25\n");
    }
}
