use serde::{Deserialize, Serialize};

use super::SurvivalLabel;
use crate::error::{Error, Result};

/// Amount (in months) a tied quantile edge is pushed above its predecessor.
pub const EDGE_NUDGE: f64 = 1e-3;

/// Partition of `(0, ∞)` into `edges.len() + 1` time intervals.
///
/// Bin `k` covers `(edges[k-1], edges[k]]`, with the first bin starting at
/// zero and the last unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBins {
    pub edges: Vec<f64>,
}

impl TimeBins {
    pub fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }

    /// Index of the interval containing `time`.
    pub fn bin_of(&self, time: f64) -> Result<usize> {
        if !time.is_finite() {
            return Err(Error::Invalid(format!("survival time {time} is not finite")));
        }
        Ok(self.edges.partition_point(|&e| e < time))
    }
}

/// Linear-interpolation quantile of sorted data (`(n-1)·q` positions).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Edges at the `k/T` quantiles of the uncensored event times.
pub fn quantize_time_bins(train_labels: &[SurvivalLabel], n_bins: usize) -> Result<TimeBins> {
    if n_bins == 0 {
        return Err(Error::Config("need at least one time bin".into()));
    }
    let mut times: Vec<f64> = train_labels
        .iter()
        .filter(|l| l.event)
        .map(|l| l.time)
        .collect();
    if times.len() < n_bins {
        return Err(Error::Invalid(format!(
            "{} uncensored events is fewer than {n_bins} time bins",
            times.len()
        )));
    }
    times.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = (1..n_bins)
        .map(|k| quantile_sorted(&times, k as f64 / n_bins as f64))
        .collect();
    for k in 1..edges.len() {
        if edges[k] <= edges[k - 1] {
            edges[k] = edges[k - 1] + EDGE_NUDGE;
        }
    }
    Ok(TimeBins { edges })
}
