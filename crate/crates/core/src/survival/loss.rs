//! Discrete-time negative log-likelihood for a scalar slide risk.
//!
//! Time is cut into `T` bins. The hazard in bin `t` is
//! `h_t = sigmoid(r + b_t)`, where `r` is the slide risk and `b_t` a
//! learnable offset. A subject with an event in bin `k` contributes
//! `-log h_k - Σ_{t<k} log(1 - h_t)`; a subject censored in bin `k`
//! contributes `-Σ_{t≤k} log(1 - h_t)`.

use ndarray::Array2;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::ingest::{SurvivalLabel, TimeBins};

/// Bin layout shared by the loss and the model's offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardHead {
    pub bins: TimeBins,
}

impl HazardHead {
    pub fn new(bins: TimeBins) -> Self {
        HazardHead { bins }
    }

    pub fn n_bins(&self) -> usize {
        self.bins.n_bins()
    }
}

/// Records the loss on `tape`; `slide_risk` is 1×1 and `bin_offsets` 1×T.
pub fn nll_survival_loss<'a>(
    tape: &mut Tape<'a>,
    slide_risk: Tensor,
    bin_offsets: Tensor,
    label: &SurvivalLabel,
    bins: &TimeBins,
) -> Result<Tensor> {
    let n_bins = bins.n_bins();
    if tape.shape(slide_risk) != (1, 1) || tape.shape(bin_offsets) != (1, n_bins) {
        return Err(Error::Shape {
            op: "nll_survival_loss",
            lhs: tape.shape(slide_risk),
            rhs: tape.shape(bin_offsets),
        });
    }
    let k = bins.bin_of(label.time)?;
    let mut event_mask = Array2::zeros((1, n_bins));
    let mut survive_mask = Array2::zeros((1, n_bins));
    for t in 0..n_bins {
        if t < k || (t == k && !label.event) {
            survive_mask[[0, t]] = 1.0;
        }
    }
    if label.event {
        event_mask[[0, k]] = 1.0;
    }

    let ones = tape.constant(Array2::ones((1, n_bins)))?;
    let spread = tape.matmul(slide_risk, ones)?;
    let logits = tape.add(spread, bin_offsets)?;
    let log_h = tape.log_sigmoid(logits)?;
    let neg_logits = tape.scale(logits, -1.0)?;
    let log_one_minus_h = tape.log_sigmoid(neg_logits)?;

    let event_mask = tape.constant(event_mask)?;
    let survive_mask = tape.constant(survive_mask)?;
    let ev = tape.mul(event_mask, log_h)?;
    let sv = tape.mul(survive_mask, log_one_minus_h)?;
    let total = tape.add(ev, sv)?;
    let ll = tape.sum(total)?;
    tape.scale(ll, -1.0)
}
