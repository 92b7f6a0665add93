//! Survival statistics: the discrete-time training loss, Harrell's
//! concordance index, Kaplan-Meier curves, the log-rank test and Cox
//! proportional hazards regression.

mod chi2;
mod cindex;
mod cox;
mod km;
mod loss;

pub use chi2::{chi2_sf, ln_gamma, normal_two_sided_p};
pub use cindex::concordance_index;
pub use cox::{cox_fit, cox_partial_loglik, CoxModel, MAX_NEWTON_ITERS, SEPARATION_LIMIT};
pub use km::{kaplan_meier, log_rank_test, write_km_csv, KmCurve, LogRank};
pub use loss::{nll_survival_loss, HazardHead};
