//! Cox proportional hazards regression by Newton-Raphson on the Breslow
//! partial likelihood.

use ndarray::{Array1, Array2, Axis};
use serde::Serialize;

use super::chi2::normal_two_sided_p;
use crate::error::{Error, Result};
use crate::ingest::SurvivalLabel;

pub const MAX_NEWTON_ITERS: usize = 100;
/// Coefficients (standardized scale) beyond this magnitude signal separation.
pub const SEPARATION_LIMIT: f64 = 50.0;
const GRAD_TOL: f64 = 1e-8;
/// Relative tolerance on the log-likelihood when accepting a step.
const LOGLIK_ROUNDING: f64 = 1e-13;
const MAX_HALVINGS: usize = 40;
const RAY_TEST_MIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoxModel {
    /// Coefficients in the covariates' original units.
    pub gamma: Vec<f64>,
    pub se: Vec<f64>,
    /// Partial log-likelihood at `gamma`.
    pub loglik: f64,
    /// Partial log-likelihood at zero.
    pub loglik_null: f64,
    pub iters: usize,
    pub converged: bool,
    /// Largest absolute score component at `gamma`, original units.
    pub grad_inf_norm: f64,
}

impl CoxModel {
    pub fn z(&self) -> Vec<f64> {
        self.gamma.iter().zip(&self.se).map(|(g, s)| g / s).collect()
    }

    pub fn p_values(&self) -> Vec<f64> {
        self.z().into_iter().map(normal_two_sided_p).collect()
    }
}

struct Derivs {
    loglik: f64,
    grad: Array1<f64>,
    /// Observed information (negative Hessian).
    info: Array2<f64>,
}

/// Subjects ordered by descending time, split into groups of equal time.
fn time_groups(labels: &[SurvivalLabel]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| labels[b].time.total_cmp(&labels[a].time));
    let mut groups = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let t = labels[order[start]].time;
        let mut end = start;
        while end < order.len() && labels[order[end]].time == t {
            end += 1;
        }
        groups.push((start, end));
        start = end;
    }
    (order, groups)
}

fn derivatives(x: &Array2<f64>, labels: &[SurvivalLabel], beta: &Array1<f64>, with_info: bool) -> Derivs {
    let p = x.ncols();
    let (order, groups) = time_groups(labels);
    let eta = x.dot(beta);
    // Shift by the max linear predictor so exp never overflows.
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s0 = 0.0;
    let mut s1 = Array1::<f64>::zeros(p);
    let mut s2 = Array2::<f64>::zeros((p, p));
    let mut loglik = 0.0;
    let mut grad = Array1::<f64>::zeros(p);
    let mut info = Array2::<f64>::zeros((p, p));
    for &(start, end) in &groups {
        for &i in &order[start..end] {
            let w = (eta[i] - shift).exp();
            let xi = x.row(i);
            s0 += w;
            s1.scaled_add(w, &xi);
            if with_info {
                for a in 0..p {
                    for b in 0..p {
                        s2[[a, b]] += w * xi[a] * xi[b];
                    }
                }
            }
        }
        let mean = &s1 / s0;
        for &i in &order[start..end] {
            if !labels[i].event {
                continue;
            }
            loglik += eta[i] - shift - s0.ln();
            grad += &(&x.row(i) - &mean);
            if with_info {
                for a in 0..p {
                    for b in 0..p {
                        info[[a, b]] += s2[[a, b]] / s0 - mean[a] * mean[b];
                    }
                }
            }
        }
    }
    Derivs { loglik, grad, info }
}

/// Breslow partial log-likelihood of `beta` (original units).
pub fn cox_partial_loglik(x: &Array2<f64>, labels: &[SurvivalLabel], beta: &[f64]) -> f64 {
    derivatives(x, labels, &Array1::from(beta.to_vec()), false).loglik
}

/// Solves `a · x = b` for symmetric positive definite `a` (Cholesky).
fn spd_solve(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[[i, k]] * y[k]).sum();
        y[i] = (b[i] - s) / l[[i, i]];
    }
    let mut out = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[[k, i]] * out[k]).sum();
        out[i] = (y[i] - s) / l[[i, i]];
    }
    Some(out)
}

fn spd_inverse_diag(a: &Array2<f64>) -> Option<Vec<f64>> {
    let n = a.nrows();
    (0..n)
        .map(|j| {
            let mut e = Array1::zeros(n);
            e[j] = 1.0;
            spd_solve(a, &e).map(|col| col[j])
        })
        .collect()
}

/// Fits a Cox model by maximizing the Breslow partial likelihood.
///
/// Columns are standardized internally; reported coefficients and
/// standard errors are in the original units. Iteration stops when the
/// score's ∞-norm is below 1e-8 on both scales or after
/// [`MAX_NEWTON_ITERS`] steps. A step that lowers the likelihood is halved
/// until it does not. If a standardized coefficient exceeds
/// [`SEPARATION_LIMIT`] the fit stops and reports `converged = false`; the
/// same flag is set when the likelihood is still non-decreasing at twice
/// the solution.
pub fn cox_fit(covariates: &Array2<f64>, labels: &[SurvivalLabel]) -> Result<CoxModel> {
    let (n, p) = covariates.dim();
    if p == 0 {
        return Err(Error::Invalid("Cox model needs at least one covariate".into()));
    }
    if n != labels.len() {
        return Err(Error::Invalid(format!("{n} covariate rows for {} labels", labels.len())));
    }
    if n <= p {
        return Err(Error::Invalid(format!("Cox model needs n > p (n = {n}, p = {p})")));
    }
    if !labels.iter().any(|l| l.event) {
        return Err(Error::Invalid("Cox model needs at least one event".into()));
    }
    if covariates.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("covariates must be finite".into()));
    }
    let mean = covariates.mean_axis(Axis(0)).expect("n > 0");
    let sd = covariates.std_axis(Axis(0), 0.0);
    if let Some(j) = sd.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::Invalid(format!("covariate column {j} has zero variance")));
    }
    let z = (covariates - &mean) / &sd;

    let mut beta = Array1::<f64>::zeros(p);
    let mut cur = derivatives(&z, labels, &beta, true);
    let loglik_null = cur.loglik;
    let mut iters = 0;
    let mut converged = false;
    let grad_norm = |g: &Array1<f64>| {
        g.iter()
            .zip(&sd)
            .map(|(gi, s)| gi.abs().max((gi / s).abs()))
            .fold(0.0, f64::max)
    };
    while iters < MAX_NEWTON_ITERS {
        if grad_norm(&cur.grad) < GRAD_TOL {
            converged = true;
            break;
        }
        let Some(step) = spd_solve(&cur.info, &cur.grad) else {
            break;
        };
        iters += 1;
        let mut scale = 1.0;
        let mut next_beta = &beta + &step;
        let mut next = derivatives(&z, labels, &next_beta, true);
        // Near the optimum the gain falls below the rounding of the
        // log-likelihood itself, so a drop within that noise still counts
        // as ascent.
        let floor = cur.loglik - LOGLIK_ROUNDING * (1.0 + cur.loglik.abs());
        let mut halvings = 0;
        while !(next.loglik >= floor) && halvings < MAX_HALVINGS {
            scale *= 0.5;
            next_beta = &beta + &(&step * scale);
            next = derivatives(&z, labels, &next_beta, true);
            halvings += 1;
        }
        if !(next.loglik >= floor) {
            // No ascent possible along the Newton direction.
            break;
        }
        beta = next_beta;
        cur = next;
        if beta.iter().any(|b| b.abs() > SEPARATION_LIMIT) {
            break;
        }
    }
    if !converged && grad_norm(&cur.grad) < GRAD_TOL && beta.iter().all(|b| b.abs() <= SEPARATION_LIMIT) {
        converged = true;
    }
    // A finite maximum makes the likelihood drop along the ray beyond it;
    // under separation it keeps creeping up and the score only vanishes
    // numerically.
    if converged && beta.iter().any(|b| b.abs() > RAY_TEST_MIN) {
        let doubled = &beta * 2.0;
        if derivatives(&z, labels, &doubled, false).loglik >= cur.loglik {
            converged = false;
        }
    }

    let var = spd_inverse_diag(&cur.info).unwrap_or_else(|| vec![f64::INFINITY; p]);
    let gamma: Vec<f64> = beta.iter().zip(&sd).map(|(b, s)| b / s).collect();
    let se: Vec<f64> = var.iter().zip(&sd).map(|(v, s)| v.max(0.0).sqrt() / s).collect();
    let grad_orig = cur.grad.iter().zip(&sd).map(|(g, s)| (g / s).abs()).fold(0.0, f64::max);
    let loglik = cox_partial_loglik(covariates, labels, &gamma);
    Ok(CoxModel {
        gamma,
        se,
        loglik,
        loglik_null,
        iters,
        converged,
        grad_inf_norm: grad_orig,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn lab(t: f64, e: bool) -> SurvivalLabel {
        SurvivalLabel { time: t, event: e }
    }

    #[test]
    fn binary_covariate_matches_closed_form() {
        // Group 1 fails at t=1,3 and group 0 at t=2,4, so
        //   L(b) = e^b/(2e^b+2) · 1/(e^b+2) · e^b/(e^b+1).
        let x = array![[1.0], [0.0], [1.0], [0.0]];
        let labels = [lab(1.0, true), lab(2.0, true), lab(3.0, true), lab(4.0, true)];
        let fit = cox_fit(&x, &labels).unwrap();
        assert!(fit.converged);
        assert!(fit.grad_inf_norm < 1e-8);
        let ll = |b: f64| {
            let e = b.exp();
            b - (2.0 * e + 2.0).ln() - (e + 2.0).ln() + b - (e + 1.0).ln()
        };
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in -40000..40000 {
            let b = k as f64 * 1e-4;
            let v = ll(b);
            if v > best.0 {
                best = (v, b);
            }
        }
        assert!((fit.gamma[0] - best.1).abs() < 2e-4);
        assert!((fit.loglik - best.0).abs() < 1e-7);
    }

    #[test]
    fn separation_flagged() {
        let x = array![[1.0], [1.0], [0.0], [0.0]];
        let labels = [lab(1.0, true), lab(2.0, true), lab(3.0, true), lab(4.0, true)];
        let fit = cox_fit(&x, &labels).unwrap();
        assert!(!fit.converged);
        assert!(fit.gamma[0] > 0.0);
    }

    #[test]
    fn errors() {
        let labels = [lab(1.0, true), lab(2.0, true)];
        assert!(cox_fit(&Array2::zeros((2, 0)), &labels).is_err());
        assert!(cox_fit(&array![[1.0], [1.0]], &labels).is_err());
    }
}
