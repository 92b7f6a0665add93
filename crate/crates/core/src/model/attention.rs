//! Tape-free attention kernels, used for benchmarking and inference checks.

use std::time::Instant;

use ndarray::{Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

fn check(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<()> {
    if q.dim() != k.dim() || k.nrows() != v.nrows() {
        return Err(Error::Shape {
            op: "attention",
            lhs: q.dim(),
            rhs: v.dim(),
        });
    }
    Ok(())
}

/// Linear-time SLA: summarize keys first, `O(N D²)`.
pub fn sla_plain(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, eps: f64) -> Result<Array2<f64>> {
    check(q, k, v)?;
    let rq = q.mapv(|x| x.max(0.0));
    let rk = k.mapv(|x| x.max(0.0));
    let p = rk.t().dot(v);
    let y = rk.sum_axis(Axis(0));
    let mut out = rq.dot(&p);
    let den = rq.dot(&y);
    Zip::from(out.rows_mut()).and(&den).for_each(|mut row, &d| {
        let d = d + eps;
        row.mapv_inplace(|x| x / d);
    });
    Ok(out)
}

/// Quadratic reference: builds the full `N × N` similarity map
/// `relu(Q) relu(K)ᵀ`, normalizes each row, then multiplies by `V`.
pub fn dense_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, eps: f64) -> Result<Array2<f64>> {
    check(q, k, v)?;
    let rq = q.mapv(|x| x.max(0.0));
    let rk = k.mapv(|x| x.max(0.0));
    let mut sim = rq.dot(&rk.t());
    for mut row in sim.rows_mut() {
        let d = row.sum() + eps;
        row.mapv_inplace(|x| x / d);
    }
    Ok(sim.dot(v))
}

/// Best-of-`reps` wall-clock times of both kernels at one size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub d: usize,
    pub dense_ms: f64,
    pub linear_ms: f64,
}

/// Times [`dense_attention`] and [`sla_plain`] on uniform `[0, 1)` inputs
/// for each size in `sizes`.
pub fn bench_attention(sizes: &[usize], d: usize, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() || sizes.contains(&0) || d == 0 || reps == 0 {
        return Err(Error::Config("need at least one positive size, d >= 1 and reps >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut draw = || Array2::from_shape_simple_fn((n, d), || rng.random_range(0.0..1.0));
        let (q, k, v) = (draw(), draw(), draw());
        let time = |f: &dyn Fn() -> Result<Array2<f64>>| -> Result<f64> {
            let mut best = f64::INFINITY;
            for _ in 0..reps {
                let t = Instant::now();
                std::hint::black_box(f()?);
                best = best.min(t.elapsed().as_secs_f64() * 1e3);
            }
            Ok(best)
        };
        let dense_ms = time(&|| dense_attention(&q, &k, &v, 1e-6))?;
        let linear_ms = time(&|| sla_plain(&q, &k, &v, 1e-6))?;
        rows.push(BenchRow { n, d, dense_ms, linear_ms });
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
