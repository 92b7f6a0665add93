use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::chi2::chi2_sf;
use crate::error::{Error, Result};
use crate::ingest::SurvivalLabel;

/// Product-limit survival curve evaluated at each distinct event time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// `Ŝ(t)`: 1 before the first event, right-continuous steps after.
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&e| e <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }

    /// Time where `Ŝ` first drops to 0.5 or below, if it does.
    pub fn median(&self) -> Option<f64> {
        self.survival
            .iter()
            .position(|&s| s <= 0.5)
            .map(|k| self.times[k])
    }
}

fn sorted(labels: &[SurvivalLabel]) -> Vec<SurvivalLabel> {
    let mut v = labels.to_vec();
    v.sort_by(|a, b| a.time.total_cmp(&b.time));
    v
}

pub fn kaplan_meier(labels: &[SurvivalLabel]) -> KmCurve {
    let data = sorted(labels);
    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
    };
    let mut s = 1.0;
    let mut i = 0;
    while i < data.len() {
        let t = data[i].time;
        let n_risk = data.len() - i;
        let mut j = i;
        let mut d = 0;
        while j < data.len() && data[j].time == t {
            d += usize::from(data[j].event);
            j += 1;
        }
        if d > 0 {
            s *= (n_risk - d) as f64 / n_risk as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(n_risk);
            curve.events.push(d);
        }
        i = j;
    }
    curve
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRank {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-group log-rank test, `χ² = (Σ(O_a − E_a))² / Σ V` on one degree of
/// freedom. A zero total variance returns statistic 0 and p = 1.
pub fn log_rank_test(group_a: &[SurvivalLabel], group_b: &[SurvivalLabel]) -> Result<LogRank> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::Invalid("log-rank test needs two non-empty groups".into()));
    }
    let mut pooled: Vec<(f64, bool, bool)> = group_a
        .iter()
        .map(|l| (l.time, l.event, true))
        .chain(group_b.iter().map(|l| (l.time, l.event, false)))
        .collect();
    if !pooled.iter().any(|p| p.1) {
        return Err(Error::Invalid("log-rank test needs at least one event".into()));
    }
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut n_a = group_a.len() as f64;
    let mut n_b = group_b.len() as f64;
    let (mut o_minus_e, mut var) = (0.0, 0.0);
    let mut i = 0;
    while i < pooled.len() {
        let t = pooled[i].0;
        let mut j = i;
        let (mut d_a, mut d, mut leave_a, mut leave_b) = (0.0, 0.0, 0.0, 0.0);
        while j < pooled.len() && pooled[j].0 == t {
            let (_, event, in_a) = pooled[j];
            if event {
                d += 1.0;
                if in_a {
                    d_a += 1.0;
                }
            }
            if in_a {
                leave_a += 1.0;
            } else {
                leave_b += 1.0;
            }
            j += 1;
        }
        if d > 0.0 {
            let n = n_a + n_b;
            o_minus_e += d_a - d * n_a / n;
            if n > 1.0 {
                var += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
            }
        }
        n_a -= leave_a;
        n_b -= leave_b;
        i = j;
    }
    if var <= 0.0 {
        return Ok(LogRank {
            statistic: 0.0,
            p_value: 1.0,
        });
    }
    let statistic = o_minus_e * o_minus_e / var;
    Ok(LogRank {
        statistic,
        p_value: chi2_sf(statistic, 1.0)?,
    })
}

/// Writes curves as CSV `group,time,survival,at_risk,events`.
pub fn write_km_csv(path: &Path, curves: &[(&str, &KmCurve)]) -> Result<()> {
    let mut body = String::from("group,time,survival,at_risk,events\n");
    for (group, c) in curves {
        for k in 0..c.times.len() {
            body.push_str(&format!(
                "{group},{},{},{},{}\n",
                c.times[k], c.survival[k], c.at_risk[k], c.events[k]
            ));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}
