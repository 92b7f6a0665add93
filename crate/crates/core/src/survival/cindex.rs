use crate::error::{Error, Result};
use crate::ingest::SurvivalLabel;

/// Fenwick tree over risk ranks counting subjects still "later" in time.
struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick { tree: vec![0; n + 1] }
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< rank`.
    fn count_below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut total = 0;
        while i > 0 {
            total += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        total
    }
}

/// Harrell's concordance index.
///
/// A pair `(i, j)` is comparable when `t_i < t_j` and subject `i` had an
/// event. It is concordant when `risk_i > risk_j`; equal risks count one
/// half. Runs in `O(n log n)`.
pub fn concordance_index(risks: &[f64], labels: &[SurvivalLabel]) -> Result<f64> {
    if risks.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} risks for {} labels",
            risks.len(),
            labels.len()
        )));
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(Error::Invalid("risk scores must be finite".into()));
    }
    let n = risks.len();

    // Dense ranks of risk values, equal risks share a rank.
    let mut by_risk: Vec<usize> = (0..n).collect();
    by_risk.sort_by(|&a, &b| risks[a].total_cmp(&risks[b]));
    let mut rank = vec![0usize; n];
    let mut r = 0;
    for w in 0..n {
        if w > 0 && risks[by_risk[w]] != risks[by_risk[w - 1]] {
            r += 1;
        }
        rank[by_risk[w]] = r;
    }
    let n_ranks = r + 1;

    let mut by_time: Vec<usize> = (0..n).collect();
    by_time.sort_by(|&a, &b| labels[b].time.total_cmp(&labels[a].time));

    // Walk from the latest time backwards. Subjects with strictly later
    // times are in the tree when a group of tied times is scored.
    let mut later = Fenwick::new(n_ranks);
    let mut later_total: u64 = 0;
    let (mut concordant, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    let mut start = 0;
    while start < n {
        let t = labels[by_time[start]].time;
        let mut end = start;
        while end < n && labels[by_time[end]].time == t {
            end += 1;
        }
        for &i in &by_time[start..end] {
            if labels[i].event {
                let below = later.count_below(rank[i]);
                let at_or_below = later.count_below(rank[i] + 1);
                concordant += below;
                tied += at_or_below - below;
                comparable += later_total;
            }
        }
        for &i in &by_time[start..end] {
            later.add(rank[i]);
            later_total += 1;
        }
        start = end;
    }
    if comparable == 0 {
        return Err(Error::Invalid("no comparable pairs for the concordance index".into()));
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / comparable as f64)
}
