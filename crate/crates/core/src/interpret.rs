//! Patch risk maps, median-split survival curves and cell-level Cox
//! analysis on the highest and lowest risk patches.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use crate::autodiff::ordered_mean;
use crate::error::{Error, Result};
use crate::ingest::{SlideBundle, SurvivalLabel};
use crate::model::{predict_slide, ModelParams};
use crate::survival::{cox_fit, kaplan_meier, log_rank_test, CoxModel, KmCurve, LogRank};
use crate::train::PreparedSlide;

/// Default number of top and of bottom patches kept per slide.
pub const DEFAULT_EXTREME_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskRow {
    pub patch_id: i64,
    pub x: f64,
    pub y: f64,
    pub risk: f64,
}

/// Risk of every LOW patch of one slide, in node order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskMap {
    pub slide_id: String,
    pub rows: Vec<RiskRow>,
    pub slide_risk: f64,
}

impl RiskMap {
    /// Mean of the row risks, accumulated in row order.
    pub fn mean_risk(&self) -> f64 {
        ordered_mean(self.rows.iter().map(|r| r.risk))
    }

    /// Writes `slide_id,patch_id,x_um,y_um,risk`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut body = String::from("slide_id,patch_id,x_um,y_um,risk\n");
        for r in &self.rows {
            body.push_str(&format!("{},{},{},{},{}\n", self.slide_id, r.patch_id, r.x, r.y, r.risk));
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

pub fn patch_risk_map(params: &ModelParams, slide: &PreparedSlide) -> Result<RiskMap> {
    let g = &slide.graph;
    let (risks, slide_risk) = predict_slide(g, &slide.x_low, &slide.x_high, params)?;
    let rows = risks
        .iter()
        .enumerate()
        .map(|(i, &risk)| RiskRow {
            patch_id: g.patch_ids_low[i],
            x: g.coords_low[i].0,
            y: g.coords_low[i].1,
            risk,
        })
        .collect();
    Ok(RiskMap {
        slide_id: slide.slide_id.clone(),
        rows,
        slide_risk,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedianSplit {
    pub median: f64,
    /// Indices into the input of the slides above the median.
    pub high: Vec<usize>,
    /// Indices of slides at or below the median.
    pub low: Vec<usize>,
    pub km_high: KmCurve,
    pub km_low: KmCurve,
    pub log_rank: LogRank,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Splits slides at the median risk (ties go to the low-risk group) and
/// compares the two groups' survival.
pub fn median_split_km(risks: &[f64], labels: &[SurvivalLabel]) -> Result<MedianSplit> {
    if risks.len() != labels.len() {
        return Err(Error::Invalid(format!("{} risks for {} labels", risks.len(), labels.len())));
    }
    if risks.len() < 2 {
        return Err(Error::Invalid("median split needs at least two slides".into()));
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(Error::Invalid("risk scores must be finite".into()));
    }
    let m = median(risks);
    let (high, low): (Vec<usize>, Vec<usize>) = (0..risks.len()).partition(|&i| risks[i] > m);
    if high.is_empty() {
        return Err(Error::Invalid(
            "median split impossible: no risk lies above the median".into(),
        ));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let (lh, ll) = (pick(&high), pick(&low));
    Ok(MedianSplit {
        median: m,
        km_high: kaplan_meier(&lh),
        km_low: kaplan_meier(&ll),
        log_rank: log_rank_test(&lh, &ll)?,
        high,
        low,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RiskGroup {
    Top,
    Bottom,
}

/// One HIGH patch under a selected LOW patch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtremePatch {
    pub slide_id: String,
    pub low_patch_id: i64,
    pub high_patch_id: i64,
    /// Risk of the LOW parent.
    pub risk: f64,
    pub group: RiskGroup,
    pub stats: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtremePatchSet {
    pub feature_names: Vec<String>,
    /// Pooled over slides. A LOW patch in both the top and the bottom set
    /// (possible when `2k` exceeds the patch count) appears once, as `Top`.
    pub patches: Vec<ExtremePatch>,
}

/// LOW node indices of the `k` highest and `k` lowest risks; ties are
/// broken by patch id.
fn extreme_indices(map: &RiskMap, k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..map.rows.len()).collect();
    let by_id = |a: &usize, b: &usize| map.rows[*a].patch_id.cmp(&map.rows[*b].patch_id);
    idx.sort_by(|a, b| map.rows[*b].risk.total_cmp(&map.rows[*a].risk).then_with(|| by_id(a, b)));
    let top = idx[..k.min(idx.len())].to_vec();
    idx.sort_by(|a, b| map.rows[*a].risk.total_cmp(&map.rows[*b].risk).then_with(|| by_id(a, b)));
    let bottom = idx[..k.min(idx.len())].to_vec();
    (top, bottom)
}

/// Selects, per slide, the top-`k` and bottom-`k` LOW patches by risk and
/// pools the cell statistics of their HIGH children.
pub fn select_extreme_patches(
    maps: &[RiskMap],
    slides: &[(&PreparedSlide, &SlideBundle)],
    feature_names: &[String],
    k: usize,
) -> Result<ExtremePatchSet> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let by_id: HashMap<&str, &(&PreparedSlide, &SlideBundle)> =
        slides.iter().map(|s| (s.0.slide_id.as_str(), s)).collect();
    let mut ordered: Vec<&RiskMap> = maps.iter().collect();
    ordered.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let mut patches = Vec::new();
    for map in ordered {
        let (prep, bundle) = by_id
            .get(map.slide_id.as_str())
            .ok_or_else(|| Error::Invalid(format!("no slide data for risk map {}", map.slide_id)))?;
        let g = &prep.graph;
        if map.rows.len() != g.n_low {
            return Err(Error::Invalid(format!(
                "risk map of {} has {} rows for {} LOW patches",
                map.slide_id,
                map.rows.len(),
                g.n_low
            )));
        }
        let stats: HashMap<i64, &Vec<f64>> = bundle.cell_stats.iter().map(|c| (c.patch_id, &c.values)).collect();
        let (top, bottom) = extreme_indices(map, k);
        let mut seen = vec![false; g.n_low];
        for (group, set) in [(RiskGroup::Top, top), (RiskGroup::Bottom, bottom)] {
            for v in set {
                if std::mem::replace(&mut seen[v], true) {
                    continue;
                }
                for &h in &g.children[v] {
                    let hid = g.patch_ids_high[h];
                    let Some(values) = stats.get(&hid) else {
                        continue;
                    };
                    patches.push(ExtremePatch {
                        slide_id: map.slide_id.clone(),
                        low_patch_id: map.rows[v].patch_id,
                        high_patch_id: hid,
                        risk: map.rows[v].risk,
                        group,
                        stats: (*values).clone(),
                    });
                }
            }
        }
    }
    Ok(ExtremePatchSet {
        feature_names: feature_names.to_vec(),
        patches,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureSummary {
    pub name: String,
    /// Quartiles of the standardized feature over the pooled patches.
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub gamma: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellCoxReport {
    pub model: CoxModel,
    pub features: Vec<FeatureSummary>,
    pub n_patches: usize,
}

impl CellCoxReport {
    /// `{ "features": [{ "name", "gamma", "se", "z", "p" }], "loglik", "converged" }`
    pub fn to_json(&self) -> serde_json::Value {
        let features: Vec<_> = self
            .features
            .iter()
            .map(|f| {
                serde_json::json!({
                    "name": f.name, "gamma": f.gamma, "se": f.se, "z": f.z, "p": f.p,
                })
            })
            .collect();
        serde_json::json!({
            "features": features,
            "loglik": self.model.loglik,
            "converged": self.model.converged,
            "n_patches": self.n_patches,
        })
    }

    /// Writes `feature,min,q1,median,q3,max,gamma,z,p`.
    pub fn write_distribution_csv(&self, path: &Path) -> Result<()> {
        let mut body = String::from("feature,min,q1,median,q3,max,gamma,z,p\n");
        for f in &self.features {
            body.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                f.name, f.min, f.q1, f.median, f.q3, f.max, f.gamma, f.z, f.p
            ));
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Relates cell statistics to patch risk with a rank-based Cox model.
///
/// Patches sorted by risk (descending; ties by slide id, then HIGH patch
/// id) get pseudo-event times `1, 2, …`, so higher risk means an earlier
/// event and a positive coefficient means the feature raises risk. Each
/// feature column is standardized first, so coefficients are per standard
/// deviation.
pub fn cell_cox_analysis(extreme: &ExtremePatchSet) -> Result<CellCoxReport> {
    let p = extreme.feature_names.len();
    let n = extreme.patches.len();
    if p == 0 {
        return Err(Error::Invalid("no cell features to analyze".into()));
    }
    if n < p + 2 {
        return Err(Error::Invalid(format!("cell Cox analysis needs at least {} patches, got {n}", p + 2)));
    }
    if let Some(bad) = extreme.patches.iter().find(|e| e.stats.len() != p) {
        return Err(Error::Invalid(format!(
            "patch {} of {} has {} cell stats, expected {p}",
            bad.high_patch_id,
            bad.slide_id,
            bad.stats.len()
        )));
    }
    let mut order: Vec<&ExtremePatch> = extreme.patches.iter().collect();
    order.sort_by(|a, b| {
        b.risk
            .total_cmp(&a.risk)
            .then_with(|| a.slide_id.cmp(&b.slide_id))
            .then_with(|| a.high_patch_id.cmp(&b.high_patch_id))
    });
    let labels: Vec<SurvivalLabel> = (0..n)
        .map(|i| SurvivalLabel {
            time: (i + 1) as f64,
            event: true,
        })
        .collect();

    let mut x = ndarray::Array2::<f64>::zeros((n, p));
    for (i, e) in order.iter().enumerate() {
        for j in 0..p {
            x[[i, j]] = e.stats[j];
        }
    }
    for j in 0..p {
        let mut col = x.column_mut(j);
        let mean = col.mean().expect("n > 0");
        let sd = col.std(0.0);
        if !(sd > 0.0) {
            return Err(Error::Invalid(format!(
                "cell feature {} is constant over the selected patches",
                extreme.feature_names[j]
            )));
        }
        col.mapv_inplace(|v| (v - mean) / sd);
    }
    let model = cox_fit(&x, &labels)?;
    let z = model.z();
    let pv = model.p_values();
    let features = (0..p)
        .map(|j| {
            let mut col = x.column(j).to_vec();
            col.sort_by(f64::total_cmp);
            FeatureSummary {
                name: extreme.feature_names[j].clone(),
                min: col[0],
                q1: quantile_sorted(&col, 0.25),
                median: quantile_sorted(&col, 0.5),
                q3: quantile_sorted(&col, 0.75),
                max: col[n - 1],
                gamma: model.gamma[j],
                se: model.se[j],
                z: z[j],
                p: pv[j],
            }
        })
        .collect();
    Ok(CellCoxReport {
        model,
        features,
        n_patches: n,
    })
}
