//! Cohort data model: per-slide patch records, cell statistics and
//! survival labels, plus the on-disk format, fold planning, time
//! discretization and a synthetic cohort generator.

mod bins;
mod folds;
mod io;
mod synth;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bins::{quantize_time_bins, TimeBins};
pub use folds::{split_folds, FoldAssignment, FoldPlan};
pub use io::{load_cohort, write_cohort, Manifest, ManifestSlide};
pub use synth::{synth_cohort, SynthConfig, CELL_FEATURE_LYMPHOCYTE, CELL_FEATURE_TUMOR};

/// Number of patch categories at the high scale.
pub const N_TYPES: usize = 5;

/// Default names for the five patch categories.
pub const DEFAULT_TYPE_VOCAB: [&str; N_TYPES] = [
    "neoplastic",
    "inflammatory",
    "connective",
    "dead",
    "epithelial",
];

/// Physical size of a LOW patch (256 px at 10×) in pixels.
pub const LOW_PATCH_PX: f64 = 256.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    /// Observed time in months.
    pub time: f64,
    /// `true` if the event was observed, `false` if right-censored.
    pub event: bool,
}

impl SurvivalLabel {
    pub fn new(time: f64, event: bool) -> Result<Self> {
        if !(time.is_finite() && time > 0.0) {
            return Err(Error::Invalid(format!(
                "survival time must be positive and finite, got {time}"
            )));
        }
        Ok(SurvivalLabel { time, event })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scale {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patch_id: i64,
    pub scale: Scale,
    /// Patch center in micrometers.
    pub x: f64,
    pub y: f64,
    /// Category index, present exactly for HIGH patches.
    pub type_id: Option<u8>,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    /// Id of the HIGH patch these statistics describe.
    pub patch_id: i64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideBundle {
    pub slide_id: String,
    /// LOW patches first, then HIGH patches; within a scale, the order is
    /// the node order of the corresponding graph.
    pub patches: Vec<PatchRecord>,
    pub cell_stats: Vec<CellStats>,
    pub label: SurvivalLabel,
    /// Log-hazard the generator used, for synthetic slides.
    pub true_log_hazard: Option<f64>,
}

impl SlideBundle {
    pub fn patches_at(&self, scale: Scale) -> impl Iterator<Item = &PatchRecord> {
        self.patches.iter().filter(move |p| p.scale == scale)
    }

    pub fn n_patches(&self, scale: Scale) -> usize {
        self.patches_at(scale).count()
    }

    pub fn coords(&self, scale: Scale) -> Vec<(f64, f64)> {
        self.patches_at(scale).map(|p| (p.x, p.y)).collect()
    }

    /// High-scale category per HIGH node.
    pub fn types_high(&self) -> Vec<u8> {
        self.patches_at(Scale::High)
            .map(|p| p.type_id.unwrap_or(0))
            .collect()
    }

    /// Feature matrix of one scale in node order, widened to `f64`.
    pub fn feature_matrix(&self, scale: Scale) -> Array2<f64> {
        let rows: Vec<&PatchRecord> = self.patches_at(scale).collect();
        let d = rows.first().map_or(0, |p| p.feature.len());
        let mut out = Array2::zeros((rows.len(), d));
        for (mut dst, p) in out.rows_mut().into_iter().zip(&rows) {
            for (o, &v) in dst.iter_mut().zip(&p.feature) {
                *o = f64::from(v);
            }
        }
        out
    }

    fn validate(&self, d: usize, p: usize, low_half_width: f64) -> Result<()> {
        let slide = || self.slide_id.clone();
        let n_low = self.n_patches(Scale::Low);
        let n_high = self.n_patches(Scale::High);
        if n_low == 0 || n_high == 0 {
            return Err(Error::Invalid(format!(
                "slide {} needs at least one LOW and one HIGH patch (has {n_low} / {n_high})",
                self.slide_id
            )));
        }
        for scale in [Scale::Low, Scale::High] {
            let mut ids: Vec<i64> = self.patches_at(scale).map(|p| p.patch_id).collect();
            ids.sort_unstable();
            if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::Invalid(format!(
                    "slide {}: duplicate {scale:?} patch id {}",
                    self.slide_id, w[0]
                )));
            }
        }
        for patch in &self.patches {
            if patch.feature.len() != d {
                return Err(Error::DimensionMismatch {
                    slide: slide(),
                    message: format!(
                        "patch {} has {} features, cohort d = {d}",
                        patch.patch_id,
                        patch.feature.len()
                    ),
                });
            }
            if !(patch.x.is_finite() && patch.y.is_finite()) {
                return Err(Error::NonFinite {
                    slide: slide(),
                    field: format!("coordinates of patch {}", patch.patch_id),
                });
            }
            if patch.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    slide: slide(),
                    field: format!("features of patch {}", patch.patch_id),
                });
            }
            match (patch.scale, patch.type_id) {
                (Scale::Low, None) => {}
                (Scale::High, Some(t)) if (t as usize) < N_TYPES => {}
                _ => {
                    return Err(Error::Invalid(format!(
                        "slide {}: patch {} ({:?}) has invalid type id {:?}",
                        self.slide_id, patch.patch_id, patch.scale, patch.type_id
                    )))
                }
            }
        }
        let high_ids: std::collections::HashSet<i64> =
            self.patches_at(Scale::High).map(|p| p.patch_id).collect();
        for cs in &self.cell_stats {
            if cs.values.len() != p {
                return Err(Error::DimensionMismatch {
                    slide: slide(),
                    message: format!(
                        "cell stats of patch {} have {} values, cohort p = {p}",
                        cs.patch_id,
                        cs.values.len()
                    ),
                });
            }
            if cs.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    slide: slide(),
                    field: format!("cell stats of patch {}", cs.patch_id),
                });
            }
            if !high_ids.contains(&cs.patch_id) {
                return Err(Error::Invalid(format!(
                    "slide {}: cell stats reference unknown HIGH patch {}",
                    self.slide_id, cs.patch_id
                )));
            }
        }
        let high_ids: Vec<i64> = self.patches_at(Scale::High).map(|p| p.patch_id).collect();
        crate::graph::cross_scale_edges(
            &self.coords(Scale::Low),
            low_half_width,
            &self.coords(Scale::High),
        )
        .map_err(|unplaced| Error::Uncontained {
            slide: slide(),
            patch_id: high_ids[unplaced.0],
        })?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub slides: Vec<SlideBundle>,
    /// Patch feature width.
    pub d: usize,
    /// Cell-statistic width.
    pub p: usize,
    pub type_vocab: Vec<String>,
    pub cell_feature_names: Vec<String>,
    /// Microns per pixel of the LOW scale; sets the footprint half-width.
    pub low_mpp: f64,
}

impl Cohort {
    /// Half-width in µm of the square area a LOW patch covers.
    pub fn low_half_width(&self) -> f64 {
        0.5 * LOW_PATCH_PX * self.low_mpp
    }

    pub fn labels(&self) -> Vec<SurvivalLabel> {
        self.slides.iter().map(|s| s.label).collect()
    }

    pub fn slide(&self, slide_id: &str) -> Option<&SlideBundle> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }

    /// Checks every cohort and slide invariant.
    pub fn validate(&self) -> Result<()> {
        if self.slides.is_empty() {
            return Err(Error::Invalid("cohort has no slides".into()));
        }
        if self.type_vocab.len() != N_TYPES {
            return Err(Error::Invalid(format!(
                "type vocabulary must have {N_TYPES} names, got {}",
                self.type_vocab.len()
            )));
        }
        if self.cell_feature_names.len() != self.p {
            return Err(Error::Invalid(format!(
                "{} cell feature names for p = {}",
                self.cell_feature_names.len(),
                self.p
            )));
        }
        if !(self.low_mpp.is_finite() && self.low_mpp > 0.0) {
            return Err(Error::Invalid("low_mpp must be positive".into()));
        }
        let mut ids: Vec<&str> = self.slides.iter().map(|s| s.slide_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Invalid(format!("duplicate slide id {}", w[0])));
        }
        let w = self.low_half_width();
        for slide in &self.slides {
            SurvivalLabel::new(slide.label.time, slide.label.event)?;
            slide.validate(self.d, self.p, w)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_rejects_nonpositive_time() {
        assert!(SurvivalLabel::new(0.0, true).is_err());
        assert!(SurvivalLabel::new(f64::NAN, false).is_err());
        assert!(SurvivalLabel::new(1.5, false).is_ok());
    }
}
