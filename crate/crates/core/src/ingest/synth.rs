//! Synthetic cohorts with a known hazard.
//!
//! Each slide is a `G×G` grid of LOW patches laid exactly over a `2G×2G`
//! grid of HIGH patches, so every LOW footprint holds a 2×2 block of HIGH
//! patches. The generative model per slide:
//!
//! 1. Draw a tumor burden `u ~ Beta(½, ½)` and mark the `round(u·N_H)`
//!    HIGH patches closest to `tumor_clusters` random centers as type 0
//!    (tumor). Draw an immune level `v ~ Beta(½, ½)` and mark the
//!    `round(v·remaining)` non-tumor patches closest to two random
//!    centers as type 1 (inflammatory). Other patches get types 2–4
//!    uniformly. The U-shaped burden law spreads slides between mostly
//!    clean and mostly tumor, which keeps the hazard informative even
//!    though fractions are bounded.
//! 2. Per HIGH patch, the tumor cell fraction is `U(0.7, 1)` on tumor
//!    patches and `U(0, 0.1)` elsewhere; the lymphocyte fraction likewise
//!    `U(0.6, 1)` on inflammatory patches and `U(0, 0.1)` elsewhere. Any
//!    further cell statistics are standard normal noise.
//! 3. HIGH features are `μ_type + σ_H·N(0, I)` with cohort-wide type means
//!    `μ_t ~ N(0, I)`. A LOW feature is the mean of its four children's
//!    features plus `σ_L·N(0, I)`.
//! 4. The log-hazard is `λ·(mean tumor fraction − ρ·mean lymphocyte
//!    fraction)` over the slide's HIGH patches, and the event time is
//!    exponential with rate `base_rate·exp(log-hazard)`.
//! 5. Censoring times are `w_i·c` with `w_i ~ U(0, 1)` drawn per slide and
//!    one cohort-wide `c` found by bisection so the censored share matches
//!    `censor_fraction`.
//!
//! Randomness comes from ChaCha8 seeded with the caller's seed; slide `i`
//! uses stream `i + 1`, so slides can be generated independently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    CellStats, Cohort, PatchRecord, Scale, SlideBundle, SurvivalLabel, DEFAULT_TYPE_VOCAB,
    LOW_PATCH_PX, N_TYPES,
};
use crate::error::{Error, Result};

pub const CELL_FEATURE_TUMOR: &str = "tumor_fraction";
pub const CELL_FEATURE_LYMPHOCYTE: &str = "lymphocyte_fraction";
const EXTRA_CELL_FEATURES: [&str; 3] = ["cell_density", "nuclear_area", "stroma_fraction"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_slides: usize,
    /// LOW grid side `G`.
    pub grid: usize,
    pub d: usize,
    /// Cell statistics per HIGH patch; at least 2.
    pub p: usize,
    pub tumor_clusters: usize,
    pub lambda_tumor: f64,
    /// Lymphocyte coefficient relative to `lambda_tumor`.
    pub lymph_ratio: f64,
    pub censor_fraction: f64,
    pub noise_high: f64,
    pub noise_low: f64,
    /// Baseline event rate per month.
    pub base_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_slides: 200,
            grid: 10,
            d: 32,
            p: 4,
            tumor_clusters: 3,
            lambda_tumor: 2.0,
            lymph_ratio: 1.5,
            censor_fraction: 0.3,
            noise_high: 1.0,
            noise_low: 0.5,
            base_rate: 1.0 / 30.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_slides == 0 || self.grid == 0 || self.d == 0 {
            return Err(Error::Config(
                "synthetic cohort needs at least one slide, patch and feature".into(),
            ));
        }
        if self.p < 2 {
            return Err(Error::Config("synthetic cohort needs p >= 2 cell statistics".into()));
        }
        if self.tumor_clusters == 0 {
            return Err(Error::Config("tumor_clusters must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.censor_fraction) {
            return Err(Error::Config("censor_fraction must lie in [0, 1)".into()));
        }
        let finite = [
            self.lambda_tumor,
            self.lymph_ratio,
            self.noise_high,
            self.noise_low,
            self.base_rate,
        ];
        if finite.iter().any(|v| !v.is_finite()) || self.base_rate <= 0.0 {
            return Err(Error::Config("synthetic rates and noise levels must be finite".into()));
        }
        Ok(())
    }

    pub fn cell_feature_names(&self) -> Vec<String> {
        let mut names = vec![CELL_FEATURE_TUMOR.to_string(), CELL_FEATURE_LYMPHOCYTE.to_string()];
        for k in 2..self.p {
            names.push(
                EXTRA_CELL_FEATURES
                    .get(k - 2)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("stat_{k}")),
            );
        }
        names
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Indices of the `count` points nearest any center, nearest first.
fn nearest_to_centers(
    points: &[(f64, f64)],
    candidates: &[usize],
    centers: &[(f64, f64)],
    count: usize,
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| {
            let (x, y) = points[i];
            let d = centers
                .iter()
                .map(|&(cx, cy)| (x - cx).powi(2) + (y - cy).powi(2))
                .fold(f64::INFINITY, f64::min);
            (d, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(count).map(|(_, i)| i).collect()
}

struct DrawnSlide {
    bundle: SlideBundle,
    event_time: f64,
    censor_weight: f64,
}

fn synth_slide(cfg: &SynthConfig, means: &[Vec<f64>], seed: u64, index: usize) -> DrawnSlide {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let g = cfg.grid;
    let gh = 2 * g;
    let w = 0.5 * LOW_PATCH_PX;
    let extent = gh as f64 * w;

    let high_xy: Vec<(f64, f64)> = (0..gh * gh)
        .map(|k| (((k % gh) as f64 + 0.5) * w, ((k / gh) as f64 + 0.5) * w))
        .collect();
    let n_high = high_xy.len();
    let mut types = vec![u8::MAX; n_high];

    let spread = Beta::new(0.5, 0.5).expect("valid shape");
    let burden: f64 = spread.sample(&mut rng);
    let tumor_centers: Vec<(f64, f64)> = (0..cfg.tumor_clusters)
        .map(|_| (rng.random::<f64>() * extent, rng.random::<f64>() * extent))
        .collect();
    let all: Vec<usize> = (0..n_high).collect();
    let n_tumor = (burden * n_high as f64).round() as usize;
    for i in nearest_to_centers(&high_xy, &all, &tumor_centers, n_tumor) {
        types[i] = 0;
    }

    let immune: f64 = spread.sample(&mut rng);
    let immune_centers: Vec<(f64, f64)> = (0..2)
        .map(|_| (rng.random::<f64>() * extent, rng.random::<f64>() * extent))
        .collect();
    let rest: Vec<usize> = (0..n_high).filter(|&i| types[i] == u8::MAX).collect();
    let n_immune = (immune * rest.len() as f64).round() as usize;
    for i in nearest_to_centers(&high_xy, &rest, &immune_centers, n_immune) {
        types[i] = 1;
    }
    for t in types.iter_mut().filter(|t| **t == u8::MAX) {
        *t = rng.random_range(2..N_TYPES as u8);
    }

    let mut high_features = Vec::with_capacity(n_high);
    let mut cell_stats = Vec::with_capacity(n_high);
    let (mut tumor_sum, mut lymph_sum) = (0.0, 0.0);
    for (i, &t) in types.iter().enumerate() {
        let tumor = if t == 0 {
            rng.random_range(0.7..1.0)
        } else {
            rng.random_range(0.0..0.1)
        };
        let lymph = if t == 1 {
            rng.random_range(0.6..1.0)
        } else {
            rng.random_range(0.0..0.1)
        };
        tumor_sum += tumor;
        lymph_sum += lymph;
        let mut values = vec![tumor, lymph];
        values.extend(normal_vec(&mut rng, cfg.p - 2));
        cell_stats.push(CellStats {
            patch_id: i as i64,
            values,
        });
        let noise = normal_vec(&mut rng, cfg.d);
        let feature: Vec<f64> = means[t as usize]
            .iter()
            .zip(&noise)
            .map(|(m, n)| m + cfg.noise_high * n)
            .collect();
        high_features.push(feature);
    }

    let mut patches = Vec::with_capacity(g * g + n_high);
    for k in 0..g * g {
        let (i, j) = (k % g, k / g);
        let children = [
            (2 * j) * gh + 2 * i,
            (2 * j) * gh + 2 * i + 1,
            (2 * j + 1) * gh + 2 * i,
            (2 * j + 1) * gh + 2 * i + 1,
        ];
        let noise = normal_vec(&mut rng, cfg.d);
        let feature = (0..cfg.d)
            .map(|c| {
                let mean = children.iter().map(|&h| high_features[h][c]).sum::<f64>() / 4.0;
                (mean + cfg.noise_low * noise[c]) as f32
            })
            .collect();
        patches.push(PatchRecord {
            patch_id: k as i64,
            scale: Scale::Low,
            x: (i as f64 + 0.5) * 2.0 * w,
            y: (j as f64 + 0.5) * 2.0 * w,
            type_id: None,
            feature,
        });
    }
    for (k, (&(x, y), &t)) in high_xy.iter().zip(&types).enumerate() {
        patches.push(PatchRecord {
            patch_id: k as i64,
            scale: Scale::High,
            x,
            y,
            type_id: Some(t),
            feature: high_features[k].iter().map(|&v| v as f32).collect(),
        });
    }

    let n = n_high as f64;
    let log_hazard = cfg.lambda_tumor * (tumor_sum / n - cfg.lymph_ratio * lymph_sum / n);
    let rate = cfg.base_rate * log_hazard.exp();
    let u: f64 = rng.random();
    let event_time = -(1.0 - u).ln() / rate;
    let censor_weight: f64 = rng.random();

    DrawnSlide {
        bundle: SlideBundle {
            slide_id: format!("synth-{index:04}"),
            patches,
            cell_stats,
            label: SurvivalLabel {
                time: event_time,
                event: true,
            },
            true_log_hazard: Some(log_hazard),
        },
        event_time,
        censor_weight,
    }
}

/// Scale `c` such that the share of slides with `w_i·c < T_i` is `target`.
fn censor_scale(draws: &[DrawnSlide], target: f64) -> f64 {
    let share = |c: f64| {
        draws
            .iter()
            .filter(|d| d.censor_weight * c < d.event_time)
            .count() as f64
            / draws.len() as f64
    };
    let max_t = draws.iter().map(|d| d.event_time).fold(0.0, f64::max);
    let (mut lo, mut hi) = (0.0, 1.0);
    while share(hi) > target && hi < 1e12 * max_t.max(1.0) {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if share(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Generates a cohort; a pure function of `(cfg, seed)`.
pub fn synth_cohort(cfg: &SynthConfig, seed: u64) -> Result<Cohort> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..N_TYPES).map(|_| normal_vec(&mut rng, cfg.d)).collect();
    let mut draws: Vec<DrawnSlide> = (0..cfg.n_slides)
        .into_par_iter()
        .map(|i| synth_slide(cfg, &means, seed, i))
        .collect();

    if cfg.censor_fraction > 0.0 {
        let c = censor_scale(&draws, cfg.censor_fraction);
        for d in &mut draws {
            let censor_time = d.censor_weight * c;
            if censor_time < d.event_time && censor_time > 0.0 {
                d.bundle.label = SurvivalLabel {
                    time: censor_time,
                    event: false,
                };
            }
        }
    }

    let cohort = Cohort {
        slides: draws.into_iter().map(|d| d.bundle).collect(),
        d: cfg.d,
        p: cfg.p,
        type_vocab: DEFAULT_TYPE_VOCAB.iter().map(|s| s.to_string()).collect(),
        cell_feature_names: cfg.cell_feature_names(),
        low_mpp: 1.0,
    };
    Ok(cohort)
}
