//! Cross-validated training with Adam, one slide per step.

mod adam;

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{build_multiscale, MultiScaleGraph, DEFAULT_K};
use crate::ingest::{quantize_time_bins, split_folds, Cohort, FoldAssignment, Scale, SurvivalLabel, TimeBins};
use crate::model::{forward_slide, predict_slide, save_checkpoint, Checkpoint, ModelConfig, ModelParams};
use crate::survival::{concordance_index, nll_survival_loss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub k_low: usize,
    pub k_high: usize,
    pub n_bins: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    pub gat_layers: usize,
    pub hops: usize,
    pub n_folds: usize,
    pub tie_enabled: bool,
    pub hie_enabled: bool,
    pub residual_ffn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-6,
            epochs: 40,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            k_low: DEFAULT_K,
            k_high: DEFAULT_K,
            n_bins: 4,
            hidden: 256,
            n_blocks: 5,
            gat_layers: 3,
            hops: 3,
            n_folds: 5,
            tie_enabled: true,
            hie_enabled: true,
            residual_ffn: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.adam_eps > 0.0) {
            return Err(Error::Config("weight_decay must be ≥ 0 and adam_eps > 0".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.k_low == 0 || self.k_high == 0 {
            return Err(Error::Config("K must be at least 1 on both scales".into()));
        }
        self.model_config(1).validate()
    }

    pub fn model_config(&self, d_in: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            hidden: self.hidden,
            gat_layers: self.gat_layers,
            hops: self.hops,
            n_blocks: self.n_blocks,
            n_bins: self.n_bins,
            tie_enabled: self.tie_enabled,
            hie_enabled: self.hie_enabled,
            residual_ffn: self.residual_ffn,
            ..ModelConfig::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// A slide with its graph built and features in model layout.
#[derive(Debug, Clone)]
pub struct PreparedSlide {
    pub slide_id: String,
    pub graph: MultiScaleGraph,
    pub x_low: Array2<f64>,
    pub x_high: Array2<f64>,
    pub label: SurvivalLabel,
}

/// Builds every slide's graphs, in parallel, in cohort order.
pub fn prepare_cohort(cohort: &Cohort, k_low: usize, k_high: usize) -> Result<Vec<PreparedSlide>> {
    let half_width = cohort.low_half_width();
    cohort
        .slides
        .par_iter()
        .map(|s| {
            Ok(PreparedSlide {
                slide_id: s.slide_id.clone(),
                graph: build_multiscale(s, k_low, k_high, half_width)?,
                x_low: s.feature_matrix(Scale::Low),
                x_high: s.feature_matrix(Scale::High),
                label: s.label,
            })
        })
        .collect()
}

/// Loss of one slide and the gradient for every parameter, in store order.
pub fn slide_loss_and_grads(
    slide: &PreparedSlide,
    params: &ModelParams,
    bins: &TimeBins,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut tape = Tape::new();
    let out = forward_slide(&mut tape, &slide.graph, &slide.x_low, &slide.x_high, params)?;
    let loss = nll_survival_loss(&mut tape, out.slide_risk, out.bin_offsets, &slide.label, bins)?;
    tape.backward(loss)?;
    let grads = out
        .leaves
        .iter()
        .zip(&params.values)
        .map(|(&t, v)| tape.grad(t).cloned().unwrap_or_else(|| Array2::zeros(v.dim())))
        .collect();
    Ok((tape.scalar(loss), grads))
}

/// Slide risks in input order, scored in parallel.
pub fn predict_risks(slides: &[&PreparedSlide], params: &ModelParams) -> Result<Vec<f64>> {
    slides
        .par_iter()
        .map(|s| predict_slide(&s.graph, &s.x_low, &s.x_high, params).map(|(_, r)| r))
        .collect()
}

/// C-index of `params` on `slides`.
pub fn evaluate_cindex(slides: &[&PreparedSlide], params: &ModelParams) -> Result<f64> {
    let risks = predict_risks(slides, params)?;
    let labels: Vec<SurvivalLabel> = slides.iter().map(|s| s.label).collect();
    concordance_index(&risks, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_cindex: f64,
    pub val_cindex: f64,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything a finished fold produces.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub result: FoldResult,
    pub checkpoint: Checkpoint,
    pub test_ids: Vec<String>,
    /// Slide risks of the test slides under the kept parameters.
    pub test_risks: Vec<f64>,
}

fn select<'s>(prepared: &'s [PreparedSlide], ids: &[String]) -> Result<Vec<&'s PreparedSlide>> {
    ids.iter()
        .map(|id| {
            prepared
                .iter()
                .find(|p| &p.slide_id == id)
                .ok_or_else(|| Error::Invalid(format!("fold references unknown slide {id}")))
        })
        .collect()
}

/// Trains one fold and keeps the epoch with the best validation C-index
/// (earliest on ties). A validation set without comparable pairs scores 0.5.
///
/// When `out_dir` is given the kept checkpoint is written to
/// `fold{fold}.ckpt` there.
pub fn train_fold(
    prepared: &[PreparedSlide],
    assignment: &FoldAssignment,
    fold: usize,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    let train = select(prepared, &assignment.train)?;
    let val = select(prepared, &assignment.val)?;
    let test = select(prepared, &assignment.test)?;
    let Some(first) = train.first() else {
        return Err(Error::Invalid(format!("fold {fold} has no training slides")));
    };
    let train_labels: Vec<SurvivalLabel> = train.iter().map(|s| s.label).collect();
    let bins = quantize_time_bins(&train_labels, cfg.n_bins)?;

    let fold_seed = cfg.seed.wrapping_add(fold as u64);
    let mut params = ModelParams::init(&cfg.model_config(first.x_low.ncols()), fold_seed)?;
    let mut state = AdamState::new(&params.values);
    let adam = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = slide_loss_and_grads(train[i], &params, &bins)?;
            total += loss;
            adam_step(&mut params.values, &grads, &mut state, &adam)?;
        }
        epoch_losses.push(total / train.len() as f64);
        let score = match evaluate_cindex(&val, &params) {
            Ok(c) => c,
            Err(Error::Invalid(_)) => 0.5,
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, params.clone()));
        }
    }
    let (val_cindex, best_epoch, params) = best.expect("epochs ≥ 1");
    let test_risks = predict_risks(&test, &params)?;
    let test_labels: Vec<SurvivalLabel> = test.iter().map(|s| s.label).collect();
    let test_cindex = concordance_index(&test_risks, &test_labels)?;

    let checkpoint = Checkpoint {
        params,
        bins,
        meta: serde_json::json!({
            "fold": fold,
            "best_epoch": best_epoch,
            "val_cindex": val_cindex,
            "test_cindex": test_cindex,
            "test_slides": assignment.test,
            "train": cfg,
        }),
    };
    let path = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(format!("fold{fold}.ckpt"));
            save_checkpoint(&p, &checkpoint)?;
            Some(p)
        }
        None => None,
    };
    Ok(FoldOutcome {
        result: FoldResult {
            fold,
            test_cindex,
            val_cindex,
            best_epoch,
            epoch_losses,
            checkpoint: path,
        },
        checkpoint,
        test_ids: assignment.test.clone(),
        test_risks,
    })
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
}

impl CvOutcome {
    /// `{ "folds": [{ "fold", "test_cindex", "best_epoch" }], "mean", "std", "config" }`
    pub fn metrics_json(&self, cfg: &TrainConfig) -> serde_json::Value {
        let folds: Vec<_> = self
            .folds
            .iter()
            .map(|f| {
                serde_json::json!({
                    "fold": f.result.fold,
                    "test_cindex": f.result.test_cindex,
                    "best_epoch": f.result.best_epoch,
                })
            })
            .collect();
        serde_json::json!({
            "folds": folds,
            "mean": self.mean,
            "std": self.std,
            "config": cfg,
        })
    }
}

/// Runs `cfg.n_folds` folds over `prepared` (built from `cohort`).
pub fn cross_validate(
    cohort: &Cohort,
    prepared: &[PreparedSlide],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<CvOutcome> {
    let plan = split_folds(cohort, cfg.n_folds, cfg.seed)?;
    let folds = plan
        .assignments
        .iter()
        .enumerate()
        .map(|(k, a)| train_fold(prepared, a, k, cfg, out_dir))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = folds.iter().map(|f| f.result.test_cindex).collect();
    let mean = crate::autodiff::ordered_mean(scores.iter().copied());
    let std = crate::autodiff::ordered_mean(scores.iter().map(|c| (c - mean).powi(2))).sqrt();
    Ok(CvOutcome { folds, mean, std })
}
