//! The multi-scale graph transformer.
//!
//! A slide passes through
//! 1. GAT encoders on each scale (the HIGH one sees `[type one-hot, x]`),
//! 2. decoupled propagation `Σ β_s Ã^s H` per scale,
//! 3. `n_blocks` linear-attention blocks where the LOW stream attends with
//!    keys pooled from its HIGH children,
//! 4. a linear head giving one risk per LOW patch; the slide risk is their mean.

mod attention;
mod checkpoint;
mod layers;
mod params;

use ndarray::Array2;

pub use attention::{bench_attention, dense_attention, loglog_slope, sla_plain, BenchRow};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{cross_scale_attention, decoupled_propagate, gat_layer, hie_input, sla_attention, GatOutput};
pub use params::{BlockSlots, GatLayerSlots, Layout, ModelConfig, ModelParams, StreamSlots};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::MultiScaleGraph;

/// Tensors produced by one recorded forward pass.
#[derive(Debug, Clone)]
pub struct SlideForward {
    /// One tape leaf per entry of [`ModelParams::values`], same order.
    pub leaves: Vec<Tensor>,
    /// `n_low × 1`.
    pub patch_risks: Tensor,
    /// `1 × 1` mean of `patch_risks`.
    pub slide_risk: Tensor,
    /// `1 × T`.
    pub bin_offsets: Tensor,
    /// Per-layer edge attention of the LOW and HIGH encoders.
    pub alpha_low: Vec<Tensor>,
    pub alpha_high: Vec<Tensor>,
}

fn stream_update(
    tape: &mut Tape<'_>,
    z: Tensor,
    attn: Tensor,
    slots: &StreamSlots,
    leaves: &[Tensor],
    cfg: &ModelConfig,
) -> Result<Tensor> {
    if !cfg.residual_ffn {
        return Ok(attn);
    }
    let r = tape.add(z, attn)?;
    let r = tape.layer_norm(r, cfg.layer_norm_eps)?;
    let h = tape.matmul(r, leaves[slots.ffn_w1])?;
    let h = tape.add_row(h, leaves[slots.ffn_b1])?;
    let h = tape.relu(h)?;
    let f = tape.matmul(h, leaves[slots.ffn_w2])?;
    let f = tape.add_row(f, leaves[slots.ffn_b2])?;
    let out = tape.add(r, f)?;
    tape.layer_norm(out, cfg.layer_norm_eps)
}

/// Records the full forward pass of one slide on `tape`.
///
/// `x_low` is `n_low × d`, `x_high` is `n_high × d`; the type one-hot for
/// the HIGH encoder is taken from `graph.types_high`.
pub fn forward_slide<'g>(
    tape: &mut Tape<'g>,
    graph: &'g MultiScaleGraph,
    x_low: &Array2<f64>,
    x_high: &Array2<f64>,
    params: &ModelParams,
) -> Result<SlideForward> {
    let cfg = &params.config;
    let lay = &params.layout;
    if x_low.dim() != (graph.n_low, cfg.d_in) || x_high.dim() != (graph.n_high, cfg.d_in) {
        return Err(Error::Shape {
            op: "forward_slide",
            lhs: x_low.dim(),
            rhs: x_high.dim(),
        });
    }
    let leaves = params
        .values
        .iter()
        .map(|v| tape.param(v.clone()))
        .collect::<Result<Vec<_>>>()?;

    let mut h_low = tape.constant(x_low.clone())?;
    let mut alpha_low = Vec::new();
    for slots in &lay.tie {
        let out = gat_layer(tape, h_low, leaves[slots.w], leaves[slots.a], &graph.edges_low, cfg.leaky_slope)?;
        h_low = out.h;
        alpha_low.push(out.alpha);
    }
    let mut h_high;
    let mut alpha_high = Vec::new();
    if cfg.hie_enabled {
        h_high = tape.constant(hie_input(x_high, &graph.types_high)?)?;
        for slots in &lay.hie {
            let out = gat_layer(tape, h_high, leaves[slots.w], leaves[slots.a], &graph.edges_high, cfg.leaky_slope)?;
            h_high = out.h;
            alpha_high.push(out.alpha);
        }
    } else {
        h_high = tape.constant(x_high.clone())?;
    }

    let mut z_low = decoupled_propagate(tape, &graph.adj_low, h_low, leaves[lay.beta_low])?;
    let mut z_high = decoupled_propagate(tape, &graph.adj_high, h_high, leaves[lay.beta_high])?;

    for (k, block) in lay.blocks.iter().enumerate() {
        let (lo, hi) = (&block.low, &block.high);
        let q_l = tape.matmul(z_low, leaves[lo.wq])?;
        let k_l = tape.matmul(z_low, leaves[lo.wk])?;
        let v_l = tape.matmul(z_low, leaves[lo.wv])?;
        let q_h = tape.matmul(z_high, leaves[hi.wq])?;
        let k_h = tape.matmul(z_high, leaves[hi.wk])?;
        let a_low = cross_scale_attention(tape, &graph.child_mean, q_l, k_l, v_l, q_h, k_h, cfg.eps)?;
        // The HIGH stream's last update would feed nothing downstream.
        if k + 1 < lay.blocks.len() {
            let v_h = tape.matmul(z_high, leaves[hi.wv])?;
            let a_high = sla_attention(tape, q_h, k_h, v_h, cfg.eps)?;
            z_high = stream_update(tape, z_high, a_high, hi, &leaves, cfg)?;
        }
        z_low = stream_update(tape, z_low, a_low, lo, &leaves, cfg)?;
    }

    let r = tape.matmul(z_low, leaves[lay.head_w])?;
    let patch_risks = tape.add_row(r, leaves[lay.head_b])?;
    let slide_risk = tape.mean(patch_risks)?;
    Ok(SlideForward {
        bin_offsets: leaves[lay.bin_offsets],
        leaves,
        patch_risks,
        slide_risk,
        alpha_low,
        alpha_high,
    })
}

/// Patch risks (node order) and slide risk without keeping the tape.
pub fn predict_slide(
    graph: &MultiScaleGraph,
    x_low: &Array2<f64>,
    x_high: &Array2<f64>,
    params: &ModelParams,
) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let out = forward_slide(&mut tape, graph, x_low, x_high, params)?;
    let risks = tape.value(out.patch_risks).column(0).to_vec();
    Ok((risks, tape.scalar(out.slide_risk)))
}
