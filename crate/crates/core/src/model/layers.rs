//! Differentiable building blocks recorded on a [`Tape`].

use ndarray::Array2;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::GatEdges;
use crate::ingest::N_TYPES;
use crate::sparse::SparseMatrix;

/// Output of one graph attention layer.
#[derive(Debug, Clone, Copy)]
pub struct GatOutput {
    pub h: Tensor,
    /// Per-edge attention, `E × 1`, aligned with the edge list.
    pub alpha: Tensor,
}

/// One GAT layer: `h'_v = relu(Σ_u α_vu W h_u)` with
/// `α_vu = softmax_u(leaky_relu(aᵀ[W h_v ‖ W h_u]))` over the edges into `v`.
pub fn gat_layer<'a>(
    tape: &mut Tape<'a>,
    h: Tensor,
    w: Tensor,
    a: Tensor,
    edges: &'a GatEdges,
    slope: f64,
) -> Result<GatOutput> {
    let n = tape.shape(h).0;
    let d_out = tape.shape(w).1;
    if tape.shape(a) != (2 * d_out, 1) {
        return Err(Error::Shape {
            op: "gat_layer",
            lhs: tape.shape(w),
            rhs: tape.shape(a),
        });
    }
    let wh = tape.matmul(h, w)?;
    let a_dst = tape.row_slice(a, 0, d_out)?;
    let a_src = tape.row_slice(a, d_out, 2 * d_out)?;
    let f_dst = tape.matmul(wh, a_dst)?;
    let f_src = tape.matmul(wh, a_src)?;
    let e_dst = tape.gather_rows(f_dst, &edges.dst)?;
    let e_src = tape.gather_rows(f_src, &edges.src)?;
    let scores = tape.add(e_dst, e_src)?;
    let scores = tape.leaky_relu(scores, slope)?;
    let alpha = tape.segment_softmax(scores, &edges.dst)?;
    let agg = tape.edge_weighted_sum(alpha, wh, &edges.src, &edges.dst, n)?;
    let h = tape.relu(agg)?;
    Ok(GatOutput { h, alpha })
}

/// HIGH-scale input `[τ, x]`: a one-hot tissue type followed by features.
pub fn hie_input(features: &Array2<f64>, types: &[u8]) -> Result<Array2<f64>> {
    let (n, d) = features.dim();
    if types.len() != n {
        return Err(Error::Invalid(format!("{} type labels for {n} HIGH nodes", types.len())));
    }
    let mut out = Array2::zeros((n, d + N_TYPES));
    out.slice_mut(ndarray::s![.., N_TYPES..]).assign(features);
    for (i, &t) in types.iter().enumerate() {
        if t as usize >= N_TYPES {
            return Err(Error::Invalid(format!(
                "type id {t} on HIGH node {i} is outside 0..{N_TYPES}"
            )));
        }
        out[[i, t as usize]] = 1.0;
    }
    Ok(out)
}

/// `Z = Σ_{s=0}^{S} β_s Ã^s H` with `β` an `(S+1) × 1` tensor.
pub fn decoupled_propagate<'a>(tape: &mut Tape<'a>, adj: &'a SparseMatrix, h: Tensor, beta: Tensor) -> Result<Tensor> {
    let hops = tape.shape(beta).0;
    if hops == 0 || tape.shape(beta).1 != 1 {
        return Err(Error::Shape {
            op: "decoupled_propagate",
            lhs: tape.shape(h),
            rhs: tape.shape(beta),
        });
    }
    let b0 = tape.row_slice(beta, 0, 1)?;
    let mut acc = tape.scale_by(h, b0)?;
    let mut power = h;
    for s in 1..hops {
        power = tape.spmm(adj, power)?;
        let bs = tape.row_slice(beta, s, s + 1)?;
        let term = tape.scale_by(power, bs)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Numerator `relu(Q) P` and denominator `relu(Q) y` for a key summary
/// `P` (`D × D_v`), `y` (`D × 1`).
fn apply_summary(tape: &mut Tape<'_>, rq: Tensor, p: Tensor, y_col: Tensor) -> Result<(Tensor, Tensor)> {
    let num = tape.matmul(rq, p)?;
    let den = tape.matmul(rq, y_col)?;
    Ok((num, den))
}

/// Key summary `(relu(K)ᵀ V, relu(K)ᵀ 1)` of a stream.
fn key_summary(tape: &mut Tape<'_>, rk: Tensor, v: Tensor) -> Result<(Tensor, Tensor)> {
    let rk_t = tape.transpose(rk)?;
    let p = tape.matmul(rk_t, v)?;
    let y = tape.sum_rows(rk)?;
    let y_col = tape.transpose(y)?;
    Ok((p, y_col))
}

/// Linear self-attention `relu(Q)(relu(K)ᵀV) / (relu(Q) relu(K)ᵀ 1 + ε)`.
pub fn sla_attention<'a>(tape: &mut Tape<'a>, q: Tensor, k: Tensor, v: Tensor, eps: f64) -> Result<Tensor> {
    let rq = tape.relu(q)?;
    let rk = tape.relu(k)?;
    let (p, y_col) = key_summary(tape, rk, v)?;
    let (num, den) = apply_summary(tape, rq, p, y_col)?;
    let den = tape.add_scalar(den, eps)?;
    tape.div_rows(num, den)
}

/// LOW-stream attention whose keys include the averaged HIGH feature maps
/// of each LOW node's children.
///
/// With `φ̄_Q = M relu(Q_H)` and `φ̄_K = M relu(K_H)` for the child-mean
/// operator `M`:
/// `out = (relu(Q_L) P_L + φ̄_Q P̄) / (relu(Q_L) y_L + φ̄_Q ȳ + ε)` where
/// `P_L = relu(K_L)ᵀ V_L`, `P̄ = φ̄_Kᵀ V_L`, `y_L = relu(K_L)ᵀ 1`, `ȳ = φ̄_Kᵀ 1`.
#[allow(clippy::too_many_arguments)]
pub fn cross_scale_attention<'a>(
    tape: &mut Tape<'a>,
    child_mean: &'a SparseMatrix,
    q_low: Tensor,
    k_low: Tensor,
    v_low: Tensor,
    q_high: Tensor,
    k_high: Tensor,
    eps: f64,
) -> Result<Tensor> {
    let rq_l = tape.relu(q_low)?;
    let rk_l = tape.relu(k_low)?;
    let rq_h = tape.relu(q_high)?;
    let rk_h = tape.relu(k_high)?;
    let phi_q = tape.spmm(child_mean, rq_h)?;
    let phi_k = tape.spmm(child_mean, rk_h)?;
    let (p_l, y_l) = key_summary(tape, rk_l, v_low)?;
    let (p_h, y_h) = key_summary(tape, phi_k, v_low)?;
    let (num_l, den_l) = apply_summary(tape, rq_l, p_l, y_l)?;
    let (num_h, den_h) = apply_summary(tape, phi_q, p_h, y_h)?;
    let num = tape.add(num_l, num_h)?;
    let den = tape.add(den_l, den_h)?;
    let den = tape.add_scalar(den, eps)?;
    tape.div_rows(num, den)
}
