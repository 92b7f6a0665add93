//! Reference implementations and fixtures shared by the integration tests.
//! Every oracle here is a literal loop over the defining formula, written
//! without reusing the library's factorized code paths.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ipgphormer::graph::{cross_scale_edges, knn_edges, normalize_adjacency, MultiScaleGraph};
use ipgphormer::ingest::{SurvivalLabel, N_TYPES};
use ipgphormer::train::PreparedSlide;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

pub fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .fold(0.0, f64::max)
}

pub fn max_abs_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `Sim(q_i, k_j) = Σ_d relu(q_id) relu(k_jd)`.
fn sim(q: &Array2<f64>, i: usize, k: &Array2<f64>, j: usize) -> f64 {
    (0..q.ncols()).map(|d| relu(q[[i, d]]) * relu(k[[j, d]])).sum()
}

/// Full similarity map, row-normalized, then applied to `V`.
pub fn dense_attention_oracle(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, eps: f64) -> Array2<f64> {
    let n = q.nrows();
    let mut out = Array2::zeros((n, v.ncols()));
    for i in 0..n {
        let s: Vec<f64> = (0..n).map(|j| sim(q, i, k, j)).collect();
        let den: f64 = s.iter().sum::<f64>() + eps;
        for j in 0..n {
            for c in 0..v.ncols() {
                out[[i, c]] += s[j] / den * v[[j, c]];
            }
        }
    }
    out
}

/// Fused LOW attention built from an explicit `N_L × N_L` map whose
/// entries add the mean similarity over all child pairs.
pub fn dense_fusion_oracle(
    children: &[Vec<usize>],
    q_l: &Array2<f64>,
    k_l: &Array2<f64>,
    v_l: &Array2<f64>,
    q_h: &Array2<f64>,
    k_h: &Array2<f64>,
    eps: f64,
) -> Array2<f64> {
    let n = q_l.nrows();
    let mut fused = Array2::<f64>::zeros((n, n));
    for a in 0..n {
        for b in 0..n {
            let mut s = sim(q_l, a, k_l, b);
            let (ca, cb) = (&children[a], &children[b]);
            if !ca.is_empty() && !cb.is_empty() {
                let mut pair_sum = 0.0;
                for &p in ca {
                    for &q in cb {
                        pair_sum += sim(q_h, p, k_h, q);
                    }
                }
                s += pair_sum / (ca.len() * cb.len()) as f64;
            }
            fused[[a, b]] = s;
        }
    }
    let mut out = Array2::zeros((n, v_l.ncols()));
    for a in 0..n {
        let den: f64 = fused.row(a).sum() + eps;
        for b in 0..n {
            for c in 0..v_l.ncols() {
                out[[a, c]] += fused[[a, b]] / den * v_l[[b, c]];
            }
        }
    }
    out
}

/// One GAT layer by loops over each node's neighborhood (non-zeros of
/// `adj`, self included). Returns the output and the per-node weights.
pub fn gat_oracle(
    adj: &Array2<f64>,
    h: &Array2<f64>,
    w: &Array2<f64>,
    a: &Array2<f64>,
    slope: f64,
) -> (Array2<f64>, Vec<Vec<f64>>) {
    let n = h.nrows();
    let d_out = w.ncols();
    let wh = h.dot(w);
    let mut out = Array2::zeros((n, d_out));
    let mut weights = Vec::new();
    for v in 0..n {
        let nbrs: Vec<usize> = (0..n).filter(|&u| adj[[v, u]] != 0.0).collect();
        let scores: Vec<f64> = nbrs
            .iter()
            .map(|&u| {
                let mut e = 0.0;
                for c in 0..d_out {
                    e += a[[c, 0]] * wh[[v, c]] + a[[d_out + c, 0]] * wh[[u, c]];
                }
                if e > 0.0 {
                    e
                } else {
                    slope * e
                }
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        let alpha: Vec<f64> = scores.iter().map(|s| (s - m).exp() / z).collect();
        for (t, &u) in nbrs.iter().enumerate() {
            for c in 0..d_out {
                out[[v, c]] += alpha[t] * wh[[u, c]];
            }
        }
        weights.push(alpha);
    }
    (out.mapv(relu), weights)
}

/// `Σ_s β_s Ã^s H` with explicit dense powers.
pub fn propagate_oracle(adj: &Array2<f64>, h: &Array2<f64>, beta: &[f64]) -> Array2<f64> {
    let mut power = Array2::<f64>::eye(adj.nrows());
    let mut out = Array2::zeros(h.dim());
    for &b in beta {
        out = out + power.dot(h) * b;
        power = adj.dot(&power);
    }
    out
}

/// O(n²) Harrell C-index by pair enumeration.
pub fn cindex_oracle(risks: &[f64], labels: &[SurvivalLabel]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..risks.len() {
        for j in 0..risks.len() {
            if labels[i].event && labels[i].time < labels[j].time {
                den += 1.0;
                if risks[i] > risks[j] {
                    num += 1.0;
                } else if risks[i] == risks[j] {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Breslow partial log-likelihood and score by looping over risk sets.
pub fn cox_loglik_oracle(x: &Array2<f64>, labels: &[SurvivalLabel], g: &[f64]) -> (f64, Vec<f64>) {
    let (n, p) = x.dim();
    let eta: Vec<f64> = (0..n).map(|i| (0..p).map(|j| x[[i, j]] * g[j]).sum()).collect();
    let mut ll = 0.0;
    let mut score = vec![0.0; p];
    for i in 0..n {
        if !labels[i].event {
            continue;
        }
        let risk: Vec<usize> = (0..n).filter(|&j| labels[j].time >= labels[i].time).collect();
        let s0: f64 = risk.iter().map(|&j| eta[j].exp()).sum();
        ll += eta[i] - s0.ln();
        for c in 0..p {
            let s1: f64 = risk.iter().map(|&j| eta[j].exp() * x[[j, c]]).sum();
            score[c] += x[[i, c]] - s1 / s0;
        }
    }
    (ll, score)
}

/// Coarse-to-fine grid search for the maximum partial log-likelihood.
pub fn cox_grid_max(x: &Array2<f64>, labels: &[SurvivalLabel]) -> (f64, Vec<f64>) {
    let p = x.ncols();
    let mut center = vec![0.0; p];
    let mut half = 8.0;
    let steps = 10i64;
    let mut best = (cox_loglik_oracle(x, labels, &center).0, center.clone());
    for _ in 0..8 {
        let h = half / steps as f64;
        let total = (2 * steps + 1).pow(p as u32);
        for idx in 0..total {
            let mut g = center.clone();
            let mut rem = idx;
            for gj in g.iter_mut() {
                *gj += ((rem % (2 * steps + 1)) as i64 - steps) as f64 * h;
                rem /= 2 * steps + 1;
            }
            let ll = cox_loglik_oracle(x, labels, &g).0;
            if ll > best.0 {
                best = (ll, g);
            }
        }
        center = best.1.clone();
        half = 2.0 * h;
    }
    best
}

/// `P(χ²_k > x)` as one minus a Simpson integral of the density, after
/// substituting `x = u²` to remove the singularity at zero.
pub fn chi2_sf_oracle(x: f64, k: u32) -> f64 {
    let half_k = k as f64 / 2.0;
    // Γ(k/2) from Γ(1/2) = √π and Γ(1) = 1.
    let mut gamma = if k % 2 == 0 { 1.0 } else { std::f64::consts::PI.sqrt() };
    let mut s = if k % 2 == 0 { 1.0 } else { 0.5 };
    while s < half_k {
        gamma *= s;
        s += 1.0;
    }
    let norm = 2.0f64.powf(half_k) * gamma;
    let f = |u: f64| 2.0 * u.powi(k as i32 - 1) * (-u * u / 2.0).exp() / norm;
    let b = x.sqrt();
    let m = 20_000;
    let h = b / m as f64;
    let mut acc = f(0.0) + f(b);
    for i in 1..m {
        acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - acc * h / 3.0
}

/// A two-scale graph on an `nx × ny` LOW grid with a `2nx × 2ny` HIGH
/// grid beneath it and random tissue types.
pub fn grid_graph(nx: usize, ny: usize, k_low: usize, k_high: usize, rng: &mut ChaCha8Rng) -> MultiScaleGraph {
    let low: Vec<(f64, f64)> = (0..nx * ny)
        .map(|i| (((i % nx) as f64 + 0.5) * 256.0, ((i / nx) as f64 + 0.5) * 256.0))
        .collect();
    let hx = 2 * nx;
    let high: Vec<(f64, f64)> = (0..4 * nx * ny)
        .map(|i| (((i % hx) as f64 + 0.5) * 128.0, ((i / hx) as f64 + 0.5) * 128.0))
        .collect();
    let adj_low = normalize_adjacency(&knn_edges(&low, k_low).unwrap(), low.len()).unwrap();
    let adj_high = normalize_adjacency(&knn_edges(&high, k_high).unwrap(), high.len()).unwrap();
    let parent = cross_scale_edges(&low, 128.0, &high).unwrap();
    let types = (0..high.len()).map(|_| rng.random_range(0..N_TYPES as u8)).collect();
    MultiScaleGraph::from_parts(low, high, adj_low, adj_high, parent, types).unwrap()
}

/// The 6-LOW / 24-HIGH slide used by the gradient checks.
pub fn toy_slide(d: usize, seed: u64) -> PreparedSlide {
    let mut r = rng(seed);
    let graph = grid_graph(3, 2, 3, 4, &mut r);
    PreparedSlide {
        slide_id: format!("toy-{seed}"),
        x_low: uniform(&mut r, graph.n_low, d, -1.0, 1.0),
        x_high: uniform(&mut r, graph.n_high, d, -1.0, 1.0),
        graph,
        label: SurvivalLabel { time: 7.0, event: true },
    }
}

/// Random survival labels with roughly `censor` censored and some tied times.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, censor: f64) -> Vec<SurvivalLabel> {
    (0..n)
        .map(|_| SurvivalLabel {
            time: (rng.random_range(1.0..30.0f64) * 2.0).round() / 2.0,
            event: rng.random::<f64>() >= censor,
        })
        .collect()
}

/// Largest relative discrepancy, per primitive, between tape gradients and
/// central differences. Every check reduces the primitive's output to a
/// scalar through a fixed random projection so no coordinate is symmetric.
pub fn primitive_gradient_errors(step: f64) -> Vec<(&'static str, f64)> {
    use ipgphormer::autodiff::{grad_check, Tape, Tensor};
    use ipgphormer::error::Result;
    use ipgphormer::sparse::SparseMatrix;

    fn project(tape: &mut Tape<'_>, t: Tensor, seed: u64) -> Result<Tensor> {
        let (r, c) = tape.shape(t);
        let w = tape.constant(uniform(&mut rng(seed), r, c, -1.0, 1.0))?;
        let p = tape.mul(t, w)?;
        tape.sum(p)
    }
    fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || {
            let m = rng.random_range(0.05..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
    }

    let mut g = rng(99);
    let x = away_from_zero(&mut g, 4, 3);
    let pos = uniform(&mut g, 4, 3, 0.2, 2.0);
    let other = uniform(&mut g, 4, 3, -1.0, 1.0);
    let right = uniform(&mut g, 3, 5, -1.0, 1.0);
    let row = uniform(&mut g, 1, 3, -1.0, 1.0);
    let col_pos = uniform(&mut g, 4, 1, 0.5, 2.0);
    let edges_src: &'static [usize] = Box::leak(vec![0, 1, 2, 3, 1, 0, 2].into_boxed_slice());
    let edges_dst: &'static [usize] = Box::leak(vec![0, 0, 1, 1, 2, 3, 3].into_boxed_slice());
    let gather: &'static [usize] = Box::leak(vec![3, 0, 0, 2, 1].into_boxed_slice());
    let sparse: &'static SparseMatrix = Box::leak(Box::new(
        SparseMatrix::from_triplets(3, 4, vec![(0, 0, 0.5), (0, 3, -1.2), (1, 1, 2.0), (2, 2, 0.7), (2, 0, 0.3)])
            .unwrap(),
    ));
    let edge_w = uniform(&mut g, 7, 1, -1.0, 1.0);
    let scalar = uniform(&mut g, 1, 1, 0.5, 1.5);

    let c = |m: &Array2<f64>| m.clone();
    let mut out = Vec::new();
    let mut run = |name: &'static str, err: Result<f64>| out.push((name, err.expect(name)));

    let (o, rt) = (c(&other), c(&right));
    run("matmul.lhs", grad_check(|t, a| { let b = t.constant(rt.clone())?; let y = t.matmul(a, b)?; project(t, y, 1) }, &x, step));
    run("matmul.rhs", grad_check(|t, b| { let a = t.constant(o.clone())?; let y = t.matmul(a, b)?; project(t, y, 2) }, &right, step));
    run("transpose", grad_check(|t, a| { let y = t.transpose(a)?; project(t, y, 3) }, &x, step));
    run("add", grad_check(|t, a| { let b = t.constant(o.clone())?; let y = t.add(a, b)?; project(t, y, 4) }, &x, step));
    run("sub.lhs", grad_check(|t, a| { let b = t.constant(o.clone())?; let y = t.sub(a, b)?; project(t, y, 5) }, &x, step));
    run("sub.rhs", grad_check(|t, b| { let a = t.constant(o.clone())?; let y = t.sub(a, b)?; project(t, y, 6) }, &x, step));
    run("mul", grad_check(|t, a| { let b = t.constant(o.clone())?; let y = t.mul(a, b)?; project(t, y, 7) }, &x, step));
    run("mul.self", grad_check(|t, a| { let y = t.mul(a, a)?; project(t, y, 8) }, &x, step));
    run("scale", grad_check(|t, a| { let y = t.scale(a, -2.5)?; project(t, y, 9) }, &x, step));
    run("add_scalar", grad_check(|t, a| { let y = t.add_scalar(a, 0.75)?; project(t, y, 10) }, &x, step));
    let xc = c(&x);
    run("scale_by.scalar", grad_check(|t, s| { let a = t.constant(xc.clone())?; let y = t.scale_by(a, s)?; project(t, y, 11) }, &scalar, step));
    let sc = c(&scalar);
    run("scale_by.matrix", grad_check(|t, a| { let s = t.constant(sc.clone())?; let y = t.scale_by(a, s)?; project(t, y, 12) }, &x, step));
    run("concat_cols", grad_check(|t, a| { let b = t.constant(o.clone())?; let y = t.concat_cols(b, a)?; let z = t.concat_cols(y, a)?; project(t, z, 13) }, &x, step));
    run("row_slice", grad_check(|t, a| { let y = t.row_slice(a, 1, 3)?; project(t, y, 14) }, &x, step));
    run("relu", grad_check(|t, a| { let y = t.relu(a)?; project(t, y, 15) }, &x, step));
    run("leaky_relu", grad_check(|t, a| { let y = t.leaky_relu(a, 0.2)?; project(t, y, 16) }, &x, step));
    run("exp", grad_check(|t, a| { let y = t.exp(a)?; project(t, y, 17) }, &x, step));
    run("log", grad_check(|t, a| { let y = t.log(a)?; project(t, y, 18) }, &pos, step));
    run("sigmoid", grad_check(|t, a| { let y = t.sigmoid(a)?; project(t, y, 19) }, &x, step));
    run("log_sigmoid", grad_check(|t, a| { let y = t.log_sigmoid(a)?; project(t, y, 20) }, &x, step));
    run("sum", grad_check(|t, a| { let y = t.exp(a)?; t.sum(y) }, &x, step));
    run("mean", grad_check(|t, a| { let y = t.exp(a)?; t.mean(y) }, &x, step));
    run("sum_rows", grad_check(|t, a| { let y = t.sum_rows(a)?; project(t, y, 21) }, &x, step));
    let e_dst = edges_dst;
    let ew = c(&edge_w);
    let wide = uniform(&mut g, 7, 2, -1.0, 1.0);
    run("segment_softmax", grad_check(|t, a| { let y = t.segment_softmax(a, e_dst)?; project(t, y, 22) }, &wide, step));
    run("spmm", grad_check(|t, a| { let y = t.spmm(sparse, a)?; project(t, y, 23) }, &x, step));
    let rw = c(&row);
    run("add_row.matrix", grad_check(|t, a| { let r = t.constant(rw.clone())?; let y = t.add_row(a, r)?; project(t, y, 24) }, &x, step));
    run("add_row.row", grad_check(|t, r| { let a = t.constant(xc.clone())?; let y = t.add_row(a, r)?; project(t, y, 25) }, &row, step));
    let cp = c(&col_pos);
    run("div_rows.numerator", grad_check(|t, a| { let d = t.constant(cp.clone())?; let y = t.div_rows(a, d)?; project(t, y, 26) }, &x, step));
    run("div_rows.denominator", grad_check(|t, d| { let a = t.constant(xc.clone())?; let y = t.div_rows(a, d)?; project(t, y, 27) }, &col_pos, step));
    run("gather_rows", grad_check(|t, a| { let y = t.gather_rows(a, gather)?; project(t, y, 28) }, &x, step));
    run("edge_weighted_sum.weights", grad_check(|t, w| { let h = t.constant(xc.clone())?; let y = t.edge_weighted_sum(w, h, edges_src, edges_dst, 4)?; project(t, y, 29) }, &edge_w, step));
    run("edge_weighted_sum.values", grad_check(|t, h| { let w = t.constant(ew.clone())?; let y = t.edge_weighted_sum(w, h, edges_src, edges_dst, 4)?; project(t, y, 30) }, &x, step));
    run("layer_norm", grad_check(|t, a| { let y = t.layer_norm(a, 1e-5)?; project(t, y, 31) }, &x, step));
    out
}

/// Relative discrepancy of the full slide loss gradient over every model
/// parameter on the toy slide.
pub fn full_model_gradient_error(step: f64) -> f64 {
    use ipgphormer::ingest::TimeBins;
    use ipgphormer::model::{ModelConfig, ModelParams};
    use ipgphormer::train::slide_loss_and_grads;

    let slide = toy_slide(4, 5);
    let cfg = ModelConfig {
        d_in: 4,
        hidden: 4,
        gat_layers: 2,
        hops: 2,
        n_blocks: 2,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(&cfg, 3).unwrap();
    let bins = TimeBins { edges: vec![3.0, 6.0, 9.0] };
    let (_, grads) = slide_loss_and_grads(&slide, &params, &bins).unwrap();
    let mut worst: f64 = 0.0;
    for p in 0..params.values.len() {
        for idx in 0..params.values[p].len() {
            let cols = params.values[p].ncols();
            let (r, c) = (idx / cols, idx % cols);
            let orig = params.values[p][[r, c]];
            params.values[p][[r, c]] = orig + step;
            let up = slide_loss_and_grads(&slide, &params, &bins).unwrap().0;
            params.values[p][[r, c]] = orig - step;
            let down = slide_loss_and_grads(&slide, &params, &bins).unwrap().0;
            params.values[p][[r, c]] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grads[p][[r, c]];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
    }
    worst
}

/// Small, fast training configuration for integration tests.
pub fn tiny_train_config() -> ipgphormer::train::TrainConfig {
    ipgphormer::train::TrainConfig {
        hidden: 8,
        n_blocks: 2,
        gat_layers: 2,
        hops: 2,
        epochs: 3,
        lr: 1e-3,
        ..ipgphormer::train::TrainConfig::default()
    }
}

pub fn small_synth(n_slides: usize, lambda_tumor: f64) -> ipgphormer::ingest::SynthConfig {
    ipgphormer::ingest::SynthConfig {
        n_slides,
        grid: 4,
        d: 6,
        lambda_tumor,
        ..ipgphormer::ingest::SynthConfig::default()
    }
}

/// Scores a slide and checks that the slide risk is the mean of the
/// patch risks to 1e-12. Returns the patch risks and slide risk.
pub fn scored(slide: &PreparedSlide, params: &ipgphormer::model::ModelParams) -> (Vec<f64>, f64) {
    let (risks, slide_risk) =
        ipgphormer::model::predict_slide(&slide.graph, &slide.x_low, &slide.x_high, params).unwrap();
    let mean = risks.iter().sum::<f64>() / risks.len() as f64;
    assert!((mean - slide_risk).abs() <= 1e-12, "{}: {mean} vs {slide_risk}", slide.slide_id);
    (risks, slide_risk)
}
