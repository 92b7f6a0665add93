//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Each
//! primitive stores the ids of its inputs plus whatever it needs for its
//! backward rule. Because nodes are only ever appended, ids are already in
//! topological order and [`Tape::backward`] simply walks them in reverse.
//!
//! ```
//! use ipgphormer::autodiff::Tape;
//! use ndarray::array;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(array![[1.0, -2.0, 3.0]]).unwrap();
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &array![[2.0, -4.0, 6.0]]);
//! ```
//!
//! Gradients of leaves accumulate across `backward` calls until
//! [`Tape::zero_grad`] is called.
//!
//! Tensors borrow graph structure (sparse matrices, edge lists) for the
//! lifetime of the tape instead of copying it per forward pass.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Slope used by [`Tape::leaky_relu`] in the graph attention layers.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
}

impl Tensor {
    pub fn id(self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone, Copy)]
struct EdgeList<'a> {
    src: &'a [usize],
    dst: &'a [usize],
}

#[derive(Debug)]
enum Op<'a> {
    Leaf,
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    ScaleBy(Tensor, Tensor),
    ConcatCols(Tensor, Tensor),
    RowSlice(Tensor, usize),
    Relu(Tensor),
    LeakyRelu(Tensor, f64),
    Exp(Tensor),
    Log(Tensor),
    Sigmoid(Tensor),
    LogSigmoid(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    SumRows(Tensor),
    SegmentSoftmax(Tensor, &'a [usize]),
    SpMM(&'a SparseMatrix, Tensor),
    AddRow(Tensor, Tensor),
    DivRows(Tensor, Tensor),
    GatherRows(Tensor, &'a [usize]),
    EdgeWeightedSum(Tensor, Tensor, EdgeList<'a>),
    LayerNorm(Tensor, Vec<f64>),
}

#[derive(Debug)]
struct Node<'a> {
    value: Array2<f64>,
    op: Op<'a>,
    needs_grad: bool,
}

/// Record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Array2<f64>>>,
}

fn shape(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
}

fn same_shape(op: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            op,
            lhs: a.dim(),
            rhs: b.dim(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: &'static str, value: Array2<f64>, kind: Op<'a>, needs_grad: bool) -> Result<Tensor> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op,
                message: "produced a non-finite value".into(),
            });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        self.grads.push(None);
        Ok(Tensor { id })
    }

    fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Result<Tensor> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Array2<f64>) -> Result<Tensor> {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant by `backward`.
    pub fn constant(&mut self, value: Array2<f64>) -> Result<Tensor> {
        self.leaf(value, false)
    }

    pub fn value(&self, t: Tensor) -> &Array2<f64> {
        &self.nodes[t.id].value
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.nodes[t.id].value.dim()
    }

    /// Scalar value of a 1×1 tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        self.nodes[t.id].value[[0, 0]]
    }

    /// Accumulated gradient of a tracked leaf, if `backward` reached it.
    pub fn grad(&self, t: Tensor) -> Option<&Array2<f64>> {
        self.grads[t.id].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn ng(&self, t: Tensor) -> bool {
        self.nodes[t.id].needs_grad
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: shape(va),
                rhs: shape(vb),
            });
        }
        let out = va.dot(vb);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", out, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let out = self.value(a).t().as_standard_layout().to_owned();
        let ng = self.ng(a);
        self.push("transpose", out, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push("add", out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push("sub", out, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push("mul", out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let out = self.value(a) * c;
        let ng = self.ng(a);
        self.push("scale", out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let out = self.value(a) + c;
        let ng = self.ng(a);
        self.push("add_scalar", out, Op::AddScalar(a), ng)
    }

    /// Multiplies every entry of `a` by the 1×1 tensor `s`.
    pub fn scale_by(&mut self, a: Tensor, s: Tensor) -> Result<Tensor> {
        let vs = self.value(s);
        if vs.dim() != (1, 1) {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: shape(self.value(a)),
                rhs: shape(vs),
            });
        }
        let out = self.value(a) * vs[[0, 0]];
        let ng = self.ng(a) || self.ng(s);
        self.push("scale_by", out, Op::ScaleBy(a, s), ng)
    }

    pub fn concat_cols(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.nrows() != vb.nrows() {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: shape(va),
                rhs: shape(vb),
            });
        }
        let out = ndarray::concatenate(Axis(1), &[va.view(), vb.view()])
            .expect("row counts checked");
        let ng = self.ng(a) || self.ng(b);
        self.push("concat_cols", out, Op::ConcatCols(a, b), ng)
    }

    /// Rows `start..end` of `a`.
    pub fn row_slice(&mut self, a: Tensor, start: usize, end: usize) -> Result<Tensor> {
        let va = self.value(a);
        if start > end || end > va.nrows() {
            return Err(Error::Shape {
                op: "row_slice",
                lhs: shape(va),
                rhs: (start, end),
            });
        }
        let out = va.slice(s![start..end, ..]).to_owned();
        let ng = self.ng(a);
        self.push("row_slice", out, Op::RowSlice(a, start), ng)
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        let out = self.value(a).mapv(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push("relu", out, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Tensor, slope: f64) -> Result<Tensor> {
        let out = self.value(a).mapv(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(a);
        self.push("leaky_relu", out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn exp(&mut self, a: Tensor) -> Result<Tensor> {
        let out = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push("exp", out, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        let va = self.value(a);
        if va.iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                message: "argument must be positive".into(),
            });
        }
        let out = va.mapv(f64::ln);
        let ng = self.ng(a);
        self.push("log", out, Op::Log(a), ng)
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Result<Tensor> {
        let out = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push("sigmoid", out, Op::Sigmoid(a), ng)
    }

    /// `log(sigmoid(a))`, stable for large magnitudes.
    pub fn log_sigmoid(&mut self, a: Tensor) -> Result<Tensor> {
        let out = self.value(a).mapv(log_sigmoid);
        let ng = self.ng(a);
        self.push("log_sigmoid", out, Op::LogSigmoid(a), ng)
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let total = self.value(a).iter().fold(0.0, |acc, &v| acc + v);
        let ng = self.ng(a);
        self.push("sum", Array2::from_elem((1, 1), total), Op::Sum(a), ng)
    }

    /// Mean of all entries, accumulated in storage order.
    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::Domain {
                op: "mean",
                message: "empty tensor".into(),
            });
        }
        let m = ordered_mean(va.iter().copied());
        let ng = self.ng(a);
        self.push("mean", Array2::from_elem((1, 1), m), Op::Mean(a), ng)
    }

    /// Column sums as a 1×D row.
    pub fn sum_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push("sum_rows", out, Op::SumRows(a), ng)
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, a: Tensor, segments: &'a [usize]) -> Result<Tensor> {
        let va = self.value(a);
        if segments.len() != va.nrows() {
            return Err(Error::Shape {
                op: "segment_softmax",
                lhs: shape(va),
                rhs: (segments.len(), 1),
            });
        }
        let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
        let cols = va.ncols();
        let mut max = Array2::from_elem((n_seg, cols), f64::NEG_INFINITY);
        for (row, &sid) in va.rows().into_iter().zip(segments) {
            for (m, &v) in max.row_mut(sid).iter_mut().zip(row) {
                *m = m.max(v);
            }
        }
        let mut out = Array2::zeros(va.dim());
        let mut denom = Array2::<f64>::zeros((n_seg, cols));
        for ((mut o, row), &sid) in out.rows_mut().into_iter().zip(va.rows()).zip(segments) {
            for j in 0..cols {
                let e = (row[j] - max[[sid, j]]).exp();
                o[j] = e;
                denom[[sid, j]] += e;
            }
        }
        for (mut o, &sid) in out.rows_mut().into_iter().zip(segments) {
            for j in 0..cols {
                o[j] /= denom[[sid, j]];
            }
        }
        let ng = self.ng(a);
        self.push("segment_softmax", out, Op::SegmentSoftmax(a, segments), ng)
    }

    /// Sparse-dense product `m · a`.
    pub fn spmm(&mut self, m: &'a SparseMatrix, a: Tensor) -> Result<Tensor> {
        let out = m.matmul_dense(self.value(a))?;
        let ng = self.ng(a);
        self.push("spmm", out, Op::SpMM(m, a), ng)
    }

    /// Adds the 1×D `row` to every row of `a`.
    pub fn add_row(&mut self, a: Tensor, row: Tensor) -> Result<Tensor> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Error::Shape {
                op: "add_row",
                lhs: shape(va),
                rhs: shape(vr),
            });
        }
        let out = va + vr;
        let ng = self.ng(a) || self.ng(row);
        self.push("add_row", out, Op::AddRow(a, row), ng)
    }

    /// Divides row `i` of `a` by the scalar `d[i, 0]`.
    pub fn div_rows(&mut self, a: Tensor, d: Tensor) -> Result<Tensor> {
        let (va, vd) = (self.value(a), self.value(d));
        if vd.ncols() != 1 || vd.nrows() != va.nrows() {
            return Err(Error::Shape {
                op: "div_rows",
                lhs: shape(va),
                rhs: shape(vd),
            });
        }
        if vd.iter().any(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div_rows",
                message: "division by zero".into(),
            });
        }
        let out = va / vd;
        let ng = self.ng(a) || self.ng(d);
        self.push("div_rows", out, Op::DivRows(a, d), ng)
    }

    /// Row `idx[i]` of `a` becomes row `i` of the output.
    pub fn gather_rows(&mut self, a: Tensor, idx: &'a [usize]) -> Result<Tensor> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.nrows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: shape(va),
                rhs: (bad, 0),
            });
        }
        let out = va.select(Axis(0), idx);
        let ng = self.ng(a);
        self.push("gather_rows", out, Op::GatherRows(a, idx), ng)
    }

    /// Message passing with per-edge weights:
    /// `out[dst[e]] += alpha[e] * h[src[e]]` over an `n`-node output.
    pub fn edge_weighted_sum(
        &mut self,
        alpha: Tensor,
        h: Tensor,
        src: &'a [usize],
        dst: &'a [usize],
        n: usize,
    ) -> Result<Tensor> {
        let (va, vh) = (self.value(alpha), self.value(h));
        if va.ncols() != 1 || va.nrows() != src.len() || src.len() != dst.len() {
            return Err(Error::Shape {
                op: "edge_weighted_sum",
                lhs: shape(va),
                rhs: (src.len(), dst.len()),
            });
        }
        if src.iter().any(|&u| u >= vh.nrows()) || dst.iter().any(|&v| v >= n) {
            return Err(Error::Shape {
                op: "edge_weighted_sum",
                lhs: shape(vh),
                rhs: (n, 0),
            });
        }
        let mut out = Array2::zeros((n, vh.ncols()));
        for (e, (&u, &v)) in src.iter().zip(dst).enumerate() {
            out.row_mut(v).scaled_add(va[[e, 0]], &vh.row(u));
        }
        let ng = self.ng(alpha) || self.ng(h);
        self.push(
            "edge_weighted_sum",
            out,
            Op::EdgeWeightedSum(alpha, h, EdgeList { src, dst }),
            ng,
        )
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, no affine terms.
    pub fn layer_norm(&mut self, a: Tensor, eps: f64) -> Result<Tensor> {
        let va = self.value(a);
        let d = va.ncols() as f64;
        let mut out = va.clone();
        let mut inv_std = Vec::with_capacity(va.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let ng = self.ng(a);
        self.push("layer_norm", out, Op::LayerNorm(a, inv_std), ng)
    }

    /// Populates gradients of every tracked leaf with `∂loss/∂leaf`.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        let loss_shape = self.shape(loss);
        if loss_shape != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                lhs: loss_shape,
                rhs: (1, 1),
            });
        }
        let mut local: Vec<Option<Array2<f64>>> = vec![None; loss.id + 1];
        local[loss.id] = Some(Array2::ones((1, 1)));
        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[id] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.backward_rule(id, g) {
                if !self.nodes[input.id].needs_grad {
                    continue;
                }
                match &mut local[input.id] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn backward_rule(&self, id: usize, g: Array2<f64>) -> Vec<(Tensor, Array2<f64>)> {
        let node = &self.nodes[id];
        let out = &node.value;
        let v = |t: Tensor| &self.nodes[t.id].value;
        let ng = |t: Tensor| self.nodes[t.id].needs_grad;
        match node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut res = Vec::with_capacity(2);
                if ng(a) {
                    res.push((a, g.dot(&v(b).t())));
                }
                if ng(b) {
                    res.push((b, v(a).t().dot(&g)));
                }
                res
            }
            Op::Transpose(a) => vec![(a, g.t().as_standard_layout().to_owned())],
            Op::Add(a, b) => vec![(a, g.clone()), (b, g)],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, -g)],
            Op::Mul(a, b) => vec![(a, &g * v(b)), (b, &g * v(a))],
            Op::Scale(a, c) => vec![(a, g * c)],
            Op::AddScalar(a) => vec![(a, g)],
            Op::ScaleBy(a, s) => {
                let sv = v(s)[[0, 0]];
                let ds = Zip::from(&g).and(v(a)).fold(0.0, |acc, &gi, &ai| acc + gi * ai);
                vec![(a, &g * sv), (s, Array2::from_elem((1, 1), ds))]
            }
            Op::ConcatCols(a, b) => {
                let split = v(a).ncols();
                vec![
                    (a, g.slice(s![.., ..split]).to_owned()),
                    (b, g.slice(s![.., split..]).to_owned()),
                ]
            }
            Op::RowSlice(a, start) => {
                let mut da = Array2::zeros(v(a).dim());
                da.slice_mut(s![start..start + g.nrows(), ..]).assign(&g);
                vec![(a, da)]
            }
            Op::Relu(a) => {
                let mut da = g;
                Zip::from(&mut da).and(v(a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![(a, da)]
            }
            Op::LeakyRelu(a, slope) => {
                let mut da = g;
                Zip::from(&mut da).and(v(a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d *= slope;
                    }
                });
                vec![(a, da)]
            }
            Op::Exp(a) => vec![(a, g * out)],
            Op::Log(a) => vec![(a, g / v(a))],
            Op::Sigmoid(a) => {
                let mut da = g;
                Zip::from(&mut da).and(out).for_each(|d, &s| *d *= s * (1.0 - s));
                vec![(a, da)]
            }
            Op::LogSigmoid(a) => {
                let mut da = g;
                Zip::from(&mut da).and(v(a)).for_each(|d, &x| *d *= sigmoid(-x));
                vec![(a, da)]
            }
            Op::Sum(a) => vec![(a, Array2::from_elem(v(a).dim(), g[[0, 0]]))],
            Op::Mean(a) => {
                let n = v(a).len() as f64;
                vec![(a, Array2::from_elem(v(a).dim(), g[[0, 0]] / n))]
            }
            Op::SumRows(a) => {
                let rows = v(a).nrows();
                let da = g
                    .broadcast((rows, g.ncols()))
                    .expect("row broadcast")
                    .to_owned();
                vec![(a, da)]
            }
            Op::SegmentSoftmax(a, segments) => {
                let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
                let cols = out.ncols();
                let mut dot = Array2::<f64>::zeros((n_seg, cols));
                for ((gr, orow), &sid) in g.rows().into_iter().zip(out.rows()).zip(segments) {
                    for j in 0..cols {
                        dot[[sid, j]] += gr[j] * orow[j];
                    }
                }
                let mut da = g;
                for ((mut dr, orow), &sid) in da.rows_mut().into_iter().zip(out.rows()).zip(segments) {
                    for j in 0..cols {
                        dr[j] = orow[j] * (dr[j] - dot[[sid, j]]);
                    }
                }
                vec![(a, da)]
            }
            Op::SpMM(m, a) => vec![(
                a,
                m.transpose_matmul_dense(&g).expect("shapes checked in forward"),
            )],
            Op::AddRow(a, row) => {
                let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![(a, g), (row, drow)]
            }
            Op::DivRows(a, d) => {
                let (va, vd) = (v(a), v(d));
                let mut dd = Array2::zeros(vd.dim());
                for i in 0..va.nrows() {
                    let di = vd[[i, 0]];
                    let dot: f64 = g.row(i).iter().zip(va.row(i)).map(|(x, y)| x * y).sum();
                    dd[[i, 0]] = -dot / (di * di);
                }
                vec![(a, g / vd), (d, dd)]
            }
            Op::GatherRows(a, idx) => {
                let mut da = Array2::zeros(v(a).dim());
                for (row, &i) in g.rows().into_iter().zip(idx) {
                    let mut dst = da.row_mut(i);
                    dst += &row;
                }
                vec![(a, da)]
            }
            Op::EdgeWeightedSum(alpha, h, edges) => {
                let (valpha, vh) = (v(alpha), v(h));
                let mut dalpha = Array2::zeros(valpha.dim());
                let mut dh = Array2::zeros(vh.dim());
                for (e, (&u, &w)) in edges.src.iter().zip(edges.dst).enumerate() {
                    let gr = g.row(w);
                    dalpha[[e, 0]] = gr.dot(&vh.row(u));
                    dh.row_mut(u).scaled_add(valpha[[e, 0]], &gr);
                }
                vec![(alpha, dalpha), (h, dh)]
            }
            Op::LayerNorm(a, ref inv_std) => {
                let d = out.ncols() as f64;
                let mut da = g;
                for ((mut dr, yr), &inv) in da.rows_mut().into_iter().zip(out.rows()).zip(inv_std) {
                    let mean_g = dr.sum() / d;
                    let mean_gy = dr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / d;
                    Zip::from(&mut dr)
                        .and(&yr)
                        .for_each(|x, &y| *x = inv * (*x - mean_g - y * mean_gy));
                }
                vec![(a, da)]
            }
        }
    }
}

/// Arithmetic mean with left-to-right accumulation.
///
/// The model's slide risk and every re-check of it go through this so the
/// two agree bit for bit.
pub fn ordered_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Compares the tape gradient of a scalar function against central
/// differences and returns the largest relative discrepancy.
///
/// Relative error per coordinate is `|analytic - numeric| / max(|analytic|,
/// |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Array2<f64>, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, Tensor) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let xt = tape.param(x.clone())?;
    let loss = f(&mut tape, xt)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xt)
        .cloned()
        .unwrap_or_else(|| Array2::zeros(x.dim()));

    let eval = |p: &Array2<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let pt = t.constant(p.clone())?;
        let out = f(&mut t, pt)?;
        Ok(t.scalar(out))
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + step;
        let up = eval(&probe)?;
        probe[[r, c]] = orig - step;
        let down = eval(&probe)?;
        probe[[r, c]] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[[r, c]];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn relu_forward_backward() {
        let mut tape = Tape::new();
        let x = tape.param(array![[-1.0, 2.0]]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &array![[0.0, 2.0]]);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &array![[0.0, 1.0]]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(array![[0.0]]).unwrap();
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn segment_softmax_uniform_on_equal_scores() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[3.0], [3.0], [3.0], [1.0]]).unwrap();
        let seg = [0, 0, 0, 1];
        let y = tape.segment_softmax(x, &seg).unwrap();
        let v = tape.value(y);
        for i in 0..3 {
            assert!((v[[i, 0]] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(v[[3, 0]], 1.0);
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Array2::<f64>::ones((2, 2)));
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let x = tape.param(array![[1.0, 2.0]]).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &array![[2.0, 2.0]]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(array![[1.0, 2.0]]).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn shape_and_domain_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Array2::zeros((2, 3))).unwrap();
        let b = tape.constant(Array2::zeros((2, 3))).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
        assert!(matches!(tape.log(a), Err(Error::Domain { .. })));
        let z = tape.constant(Array2::zeros((2, 1))).unwrap();
        assert!(matches!(tape.div_rows(a, z), Err(Error::Domain { .. })));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }
}
