//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] is an append-only arena of nodes; building an expression
//! records its operands, running [`Tape::backward`] from a scalar output
//! accumulates gradients for every node that (transitively) depends on a
//! parameter leaf. Graphs are rebuilt per forward pass, so control flow that
//! branches on current values (e.g. the small-angle guard in the rotation
//! code) is handled naturally.
//!
//! The op set is exactly what the models here need: dense matrix products,
//! row/column broadcasts, concatenation and slicing, layer norm, GELU,
//! elementwise transcendentals, row-wise softmax, and a fused block-diagonal
//! multi-head attention (tokens attend only within their own sample block).

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::mat::Mat;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    DivElem(usize, usize),
    Scale(usize, f64),
    /// Multiply a matrix by a 1x1 variable.
    MulScalarVar(usize, usize),
    /// Add a 1 x c row vector to every row of an n x c matrix.
    AddRowBroadcast(usize, usize),
    /// Multiply row i of an n x c matrix by entry i of an n x 1 column.
    MulColBroadcast(usize, usize),
    ConcatCols(usize, usize),
    /// Per-block vertical concatenation: for each of the B blocks, stack the
    /// block's `ma` rows from the first operand above its `mb` rows from the
    /// second.
    ConcatRowsBlocked { a: usize, b: usize, ma: usize, mb: usize },
    SliceRows { x: usize, start: usize, len: usize },
    SliceCols { x: usize, start: usize, len: usize },
    Transpose(usize),
    /// Reinterpret the row-major data with a new shape of equal length.
    Reshape(usize),
    /// Repeat an m x c matrix `times` times along the row axis.
    TileRows { x: usize, times: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Mat, inv_std: Vec<f64> },
    Gelu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    PowConst(usize, f64),
    SoftmaxRows(usize),
    RowSums(usize),
    SumAll(usize),
    MeanAll(usize),
    /// Fused multi-head attention over per-sample blocks. `q` has B*mq rows,
    /// `k`/`v` have B*mk rows; block i of the queries attends only over block
    /// i of the keys/values. `probs` stores the softmax weights for backward,
    /// one (mq x mk) panel per (block, head) pair, stacked along rows.
    BlockMha { q: usize, k: usize, v: usize, heads: usize, mq: usize, mk: usize, probs: Mat },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    g: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient of the traced scalar with respect to `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.g.get(v.id).and_then(|o| o.as_ref())
    }
}

/// Append-only autodiff arena.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked through it.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; [`Grads::get`] will hold its gradient.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.id].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.data()[0]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { id: self.nodes.len() - 1 }
    }

    fn val(&self, id: usize) -> &Mat {
        &self.nodes[id].value
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.id].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a.id).matmul(self.val(b.id));
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a.id, b.id), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a.id).add(self.val(b.id));
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a.id, b.id), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a.id).sub(self.val(b.id));
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a.id, b.id), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a.id).zip_map(self.val(b.id), |x, y| x * y);
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::MulElem(a.id, b.id), needs)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a.id).zip_map(self.val(b.id), |x, y| x / y);
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::DivElem(a.id, b.id), needs)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.val(a.id).scale(k);
        let needs = self.ng(a);
        self.push(value, Op::Scale(a.id, k), needs)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.val(s.id).shape(), (1, 1), "mul_scalar: rhs must be 1x1");
        let k = self.val(s.id).data()[0];
        let value = self.val(a.id).scale(k);
        let needs = self.ng(a) || self.ng(s);
        self.push(value, Op::MulScalarVar(a.id, s.id), needs)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.val(x.id).shape();
        assert_eq!(self.val(row.id).shape(), (1, c), "add_row: bias shape");
        let mut value = self.val(x.id).clone();
        for i in 0..r {
            let bias = self.val(row.id).row(0).to_vec();
            for (o, b) in value.row_mut(i).iter_mut().zip(bias) {
                *o += b;
            }
        }
        let needs = self.ng(x) || self.ng(row);
        self.push(value, Op::AddRowBroadcast(x.id, row.id), needs)
    }

    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (r, _c) = self.val(x.id).shape();
        assert_eq!(self.val(col.id).shape(), (r, 1), "mul_col: column shape");
        let mut value = self.val(x.id).clone();
        for i in 0..r {
            let k = self.val(col.id)[(i, 0)];
            for o in value.row_mut(i) {
                *o *= k;
            }
        }
        let needs = self.ng(x) || self.ng(col);
        self.push(value, Op::MulColBroadcast(x.id, col.id), needs)
    }

    pub fn hcat(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a.id).hcat(self.val(b.id));
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::ConcatCols(a.id, b.id), needs)
    }

    /// Per-block vertical concatenation; see [`Op::ConcatRowsBlocked`].
    pub fn vcat_blocked(&mut self, a: Var, b: Var, ma: usize, mb: usize) -> Var {
        let (ra, ca) = self.val(a.id).shape();
        let (rb, cb) = self.val(b.id).shape();
        assert_eq!(ca, cb, "vcat_blocked col mismatch");
        assert!(ra % ma == 0 && rb % mb == 0, "vcat_blocked block sizes");
        let blocks = ra / ma;
        assert_eq!(blocks, rb / mb, "vcat_blocked block count mismatch");
        let mut value = Mat::zeros(blocks * (ma + mb), ca);
        for blk in 0..blocks {
            for i in 0..ma {
                value
                    .row_mut(blk * (ma + mb) + i)
                    .copy_from_slice(self.val(a.id).row(blk * ma + i));
            }
            for i in 0..mb {
                value
                    .row_mut(blk * (ma + mb) + ma + i)
                    .copy_from_slice(self.val(b.id).row(blk * mb + i));
            }
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::ConcatRowsBlocked { a: a.id, b: b.id, ma, mb }, needs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.val(x.id).slice_rows(start, len);
        let needs = self.ng(x);
        self.push(value, Op::SliceRows { x: x.id, start, len }, needs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.val(x.id).slice_cols(start, len);
        let needs = self.ng(x);
        self.push(value, Op::SliceCols { x: x.id, start, len }, needs)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.val(x.id).transpose();
        let needs = self.ng(x);
        self.push(value, Op::Transpose(x.id), needs)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let src = self.val(x.id);
        assert_eq!(src.len(), rows * cols, "reshape length mismatch");
        let value = Mat::from_vec(rows, cols, src.data().to_vec());
        let needs = self.ng(x);
        self.push(value, Op::Reshape(x.id), needs)
    }

    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        let src = self.val(x.id);
        let (r, c) = src.shape();
        let mut value = Mat::zeros(r * times, c);
        for t in 0..times {
            for i in 0..r {
                value.row_mut(t * r + i).copy_from_slice(src.row(i));
            }
        }
        let needs = self.ng(x);
        self.push(value, Op::TileRows { x: x.id, times }, needs)
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (r, c) = self.val(x.id).shape();
        assert_eq!(self.val(gamma.id).shape(), (1, c), "layer_norm gamma shape");
        assert_eq!(self.val(beta.id).shape(), (1, c), "layer_norm beta shape");
        let mut xhat = Mat::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = self.val(x.id).row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                xhat[(i, j)] = (v - mean) * inv;
            }
        }
        let mut value = Mat::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                value[(i, j)] = xhat[(i, j)] * self.val(gamma.id)[(0, j)] + self.val(beta.id)[(0, j)];
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm { x: x.id, gamma: gamma.id, beta: beta.id, xhat, inv_std },
            needs,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.val(x.id).map(gelu);
        let needs = self.ng(x);
        self.push(value, Op::Gelu(x.id), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.val(x.id).map(|v| v.exp());
        let needs = self.ng(x);
        self.push(value, Op::Exp(x.id), needs)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.val(x.id).map(|v| v.ln());
        let needs = self.ng(x);
        self.push(value, Op::Ln(x.id), needs)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.val(x.id).map(|v| v.sqrt());
        let needs = self.ng(x);
        self.push(value, Op::Sqrt(x.id), needs)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let value = self.val(x.id).map(|v| v.sin());
        let needs = self.ng(x);
        self.push(value, Op::Sin(x.id), needs)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let value = self.val(x.id).map(|v| v.cos());
        let needs = self.ng(x);
        self.push(value, Op::Cos(x.id), needs)
    }

    pub fn pow_const(&mut self, x: Var, k: f64) -> Var {
        let value = self.val(x.id).map(|v| v.powf(k));
        let needs = self.ng(x);
        self.push(value, Op::PowConst(x.id, k), needs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.val(x.id);
        let (r, c) = src.shape();
        let mut value = Mat::zeros(r, c);
        for i in 0..r {
            softmax_into(src.row(i), value.row_mut(i));
        }
        let needs = self.ng(x);
        self.push(value, Op::SoftmaxRows(x.id), needs)
    }

    pub fn row_sums(&mut self, x: Var) -> Var {
        let value = self.val(x.id).row_sums();
        let needs = self.ng(x);
        self.push(value, Op::RowSums(x.id), needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Mat::from_vec(1, 1, vec![self.val(x.id).sum()]);
        let needs = self.ng(x);
        self.push(value, Op::SumAll(x.id), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.val(x.id).len() as f64;
        let value = Mat::from_vec(1, 1, vec![self.val(x.id).sum() / n]);
        let needs = self.ng(x);
        self.push(value, Op::MeanAll(x.id), needs)
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Block-diagonal multi-head attention on pre-projected q/k/v.
    ///
    /// Queries in block i attend only over keys/values in block i; blocks are
    /// consecutive groups of `mq` (resp. `mk`) rows. Scores are scaled by
    /// `1/sqrt(head_dim)`.
    pub fn block_mha(&mut self, q: Var, k: Var, v: Var, heads: usize, mq: usize, mk: usize) -> Var {
        let (qr, d) = self.val(q.id).shape();
        let (kr, kd) = self.val(k.id).shape();
        let (vr, vd) = self.val(v.id).shape();
        assert!(d == kd && d == vd, "block_mha width mismatch");
        assert!(kr == vr, "block_mha key/value rows");
        assert!(d % heads == 0, "block_mha heads must divide width");
        assert!(qr % mq == 0 && kr % mk == 0, "block_mha block sizes");
        let blocks = qr / mq;
        assert_eq!(blocks, kr / mk, "block_mha block count mismatch");
        let dh = d / heads;
        let scl = 1.0 / (dh as f64).sqrt();

        let mut out = Mat::zeros(qr, d);
        let mut probs = Mat::zeros(blocks * heads * mq, mk);
        for blk in 0..blocks {
            for h in 0..heads {
                let qb = copy_block(self.val(q.id), blk * mq, mq, h * dh, dh);
                let kb = copy_block(self.val(k.id), blk * mk, mk, h * dh, dh);
                let vb = copy_block(self.val(v.id), blk * mk, mk, h * dh, dh);
                let scores = qb.matmul_nt(&kb).scale(scl);
                let mut p = Mat::zeros(mq, mk);
                for i in 0..mq {
                    softmax_into(scores.row(i), p.row_mut(i));
                }
                let ob = p.matmul(&vb);
                paste_block(&mut out, &ob, blk * mq, h * dh);
                paste_block(&mut probs, &p, (blk * heads + h) * mq, 0);
            }
        }
        let needs = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::BlockMha { q: q.id, k: k.id, v: v.id, heads, mq, mk, probs }, needs)
    }

    /// Accumulates gradients of the scalar node `out` into every node that
    /// needs them. Panics if `out` is not 1x1.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.val(out.id).shape(), (1, 1), "backward from non-scalar");
        let mut g: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        g[out.id] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for id in (0..=out.id).rev() {
            if !self.nodes[id].needs_grad {
                g[id] = None;
                continue;
            }
            let grad = match g[id].take() {
                Some(grad) => grad,
                None => continue,
            };
            self.accumulate(id, &grad, &mut g);
            g[id] = Some(grad);
        }
        Grads { g }
    }

    fn accumulate(&self, id: usize, grad: &Mat, g: &mut [Option<Mat>]) {
        let add_to = |g: &mut [Option<Mat>], pid: usize, m: Mat, nodes: &[Node]| {
            if !nodes[pid].needs_grad {
                return;
            }
            match &mut g[pid] {
                Some(acc) => acc.add_scaled(&m, 1.0),
                slot => *slot = Some(m),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                add_to(g, *a, grad.matmul_nt(self.val(*b)), &self.nodes);
                add_to(g, *b, self.val(*a).matmul_tn(grad), &self.nodes);
            }
            Op::Add(a, b) => {
                add_to(g, *a, grad.clone(), &self.nodes);
                add_to(g, *b, grad.clone(), &self.nodes);
            }
            Op::Sub(a, b) => {
                add_to(g, *a, grad.clone(), &self.nodes);
                add_to(g, *b, grad.scale(-1.0), &self.nodes);
            }
            Op::MulElem(a, b) => {
                add_to(g, *a, grad.zip_map(self.val(*b), |x, y| x * y), &self.nodes);
                add_to(g, *b, grad.zip_map(self.val(*a), |x, y| x * y), &self.nodes);
            }
            Op::DivElem(a, b) => {
                add_to(g, *a, grad.zip_map(self.val(*b), |x, y| x / y), &self.nodes);
                let num = grad.zip_map(self.val(*a), |x, y| x * y);
                add_to(g, *b, num.zip_map(self.val(*b), |x, y| -x / (y * y)), &self.nodes);
            }
            Op::Scale(a, k) => add_to(g, *a, grad.scale(*k), &self.nodes),
            Op::MulScalarVar(a, s) => {
                let k = self.val(*s).data()[0];
                add_to(g, *a, grad.scale(k), &self.nodes);
                let dot = grad.zip_map(self.val(*a), |x, y| x * y).sum();
                add_to(g, *s, Mat::from_vec(1, 1, vec![dot]), &self.nodes);
            }
            Op::AddRowBroadcast(x, row) => {
                add_to(g, *x, grad.clone(), &self.nodes);
                add_to(g, *row, grad.col_sums(), &self.nodes);
            }
            Op::MulColBroadcast(x, col) => {
                let mut dx = grad.clone();
                for i in 0..dx.rows() {
                    let k = self.val(*col)[(i, 0)];
                    for v in dx.row_mut(i) {
                        *v *= k;
                    }
                }
                add_to(g, *x, dx, &self.nodes);
                let prod = grad.zip_map(self.val(*x), |x, y| x * y);
                add_to(g, *col, prod.row_sums(), &self.nodes);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.val(*a).cols();
                let cb = self.val(*b).cols();
                add_to(g, *a, grad.slice_cols(0, ca), &self.nodes);
                add_to(g, *b, grad.slice_cols(ca, cb), &self.nodes);
            }
            Op::ConcatRowsBlocked { a, b, ma, mb } => {
                let blocks = self.val(*a).rows() / ma;
                let cols = grad.cols();
                let mut da = Mat::zeros(blocks * ma, cols);
                let mut db = Mat::zeros(blocks * mb, cols);
                for blk in 0..blocks {
                    for i in 0..*ma {
                        da.row_mut(blk * ma + i)
                            .copy_from_slice(grad.row(blk * (ma + mb) + i));
                    }
                    for i in 0..*mb {
                        db.row_mut(blk * mb + i)
                            .copy_from_slice(grad.row(blk * (ma + mb) + ma + i));
                    }
                }
                add_to(g, *a, da, &self.nodes);
                add_to(g, *b, db, &self.nodes);
            }
            Op::SliceRows { x, start, len } => {
                let (r, c) = self.val(*x).shape();
                let mut dx = Mat::zeros(r, c);
                for i in 0..*len {
                    dx.row_mut(start + i).copy_from_slice(grad.row(i));
                }
                add_to(g, *x, dx, &self.nodes);
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = self.val(*x).shape();
                let mut dx = Mat::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i)[*start..start + len].copy_from_slice(grad.row(i));
                }
                add_to(g, *x, dx, &self.nodes);
            }
            Op::Transpose(x) => add_to(g, *x, grad.transpose(), &self.nodes),
            Op::Reshape(x) => {
                let (r, c) = self.val(*x).shape();
                add_to(g, *x, Mat::from_vec(r, c, grad.data().to_vec()), &self.nodes);
            }
            Op::TileRows { x, times } => {
                let (r, c) = self.val(*x).shape();
                let mut dx = Mat::zeros(r, c);
                for t in 0..*times {
                    for i in 0..r {
                        let gr = grad.row(t * r + i).to_vec();
                        for (o, gv) in dx.row_mut(i).iter_mut().zip(gr) {
                            *o += gv;
                        }
                    }
                }
                add_to(g, *x, dx, &self.nodes);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (r, c) = grad.shape();
                add_to(g, *beta, grad.col_sums(), &self.nodes);
                add_to(g, *gamma, grad.zip_map(xhat, |a, b| a * b).col_sums(), &self.nodes);
                let mut dx = Mat::zeros(r, c);
                let gm = self.val(*gamma);
                for i in 0..r {
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..c {
                        let dxh = grad[(i, j)] * gm[(0, j)];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[(i, j)];
                    }
                    mean_dxh /= c as f64;
                    mean_dxh_xh /= c as f64;
                    for j in 0..c {
                        let dxh = grad[(i, j)] * gm[(0, j)];
                        dx[(i, j)] = inv_std[i] * (dxh - mean_dxh - xhat[(i, j)] * mean_dxh_xh);
                    }
                }
                add_to(g, *x, dx, &self.nodes);
            }
            Op::Gelu(x) => {
                add_to(g, *x, grad.zip_map(self.val(*x), |gv, xv| gv * gelu_deriv(xv)), &self.nodes)
            }
            Op::Exp(x) => {
                add_to(g, *x, grad.zip_map(&self.nodes[id].value, |gv, y| gv * y), &self.nodes)
            }
            Op::Ln(x) => add_to(g, *x, grad.zip_map(self.val(*x), |gv, xv| gv / xv), &self.nodes),
            Op::Sqrt(x) => add_to(
                g,
                *x,
                grad.zip_map(&self.nodes[id].value, |gv, y| gv * 0.5 / y),
                &self.nodes,
            ),
            Op::Sin(x) => {
                add_to(g, *x, grad.zip_map(self.val(*x), |gv, xv| gv * xv.cos()), &self.nodes)
            }
            Op::Cos(x) => {
                add_to(g, *x, grad.zip_map(self.val(*x), |gv, xv| -gv * xv.sin()), &self.nodes)
            }
            Op::PowConst(x, k) => {
                if *k == 0.0 {
                    return;
                }
                let kk = *k;
                add_to(
                    g,
                    *x,
                    grad.zip_map(self.val(*x), |gv, xv| gv * kk * xv.powf(kk - 1.0)),
                    &self.nodes,
                );
            }
            Op::SoftmaxRows(x) => {
                let p = &self.nodes[id].value;
                let (r, c) = p.shape();
                let mut dx = Mat::zeros(r, c);
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| grad[(i, j)] * p[(i, j)]).sum();
                    for j in 0..c {
                        dx[(i, j)] = p[(i, j)] * (grad[(i, j)] - dot);
                    }
                }
                add_to(g, *x, dx, &self.nodes);
            }
            Op::RowSums(x) => {
                let (r, c) = self.val(*x).shape();
                let mut dx = Mat::zeros(r, c);
                for i in 0..r {
                    let gv = grad[(i, 0)];
                    for v in dx.row_mut(i) {
                        *v = gv;
                    }
                }
                add_to(g, *x, dx, &self.nodes);
            }
            Op::SumAll(x) => {
                let (r, c) = self.val(*x).shape();
                add_to(g, *x, Mat::filled(r, c, grad.data()[0]), &self.nodes);
            }
            Op::MeanAll(x) => {
                let (r, c) = self.val(*x).shape();
                let n = (r * c) as f64;
                add_to(g, *x, Mat::filled(r, c, grad.data()[0] / n), &self.nodes);
            }
            Op::BlockMha { q, k, v, heads, mq, mk, probs } => {
                let d = self.val(*q).cols();
                let dh = d / heads;
                let scl = 1.0 / (dh as f64).sqrt();
                let blocks = self.val(*q).rows() / mq;
                let mut dq = Mat::zeros(self.val(*q).rows(), d);
                let mut dk = Mat::zeros(self.val(*k).rows(), d);
                let mut dv = Mat::zeros(self.val(*v).rows(), d);
                for blk in 0..blocks {
                    for h in 0..*heads {
                        let qb = copy_block(self.val(*q), blk * mq, *mq, h * dh, dh);
                        let kb = copy_block(self.val(*k), blk * mk, *mk, h * dh, dh);
                        let vb = copy_block(self.val(*v), blk * mk, *mk, h * dh, dh);
                        let p = probs.slice_rows((blk * heads + h) * mq, *mq);
                        let dob = copy_block(grad, blk * mq, *mq, h * dh, dh);
                        // dV = P^T dO
                        let dvb = p.matmul_tn(&dob);
                        // dP = dO V^T, then softmax backward to scores
                        let dp = dob.matmul_nt(&vb);
                        let mut ds = Mat::zeros(*mq, *mk);
                        for i in 0..*mq {
                            let dot: f64 =
                                (0..*mk).map(|j| dp[(i, j)] * p[(i, j)]).sum();
                            for j in 0..*mk {
                                ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - dot) * scl;
                            }
                        }
                        let dqb = ds.matmul(&kb);
                        let dkb = ds.matmul_tn(&qb);
                        accumulate_block(&mut dq, &dqb, blk * mq, h * dh);
                        accumulate_block(&mut dk, &dkb, blk * mk, h * dh);
                        accumulate_block(&mut dv, &dvb, blk * mk, h * dh);
                    }
                }
                add_to(g, *q, dq, &self.nodes);
                add_to(g, *k, dk, &self.nodes);
                add_to(g, *v, dv, &self.nodes);
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().fold(f64::NEG_INFINITY, |m, &v| if v > m { v } else { m });
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = (s - max).exp();
        *d = e;
        sum += e;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

fn copy_block(src: &Mat, r0: usize, rows: usize, c0: usize, cols: usize) -> Mat {
    let mut out = Mat::zeros(rows, cols);
    for i in 0..rows {
        out.row_mut(i).copy_from_slice(&src.row(r0 + i)[c0..c0 + cols]);
    }
    out
}

fn paste_block(dst: &mut Mat, src: &Mat, r0: usize, c0: usize) {
    for i in 0..src.rows() {
        dst.row_mut(r0 + i)[c0..c0 + src.cols()].copy_from_slice(src.row(i));
    }
}

fn accumulate_block(dst: &mut Mat, src: &Mat, r0: usize, c0: usize) {
    for i in 0..src.rows() {
        let drow = &mut dst.row_mut(r0 + i)[c0..c0 + src.cols()];
        for (d, &s) in drow.iter_mut().zip(src.row(i)) {
            *d += s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_chain_value() {
        let mut t = Tape::new();
        let a = t.param(Mat::from_fn(2, 3, |i, j| (i + j) as f64 * 0.1 + 0.3));
        let b = t.param(Mat::from_fn(3, 2, |i, j| (i as f64 - j as f64) * 0.2));
        let c = t.matmul(a, b);
        let s = t.sum_all(c);
        let expected = t.value(c).sum();
        assert!((t.scalar(s) - expected).abs() < 1e-12);
        let grads = t.backward(s);
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn constant_leaves_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::filled(2, 2, 1.0));
        let b = t.param(Mat::filled(2, 2, 2.0));
        let c = t.mul(a, b);
        let s = t.sum_all(c);
        let grads = t.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &Mat::filled(2, 2, 1.0));
    }
}
