//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every intermediate tensor produced during a forward
//! pass together with the operation that produced it. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every node that requires them. Operations are enum variants rather
//! than closures so the backward pass is a single exhaustive `match` and the
//! whole tape is plain data.

use super::kernels;
use super::tensor::{matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// y = x * mul + add (elementwise with scalars).
    ScaleShift { x: NodeId, mul: f64 },
    MatMul(NodeId, NodeId),
    /// y[r,c] = x[r,c] + b[0,c].
    AddBias(NodeId, NodeId),
    /// y[r,c] = x[r,c] * v[r,0].
    MulColVec(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    /// Row-wise softmax over the last axis of a 2-d tensor.
    Softmax(NodeId),
    LogSoftmax(NodeId),
    /// Row-wise log-sum-exp, [r,c] -> [r,1].
    LogSumExp(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// [r,c] -> [r,1].
    SumLastAxis(NodeId),
    /// y[r,0] = x[r, idx[r]].
    SelectCols(NodeId, Vec<usize>),
    /// Columns [from, to) of a 2-d tensor.
    SliceCols {
        x: NodeId,
        from: usize,
        to: usize,
    },
    ConcatCols(NodeId, NodeId),
    /// Tile a [1,c] row into [reps,c].
    RepeatRows(NodeId, usize),
    Reshape(NodeId),
    Transpose(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    /// y[b,c,h,w] = x[b,c,h,w] + bias[c].
    AddChannelBias(NodeId, NodeId),
    Upsample2x(NodeId),
    /// Row t of the output is row tokens[t] of the embedding matrix.
    EmbedRows(NodeId, Vec<usize>),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Forward tape plus reverse-mode gradient accumulation.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a node, if any was produced by `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite forward value from {:?}", op);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf that participates in differentiation (parameters, trainable inputs).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant: no gradient is stored for it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.val(a), self.val(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.val(a), self.val(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.val(a), self.val(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale_shift(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let v = self.val(x).map(|t| t * mul + add);
        let rg = self.rg(x);
        self.push(v, Op::ScaleShift { x, mul }, rg)
    }

    pub fn scale(&mut self, x: NodeId, mul: f64) -> NodeId {
        self.scale_shift(x, mul, 0.0)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale_shift(x, -1.0, 0.0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = super::tensor::matmul(self.val(a), self.val(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.val(x);
        let bv = self.val(b);
        let (r, c) = (xv.rows(), xv.cols());
        assert_eq!(bv.shape(), &[1, c], "bias shape mismatch");
        let mut out = xv.clone();
        for ri in 0..r {
            for ci in 0..c {
                out.data_mut()[ri * c + ci] += bv.data()[ci];
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias(x, b), rg)
    }

    pub fn mul_col_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let xv = self.val(x);
        let vv = self.val(v);
        let (r, c) = (xv.rows(), xv.cols());
        assert_eq!(vv.shape(), &[r, 1], "column-vector shape mismatch");
        let mut out = xv.clone();
        for ri in 0..r {
            let s = vv.data()[ri];
            for ci in 0..c {
                out.data_mut()[ri * c + ci] *= s;
            }
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(out, Op::MulColVec(x, v), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(|t| 1.0 / (1.0 + (-t).exp()));
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(|t| t.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(f64::ln);
        let rg = self.rg(x);
        self.push(v, Op::Ln(x), rg)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.val(x).map(|t| t.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(v, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = rowwise_softmax(self.val(x));
        let rg = self.rg(x);
        self.push(v, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = xv.clone();
        for ri in 0..r {
            let row = &mut out.data_mut()[ri * c..(ri + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    pub fn log_sum_exp(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[r, 1]);
        for ri in 0..r {
            let row = &xv.data()[ri * c..(ri + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out.data_mut()[ri] = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSumExp(x), rg)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.val(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let s: f64 = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    pub fn sum_last_axis(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[r, 1]);
        for ri in 0..r {
            out.data_mut()[ri] = xv.data()[ri * c..(ri + 1) * c].iter().sum();
        }
        let rg = self.rg(x);
        self.push(out, Op::SumLastAxis(x), rg)
    }

    pub fn select_cols(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = self.val(x);
        let (r, c) = (xv.rows(), xv.cols());
        assert_eq!(idx.len(), r, "one index per row expected");
        let mut out = Tensor::zeros(&[r, 1]);
        for ri in 0..r {
            assert!(idx[ri] < c, "column index out of range");
            out.data_mut()[ri] = xv.data()[ri * c + idx[ri]];
        }
        let rg = self.rg(x);
        self.push(out, Op::SelectCols(x, idx.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let xv = self.val(x);
        let (r, c) = (xv.rows(), xv.cols());
        assert!(from < to && to <= c, "bad column slice {}..{} of {}", from, to, c);
        let mut out = Tensor::zeros(&[r, to - from]);
        for ri in 0..r {
            out.data_mut()[ri * (to - from)..(ri + 1) * (to - from)]
                .copy_from_slice(&xv.data()[ri * c + from..ri * c + to]);
        }
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, from, to }, rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.val(a);
        let bv = self.val(b);
        let r = av.rows();
        assert_eq!(r, bv.rows(), "row mismatch in concat");
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Tensor::zeros(&[r, ca + cb]);
        for ri in 0..r {
            out.data_mut()[ri * (ca + cb)..ri * (ca + cb) + ca]
                .copy_from_slice(&av.data()[ri * ca..(ri + 1) * ca]);
            out.data_mut()[ri * (ca + cb) + ca..(ri + 1) * (ca + cb)]
                .copy_from_slice(&bv.data()[ri * cb..(ri + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::ConcatCols(a, b), rg)
    }

    pub fn repeat_rows(&mut self, x: NodeId, reps: usize) -> NodeId {
        let xv = self.val(x);
        assert_eq!(xv.rows(), 1, "repeat_rows expects a single row");
        let c = xv.cols();
        let mut out = Tensor::zeros(&[reps, c]);
        for ri in 0..reps {
            out.data_mut()[ri * c..(ri + 1) * c].copy_from_slice(xv.data());
        }
        let rg = self.rg(x);
        self.push(out, Op::RepeatRows(x, reps), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.val(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j * r + i] = xv.data()[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = kernels::conv2d(self.val(x), self.val(w), stride, pad);
        let rg = self.rg(x) || self.rg(w);
        self.push(v, Op::Conv2d { x, w, stride, pad }, rg)
    }

    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.val(x);
        let bv = self.val(bias);
        let (b, c, h, w) = kernels::dims4(xv);
        assert_eq!(bv.numel(), c, "channel bias size mismatch");
        let mut out = xv.clone();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let add = bv.data()[ci];
                for v in &mut out.data_mut()[base..base + h * w] {
                    *v += add;
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddChannelBias(x, bias), rg)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let v = kernels::upsample2x(self.val(x));
        let rg = self.rg(x);
        self.push(v, Op::Upsample2x(x), rg)
    }

    pub fn embed_rows(&mut self, table: NodeId, tokens: &[usize]) -> NodeId {
        let tv = self.val(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut out = Tensor::zeros(&[tokens.len(), d]);
        for (t, &tok) in tokens.iter().enumerate() {
            assert!(tok < vocab, "token id {} out of vocabulary {}", tok, vocab);
            out.data_mut()[t * d..(t + 1) * d].copy_from_slice(&tv.data()[tok * d..(tok + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(out, Op::EmbedRows(table, tokens.to_vec()), rg)
    }

    /// Seed the backward pass from `loss` (any shape; seeded with ones) and
    /// accumulate gradients into every reachable node with `requires_grad`.
    pub fn backward(&mut self, loss: NodeId) {
        let seed = Tensor::filled(self.val(loss).shape(), 1.0);
        self.backward_seeded(loss, seed);
    }

    /// Backward pass with an explicit output gradient, used when a value
    /// computed on another tape feeds this one.
    pub fn backward_seeded(&mut self, loss: NodeId, seed: Tensor) {
        assert_eq!(seed.shape(), self.val(loss).shape(), "seed shape mismatch");
        self.acc(loss, seed);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let gy = self.nodes[i].grad.take().expect("checked above");
            let op = self.nodes[i].op.clone();
            self.step_back(NodeId(i), &op, &gy);
            self.nodes[i].grad = Some(gy);
        }
    }

    fn acc(&mut self, id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn step_back(&mut self, id: NodeId, op: &Op, gy: &Tensor) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(a, gy.clone());
                self.acc(b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(a, gy.clone());
                self.acc(b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = zip(gy, self.val(b), |g, v| g * v);
                let gb = zip(gy, self.val(a), |g, v| g * v);
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::ScaleShift { x, mul } => {
                self.acc(x, gy.map(|g| g * mul));
            }
            Op::MatMul(a, b) => {
                let av = self.val(a);
                let bv = self.val(b);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut ga = Tensor::zeros(&[m, k]);
                matmul_nt_acc(gy.data(), bv.data(), ga.data_mut(), m, n, k);
                let mut gb = Tensor::zeros(&[k, n]);
                matmul_tn_acc(av.data(), gy.data(), gb.data_mut(), m, k, n);
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::AddBias(x, b) => {
                let (r, c) = (gy.rows(), gy.cols());
                let mut gb = Tensor::zeros(&[1, c]);
                for ri in 0..r {
                    for ci in 0..c {
                        gb.data_mut()[ci] += gy.data()[ri * c + ci];
                    }
                }
                self.acc(x, gy.clone());
                self.acc(b, gb);
            }
            Op::MulColVec(x, v) => {
                let xv = self.val(x);
                let vv = self.val(v);
                let (r, c) = (gy.rows(), gy.cols());
                let mut gx = gy.clone();
                let mut gv = Tensor::zeros(&[r, 1]);
                for ri in 0..r {
                    let s = vv.data()[ri];
                    let mut dot = 0.0;
                    for ci in 0..c {
                        dot += gy.data()[ri * c + ci] * xv.data()[ri * c + ci];
                        gx.data_mut()[ri * c + ci] *= s;
                    }
                    gv.data_mut()[ri] = dot;
                }
                self.acc(x, gx);
                self.acc(v, gv);
            }
            Op::Sigmoid(x) => {
                let y = self.val(id);
                let gx = zip(gy, y, |g, s| g * s * (1.0 - s));
                self.acc(x, gx);
            }
            Op::Tanh(x) => {
                let y = self.val(id);
                let gx = zip(gy, y, |g, t| g * (1.0 - t * t));
                self.acc(x, gx);
            }
            Op::Relu(x) => {
                let gx = zip(gy, self.val(x), |g, v| if v > 0.0 { g } else { 0.0 });
                self.acc(x, gx);
            }
            Op::Exp(x) => {
                let gx = zip(gy, self.val(id), |g, e| g * e);
                self.acc(x, gx);
            }
            Op::Ln(x) => {
                let gx = zip(gy, self.val(x), |g, v| g / v);
                self.acc(x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let gx = zip(gy, self.val(x), |g, v| if v > lo && v < hi { g } else { 0.0 });
                self.acc(x, gx);
            }
            Op::Softmax(x) => {
                let y = self.val(id);
                let (r, c) = (y.rows(), y.cols());
                let mut gx = Tensor::zeros(&[r, c]);
                for ri in 0..r {
                    let yr = &y.data()[ri * c..(ri + 1) * c];
                    let gr = &gy.data()[ri * c..(ri + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ci in 0..c {
                        gx.data_mut()[ri * c + ci] = yr[ci] * (gr[ci] - dot);
                    }
                }
                self.acc(x, gx);
            }
            Op::LogSoftmax(x) => {
                let y = self.val(id);
                let (r, c) = (y.rows(), y.cols());
                let mut gx = Tensor::zeros(&[r, c]);
                for ri in 0..r {
                    let yr = &y.data()[ri * c..(ri + 1) * c];
                    let gr = &gy.data()[ri * c..(ri + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    for ci in 0..c {
                        gx.data_mut()[ri * c + ci] = gr[ci] - yr[ci].exp() * gsum;
                    }
                }
                self.acc(x, gx);
            }
            Op::LogSumExp(x) => {
                let lse = self.val(id);
                let xv = self.val(x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[r, c]);
                for ri in 0..r {
                    let l = lse.data()[ri];
                    let g = gy.data()[ri];
                    for ci in 0..c {
                        gx.data_mut()[ri * c + ci] = g * (xv.data()[ri * c + ci] - l).exp();
                    }
                }
                self.acc(x, gx);
            }
            Op::SumAll(x) => {
                let g = gy.item();
                let shape = self.val(x).shape().to_vec();
                self.acc(x, Tensor::filled(&shape, g));
            }
            Op::MeanAll(x) => {
                let n = self.val(x).numel() as f64;
                let g = gy.item() / n;
                let shape = self.val(x).shape().to_vec();
                self.acc(x, Tensor::filled(&shape, g));
            }
            Op::SumLastAxis(x) => {
                let xv = self.val(x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[r, c]);
                for ri in 0..r {
                    let g = gy.data()[ri];
                    for ci in 0..c {
                        gx.data_mut()[ri * c + ci] = g;
                    }
                }
                self.acc(x, gx);
            }
            Op::SelectCols(x, ref idx) => {
                let xv = self.val(x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[r, c]);
                for ri in 0..r {
                    gx.data_mut()[ri * c + idx[ri]] = gy.data()[ri];
                }
                self.acc(x, gx);
            }
            Op::SliceCols { x, from, to } => {
                let xv = self.val(x);
                let (r, c) = (xv.rows(), xv.cols());
                let w = to - from;
                let mut gx = Tensor::zeros(&[r, c]);
                for ri in 0..r {
                    gx.data_mut()[ri * c + from..ri * c + to]
                        .copy_from_slice(&gy.data()[ri * w..(ri + 1) * w]);
                }
                self.acc(x, gx);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.val(a).cols(), self.val(b).cols());
                let r = gy.rows();
                let mut ga = Tensor::zeros(&[r, ca]);
                let mut gb = Tensor::zeros(&[r, cb]);
                for ri in 0..r {
                    ga.data_mut()[ri * ca..(ri + 1) * ca]
                        .copy_from_slice(&gy.data()[ri * (ca + cb)..ri * (ca + cb) + ca]);
                    gb.data_mut()[ri * cb..(ri + 1) * cb]
                        .copy_from_slice(&gy.data()[ri * (ca + cb) + ca..(ri + 1) * (ca + cb)]);
                }
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::RepeatRows(x, reps) => {
                let c = gy.cols();
                let mut gx = Tensor::zeros(&[1, c]);
                for ri in 0..reps {
                    for ci in 0..c {
                        gx.data_mut()[ci] += gy.data()[ri * c + ci];
                    }
                }
                self.acc(x, gx);
            }
            Op::Reshape(x) => {
                let shape = self.val(x).shape().to_vec();
                self.acc(x, gy.clone().reshaped(&shape));
            }
            Op::Transpose(x) => {
                let (r, c) = (gy.rows(), gy.cols());
                let mut gx = Tensor::zeros(&[c, r]);
                for i in 0..r {
                    for j in 0..c {
                        gx.data_mut()[j * r + i] = gy.data()[i * c + j];
                    }
                }
                self.acc(x, gx);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let mut gx = Tensor::zeros(self.val(x).shape());
                let mut gw = Tensor::zeros(self.val(w).shape());
                kernels::conv2d_backward(
                    self.val(x),
                    self.val(w),
                    stride,
                    pad,
                    gy,
                    &mut gx,
                    &mut gw,
                );
                self.acc(x, gx);
                self.acc(w, gw);
            }
            Op::AddChannelBias(x, bias) => {
                let (b, c, h, w) = kernels::dims4(self.val(x));
                let mut gb = Tensor::zeros(self.val(bias).shape());
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        gb.data_mut()[ci] += gy.data()[base..base + h * w].iter().sum::<f64>();
                    }
                }
                self.acc(x, gy.clone());
                self.acc(bias, gb);
            }
            Op::Upsample2x(x) => {
                let mut gx = Tensor::zeros(self.val(x).shape());
                kernels::upsample2x_backward(gy, &mut gx);
                self.acc(x, gx);
            }
            Op::EmbedRows(table, ref tokens) => {
                let tv = self.val(table);
                let (v, d) = (tv.rows(), tv.cols());
                let mut gt = Tensor::zeros(&[v, d]);
                for (t, &tok) in tokens.iter().enumerate() {
                    for ci in 0..d {
                        gt.data_mut()[tok * d + ci] += gy.data()[t * d + ci];
                    }
                }
                self.acc(table, gt);
            }
        }
    }

}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Row-wise softmax of a 2-d tensor (used outside the tape as well).
pub fn rowwise_softmax(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = x.clone();
    for ri in 0..r {
        let row = &mut out.data_mut()[ri * c..(ri + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}
