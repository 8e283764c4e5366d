//! The autodiff tape: forward ops append nodes, `backward` walks them in
//! reverse. Tape order is already topological, so no explicit sort is needed.
//!
//! Gradients are only propagated to nodes whose ancestry contains a leaf with
//! `requires_grad`; frozen teacher weights therefore cost a forward pass and an
//! input-gradient, never a weight-gradient.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewD, Axis, IxDyn};

use crate::conv::{col2im_batch, conv_transpose_out, im2col_batch, ConvGeom};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    /// rhs is right-aligned broadcast to lhs's shape
    AddBroadcast(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// rhs is right-aligned broadcast to lhs's shape
    MulBroadcast(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Exp(TensorId),
    Tanh(TensorId),
    Relu(TensorId),
    Matmul(TensorId, TensorId),
    Reshape(TensorId),
    Concat(TensorId, TensorId, usize),
    GatherRows(TensorId, Vec<usize>),
    SelectClass(TensorId, Vec<usize>),
    LogSoftmax(TensorId),
    SumAll(TensorId),
    SumAxis(TensorId, usize),
    Conv2d {
        x: TensorId,
        w: TensorId,
        geom: ConvGeom,
        cols: Array2<f64>,
    },
    ConvTranspose2d {
        x: TensorId,
        w: TensorId,
        /// window geometry over the *output* image
        geom: ConvGeom,
    },
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Array1<f64>,
        var: Array1<f64>,
    },
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Array1<f64>,
        var: Array1<f64>,
    },
    MaxPool2 {
        x: TensorId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(TensorId),
    PairwiseDist(TensorId),
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Per-channel batch statistics observed by a training-mode batch norm,
/// surfaced so the owner can maintain running statistics.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

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

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> TensorId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, id: TensorId) -> ArrayViewD<'_, f64> {
        self.nodes[id.0].value.view()
    }

    pub fn value_owned(&self, id: TensorId) -> ArrayD<f64> {
        self.nodes[id.0].value.clone()
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar tensor");
        v.iter().next().copied().unwrap()
    }

    pub fn grad(&self, id: TensorId) -> Option<ArrayViewD<'_, f64>> {
        self.nodes[id.0].grad.as_ref().map(|g| g.view())
    }

    pub fn grad_owned(&self, id: TensorId) -> Option<ArrayD<f64>> {
        self.nodes[id.0].grad.clone()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), needs)
    }

    /// `a + b` with `b` broadcast (numpy-style, right-aligned) to `a`'s shape.
    pub fn add_broadcast(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = {
            let bb = self.nodes[b.0].value.broadcast(self.nodes[a.0].value.raw_dim()).expect("add_broadcast: rhs not broadcastable");
            &self.nodes[a.0].value + &bb
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::AddBroadcast(a, b), needs)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    /// `a * b` with `b` broadcast (right-aligned) to `a`'s shape.
    pub fn mul_broadcast(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = {
            let bb = self.nodes[b.0].value.broadcast(self.nodes[a.0].value.raw_dim()).expect("mul_broadcast: rhs not broadcastable");
            &self.nodes[a.0].value * &bb
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::MulBroadcast(a, b), needs)
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> TensorId {
        let v = &self.nodes[a.0].value * k;
        let needs = self.needs(a);
        self.push(v, Op::Scale(a, k), needs)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: TensorId, k: f64) -> TensorId {
        let v = &self.nodes[a.0].value + k;
        let needs = self.needs(a);
        self.push(v, Op::AddScalar(a), needs)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let needs = self.needs(a);
        self.push(v, Op::Exp(a), needs)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let needs = self.needs(a);
        self.push(v, Op::Tanh(a), needs)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let needs = self.needs(a);
        self.push(v, Op::Relu(a), needs)
    }

    // ---- shape ops -------------------------------------------------------

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        // Values produced by ops like concat may not be in standard layout;
        // fall back to a compacting copy before reinterpreting the shape.
        let v = match self.nodes[a.0].value.clone().into_shape_with_order(IxDyn(shape)) {
            Ok(v) => v,
            Err(_) => self.nodes[a.0]
                .value
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape: incompatible element count"),
        };
        let needs = self.needs(a);
        self.push(v, Op::Reshape(a), needs)
    }

    pub fn concat(&mut self, a: TensorId, b: TensorId, axis: usize) -> TensorId {
        let v = ndarray::concatenate(
            Axis(axis),
            &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
        )
        .expect("concat: incompatible shapes");
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Concat(a, b, axis), needs)
    }

    // ---- reductions and indexing ----------------------------------------

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        let needs = self.needs(a);
        self.push(v, Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> TensorId {
        let v = self.nodes[a.0].value.sum_axis(Axis(axis));
        let needs = self.needs(a);
        self.push(v.into_dyn(), Op::SumAxis(a, axis), needs)
    }

    /// Rows of `table` selected by `idx`: out[i] = table[idx[i], :].
    pub fn gather_rows(&mut self, table: TensorId, idx: &[usize]) -> TensorId {
        let t = &self.nodes[table.0].value;
        assert_eq!(t.ndim(), 2, "gather_rows: table must be 2-d");
        let cols = t.shape()[1];
        let mut out = Array2::<f64>::zeros((idx.len(), cols));
        for (i, &r) in idx.iter().enumerate() {
            for c in 0..cols {
                out[[i, c]] = t[[r, c]];
            }
        }
        let needs = self.needs(table);
        self.push(out.into_dyn(), Op::GatherRows(table, idx.to_vec()), needs)
    }

    /// out[b] = x[b, idx[b]] for a 2-d `x`.
    pub fn select_class(&mut self, x: TensorId, idx: &[usize]) -> TensorId {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.ndim(), 2, "select_class: input must be 2-d");
        assert_eq!(v.shape()[0], idx.len());
        let mut out = Array1::<f64>::zeros(idx.len());
        for (b, &c) in idx.iter().enumerate() {
            out[b] = v[[b, c]];
        }
        let needs = self.needs(x);
        self.push(out.into_dyn(), Op::SelectClass(x, idx.to_vec()), needs)
    }

    /// Row-wise log-softmax of a 2-d tensor, stabilized by the row max.
    pub fn log_softmax(&mut self, x: TensorId) -> TensorId {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.ndim(), 2, "log_softmax: input must be 2-d");
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        let mut out = Array2::<f64>::zeros((rows, cols));
        for r in 0..rows {
            let mut m = f64::NEG_INFINITY;
            for c in 0..cols {
                m = m.max(v[[r, c]]);
            }
            let mut z = 0.0;
            for c in 0..cols {
                z += (v[[r, c]] - m).exp();
            }
            let lz = z.ln();
            for c in 0..cols {
                out[[r, c]] = v[[r, c]] - m - lz;
            }
        }
        let needs = self.needs(x);
        self.push(out.into_dyn(), Op::LogSoftmax(x), needs)
    }

    // ---- structured ops --------------------------------------------------

    /// 2-d matrix product.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<ndarray::Ix2>().expect("matmul: lhs must be 2-d");
        let bv = self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix2>().expect("matmul: rhs must be 2-d");
        let v = av.dot(&bv);
        let needs = self.needs(a) || self.needs(b);
        self.push(v.into_dyn(), Op::Matmul(a, b), needs)
    }

    /// conv2d with square kernel; `x: [B,Ci,H,W]`, `w: [Co,Ci,k,k]`.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input must be 4-d");
        assert_eq!(ws.len(), 4, "conv2d: weight must be 4-d");
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d: kernel must be square");
        let (batch, co, k) = (xs[0], ws[0], ws[2]);
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], k, stride, pad);
        let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let cols = im2col_batch(xv, &geom);
        let wmat = self.nodes[w.0]
            .value
            .view()
            .into_shape_with_order((co, geom.rows()))
            .unwrap();
        let flat = wmat.dot(&cols); // [Co, B*windows]
        let win = geom.windows();
        let mut out = Array4::<f64>::zeros((batch, co, geom.out_h, geom.out_w));
        for b in 0..batch {
            for c in 0..co {
                for p in 0..win {
                    out[[b, c, p / geom.out_w, p % geom.out_w]] = flat[[c, b * win + p]];
                }
            }
        }
        let needs = self.needs(x) || self.needs(w);
        self.push(out.into_dyn(), Op::Conv2d { x, w, geom, cols }, needs)
    }

    /// Transposed conv2d; `x: [B,Ci,h,w]`, `w: [Ci,Co,k,k]` (input-major layout).
    pub fn conv_transpose2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d: input must be 4-d");
        assert_eq!(ws.len(), 4, "conv_transpose2d: weight must be 4-d");
        assert_eq!(xs[1], ws[0], "conv_transpose2d: channel mismatch");
        assert_eq!(ws[2], ws[3], "conv_transpose2d: kernel must be square");
        let (batch, ci, co, k) = (xs[0], xs[1], ws[1], ws[2]);
        let out_h = conv_transpose_out(xs[2], k, stride, pad);
        let out_w = conv_transpose_out(xs[3], k, stride, pad);
        let geom = ConvGeom::new(co, out_h, out_w, k, stride, pad);
        debug_assert_eq!(geom.out_h, xs[2]);
        debug_assert_eq!(geom.out_w, xs[3]);
        // x laid out as [Ci, B*h*w] with column index b*hw + (i*w + j)
        let hw = xs[2] * xs[3];
        let xv = &self.nodes[x.0].value;
        let mut x_flat = Array2::<f64>::zeros((ci, batch * hw));
        for b in 0..batch {
            for c in 0..ci {
                for p in 0..hw {
                    x_flat[[c, b * hw + p]] = xv[[b, c, p / xs[3], p % xs[3]]];
                }
            }
        }
        let w2 = self.nodes[w.0]
            .value
            .view()
            .into_shape_with_order((ci, co * k * k))
            .unwrap();
        let cols = w2.t().dot(&x_flat); // [Co*k*k, B*h*w]
        let mut out = Array4::<f64>::zeros((batch, co, out_h, out_w));
        col2im_batch(&cols, &geom, out.view_mut());
        let needs = self.needs(x) || self.needs(w);
        self.push(out.into_dyn(), Op::ConvTranspose2d { x, w, geom }, needs)
    }

    /// Training-mode batch norm over `[B,C,H,W]` using batch statistics.
    /// Returns the output and the per-channel stats for running-average upkeep.
    pub fn batch_norm_train(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> (TensorId, BatchStats) {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "batch_norm_train: input must be 4-d");
        let c = xs[1];
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let m = (xs[0] * xs[2] * xs[3]) as f64;
        let xv = &self.nodes[x.0].value;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..xs[0] {
                for i in 0..xs[2] {
                    for j in 0..xs[3] {
                        s += xv[[b, ch, i, j]];
                    }
                }
            }
            mean[ch] = s / m;
        }
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..xs[0] {
                for i in 0..xs[2] {
                    for j in 0..xs[3] {
                        let d = xv[[b, ch, i, j]] - mean[ch];
                        s += d * d;
                    }
                }
            }
            var[ch] = s / m;
        }
        let out = self.bn_forward(x, gamma, beta, &mean, &var);
        let stats = BatchStats { mean: mean.clone(), var: var.clone() };
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(out, Op::BatchNormTrain { x, gamma, beta, mean, var }, needs);
        (id, stats)
    }

    /// Eval-mode batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, mean: &Array1<f64>, var: &Array1<f64>) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "batch_norm_eval: input must be 4-d");
        let out = self.bn_forward(x, gamma, beta, mean, var);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::BatchNormEval { x, gamma, beta, mean: mean.clone(), var: var.clone() },
            needs,
        )
    }

    fn bn_forward(&self, x: TensorId, gamma: TensorId, beta: TensorId, mean: &Array1<f64>, var: &Array1<f64>) -> ArrayD<f64> {
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let xs = xv.shape();
        let mut out = xv.clone();
        for ch in 0..xs[1] {
            let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
            let (gc, bc) = (g[[ch]], b[[ch]]);
            let mc = mean[ch];
            for bb in 0..xs[0] {
                for i in 0..xs[2] {
                    for j in 0..xs[3] {
                        out[[bb, ch, i, j]] = (xv[[bb, ch, i, j]] - mc) * inv * gc + bc;
                    }
                }
            }
        }
        out
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "max_pool2: input must be 4-d");
        assert!(xs[2] % 2 == 0 && xs[3] % 2 == 0, "max_pool2: odd spatial dims");
        let (batch, c, oh, ow) = (xs[0], xs[1], xs[2] / 2, xs[3] / 2);
        let xv = &self.nodes[x.0].value;
        let mut out = Array4::<f64>::zeros((batch, c, oh, ow));
        let mut argmax = vec![0usize; batch * c * oh * ow];
        let mut n = 0;
        for b in 0..batch {
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let (ii, jj) = (2 * i + di, 2 * j + dj);
                                let v = xv[[b, ch, ii, jj]];
                                if v > best {
                                    best = v;
                                    best_idx = ((b * xs[1] + ch) * xs[2] + ii) * xs[3] + jj;
                                }
                            }
                        }
                        out[[b, ch, i, j]] = best;
                        argmax[n] = best_idx;
                        n += 1;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out.into_dyn(), Op::MaxPool2 { x, argmax }, needs)
    }

    /// Mean over the spatial dims: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "global_avg_pool: input must be 4-d");
        let m = (xs[2] * xs[3]) as f64;
        let xv = &self.nodes[x.0].value;
        let mut out = Array2::<f64>::zeros((xs[0], xs[1]));
        for b in 0..xs[0] {
            for c in 0..xs[1] {
                let mut s = 0.0;
                for i in 0..xs[2] {
                    for j in 0..xs[3] {
                        s += xv[[b, c, i, j]];
                    }
                }
                out[[b, c]] = s / m;
            }
        }
        let needs = self.needs(x);
        self.push(out.into_dyn(), Op::GlobalAvgPool(x), needs)
    }

    /// All-pairs Euclidean distances of the rows of `x: [B,F]` -> `[B,B]`.
    /// The gradient at coincident rows (distance zero) is taken to be zero.
    pub fn pairwise_dist(&mut self, x: TensorId) -> TensorId {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.ndim(), 2, "pairwise_dist: input must be 2-d");
        let (b, f) = (v.shape()[0], v.shape()[1]);
        let mut out = Array2::<f64>::zeros((b, b));
        for j in 0..b {
            for l in (j + 1)..b {
                let mut s = 0.0;
                for k in 0..f {
                    let d = v[[j, k]] - v[[l, k]];
                    s += d * d;
                }
                let d = s.sqrt();
                out[[j, l]] = d;
                out[[l, j]] = d;
            }
        }
        let needs = self.needs(x);
        self.push(out.into_dyn(), Op::PairwiseDist(x), needs)
    }

    // ---- backward --------------------------------------------------------

    fn acc(&mut self, id: TensorId, contribution: ArrayD<f64>) {
        let node = &mut self.nodes[id.0];
        debug_assert_eq!(node.value.shape(), contribution.shape(), "grad shape mismatch");
        match &mut node.grad {
            Some(g) => *g += &contribution,
            None => node.grad = Some(contribution),
        }
    }

    /// Reduce `g` (shaped like the broadcast output) onto `shape` by summing
    /// the leading axes and any axis where `shape` has extent 1.
    fn reduce_to_shape(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
        let mut r = g.clone();
        while r.ndim() > shape.len() {
            r = r.sum_axis(Axis(0));
        }
        for (ax, &s) in shape.iter().enumerate() {
            if s == 1 && r.shape()[ax] != 1 {
                let summed = r.sum_axis(Axis(ax));
                r = summed.insert_axis(Axis(ax));
            }
        }
        r
    }

    /// Run reverse-mode accumulation from a scalar `loss`. Gradients of all
    /// reachable `requires_grad` nodes are left on the tape.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward: loss must be scalar");
        let seed = ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0);
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.clone() else { continue };
            self.step_backward(i, &g);
        }
    }

    fn step_backward(&mut self, i: usize, g: &ArrayD<f64>) {
        // Ops hold ids only (plus memos), so reading values during the match
        // and accumulating afterwards never aliases.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.acc(a, g.clone());
                }
                if self.needs(b) {
                    self.acc(b, g.clone());
                }
            }
            Op::AddBroadcast(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.acc(a, g.clone());
                }
                if self.needs(b) {
                    let gb = Self::reduce_to_shape(g, self.shape(b));
                    self.acc(b, gb);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.acc(a, g.clone());
                }
                if self.needs(b) {
                    self.acc(b, -g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let ga = g * &self.nodes[b.0].value;
                    self.acc(a, ga);
                }
                if self.needs(b) {
                    let gb = g * &self.nodes[a.0].value;
                    self.acc(b, gb);
                }
            }
            Op::MulBroadcast(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bb = self.nodes[b.0].value.broadcast(g.raw_dim()).unwrap().to_owned();
                    self.acc(a, g * &bb);
                }
                if self.needs(b) {
                    let ga = g * &self.nodes[a.0].value;
                    let gb = Self::reduce_to_shape(&ga, self.shape(b));
                    self.acc(b, gb);
                }
            }
            Op::Scale(a, k) => {
                let (a, k) = (*a, *k);
                if self.needs(a) {
                    self.acc(a, g * k);
                }
            }
            Op::AddScalar(a) => {
                let a = *a;
                if self.needs(a) {
                    self.acc(a, g.clone());
                }
            }
            Op::Exp(a) => {
                let a = *a;
                if self.needs(a) {
                    let ga = g * &self.nodes[i].value;
                    self.acc(a, ga);
                }
            }
            Op::Tanh(a) => {
                let a = *a;
                if self.needs(a) {
                    let y = &self.nodes[i].value;
                    let ga = g * &y.mapv(|t| 1.0 - t * t);
                    self.acc(a, ga);
                }
            }
            Op::Relu(a) => {
                let a = *a;
                if self.needs(a) {
                    let x = &self.nodes[a.0].value;
                    let ga = g * &x.mapv(|t| if t > 0.0 { 1.0 } else { 0.0 });
                    self.acc(a, ga);
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                if self.needs(a) {
                    let bv = self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let ga = g2.dot(&bv.t());
                    self.acc(a, ga.into_dyn());
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let gb = av.t().dot(&g2);
                    self.acc(b, gb.into_dyn());
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                if self.needs(a) {
                    let shape = self.nodes[a.0].value.raw_dim();
                    let ga = match g.clone().into_shape_with_order(shape.clone()) {
                        Ok(ga) => ga,
                        Err(_) => g
                            .as_standard_layout()
                            .to_owned()
                            .into_shape_with_order(shape)
                            .expect("reshape backward: incompatible gradient shape"),
                    };
                    self.acc(a, ga);
                }
            }
            Op::Concat(a, b, axis) => {
                let (a, b, axis) = (*a, *b, *axis);
                let split = self.shape(a)[axis];
                if self.needs(a) {
                    let ga = g.slice_axis(Axis(axis), ndarray::Slice::from(0..split)).to_owned();
                    self.acc(a, ga);
                }
                if self.needs(b) {
                    let gb = g.slice_axis(Axis(axis), ndarray::Slice::from(split..)).to_owned();
                    self.acc(b, gb);
                }
            }
            Op::GatherRows(table, idx) => {
                let table = *table;
                let idx = idx.clone();
                if self.needs(table) {
                    let mut gt = ArrayD::zeros(self.nodes[table.0].value.raw_dim());
                    let cols = gt.shape()[1];
                    for (i_row, &r) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gt[[r, c]] += g[[i_row, c]];
                        }
                    }
                    self.acc(table, gt);
                }
            }
            Op::SelectClass(x, idx) => {
                let x = *x;
                let idx = idx.clone();
                if self.needs(x) {
                    let mut gx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                    for (b, &c) in idx.iter().enumerate() {
                        gx[[b, c]] += g[[b]];
                    }
                    self.acc(x, gx);
                }
            }
            Op::LogSoftmax(x) => {
                let x = *x;
                if self.needs(x) {
                    let y = &self.nodes[i].value; // log-probs
                    let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let y2 = y.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let rowsum = g2.sum_axis(Axis(1));
                    let mut gx = g2.to_owned();
                    for r in 0..gx.shape()[0] {
                        for c in 0..gx.shape()[1] {
                            gx[[r, c]] -= y2[[r, c]].exp() * rowsum[r];
                        }
                    }
                    self.acc(x, gx.into_dyn());
                }
            }
            Op::SumAll(a) => {
                let a = *a;
                if self.needs(a) {
                    let gv = g.iter().next().copied().unwrap();
                    let ga = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gv);
                    self.acc(a, ga);
                }
            }
            Op::SumAxis(a, axis) => {
                let (a, axis) = (*a, *axis);
                if self.needs(a) {
                    let shape = self.nodes[a.0].value.raw_dim();
                    let expanded = g.clone().insert_axis(Axis(axis));
                    let ga = expanded.broadcast(shape.clone()).unwrap().to_owned();
                    self.acc(a, ga);
                }
            }
            Op::Conv2d { x, w, geom, .. } => {
                let (x, w, geom) = (*x, *w, *geom);
                let gs = g.shape().to_vec();
                let (batch, co) = (gs[0], gs[1]);
                let win = geom.windows();
                let mut g_flat = Array2::<f64>::zeros((co, batch * win));
                for b in 0..batch {
                    for c in 0..co {
                        for p in 0..win {
                            g_flat[[c, b * win + p]] = g[[b, c, p / geom.out_w, p % geom.out_w]];
                        }
                    }
                }
                if self.needs(w) {
                    let cols = match &self.nodes[i].op {
                        Op::Conv2d { cols, .. } => cols,
                        _ => unreachable!(),
                    };
                    let gw = g_flat.dot(&cols.t());
                    let gw = gw.into_shape_with_order(self.nodes[w.0].value.raw_dim()).unwrap();
                    self.acc(w, gw);
                }
                if self.needs(x) {
                    let wmat = self.nodes[w.0]
                        .value
                        .view()
                        .into_shape_with_order((co, geom.rows()))
                        .unwrap()
                        .to_owned();
                    let dcols = wmat.t().dot(&g_flat);
                    let mut gx = Array4::<f64>::zeros((batch, geom.channels, geom.height, geom.width));
                    col2im_batch(&dcols, &geom, gx.view_mut());
                    self.acc(x, gx.into_dyn());
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let (x, w, geom) = (*x, *w, *geom);
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let (batch, ci, co, k) = (xs[0], xs[1], ws[1], ws[2]);
                let hw = xs[2] * xs[3];
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let gcols = im2col_batch(g4, &geom); // [Co*k*k, B*h*w]
                if self.needs(x) {
                    let w2 = self.nodes[w.0]
                        .value
                        .view()
                        .into_shape_with_order((ci, co * k * k))
                        .unwrap()
                        .to_owned();
                    let gx_flat = w2.dot(&gcols); // [Ci, B*h*w]
                    let mut gx = Array4::<f64>::zeros((batch, ci, xs[2], xs[3]));
                    for b in 0..batch {
                        for c in 0..ci {
                            for p in 0..hw {
                                gx[[b, c, p / xs[3], p % xs[3]]] = gx_flat[[c, b * hw + p]];
                            }
                        }
                    }
                    self.acc(x, gx.into_dyn());
                }
                if self.needs(w) {
                    let xv = &self.nodes[x.0].value;
                    let mut x_flat = Array2::<f64>::zeros((ci, batch * hw));
                    for b in 0..batch {
                        for c in 0..ci {
                            for p in 0..hw {
                                x_flat[[c, b * hw + p]] = xv[[b, c, p / xs[3], p % xs[3]]];
                            }
                        }
                    }
                    let gw2 = x_flat.dot(&gcols.t()); // [Ci, Co*k*k]
                    let gw = gw2.into_shape_with_order(self.nodes[w.0].value.raw_dim()).unwrap();
                    self.acc(w, gw);
                }
            }
            Op::BatchNormTrain { x, gamma, beta, mean, var } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, var) = (mean.clone(), var.clone());
                let xs = self.shape(x).to_vec();
                let m = (xs[0] * xs[2] * xs[3]) as f64;
                let xv = self.nodes[x.0].value.clone();
                let gv = self.nodes[gamma.0].value.clone();
                let mut dgamma = Array1::<f64>::zeros(xs[1]);
                let mut dbeta = Array1::<f64>::zeros(xs[1]);
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&xs));
                for ch in 0..xs[1] {
                    let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
                    let mut sum_g = 0.0;
                    let mut sum_gxh = 0.0;
                    for b in 0..xs[0] {
                        for ii in 0..xs[2] {
                            for jj in 0..xs[3] {
                                let gg = g[[b, ch, ii, jj]];
                                let xh = (xv[[b, ch, ii, jj]] - mean[ch]) * inv;
                                sum_g += gg;
                                sum_gxh += gg * xh;
                            }
                        }
                    }
                    dbeta[ch] = sum_g;
                    dgamma[ch] = sum_gxh;
                    let gc = gv[[ch]];
                    let (mg, mgxh) = (sum_g / m, sum_gxh / m);
                    for b in 0..xs[0] {
                        for ii in 0..xs[2] {
                            for jj in 0..xs[3] {
                                let gg = g[[b, ch, ii, jj]];
                                let xh = (xv[[b, ch, ii, jj]] - mean[ch]) * inv;
                                gx[[b, ch, ii, jj]] = gc * inv * (gg - mg - xh * mgxh);
                            }
                        }
                    }
                }
                if self.needs(x) {
                    self.acc(x, gx);
                }
                if self.needs(gamma) {
                    self.acc(gamma, dgamma.into_dyn());
                }
                if self.needs(beta) {
                    self.acc(beta, dbeta.into_dyn());
                }
            }
            Op::BatchNormEval { x, gamma, beta, mean, var } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, var) = (mean.clone(), var.clone());
                let xs = self.shape(x).to_vec();
                let xv = self.nodes[x.0].value.clone();
                let gv = self.nodes[gamma.0].value.clone();
                if self.needs(x) {
                    let mut gx = ArrayD::<f64>::zeros(IxDyn(&xs));
                    for ch in 0..xs[1] {
                        let scale = gv[[ch]] / (var[ch] + BN_EPS).sqrt();
                        for b in 0..xs[0] {
                            for ii in 0..xs[2] {
                                for jj in 0..xs[3] {
                                    gx[[b, ch, ii, jj]] = g[[b, ch, ii, jj]] * scale;
                                }
                            }
                        }
                    }
                    self.acc(x, gx);
                }
                if self.needs(gamma) {
                    let mut dgamma = Array1::<f64>::zeros(xs[1]);
                    for ch in 0..xs[1] {
                        let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
                        for b in 0..xs[0] {
                            for ii in 0..xs[2] {
                                for jj in 0..xs[3] {
                                    dgamma[ch] += g[[b, ch, ii, jj]] * (xv[[b, ch, ii, jj]] - mean[ch]) * inv;
                                }
                            }
                        }
                    }
                    self.acc(gamma, dgamma.into_dyn());
                }
                if self.needs(beta) {
                    let mut dbeta = Array1::<f64>::zeros(xs[1]);
                    for ch in 0..xs[1] {
                        for b in 0..xs[0] {
                            for ii in 0..xs[2] {
                                for jj in 0..xs[3] {
                                    dbeta[ch] += g[[b, ch, ii, jj]];
                                }
                            }
                        }
                    }
                    self.acc(beta, dbeta.into_dyn());
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                if self.needs(x) {
                    let mut gx_flat = vec![0.0f64; self.nodes[x.0].value.len()];
                    for (n, &src) in argmax.iter().enumerate() {
                        gx_flat[src] += g.as_slice().unwrap()[n];
                    }
                    let gx = ArrayD::from_shape_vec(self.nodes[x.0].value.raw_dim(), gx_flat).unwrap();
                    self.acc(x, gx);
                }
            }
            Op::GlobalAvgPool(x) => {
                let x = *x;
                if self.needs(x) {
                    let xs = self.shape(x).to_vec();
                    let m = (xs[2] * xs[3]) as f64;
                    let mut gx = ArrayD::<f64>::zeros(IxDyn(&xs));
                    for b in 0..xs[0] {
                        for c in 0..xs[1] {
                            let gv = g[[b, c]] / m;
                            for ii in 0..xs[2] {
                                for jj in 0..xs[3] {
                                    gx[[b, c, ii, jj]] = gv;
                                }
                            }
                        }
                    }
                    self.acc(x, gx);
                }
            }
            Op::PairwiseDist(x) => {
                let x = *x;
                if self.needs(x) {
                    let xv = self.nodes[x.0].value.clone();
                    let d = self.nodes[i].value.clone();
                    let (b, f) = (xv.shape()[0], xv.shape()[1]);
                    let mut gx = ArrayD::<f64>::zeros(xv.raw_dim());
                    for j in 0..b {
                        for l in 0..b {
                            if j == l {
                                continue;
                            }
                            let dist = d[[j, l]];
                            if dist <= 0.0 {
                                continue;
                            }
                            // both G[j,l] and G[l,j] refer to the same distance
                            let gg = g[[j, l]];
                            if gg == 0.0 {
                                continue;
                            }
                            for k in 0..f {
                                let diff = (xv[[j, k]] - xv[[l, k]]) / dist;
                                gx[[j, k]] += gg * diff;
                                gx[[l, k]] -= gg * diff;
                            }
                        }
                    }
                    self.acc(x, gx);
                }
            }
        }
    }
}
