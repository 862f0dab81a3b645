//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and enough saved state to
//! run its backward rule. Nodes only refer to earlier nodes, so a single
//! reverse sweep over the list visits each node once in topological order.
//!
//! Shape errors inside the tape are programming errors and panic; callers
//! validate user-facing inputs before building a graph.

use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use super::{ParamGroup, ParamId, Tensor};
use crate::error::{Error, Result};
use crate::par::Exec;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How parameters enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Parameters are differentiable leaves.
    Train,
    /// Parameters are constants; no gradient is produced for them.
    Frozen,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Minimum(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    SqDist(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        cols: Option<Vec<f64>>,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation.
pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    let c = t.cols();
    (t.len().checked_div(c).unwrap_or(0), c)
}

impl Tape {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on a node of shape {:?}", t.shape());
        t.data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: the value of `v` as a new constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param(&mut self, group: &ParamGroup, index: usize, mode: Mode) -> Var {
        let t = group.get(index).clone();
        match mode {
            Mode::Train => self.push(t, Op::Param(group.param_id(index)), true),
            Mode::Frozen => self.constant(t),
        }
    }

    /// Binds every tensor of `group`, in order.
    pub fn bind(&mut self, group: &ParamGroup, mode: Mode) -> Vec<Var> {
        (0..group.len()).map(|i| self.param(group, i, mode)).collect()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(
            ta.shape().len() == 2 && tb.shape().len() == 2 && ta.shape()[1] == tb.shape()[0],
            "matmul shapes {:?} x {:?}",
            ta.shape(),
            tb.shape()
        );
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(self.exec, false, false, m, k, n, ta.data(), tb.data(), 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// `x + b` with `b` broadcast over every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.cols();
        assert_eq!(tb.len(), n, "add_bias {:?} + {:?}", tx.shape(), tb.shape());
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(tb.data()) {
                *o += bb;
            }
        }
        let shape = tx.shape().to_vec();
        let ng = self.ng(x) || self.ng(b);
        self.push(Tensor::from_parts(shape, out), Op::AddBias(x, b), ng)
    }

    /// Affine map `x w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    // ---- element-wise ---------------------------------------------------

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "element-wise shape mismatch");
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(shape, out), op, ng)
    }

    fn map_unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| f(*v)).collect();
        let shape = tx.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, out), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Minimum(a, b), f64::min)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map_unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map_unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `x * s` where `s` is a one-element node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.len(), 1, "mul_scalar expects a one-element scale");
        let sv = sv.data()[0];
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v * sv).collect();
        let shape = tx.shape().to_vec();
        let ng = self.ng(x) || self.ng(s);
        self.push(Tensor::from_parts(shape, out), Op::MulScalar(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Log(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    // ---- normalisation --------------------------------------------------

    /// Layer normalisation over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let tx = self.value(x);
        let (r, c) = rows_cols(tx);
        let (tg, tb) = (self.value(gain), self.value(bias));
        assert!(tg.len() == c && tb.len() == c, "layer_norm parameter size");
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Scales each row (last axis) to unit ℓ2 norm. All-zero rows map to zero
    /// with zero gradient.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (r, c) = rows_cols(tx);
        let mut norms = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = n;
            if n > 0.0 {
                for j in 0..c {
                    out[i * c + j] = row[j] / n;
                }
            }
        }
        let shape = tx.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, out), Op::L2Normalize { x, norms }, ng)
    }

    // ---- structure ------------------------------------------------------

    /// Concatenation along the last axis. All parts must have the same number
    /// of rows.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let r = rows_cols(self.value(parts[0])).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pr, pc) = rows_cols(self.value(*p));
                assert_eq!(pr, r, "concat row mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let d = self.value(*p).data();
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(
            Tensor::from_parts(vec![r, total], out),
            Op::Concat(parts.to_vec()),
            ng,
        )
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        let (r, c) = rows_cols(tx);
        assert!(start + len <= c, "slice_cols out of range");
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&tx.data()[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(vec![r, len], out),
            Op::SliceCols { x, start },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Per-row sum over the last axis: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (r, c) = rows_cols(tx);
        let out = (0..r).map(|i| tx.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![r, 1], out), Op::SumCols(x), ng)
    }

    /// Per-row squared ℓ2 distance: `[r, c], [r, c] -> [r, 1]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sq_dist shape mismatch");
        let (r, c) = rows_cols(ta);
        let out = (0..r)
            .map(|i| {
                ta.data()[i * c..(i + 1) * c]
                    .iter()
                    .zip(&tb.data()[i * c..(i + 1) * c])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum()
            })
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(vec![r, 1], out), Op::SqDist(a, b), ng)
    }

    // ---- convolution ----------------------------------------------------

    /// 3x3 convolution over NHWC input `x` with weights `[9 * in, out]`
    /// (row order `(ky, kx, in)`) and bias `[out]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.shape().len(), 4, "conv2d input must be NHWC");
        assert!(stride == 1 || stride == 2, "conv2d stride must be 1 or 2");
        let s = tx.shape();
        let tw = self.value(w);
        let geom = ConvGeometry {
            batch: s[0],
            height: s[1],
            width: s[2],
            in_channels: s[3],
            out_channels: tw.cols(),
            stride,
            pad,
        };
        assert_eq!(
            tw.shape(),
            &[geom.patch_len(), geom.out_channels],
            "conv2d weight shape"
        );
        assert_eq!(self.value(b).len(), geom.out_channels, "conv2d bias shape");
        let cols = kernels::im2col(self.exec, &geom, tx.data());
        let m = geom.batch * geom.out_pixels();
        let mut out = vec![0.0; m * geom.out_channels];
        kernels::gemm(
            self.exec,
            false,
            false,
            m,
            geom.patch_len(),
            geom.out_channels,
            &cols,
            tw.data(),
            0.0,
            &mut out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(geom.out_channels) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let keep_cols = self.ng(w);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let shape = vec![geom.batch, geom.out_height(), geom.out_width(), geom.out_channels];
        self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: keep_cols.then_some(cols),
            },
            ng,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from the scalar `loss`. Returns gradients for every
    /// trainable parameter that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = HashMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads, &mut out);
        }
        Ok(Gradients { map: out })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        params: &mut HashMap<ParamId, Tensor>,
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let shape = node.value.shape().to_vec();
                match params.get_mut(id) {
                    Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        params.insert(*id, Tensor::from_parts(shape, g));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(da) = self.slot(grads, *a) {
                    kernels::gemm(self.exec, false, true, m, n, k, &g, tb.data(), 1.0, da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::gemm(self.exec, true, false, k, m, n, ta.data(), &g, 1.0, db);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_assign(dx, &g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        add_assign(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_assign(da, &g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_assign(db, &g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_assign(da, &g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(&g).for_each(|(d, gi)| *d -= gi);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gi), y) in da.iter_mut().zip(&g).zip(tb.data()) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, gi), x) in db.iter_mut().zip(&g).zip(ta.data()) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(&g).for_each(|(d, gi)| *d += gi * s);
                }
            }
            Op::AddScalar(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_assign(dx, &g);
                }
            }
            Op::MulScalar(x, s) => {
                let sv = val(*s).data()[0];
                let tx = val(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(&g).for_each(|(d, gi)| *d += gi * sv);
                }
                if let Some(ds) = self.slot(grads, *s) {
                    ds[0] += g.iter().zip(tx.data()).map(|(gi, xi)| gi * xi).sum::<f64>();
                }
            }
            Op::Relu(x) => {
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(&g).zip(y) {
                        if *yi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(&g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(&g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(&g).zip(y) {
                        *d += gi * yi;
                    }
                }
            }
            Op::Log(x) => {
                let tx = val(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gi), xi) in dx.iter_mut().zip(&g).zip(tx.data()) {
                        *d += gi / xi;
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                // Ties route the gradient to the first argument.
                if let Some(da) = self.slot(grads, *a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        if ta.data()[i] <= tb.data()[i] {
                            *d += g[i];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (i, d) in db.iter_mut().enumerate() {
                        if ta.data()[i] > tb.data()[i] {
                            *d += g[i];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let r = inv_std.len();
                let tg = val(*gain).data();
                if let Some(dg) = self.slot(grads, *gain) {
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks(c) {
                        add_assign(db, row);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let cf = c as f64;
                    for i in 0..r {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = g[i * c + j] * tg[j];
                            s1 += dh;
                            s2 += dh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dh = g[i * c + j] * tg[j];
                            dx[i * c + j] +=
                                inv_std[i] / cf * (cf * dh - s1 - xhat[i * c + j] * s2);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if let Some(dp) = self.slot(grads, *p) {
                        for i in 0..r {
                            add_assign(
                                &mut dp[i * w..(i + 1) * w],
                                &g[i * total + off..i * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let w = node.value.cols();
                let r = node.value.rows();
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..r {
                        add_assign(
                            &mut dx[i * c + start..i * c + start + w],
                            &g[i * w..(i + 1) * w],
                        );
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_assign(dx, &g);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let s = g[0] / dx.len().max(1) as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumCols(x) => {
                let c = val(*x).cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, row) in dx.chunks_mut(c).enumerate() {
                        row.iter_mut().for_each(|d| *d += g[i]);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let c = node.value.cols();
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, n) in norms.iter().enumerate() {
                        if *n == 0.0 {
                            continue;
                        }
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = ta.cols();
                let diff = |idx: usize| 2.0 * (ta.data()[idx] - tb.data()[idx]) * g[idx / c];
                if let Some(da) = self.slot(grads, *a) {
                    for (idx, d) in da.iter_mut().enumerate() {
                        *d += diff(idx);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (idx, d) in db.iter_mut().enumerate() {
                        *d -= diff(idx);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let m = geom.batch * geom.out_pixels();
                let (p, o) = (geom.patch_len(), geom.out_channels);
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks(o) {
                        add_assign(db, row);
                    }
                }
                if let Some(dw) = self.slot(grads, *w) {
                    let cols = cols.as_ref().expect("conv2d saved patches");
                    kernels::gemm(self.exec, true, false, p, m, o, cols, &g, 1.0, dw);
                }
                if self.ng(*x) {
                    let tw = val(*w);
                    let mut dcols = vec![0.0; m * p];
                    kernels::gemm(self.exec, false, true, m, o, p, &g, tw.data(), 0.0, &mut dcols);
                    let dimg = kernels::col2im(self.exec, geom, &dcols);
                    if let Some(dx) = self.slot(grads, *x) {
                        add_assign(dx, &dimg);
                    }
                }
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    /// Gradients for every tensor of `group`; parameters the loss does not
    /// reach get zeros.
    pub fn for_group(&self, group: &ParamGroup) -> Vec<Tensor> {
        (0..group.len())
            .map(|i| {
                self.map
                    .get(&group.param_id(i))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(group.get(i).shape()))
            })
            .collect()
    }

    /// Sum of squared gradient entries over a group (zero when unreached).
    pub fn group_norm_sq(&self, group: &ParamGroup) -> f64 {
        (0..group.len())
            .filter_map(|i| self.map.get(&group.param_id(i)))
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Whether any parameter of `group` received a gradient entry.
    pub fn touches(&self, group: &ParamGroup) -> bool {
        (0..group.len()).any(|i| self.map.contains_key(&group.param_id(i)))
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    pub fn merge(&mut self, other: Gradients) {
        for (k, v) in other.map {
            match self.map.get_mut(&k) {
                Some(t) => add_assign(t.data_mut(), v.data()),
                None => {
                    self.map.insert(k, v);
                }
            }
        }
    }
}
