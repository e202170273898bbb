//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so creation order is a valid
//! topological order and `backward` only has to sweep the node list in
//! reverse. A graph is built fresh for every forward pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Square,
    Sqrt,
    Neg,
    Scale(f64),
    Shift(f64),
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Relu => "relu",
            UnaryKind::LeakyRelu(_) => "leaky_relu",
            UnaryKind::Square => "square",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Neg => "neg",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::Shift(_) => "shift",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Reduce {
        kind: ReduceKind,
        x: Var,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    LogSumExp {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Binary(BinaryKind::Add, ..) => "add",
            Op::Binary(BinaryKind::Sub, ..) => "sub",
            Op::Binary(BinaryKind::Mul, ..) => "mul",
            Op::Unary(k, _) => k.name(),
            Op::Reduce { kind, .. } => match kind {
                ReduceKind::Sum => "sum",
                ReduceKind::Mean => "mean",
                ReduceKind::Max => "max",
            },
            Op::LogSumExp { .. } => "logsumexp",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool1d { .. } => "maxpool1d",
            Op::Reshape(_) => "reshape",
            Op::Narrow { .. } => "narrow",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn axis_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::BadShape {
            op,
            detail: format!("axis {axis} out of range for shape {shape:?}"),
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

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- linear algebra ----

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), value, &[a, b])
    }

    /// Batched affine map `x[B×in] · w[out×in]ᵀ + b[out]`, with `b` added to
    /// every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::Shape {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let (batch, inp, out) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::Shape {
                    op: "linear",
                    lhs: vec![out],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut res = vec![0.0; batch * out];
        for r in 0..batch {
            let xr = &xd[r * inp..(r + 1) * inp];
            for o in 0..out {
                let wr = &wd[o * inp..(o + 1) * inp];
                let mut acc = dot(xr, wr);
                if let Some(bias) = bias {
                    acc += bias[o];
                }
                res[r * out + o] = acc;
            }
        }
        let value = Tensor::new(vec![batch, out], res)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Op::Linear { x, w, b }, value, &inputs)
    }

    // ---- elementwise ----

    /// Elementwise binary op. Shapes must agree unless one side holds a single
    /// value, which is then applied against every element of the other.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar() {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else if ta.is_scalar() {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::Shape {
                op: Op::Binary(kind, a, b).name(),
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        self.push(Op::Binary(kind, a, b), value, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let t = self.value(x);
        match kind {
            UnaryKind::Log | UnaryKind::Sqrt => {
                if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: kind.name(),
                        detail: format!("non-positive input {bad}"),
                    });
                }
            }
            _ => {}
        }
        let value = t.map(|v| match kind {
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::LeakyRelu(slope) => {
                if v > 0.0 {
                    v
                } else {
                    slope * v
                }
            }
            UnaryKind::Square => v * v,
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Neg => -v,
            UnaryKind::Scale(c) => c * v,
            UnaryKind::Shift(c) => v + c,
        });
        self.push(Op::Unary(kind, x), value, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(UnaryKind::LeakyRelu(slope), x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Shift(c), x)
    }

    // ---- reductions ----

    /// Reduces along `axis`, or over every element when `axis` is `None`.
    /// `Max` routes its gradient to the lowest-index maximal element.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let (outer, n, inner, out_shape) = match axis {
            None => (1, t.len(), 1, Vec::new()),
            Some(a) => {
                check_axis("reduce", &shape, a)?;
                let (o, n, i) = axis_dims(&shape, a);
                let mut s = shape.clone();
                s.remove(a);
                (o, n, i, s)
            }
        };
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| d[(o * n + j) * inner + i];
                let slot = o * inner + i;
                out[slot] = match kind {
                    ReduceKind::Sum => (0..n).map(at).sum(),
                    ReduceKind::Mean => (0..n).map(at).sum::<f64>() / n as f64,
                    ReduceKind::Max => {
                        let mut best = 0;
                        for j in 1..n {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        argmax[slot] = best;
                        at(best)
                    }
                };
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            },
            value,
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, None)
    }

    /// `log Σ exp(x)` along `axis`, shifted by the maximum for stability.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        check_axis("logsumexp", &shape, axis)?;
        let (outer, n, inner) = axis_dims(&shape, axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| d[(o * n + j) * inner + i];
                let m = (0..n).map(at).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..n).map(|j| (at(j) - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        self.push(Op::LogSumExp { x, axis }, value, &[x])
    }

    /// `x − logsumexp(x)` along `axis`, keeping the input shape.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        check_axis("log_softmax", &shape, axis)?;
        let (outer, n, inner) = axis_dims(&shape, axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|j| (d[idx(j)] - m).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[idx(j)] = d[idx(j)] - lse;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(Op::LogSoftmax { x, axis }, value, &[x])
    }

    // ---- convolution and pooling ----

    /// Valid cross-correlation of `x[N×Cin×L]` with `w[Cout×Cin×K]` plus
    /// per-channel bias `b[Cout]`, giving `[N×Cout×Lout]` with
    /// `Lout = (L − K) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        if self.shape(b) != [sw[0]] {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: vec![sw[0]],
                rhs: self.shape(b).to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be positive".into()));
        }
        let (n, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, kw) = (sw[0], sw[2]);
        if len < kw {
            return Err(Error::BadShape {
                op: "conv1d",
                detail: format!("input length {len} shorter than kernel width {kw}"),
            });
        }
        let lout = (len - kw) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; n * cout * lout];
        for s in 0..n {
            for co in 0..cout {
                let row = &mut out[(s * cout + co) * lout..(s * cout + co + 1) * lout];
                row.fill(bd[co]);
                for ci in 0..cin {
                    let xr = &xd[(s * cin + ci) * len..(s * cin + ci + 1) * len];
                    let kr = &wd[(co * cin + ci) * kw..(co * cin + ci + 1) * kw];
                    for (t, o) in row.iter_mut().enumerate() {
                        *o += dot(&xr[t * stride..t * stride + kw], kr);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, cout, lout], out)?;
        self.push(Op::Conv1d { x, w, b, stride }, value, &[x, w, b])
    }

    /// Windowed maxima over the last axis of `x[N×C×L]`.
    pub fn maxpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::BadShape {
                op: "maxpool1d",
                detail: format!("expected rank-3 input, got {sx:?}"),
            });
        }
        if window == 0 || stride == 0 {
            return Err(Error::Config("pool window and stride must be positive".into()));
        }
        let (rows, len) = (sx[0] * sx[1], sx[2]);
        if window > len {
            return Err(Error::BadShape {
                op: "maxpool1d",
                detail: format!("window {window} exceeds length {len}"),
            });
        }
        let lout = (len - window) / stride + 1;
        let xd = self.value(x).data();
        let mut out = vec![0.0; rows * lout];
        let mut argmax = vec![0; rows * lout];
        for r in 0..rows {
            for t in 0..lout {
                let base = r * len + t * stride;
                let mut best = base;
                for j in base + 1..base + window {
                    if xd[j] > xd[best] {
                        best = j;
                    }
                }
                out[r * lout + t] = xd[best];
                argmax[r * lout + t] = best;
            }
        }
        let value = Tensor::new(vec![sx[0], sx[1], lout], out)?;
        self.push(Op::MaxPool1d { x, argmax }, value, &[x])
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push(Op::Reshape(x), value, &[x])
    }

    /// The sub-tensor `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        check_axis("narrow", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::BadShape {
                op: "narrow",
                detail: format!("range {start}..{} outside axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, n, inner) = axis_dims(&shape, axis);
        let d = t.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        self.push(Op::Narrow { x, axis, start }, value, &[x])
    }

    // ---- reverse pass ----

    /// Propagates d`loss`/d· back through the graph. `loss` must hold a single
    /// value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::BadShape {
                op: "backward",
                detail: format!("loss must be scalar, shape is {:?}", lt.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut contribs = self.local_grads(node, &g);
            for (v, dv) in contribs.drain(..) {
                if !dv.is_finite() {
                    return Err(Error::NonFiniteGradient { op: node.op.name() });
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(dv.data()) {
                            *a += d;
                        }
                    }
                    slot => *slot = Some(dv),
                }
            }
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Gradient contributions of `node` to each of its differentiable inputs.
    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let mut out = Vec::new();
        let wants = |v: Var| self.requires_grad(v);
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = dot(&gd[i * n..(i + 1) * n], &tb.data()[p * n..(p + 1) * n]);
                        }
                    }
                    out.push((*a, Tensor::new(vec![m, k], da).unwrap()));
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            axpy(ta.data()[i * k + p], &gd[i * n..(i + 1) * n], &mut db[p * n..(p + 1) * n]);
                        }
                    }
                    out.push((*b, Tensor::new(vec![k, n], db).unwrap()));
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (batch, inp) = (tx.shape()[0], tx.shape()[1]);
                let outd = tw.shape()[0];
                if wants(*x) {
                    let mut dx = vec![0.0; batch * inp];
                    for r in 0..batch {
                        let dxr = &mut dx[r * inp..(r + 1) * inp];
                        for o in 0..outd {
                            axpy(gd[r * outd + o], &tw.data()[o * inp..(o + 1) * inp], dxr);
                        }
                    }
                    out.push((*x, Tensor::new(vec![batch, inp], dx).unwrap()));
                }
                if wants(*w) {
                    let mut dw = vec![0.0; outd * inp];
                    for r in 0..batch {
                        let xr = &tx.data()[r * inp..(r + 1) * inp];
                        for o in 0..outd {
                            axpy(gd[r * outd + o], xr, &mut dw[o * inp..(o + 1) * inp]);
                        }
                    }
                    out.push((*w, Tensor::new(vec![outd, inp], dw).unwrap()));
                }
                if let Some(b) = b.filter(|&b| wants(b)) {
                    let mut db = vec![0.0; outd];
                    for r in 0..batch {
                        for o in 0..outd {
                            db[o] += gd[r * outd + o];
                        }
                    }
                    out.push((b, Tensor::new(vec![outd], db).unwrap()));
                }
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = g.len();
                let a_at = |i: usize| if ta.len() == n { ta.data()[i] } else { ta.data()[0] };
                let b_at = |i: usize| if tb.len() == n { tb.data()[i] } else { tb.data()[0] };
                // A broadcast scalar operand collects the sum of its contributions.
                let side = |v: Var, t: &Tensor, d: &dyn Fn(usize) -> f64| {
                    let grad = if t.len() == n {
                        Tensor::new(t.shape().to_vec(), (0..n).map(d).collect()).unwrap()
                    } else {
                        Tensor::full(t.shape(), (0..n).map(d).sum())
                    };
                    (v, grad)
                };
                if wants(*a) {
                    let d = |i: usize| match kind {
                        BinaryKind::Add | BinaryKind::Sub => gd[i],
                        BinaryKind::Mul => gd[i] * b_at(i),
                    };
                    out.push(side(*a, ta, &d));
                }
                if wants(*b) {
                    let d = |i: usize| match kind {
                        BinaryKind::Add => gd[i],
                        BinaryKind::Sub => -gd[i],
                        BinaryKind::Mul => gd[i] * a_at(i),
                    };
                    out.push(side(*b, tb, &d));
                }
            }
            Op::Unary(kind, x) => {
                let tx = self.value(*x);
                let y = node.value.data();
                let data = tx
                    .data()
                    .iter()
                    .zip(y)
                    .zip(gd)
                    .map(|((&xi, &yi), &gi)| {
                        gi * match *kind {
                            UnaryKind::Exp => yi,
                            UnaryKind::Log => 1.0 / xi,
                            UnaryKind::Tanh => 1.0 - yi * yi,
                            UnaryKind::Sigmoid => yi * (1.0 - yi),
                            UnaryKind::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::LeakyRelu(slope) => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    slope
                                }
                            }
                            UnaryKind::Square => 2.0 * xi,
                            UnaryKind::Sqrt => 0.5 / yi,
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Scale(c) => c,
                            UnaryKind::Shift(_) => 1.0,
                        }
                    })
                    .collect();
                out.push((*x, Tensor::new(tx.shape().to_vec(), data).unwrap()));
            }
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            } => {
                let tx = self.value(*x);
                let shape = tx.shape();
                let (outer, n, inner) = match axis {
                    None => (1, tx.len(), 1),
                    Some(a) => axis_dims(shape, *a),
                };
                let mut dx = vec![0.0; tx.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        match kind {
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let v = if *kind == ReduceKind::Mean {
                                    gd[slot] / n as f64
                                } else {
                                    gd[slot]
                                };
                                for j in 0..n {
                                    dx[(o * n + j) * inner + i] = v;
                                }
                            }
                            ReduceKind::Max => {
                                dx[(o * n + argmax[slot]) * inner + i] = gd[slot];
                            }
                        }
                    }
                }
                out.push((*x, Tensor::new(shape.to_vec(), dx).unwrap()));
            }
            Op::LogSumExp { x, axis } => {
                let tx = self.value(*x);
                let (outer, n, inner) = axis_dims(tx.shape(), *axis);
                let (xd, yd) = (tx.data(), node.value.data());
                let mut dx = vec![0.0; tx.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        for j in 0..n {
                            let at = (o * n + j) * inner + i;
                            dx[at] = gd[slot] * (xd[at] - yd[slot]).exp();
                        }
                    }
                }
                out.push((*x, Tensor::new(tx.shape().to_vec(), dx).unwrap()));
            }
            Op::LogSoftmax { x, axis } => {
                let tx = self.value(*x);
                let (outer, n, inner) = axis_dims(tx.shape(), *axis);
                let yd = node.value.data();
                let mut dx = vec![0.0; tx.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let gsum: f64 = (0..n).map(|j| gd[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = gd[idx(j)] - yd[idx(j)].exp() * gsum;
                        }
                    }
                }
                out.push((*x, Tensor::new(tx.shape().to_vec(), dx).unwrap()));
            }
            Op::Conv1d { x, w, b, stride } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (cout, kw) = (tw.shape()[0], tw.shape()[2]);
                let lout = node.value.shape()[2];
                let (xd, wd) = (tx.data(), tw.data());
                let grow = |s: usize, co: usize| &gd[(s * cout + co) * lout..(s * cout + co + 1) * lout];
                if wants(*x) {
                    let mut dx = vec![0.0; tx.len()];
                    for s in 0..n {
                        for co in 0..cout {
                            let gr = grow(s, co);
                            for ci in 0..cin {
                                let kr = &wd[(co * cin + ci) * kw..(co * cin + ci + 1) * kw];
                                let dxr = &mut dx[(s * cin + ci) * len..(s * cin + ci + 1) * len];
                                for (t, &gv) in gr.iter().enumerate() {
                                    axpy(gv, kr, &mut dxr[t * stride..t * stride + kw]);
                                }
                            }
                        }
                    }
                    out.push((*x, Tensor::new(tx.shape().to_vec(), dx).unwrap()));
                }
                if wants(*w) {
                    let mut dw = vec![0.0; tw.len()];
                    for s in 0..n {
                        for co in 0..cout {
                            let gr = grow(s, co);
                            for ci in 0..cin {
                                let xr = &xd[(s * cin + ci) * len..(s * cin + ci + 1) * len];
                                let dk = &mut dw[(co * cin + ci) * kw..(co * cin + ci + 1) * kw];
                                for (t, &gv) in gr.iter().enumerate() {
                                    axpy(gv, &xr[t * stride..t * stride + kw], dk);
                                }
                            }
                        }
                    }
                    out.push((*w, Tensor::new(tw.shape().to_vec(), dw).unwrap()));
                }
                if wants(*b) {
                    let mut db = vec![0.0; cout];
                    for s in 0..n {
                        for (co, d) in db.iter_mut().enumerate() {
                            *d += grow(s, co).iter().sum::<f64>();
                        }
                    }
                    out.push((*b, Tensor::new(vec![cout], db).unwrap()));
                }
            }
            Op::MaxPool1d { x, argmax } => {
                let tx = self.value(*x);
                let mut dx = vec![0.0; tx.len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                out.push((*x, Tensor::new(tx.shape().to_vec(), dx).unwrap()));
            }
            Op::Reshape(x) => {
                out.push((*x, g.reshape(self.shape(*x)).unwrap()));
            }
            Op::Narrow { x, axis, start } => {
                let tx = self.value(*x);
                let (outer, n, inner) = axis_dims(tx.shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; tx.len()];
                for o in 0..outer {
                    let from = (o * n + start) * inner;
                    dx[from..from + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, Tensor::new(tx.shape().to_vec(), dx).unwrap()));
            }
        }
        out.retain(|(v, _)| wants(*v));
        out
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    if alpha == 0.0 {
        return;
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], crow);
        }
    }
    c
}
