//! Define-by-run computation record and the reverse-mode sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{split_axis, Tensor};

/// Norms at or below this are treated as zero by `l2_normalize`.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    ClampMinPassThrough(usize),
    Sqrt(usize),
    Exp(usize),
    Ln(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    L2Normalize {
        x: usize,
        axis: usize,
        norms: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    Variance(usize, usize),
    AvgPool {
        x: usize,
        wh: usize,
        ww: usize,
    },
    Reshape(usize),
    GatherRows(usize, Vec<usize>),
    Take(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::ClampMinPassThrough(..) => "clamp_min_pass_through",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Variance(..) => "variance",
            Op::AvgPool { .. } => "average_pool",
            Op::Reshape(..) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::Take(..) => "take",
            Op::ConcatRows(..) => "concat_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

#[derive(Debug, Default)]
struct Record {
    nodes: Vec<Node>,
    consumed: bool,
}

/// A single computation record. Every operation on a [`Var`] appends one
/// node; [`Tape::backward`] walks the nodes in reverse exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    record: RefCell<Record>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

/// Gradients of a scalar loss with respect to the trainable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    /// Gradient for `var`, or zeros of its shape when the loss does not
    /// depend on it.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.record.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, trainable: bool) -> Var<'_> {
        let mut rec = self.record.borrow_mut();
        rec.nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            trainable,
            needs_grad: trainable,
        });
        Var {
            tape: self,
            id: rec.nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.record.borrow().nodes[id].value)
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::Numeric { op: op.name() });
        }
        let mut rec = self.record.borrow_mut();
        if rec.consumed {
            return Err(TensorError::State(
                "record already consumed by backward".into(),
            ));
        }
        let needs_grad = inputs.iter().any(|&i| rec.nodes[i].needs_grad);
        rec.nodes.push(Node {
            value: Rc::new(value),
            op,
            trainable: false,
            needs_grad,
        });
        Ok(Var {
            tape: self,
            id: rec.nodes.len() - 1,
        })
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the record.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::State("loss belongs to another record".into()));
        }
        let mut rec = self.record.borrow_mut();
        if rec.consumed {
            return Err(TensorError::State("backward called twice".into()));
        }
        if rec.nodes[loss.id].value.len() != 1 {
            return Err(dim_err(
                "backward",
                format!("loss must be scalar, got {:?}", rec.nodes[loss.id].value.shape()),
            ));
        }
        rec.consumed = true;

        let nodes = &rec.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape().to_vec()));
        let mut out = Gradients::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if node.trainable {
                out.by_id.insert(id, g);
                continue;
            }
            for (input, dx) in backward_rule(nodes, node, &g) {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&dx),
                    slot => *slot = Some(dx),
                }
            }
        }
        Ok(out)
    }
}

fn backward_rule(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| &*nodes[i].value;
    let y = &*node.value;
    let like = |shape: &[usize], data: Vec<f64>| Tensor::new(shape.to_vec(), data).unwrap();
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let da = kernels::matmul_bt(g.data(), bv.data(), m, n, k);
            let db = kernels::matmul_at(av.data(), g.data(), m, k, n);
            vec![(*a, like(av.shape(), da)), (*b, like(bv.shape(), db))]
        }
        Op::Transpose(x) => {
            let s = y.shape();
            vec![(*x, like(val(*x).shape(), kernels::transpose(g.data(), s[0], s[1])))]
        }
        Op::Conv2d {
            input,
            kernel,
            geom,
            cols,
        } => {
            let kv = val(*kernel);
            let (p, plen, co) = (geom.positions(), geom.patch_len(), geom.c_out);
            let dk = kernels::matmul_at(cols, g.data(), p, plen, co);
            let dcols = kernels::matmul_bt(g.data(), kv.data(), p, co, plen);
            let dx = kernels::col2im(&dcols, geom);
            vec![
                (*input, like(val(*input).shape(), dx)),
                (*kernel, like(kv.shape(), dk)),
            ]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let da = zip(g.data(), bv.data(), |g, b| g * b);
            let db = zip(g.data(), av.data(), |g, a| g * a);
            vec![(*a, like(av.shape(), da)), (*b, like(bv.shape(), db))]
        }
        Op::AddBias(x, bias) => {
            let c = val(*bias).len();
            let mut db = vec![0.0; c];
            for row in g.data().chunks(c) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            vec![(*x, g.clone()), (*bias, like(val(*bias).shape(), db))]
        }
        Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
        Op::Relu(x) => {
            let dx = zip(g.data(), val(*x).data(), |g, x| if x > 0.0 { g } else { 0.0 });
            vec![(*x, like(y.shape(), dx))]
        }
        Op::ClampMinPassThrough(x) => vec![(*x, g.clone())],
        Op::Sqrt(x) => {
            let dx = zip(g.data(), y.data(), |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 });
            vec![(*x, like(y.shape(), dx))]
        }
        Op::Exp(x) => vec![(*x, like(y.shape(), zip(g.data(), y.data(), |g, y| g * y)))],
        Op::Ln(x) => vec![(*x, like(y.shape(), zip(g.data(), val(*x).data(), |g, x| g / x)))],
        Op::Softmax(x, axis) => {
            let (outer, len, inner) = split_axis(y.shape(), *axis);
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let s: f64 = (0..len).map(|j| g.data()[at(j)] * y.data()[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - s);
                    }
                }
            }
            vec![(*x, like(y.shape(), dx))]
        }
        Op::LogSoftmax(x, axis) => {
            let (outer, len, inner) = split_axis(y.shape(), *axis);
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let s: f64 = (0..len).map(|j| g.data()[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = g.data()[at(j)] - y.data()[at(j)].exp() * s;
                    }
                }
            }
            vec![(*x, like(y.shape(), dx))]
        }
        Op::L2Normalize { x, axis, norms } => {
            let (outer, len, inner) = split_axis(y.shape(), *axis);
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let n = norms[o * inner + i];
                    if n <= NORMALIZE_EPS {
                        continue;
                    }
                    let at = |j: usize| (o * len + j) * inner + i;
                    let yg: f64 = (0..len).map(|j| g.data()[at(j)] * y.data()[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = (g.data()[at(j)] - y.data()[at(j)] * yg) / n;
                    }
                }
            }
            vec![(*x, like(y.shape(), dx))]
        }
        Op::Sum(x) => {
            let xv = val(*x);
            vec![(*x, Tensor::full(xv.shape().to_vec(), g.item()))]
        }
        Op::Mean(x) => {
            let xv = val(*x);
            vec![(*x, Tensor::full(xv.shape().to_vec(), g.item() / xv.len() as f64))]
        }
        Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
            let xv = val(*x);
            let (outer, len, inner) = split_axis(xv.shape(), *axis);
            let scale = if matches!(node.op, Op::MeanAxis(..)) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut dx = vec![0.0; xv.len()];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        dx[(o * len + j) * inner + i] = g.data()[o * inner + i] * scale;
                    }
                }
            }
            vec![(*x, like(xv.shape(), dx))]
        }
        Op::Variance(x, axis) => {
            let xv = val(*x);
            let (outer, len, inner) = split_axis(xv.shape(), *axis);
            let mut dx = vec![0.0; xv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mu = (0..len).map(|j| xv.data()[at(j)]).sum::<f64>() / len as f64;
                    let gi = g.data()[o * inner + i];
                    for j in 0..len {
                        dx[at(j)] = gi * 2.0 * (xv.data()[at(j)] - mu) / len as f64;
                    }
                }
            }
            vec![(*x, like(xv.shape(), dx))]
        }
        Op::AvgPool { x, wh, ww } => {
            let xv = val(*x);
            let dx = avg_pool_backward(xv.shape(), y.shape(), g.data(), *wh, *ww);
            vec![(*x, like(xv.shape(), dx))]
        }
        Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape().to_vec()).unwrap())],
        Op::GatherRows(x, idx) => {
            let xv = val(*x);
            let cols = xv.shape()[1];
            let mut dx = vec![0.0; xv.len()];
            for (r, &src) in idx.iter().enumerate() {
                for c in 0..cols {
                    dx[src * cols + c] += g.data()[r * cols + c];
                }
            }
            vec![(*x, like(xv.shape(), dx))]
        }
        Op::Take(x, idx) => {
            let xv = val(*x);
            let mut dx = vec![0.0; xv.len()];
            for (k, &src) in idx.iter().enumerate() {
                dx[src] += g.data()[k];
            }
            vec![(*x, like(xv.shape(), dx))]
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            parts
                .iter()
                .map(|&p| {
                    let pv = val(p);
                    let slice = g.data()[offset..offset + pv.len()].to_vec();
                    offset += pv.len();
                    (p, like(pv.shape(), slice))
                })
                .collect()
        }
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Spatial axes of a rank-3 `[H×W×C]` or rank-4 `[B×H×W×C]` shape.
fn spatial_dims(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Some((1, h, w, c)),
        [b, h, w, c] => Some((b, h, w, c)),
        _ => None,
    }
}

fn avg_pool_backward(
    in_shape: &[usize],
    out_shape: &[usize],
    g: &[f64],
    wh: usize,
    ww: usize,
) -> Vec<f64> {
    let (b, h, w, c) = spatial_dims(in_shape).unwrap();
    let (_, oh, ow, _) = spatial_dims(out_shape).unwrap();
    let norm = 1.0 / (wh * ww) as f64;
    let mut dx = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let src = ((bi * oh + y / wh) * ow + x / ww) * c;
                let dst = ((bi * h + y) * w + x) * c;
                for ch in 0..c {
                    dx[dst + ch] = g[src + ch] * norm;
                }
            }
        }
    }
    dx
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(dim_err(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::State(format!("{op}: operands on different records")))
        }
    }

    fn unary(&self, op: Op, value: Tensor) -> Result<Var<'t>> {
        self.tape.push(value, op, &[self.id])
    }

    fn elementwise(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(other, name)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(dim_err(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = zip(a.data(), b.data(), f);
        self.tape
            .push(Tensor::new(a.shape().to_vec(), data)?, op, &[self.id, other.id])
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "matmul")?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let c = kernels::matmul(a.data(), b.data(), m, k, n);
        self.tape
            .push(Tensor::new([m, n], c)?, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        let &[r, c] = a.shape() else {
            return Err(dim_err("transpose", format!("rank-2 expected, got {:?}", a.shape())));
        };
        let t = Tensor::new([c, r], kernels::transpose(a.data(), r, c))?;
        self.unary(Op::Transpose(self.id), t)
    }

    /// Same-padded cross-correlation. `self` is `[H×W×C_in]` or
    /// `[B×H×W×C_in]`; `kernel` is `[k×k×C_in×C_out]`. Zero padding is
    /// `k/2` on every side.
    pub fn conv2d(&self, kernel: &Var<'t>, stride: usize) -> Result<Var<'t>> {
        self.same_tape(kernel, "conv2d")?;
        let (x, kv) = (self.value(), kernel.value());
        let Some((b, h, w, c_in)) = spatial_dims(x.shape()) else {
            return Err(dim_err("conv2d", format!("input must be [B×]H×W×C, got {:?}", x.shape())));
        };
        let &[k, k2, kc, c_out] = kv.shape() else {
            return Err(dim_err("conv2d", format!("kernel must be k×k×Cin×Cout, got {:?}", kv.shape())));
        };
        if k != k2 {
            return Err(dim_err("conv2d", "kernel must be square"));
        }
        if kc != c_in {
            return Err(dim_err("conv2d", format!("channel mismatch: input {c_in}, kernel {kc}")));
        }
        if k > h || k > w || stride == 0 {
            return Err(dim_err("conv2d", format!("kernel {k} / stride {stride} invalid for {h}×{w}")));
        }
        let geom = ConvGeom::new(b, h, w, c_in, c_out, k, stride);
        let cols = kernels::im2col(x.data(), &geom);
        let out = kernels::matmul(&cols, kv.data(), geom.positions(), geom.patch_len(), c_out);
        let shape = if x.rank() == 3 {
            vec![geom.out_h, geom.out_w, c_out]
        } else {
            vec![b, geom.out_h, geom.out_w, c_out]
        };
        self.tape.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                geom,
                cols,
            },
            &[self.id, kernel.id],
        )
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a `[C]` vector along the last axis.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias, "add_bias")?;
        let (x, b) = (self.value(), bias.value());
        let c = *x.shape().last().unwrap();
        if b.rank() != 1 || b.len() != c {
            return Err(dim_err("add_bias", format!("bias {:?} for input {:?}", b.shape(), x.shape())));
        }
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        self.tape
            .push(out, Op::AddBias(self.id, bias.id), &[self.id, bias.id])
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, c), self.value().map(|v| v * c))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Op::Relu(self.id), self.value().map(|v| v.max(0.0)))
    }

    /// `max(x, 0)` in the forward pass with an identity backward pass, so
    /// clamped entries keep receiving gradient.
    pub fn clamp_min_pass_through(&self) -> Result<Var<'t>> {
        self.unary(Op::ClampMinPassThrough(self.id), self.value().map(|v| v.max(0.0)))
    }

    /// Square root. The backward rule returns 0 where the output is 0.
    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.unary(Op::Sqrt(self.id), self.value().map(f64::sqrt))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(Op::Exp(self.id), self.value().map(f64::exp))
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        self.unary(Op::Ln(self.id), self.value().map(f64::ln))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let y = softmax_along(&x, axis, false);
        self.unary(Op::Softmax(self.id, axis), y)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("log_softmax", x.shape(), axis)?;
        let y = softmax_along(&x, axis, true);
        self.unary(Op::LogSoftmax(self.id, axis), y)
    }

    /// Scales every slice along `axis` to unit Euclidean norm. Slices with
    /// norm `<= 1e-12` map to zero with zero gradient.
    pub fn l2_normalize(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("l2_normalize", x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut y = vec![0.0; x.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let n = (0..len).map(|j| x.data()[at(j)].powi(2)).sum::<f64>().sqrt();
                norms[o * inner + i] = n;
                if n > NORMALIZE_EPS {
                    for j in 0..len {
                        y[at(j)] = x.data()[at(j)] / n;
                    }
                }
            }
        }
        let y = Tensor::new(x.shape().to_vec(), y)?;
        self.unary(
            Op::L2Normalize {
                x: self.id,
                axis,
                norms,
            },
            y,
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.unary(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.unary(Op::Mean(self.id), Tensor::scalar(s))
    }

    /// Sums out `axis`.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("sum_axis", x.shape(), axis)?;
        let y = reduce_axis(&x, axis, |vals| vals.iter().sum());
        self.unary(Op::SumAxis(self.id, axis), y)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("mean_axis", x.shape(), axis)?;
        let y = reduce_axis(&x, axis, |vals| vals.iter().sum::<f64>() / vals.len() as f64);
        self.unary(Op::MeanAxis(self.id, axis), y)
    }

    /// Population (biased) variance along `axis`.
    pub fn variance(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("variance", x.shape(), axis)?;
        let y = reduce_axis(&x, axis, population_variance);
        self.unary(Op::Variance(self.id, axis), y)
    }

    /// Non-overlapping `wh×ww` average pooling over `[B×]H×W×C`.
    pub fn average_pool(&self, wh: usize, ww: usize) -> Result<Var<'t>> {
        let x = self.value();
        let Some((b, h, w, c)) = spatial_dims(x.shape()) else {
            return Err(dim_err("average_pool", format!("[B×]H×W×C expected, got {:?}", x.shape())));
        };
        if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
            return Err(dim_err("average_pool", format!("window {wh}×{ww} does not tile {h}×{w}")));
        }
        let (oh, ow) = (h / wh, w / ww);
        let norm = 1.0 / (wh * ww) as f64;
        let mut out = vec![0.0; b * oh * ow * c];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((bi * h + y) * w + xx) * c;
                    let dst = ((bi * oh + y / wh) * ow + xx / ww) * c;
                    for ch in 0..c {
                        out[dst + ch] += x.data()[src + ch] * norm;
                    }
                }
            }
        }
        let shape = if x.rank() == 3 {
            vec![oh, ow, c]
        } else {
            vec![b, oh, ow, c]
        };
        self.unary(Op::AvgPool { x: self.id, wh, ww }, Tensor::new(shape, out)?)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let y = (*self.value()).clone().reshape(shape)?;
        self.unary(Op::Reshape(self.id), y)
    }

    /// Selects rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let &[rows, cols] = x.shape() else {
            return Err(dim_err("gather_rows", format!("rank-2 expected, got {:?}", x.shape())));
        };
        if idx.is_empty() || idx.iter().any(|&r| r >= rows) {
            return Err(dim_err("gather_rows", format!("row index out of range 0..{rows}")));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            out.extend_from_slice(x.row(r));
        }
        self.unary(
            Op::GatherRows(self.id, idx.to_vec()),
            Tensor::new([idx.len(), cols], out)?,
        )
    }

    /// Gathers elements by flat index into a tensor of `shape`.
    pub fn take(&self, idx: &[usize], shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        if idx.iter().any(|&i| i >= x.len()) {
            return Err(dim_err("take", "flat index out of range"));
        }
        let out = idx.iter().map(|&i| x.data()[i]).collect();
        self.unary(Op::Take(self.id, idx.to_vec()), Tensor::new(shape, out)?)
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat_rows", "no inputs"))?;
        let cols = first.shape()[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            first.same_tape(p, "concat_rows")?;
            let v = p.value();
            if v.rank() != 2 || v.shape()[1] != cols {
                return Err(dim_err("concat_rows", format!("{:?} vs {cols} columns", v.shape())));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first
            .tape
            .push(Tensor::new([rows, cols], data)?, Op::ConcatRows(ids.clone()), &ids)
    }
}

fn softmax_along(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let m = (0..len).map(|j| x.data()[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|j| (x.data()[at(j)] - m).exp()).sum();
            let lz = z.ln();
            for j in 0..len {
                let shifted = x.data()[at(j)] - m;
                y[at(j)] = if log { shifted - lz } else { shifted.exp() / z };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y).unwrap()
}

fn reduce_axis(x: &Tensor, axis: usize, f: impl Fn(&[f64]) -> f64) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = x.data()[(o * len + j) * inner + i];
            }
            out[o * inner + i] = f(&buf);
        }
    }
    Tensor::new(reduced_shape(x.shape(), axis), out).unwrap()
}

pub(crate) fn population_variance(vals: &[f64]) -> f64 {
    let n = vals.len() as f64;
    let mu = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n
}
