use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::{matmul_raw, sigmoid, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Append-only record of executed operations.
///
/// Node ids are assigned in execution order, so the vector is already a
/// topological order and `backward` simply walks it in reverse. A tape and
/// its `Var`s are confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    flops: Cell<u64>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, b: usize },
    MulRow { a: usize, s: usize },
    ScaleRows { a: usize, s: usize },
    Scale { a: usize, c: f64 },
    Sigmoid { a: usize },
    Swish { a: usize },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    Glu { a: usize },
    NormalizeRows { a: usize, inv_std: Vec<f64> },
    NormalizeCols { a: usize, inv_std: Vec<f64>, mask: Vec<bool> },
    Gather { a: usize, idx: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    Sum { a: usize },
    RowNorms { a: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Reshape { a: usize },
    DepthwiseConv { x: usize, w: usize, batch: usize, time: usize, channels: usize, k: usize },
    Conv2d { x: usize, w: usize, b: usize, geom: Conv2dGeom },
}

#[derive(Clone, Copy, Debug)]
struct Conv2dGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    h_out: usize,
    w_out: usize,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }
}

fn add_into(dst: &mut Option<Tensor>, shape: &[usize], src: Vec<f64>) {
    match dst {
        Some(t) => {
            for (d, s) in t.data_mut().iter_mut().zip(src) {
                *d += s;
            }
        }
        None => *dst = Some(Tensor::new(shape.to_vec(), src).expect("gradient shape")),
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn matrix_dims(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{op} expects a matrix, got shape {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulate count of every matrix product and convolution recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    fn count(&self, n: usize) {
        self.flops.set(self.flops.get() + n as u64);
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A leaf with no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        check_finite(name, value.data())?;
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Usage("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Usage("loss is detached: nothing on its path requires a gradient".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::filled(root.value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Pushes the gradient `g` of `node` onto its inputs.
fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let wants = |i: usize| nodes[i].requires_grad;
    let gd = g.data();
    let y = node.value.data();

    macro_rules! acc {
        ($i:expr, $data:expr) => {{
            let i = $i;
            if wants(i) {
                let data = $data;
                add_into(&mut grads[i], nodes[i].value.shape(), data);
            }
        }};
    }

    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            acc!(a, matmul_raw(gd, &transpose_raw(val(b).data(), k, n), m, n, k));
            acc!(b, matmul_raw(&transpose_raw(val(a).data(), m, k), gd, k, m, n));
        }
        &Op::Add { a, b } => {
            acc!(a, gd.to_vec());
            acc!(b, gd.to_vec());
        }
        &Op::Sub { a, b } => {
            acc!(a, gd.to_vec());
            acc!(b, gd.iter().map(|x| -x).collect());
        }
        &Op::Mul { a, b } => {
            acc!(a, gd.iter().zip(val(b).data()).map(|(g, v)| g * v).collect());
            acc!(b, gd.iter().zip(val(a).data()).map(|(g, v)| g * v).collect());
        }
        &Op::AddRow { a, b } => {
            acc!(a, gd.to_vec());
            acc!(b, {
                let n = val(b).numel();
                let mut out = vec![0.0; n];
                for (j, &gv) in gd.iter().enumerate() {
                    out[j % n] += gv;
                }
                out
            });
        }
        &Op::MulRow { a, s } => {
            let sv = val(s).data();
            let n = sv.len();
            acc!(a, gd.iter().enumerate().map(|(j, g)| g * sv[j % n]).collect());
            acc!(s, {
                let mut out = vec![0.0; n];
                for (j, (gv, av)) in gd.iter().zip(val(a).data()).enumerate() {
                    out[j % n] += gv * av;
                }
                out
            });
        }
        &Op::ScaleRows { a, s } => {
            let sv = val(s).data();
            let n = g.numel() / sv.len().max(1);
            acc!(a, gd.iter().enumerate().map(|(j, gv)| gv * sv[j / n]).collect());
            acc!(s, {
                let av = val(a).data();
                (0..sv.len())
                    .map(|i| (0..n).map(|j| gd[i * n + j] * av[i * n + j]).sum())
                    .collect()
            });
        }
        &Op::Scale { a, c } => acc!(a, gd.iter().map(|g| g * c).collect()),
        &Op::Sigmoid { a } => acc!(a, gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()),
        &Op::Swish { a } => acc!(
            a,
            gd.iter()
                .zip(val(a).data())
                .map(|(g, &x)| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                })
                .collect()
        ),
        &Op::Softmax { a } => {
            let (rows, cols) = node.value.rows_cols();
            acc!(a, {
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &gd[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        out[r * cols + c] = ys[c] * (gs[c] - dot);
                    }
                }
                out
            });
        }
        &Op::LogSoftmax { a } => {
            let (rows, cols) = node.value.rows_cols();
            acc!(a, {
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gs = &gd[r * cols..(r + 1) * cols];
                    let total: f64 = gs.iter().sum();
                    for c in 0..cols {
                        out[r * cols + c] = gs[c] - y[r * cols + c].exp() * total;
                    }
                }
                out
            });
        }
        &Op::Glu { a } => {
            let x = val(a);
            let (rows, cols) = x.rows_cols();
            let half = cols / 2;
            acc!(a, {
                let xd = x.data();
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..half {
                        let av = xd[r * cols + c];
                        let s = sigmoid(xd[r * cols + half + c]);
                        let gv = gd[r * half + c];
                        out[r * cols + c] = gv * s;
                        out[r * cols + half + c] = gv * av * s * (1.0 - s);
                    }
                }
                out
            });
        }
        Op::NormalizeRows { a, inv_std } => {
            let (rows, cols) = node.value.rows_cols();
            acc!(*a, {
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &gd[r * cols..(r + 1) * cols];
                    let mg = gs.iter().sum::<f64>() / cols as f64;
                    let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        out[r * cols + c] = inv_std[r] * (gs[c] - mg - ys[c] * mgy);
                    }
                }
                out
            });
        }
        Op::NormalizeCols { a, inv_std, mask } => {
            let (rows, cols) = node.value.rows_cols();
            let valid = mask.iter().filter(|&&m| m).count() as f64;
            acc!(*a, {
                let mut out = vec![0.0; rows * cols];
                for c in 0..cols {
                    let mut mg = 0.0;
                    let mut mgy = 0.0;
                    for r in (0..rows).filter(|&r| mask[r]) {
                        mg += gd[r * cols + c];
                        mgy += gd[r * cols + c] * y[r * cols + c];
                    }
                    mg /= valid;
                    mgy /= valid;
                    for r in (0..rows).filter(|&r| mask[r]) {
                        let i = r * cols + c;
                        out[i] = inv_std[c] * (gd[i] - mg - y[i] * mgy);
                    }
                }
                out
            });
        }
        Op::Gather { a, idx } => acc!(*a, {
            let mut out = vec![0.0; val(*a).numel()];
            for (gv, &i) in gd.iter().zip(idx) {
                out[i] += gv;
            }
            out
        }),
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                acc!(p, gd[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::ConcatCols { parts } => {
            let (rows, total) = node.value.rows_cols();
            let mut offset = 0;
            for &p in parts {
                let (_, w) = val(p).rows_cols();
                acc!(p, {
                    let mut out = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        out.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    out
                });
                offset += w;
            }
        }
        &Op::Sum { a } => acc!(a, vec![gd[0]; val(a).numel()]),
        &Op::RowNorms { a } => {
            let x = val(a);
            let (rows, cols) = x.rows_cols();
            acc!(a, {
                let xd = x.data();
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    if y[r] > 0.0 {
                        for c in 0..cols {
                            out[r * cols + c] = gd[r] * xd[r * cols + c] / y[r];
                        }
                    }
                }
                out
            });
        }
        &Op::Transpose { a, rows, cols } => acc!(a, transpose_raw(gd, cols, rows)),
        &Op::Reshape { a } => acc!(a, gd.to_vec()),
        &Op::DepthwiseConv { x, w, batch, time, channels, k } => {
            let pad = k / 2;
            let xd = val(x).data();
            let wd = val(w).data();
            let mut gx = vec![0.0; xd.len()];
            let mut gw = vec![0.0; wd.len()];
            for b in 0..batch {
                for t in 0..time {
                    for j in 0..k {
                        let src = t as isize + j as isize - pad as isize;
                        if src < 0 || src >= time as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..channels {
                            let go = gd[(b * time + t) * channels + c];
                            gx[(b * time + src) * channels + c] += wd[c * k + j] * go;
                            gw[c * k + j] += xd[(b * time + src) * channels + c] * go;
                        }
                    }
                }
            }
            acc!(x, gx);
            acc!(w, gw);
        }
        &Op::Conv2d { x, w, b, geom } => {
            let Conv2dGeom { c_in, h, w: width, c_out, kh, kw, stride, h_out, w_out } = geom;
            let xd = val(x).data();
            let wd = val(w).data();
            let mut gx = vec![0.0; xd.len()];
            let mut gw = vec![0.0; wd.len()];
            let mut gb = vec![0.0; c_out];
            for o in 0..c_out {
                for i in 0..h_out {
                    for j in 0..w_out {
                        let go = gd[(o * h_out + i) * w_out + j];
                        gb[o] += go;
                        for c in 0..c_in {
                            for p in 0..kh {
                                for q in 0..kw {
                                    let xi = (c * h + i * stride + p) * width + j * stride + q;
                                    let wi = ((o * c_in + c) * kh + p) * kw + q;
                                    gx[xi] += wd[wi] * go;
                                    gw[wi] += xd[xi] * go;
                                }
                            }
                        }
                    }
                }
            }
            acc!(x, gx);
            acc!(w, gw);
            acc!(b, gb);
        }
    }
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
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Usage("operands live on different tapes".into()))
        }
    }

    fn same_shape(&self, op: &str, other: &Var<'_>) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
        }
        Ok((a, b))
    }

    /// Matrix product `[m×k]·[k×n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (m, k) = matrix_dims("matmul", &a)?;
        let (k2, n) = matrix_dims("matmul", &b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions differ ({:?} x {:?})",
                a.shape(),
                b.shape()
            )));
        }
        self.tape.count(m * k * n);
        let out = Tensor::new([m, n], matmul_raw(a.data(), b.data(), m, k, n))?;
        self.tape.push("matmul", out, Op::MatMul { a: self.id, b: other.id, m, k, n }, &[self.id, other.id])
    }

    fn zip(&self, other: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(name, other)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.tape.push(name, out, op, &[self.id, other.id])
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "add", |x, y| x + y, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "sub", |x, y| x - y, Op::Sub { a: self.id, b: other.id })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "mul", |x, y| x * y, Op::Mul { a: self.id, b: other.id })
    }

    fn row_broadcast(&self, v: &Var<'t>, name: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        self.same_tape(v)?;
        let (a, b) = (self.value(), v.value());
        let (_, cols) = a.rows_cols();
        if b.numel() != cols || b.shape().len() != 1 {
            return Err(Error::Shape(format!(
                "{name}: vector {:?} does not match last dim of {:?}",
                b.shape(),
                a.shape()
            )));
        }
        Ok((a, b))
    }

    /// Adds a vector to every row (bias add).
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.row_broadcast(bias, "add_row")?;
        let n = b.numel();
        let data = a.data().iter().enumerate().map(|(j, x)| x + b.data()[j % n]).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.tape.push("add_row", out, Op::AddRow { a: self.id, b: bias.id }, &[self.id, bias.id])
    }

    /// Multiplies every row elementwise by a vector (norm scale).
    pub fn mul_row(&self, scale: &Var<'t>) -> Result<Var<'t>> {
        let (a, s) = self.row_broadcast(scale, "mul_row")?;
        let n = s.numel();
        let data = a.data().iter().enumerate().map(|(j, x)| x * s.data()[j % n]).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.tape.push("mul_row", out, Op::MulRow { a: self.id, s: scale.id }, &[self.id, scale.id])
    }

    /// Multiplies row `i` by `scale[i]`.
    pub fn scale_rows(&self, scale: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(scale)?;
        let (a, s) = (self.value(), scale.value());
        let (rows, cols) = matrix_dims("scale_rows", &a)?;
        if s.numel() != rows {
            return Err(Error::Shape(format!("scale_rows: {} scales for {} rows", s.numel(), rows)));
        }
        let data = a.data().iter().enumerate().map(|(j, x)| x * s.data()[j / cols]).collect();
        let out = Tensor::new([rows, cols], data)?;
        self.tape.push("scale_rows", out, Op::ScaleRows { a: self.id, s: scale.id }, &[self.id, scale.id])
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|x| x * c);
        self.tape.push("scale", out, Op::Scale { a: self.id, c }, &[self.id])
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        let out = self.value().map(sigmoid);
        self.tape.push("sigmoid", out, Op::Sigmoid { a: self.id }, &[self.id])
    }

    /// `x·sigmoid(x)`.
    pub fn swish(&self) -> Result<Var<'t>> {
        let out = self.value().map(|x| x * sigmoid(x));
        self.tape.push("swish", out, Op::Swish { a: self.id }, &[self.id])
    }

    /// Softmax along the last axis. Entries where `mask` is false get
    /// probability zero; a row with no valid entry is an error.
    pub fn softmax(&self, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        if let Some(m) = mask {
            if m.len() != x.numel() {
                return Err(Error::Shape(format!("softmax mask has {} entries for {:?}", m.len(), x.shape())));
            }
        }
        let valid = |i: usize| mask.is_none_or(|m| m[i]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let range = r * cols..(r + 1) * cols;
            let max = range
                .clone()
                .filter(|&i| valid(i))
                .map(|i| x.data()[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Usage(format!("softmax row {r} has no valid entry")));
            }
            let mut total = 0.0;
            for i in range.clone().filter(|&i| valid(i)) {
                out[i] = (x.data()[i] - max).exp();
                total += out[i];
            }
            for i in range {
                out[i] /= total;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.tape.push("softmax", out, Op::Softmax { a: self.id }, &[self.id])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let xs = &x.data()[r * cols..(r + 1) * cols];
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..cols {
                out[r * cols + c] = xs[c] - lse;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.tape.push("log_softmax", out, Op::LogSoftmax { a: self.id }, &[self.id])
    }

    /// Gated linear unit over the last axis: `a·sigmoid(b)` for halves `[a | b]`.
    pub fn glu(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        if cols % 2 != 0 {
            return Err(Error::Shape(format!("glu needs an even last dimension, got {:?}", x.shape())));
        }
        let half = cols / 2;
        let mut out = Vec::with_capacity(rows * half);
        for r in 0..rows {
            for c in 0..half {
                out.push(x.data()[r * cols + c] * sigmoid(x.data()[r * cols + half + c]));
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = half;
        let out = Tensor::new(shape, out)?;
        self.tape.push("glu", out, Op::Glu { a: self.id }, &[self.id])
    }

    /// Zero mean, unit variance along the last axis (no affine).
    pub fn normalize_rows(&self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        let mut out = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let xs = &x.data()[r * cols..(r + 1) * cols];
            let mean = xs.iter().sum::<f64>() / cols as f64;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (xs[c] - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.tape.push("normalize_rows", out, Op::NormalizeRows { a: self.id, inv_std }, &[self.id])
    }

    /// Per-column normalization over the rows where `mask` is true. Masked
    /// rows come out as zeros. Also returns the batch mean and (biased)
    /// variance per column.
    pub fn normalize_cols(&self, mask: &[bool], eps: f64) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        let x = self.value();
        let (rows, cols) = matrix_dims("normalize_cols", &x)?;
        if mask.len() != rows {
            return Err(Error::Shape(format!("normalize_cols: mask of {} for {} rows", mask.len(), rows)));
        }
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            return Err(Error::Usage("normalize_cols: no valid rows".into()));
        }
        let mut mean = vec![0.0; cols];
        let mut var = vec![0.0; cols];
        for r in (0..rows).filter(|&r| mask[r]) {
            for c in 0..cols {
                mean[c] += x.data()[r * cols + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for r in (0..rows).filter(|&r| mask[r]) {
            for c in 0..cols {
                var[c] += (x.data()[r * cols + c] - mean[c]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; rows * cols];
        for r in (0..rows).filter(|&r| mask[r]) {
            for c in 0..cols {
                out[r * cols + c] = (x.data()[r * cols + c] - mean[c]) * inv_std[c];
            }
        }
        let out = Tensor::new([rows, cols], out)?;
        let var_out = self.tape.push(
            "normalize_cols",
            out,
            Op::NormalizeCols { a: self.id, inv_std, mask: mask.to_vec() },
            &[self.id],
        )?;
        Ok((var_out, mean, var))
    }

    /// `out.flat[n] = self.flat[idx[n]]`, reshaped to `shape`.
    pub fn gather(&self, idx: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let shape = shape.into();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::Shape(format!("gather: {} indices for shape {:?}", idx.len(), shape)));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::Shape(format!("gather index {bad} out of range for {:?}", x.shape())));
        }
        let data = idx.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        self.tape.push("gather", out, Op::Gather { a: self.id, idx }, &[self.id])
    }

    /// Rows `[start, end)` of a matrix.
    pub fn rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (_, cols) = self.value().rows_cols();
        self.gather((start * cols..end * cols).collect(), [end - start, cols])
    }

    /// Selected rows of a matrix, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let (_, cols) = self.value().rows_cols();
        let idx = rows.iter().flat_map(|&r| r * cols..(r + 1) * cols).collect();
        self.gather(idx, [rows.len(), cols])
    }

    /// Columns `[start, end)` of a matrix.
    pub fn cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (rows, cols) = self.value().rows_cols();
        let idx = (0..rows).flat_map(|r| (start..end).map(move |c| r * cols + c)).collect();
        self.gather(idx, [rows, end - start])
    }

    /// Vector slice `[start, end)` of a rank-1 tensor.
    pub fn slice(&self, start: usize, end: usize) -> Result<Var<'t>> {
        self.gather((start..end).collect(), [end - start])
    }

    /// Stacks tensors along the leading axis.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let tail = first.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            first.same_tape(p)?;
            let v = p.value();
            if v.shape()[1..] != tail[..] {
                return Err(Error::Shape(format!("concat_rows: {:?} vs trailing {:?}", v.shape(), tail)));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.tape.push("concat_rows", out, Op::ConcatRows { parts: ids.clone() }, &ids)
    }

    /// Concatenates matrices side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let rows = matrix_dims("concat_cols", &vals[0])?.0;
        let mut total = 0;
        for (p, v) in parts.iter().zip(&vals) {
            first.same_tape(p)?;
            let (r, c) = matrix_dims("concat_cols", v)?;
            if r != rows {
                return Err(Error::Shape(format!("concat_cols: {r} rows vs {rows}")));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let out = Tensor::new([rows, total], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.tape.push("concat_cols", out, Op::ConcatCols { parts: ids.clone() }, &ids)
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.tape.push("sum", Tensor::scalar(s), Op::Sum { a: self.id }, &[self.id])
    }

    /// Euclidean norm of every row: `[m×n] -> [m]`.
    pub fn row_norms(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, _) = x.rows_cols();
        let data = (0..rows).map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let out = Tensor::new([rows], data)?;
        self.tape.push("row_norms", out, Op::RowNorms { a: self.id }, &[self.id])
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = matrix_dims("transpose", &x)?;
        let out = Tensor::new([cols, rows], transpose_raw(x.data(), rows, cols))?;
        self.tape.push("transpose", out, Op::Transpose { a: self.id, rows, cols }, &[self.id])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = (*self.value()).clone().reshape(shape)?;
        self.tape.push("reshape", out, Op::Reshape { a: self.id }, &[self.id])
    }

    /// Per-channel 1-D convolution along time with symmetric zero padding.
    ///
    /// `self` is `[batch·time × channels]`, `kernel` is `[channels × k]` with
    /// `k` odd; tap `j` of the kernel reads frame `t + j - k/2`. Frames never
    /// cross utterance boundaries.
    pub fn depthwise_conv(&self, kernel: &Var<'t>, batch: usize, time: usize) -> Result<Var<'t>> {
        self.same_tape(kernel)?;
        let (x, w) = (self.value(), kernel.value());
        let (rows, channels) = matrix_dims("depthwise_conv", &x)?;
        let (wc, k) = matrix_dims("depthwise_conv", &w)?;
        if rows != batch * time || wc != channels || k % 2 == 0 {
            return Err(Error::Shape(format!(
                "depthwise_conv: input {:?} (batch {batch}, time {time}) with kernel {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let pad = k / 2;
        let (xd, wd) = (x.data(), w.data());
        let mut out = vec![0.0; rows * channels];
        for b in 0..batch {
            for t in 0..time {
                for j in 0..k {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src >= time as isize {
                        continue;
                    }
                    let src = src as usize;
                    for c in 0..channels {
                        out[(b * time + t) * channels + c] += wd[c * k + j] * xd[(b * time + src) * channels + c];
                    }
                }
            }
        }
        self.tape.count(rows * channels * k);
        let out = Tensor::new([rows, channels], out)?;
        self.tape.push(
            "depthwise_conv",
            out,
            Op::DepthwiseConv { x: self.id, w: kernel.id, batch, time, channels, k },
            &[self.id, kernel.id],
        )
    }

    /// Valid (unpadded) 2-D convolution of a `[c_in, h, w]` image with a
    /// `[c_out, c_in, kh, kw]` kernel and per-channel bias.
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>, stride: usize) -> Result<Var<'t>> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (&[c_in, h, width], &[c_out, wc, kh, kw]) = (x.shape(), w.shape()) else {
            return Err(Error::Shape(format!("conv2d: input {:?}, kernel {:?}", x.shape(), w.shape())));
        };
        if wc != c_in || b.numel() != c_out || stride == 0 {
            return Err(Error::Shape(format!("conv2d: input {:?}, kernel {:?}", x.shape(), w.shape())));
        }
        if h < kh || width < kw {
            return Err(Error::Shape(format!("conv2d: input {:?} smaller than kernel {kh}x{kw}", x.shape())));
        }
        let h_out = (h - kh) / stride + 1;
        let w_out = (width - kw) / stride + 1;
        let (xd, wd, bd) = (x.data(), w.data(), b.data());
        let mut out = vec![0.0; c_out * h_out * w_out];
        for o in 0..c_out {
            for i in 0..h_out {
                for j in 0..w_out {
                    let mut acc = bd[o];
                    for c in 0..c_in {
                        for p in 0..kh {
                            let xrow = (c * h + i * stride + p) * width + j * stride;
                            let wrow = ((o * c_in + c) * kh + p) * kw;
                            for q in 0..kw {
                                acc += wd[wrow + q] * xd[xrow + q];
                            }
                        }
                    }
                    out[(o * h_out + i) * w_out + j] = acc;
                }
            }
        }
        self.tape.count(c_out * h_out * w_out * c_in * kh * kw);
        let geom = Conv2dGeom { c_in, h, w: width, c_out, kh, kw, stride, h_out, w_out };
        let out = Tensor::new([c_out, h_out, w_out], out)?;
        self.tape.push(
            "conv2d",
            out,
            Op::Conv2d { x: self.id, w: weight.id, b: bias.id, geom },
            &[self.id, weight.id, bias.id],
        )
    }
}
