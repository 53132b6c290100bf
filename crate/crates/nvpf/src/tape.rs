//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order; [`Var`]s are cheap handles into it. Because nodes are appended
//! as they are computed, the record is already topologically sorted, and
//! [`Tape::backward`] is a single reverse sweep that visits each node
//! exactly once. Accumulation order is fixed by node index, so gradients
//! are bit-reproducible run to run.
//!
//! The op set is intentionally small and auditable: elementwise
//! arithmetic with scalar broadcast, matrix product, same-padded 2-D
//! convolution (normal and depthwise), per-channel bias/scale, reductions,
//! reshape, and two structural ops (channel stacking, column placement)
//! used to assemble flow inputs. Everything else in the crate is composed
//! from these.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One recorded operation. Parent fields are node indices on the same tape.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Matmul(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        depthwise: bool,
    },
    /// y[h,w,c] = x[h,w,c] + b[c]
    AddChannel { input: usize, bias: usize },
    /// y[h,w,c] = x[h,w,c] * s[c]
    MulChannel { input: usize, scale: usize },
    Sum { input: usize, axis: Option<usize> },
    Mean { input: usize, axis: Option<usize> },
    Reshape { input: usize },
    /// y[h,w,k] from k rank-2 inputs of shape [h,w].
    StackChannels { parents: Vec<usize> },
    /// Zero matrix of shape [rows, cols] with selected source columns
    /// copied in: y[:, dst] = parent[:, src] per entry.
    PlaceCols {
        entries: Vec<ColEntry>,
        rows: usize,
    },
}

/// One column-copy instruction for [`Op::PlaceCols`].
#[derive(Clone, Debug)]
pub struct ColEntry {
    node: usize,
    src_col: usize,
    dst_col: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default, Debug)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Gradient tape for one forward pass. Cloning is cheap (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("idx", &self.idx)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }

    /// Trainable leaf: participates in backward.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-trainable leaf: data, masks, numeric constants.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Scalar constant convenience.
    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn needs(&self, idx: usize) -> bool {
        self.inner.borrow().nodes[idx].needs_grad
    }

    fn value_of(&self, idx: usize) -> Tensor {
        self.inner.borrow().nodes[idx].value.clone()
    }

    /// Stack rank-2 tensors of equal shape [h, w] into [h, w, k].
    pub fn stack_channels(&self, mats: &[Var]) -> Result<Var> {
        if mats.is_empty() {
            return Err(Error::invalid("stack_channels", "no inputs"));
        }
        let first = mats[0].value();
        if first.rank() != 2 {
            return Err(Error::invalid("stack_channels", "inputs must be rank 2"));
        }
        let (h, w) = (first.shape()[0], first.shape()[1]);
        let k = mats.len();
        let mut out = Tensor::zeros(&[h, w, k]);
        let mut needs = false;
        let mut parents = Vec::with_capacity(k);
        for (ci, m) in mats.iter().enumerate() {
            if !self.same_tape(&m.tape) {
                return Err(Error::invalid("stack_channels", "operand on a different tape"));
            }
            let v = m.value();
            if v.shape() != first.shape() {
                return Err(Error::shapes("stack_channels", first.shape(), v.shape()));
            }
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[(y * w + x) * k + ci] = v.data()[y * w + x];
                }
            }
            needs |= self.needs(m.idx);
            parents.push(m.idx);
        }
        Ok(self.push(out, needs, Op::StackChannels { parents }))
    }

    /// Assemble a [rows, cols] matrix from columns of rank-2 sources;
    /// unwritten columns are zero. Each destination column may be written
    /// at most once.
    pub fn place_cols(&self, rows: usize, cols: usize, entries: &[(Var, usize, usize)]) -> Result<Var> {
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut needs = false;
        let mut ops = Vec::with_capacity(entries.len());
        let mut written = vec![false; cols];
        for (src, src_col, dst_col) in entries {
            if !self.same_tape(&src.tape) {
                return Err(Error::invalid("place_cols", "operand on a different tape"));
            }
            let v = src.value();
            if v.rank() != 2 || v.shape()[0] != rows {
                return Err(Error::shapes("place_cols", &[rows, cols], v.shape()));
            }
            if *src_col >= v.shape()[1] || *dst_col >= cols {
                return Err(Error::invalid("place_cols", "column index out of range"));
            }
            if std::mem::replace(&mut written[*dst_col], true) {
                return Err(Error::invalid("place_cols", "destination column written twice"));
            }
            for r in 0..rows {
                let val = v.data()[r * v.shape()[1] + src_col];
                out.data_mut()[r * cols + dst_col] = val;
            }
            needs |= self.needs(src.idx);
            ops.push(ColEntry {
                node: src.idx,
                src_col: *src_col,
                dst_col: *dst_col,
            });
        }
        Ok(self.push(out, needs, Op::PlaceCols { entries: ops, rows }))
    }

    /// Reverse sweep from a scalar loss: fills gradients for every
    /// gradient-requiring node at or below it on the tape.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        if !self.same_tape(&loss.tape) {
            return Err(Error::invalid("backward", "loss on a different tape"));
        }
        {
            let inner = self.inner.borrow();
            if !inner.nodes[loss.idx].value.is_scalar() {
                return Err(Error::invalid(
                    "backward",
                    format!(
                        "loss must be scalar, got shape {:?}",
                        inner.nodes[loss.idx].value.shape()
                    ),
                ));
            }
        }
        let mut inner = self.inner.borrow_mut();
        for n in inner.nodes.iter_mut() {
            n.grad = None;
        }
        let seed_shape = inner.nodes[loss.idx].value.shape().to_vec();
        inner.nodes[loss.idx].grad = Some(Tensor::filled(&seed_shape, 1.0));
        for idx in (0..=loss.idx).rev() {
            if !inner.nodes[idx].needs_grad {
                continue;
            }
            let Some(grad) = inner.nodes[idx].grad.clone() else {
                continue;
            };
            let op = inner.nodes[idx].op.clone();
            backprop(&mut inner, idx, &grad, &op);
        }
        Ok(())
    }
}

/// Add `delta` into the gradient slot of `idx` (if it participates).
fn accumulate(inner: &mut TapeInner, idx: usize, delta: Tensor) {
    let node = &mut inner.nodes[idx];
    if !node.needs_grad {
        return;
    }
    debug_assert_eq!(node.value.shape(), delta.shape());
    match &mut node.grad {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Gradient of a broadcast binary op with respect to one operand:
/// collapse `grad ⊙ factor` back to that operand's shape (sum when the
/// operand was the broadcast scalar).
fn collapse_to(shape: &[usize], full: Tensor) -> Tensor {
    if full.shape() == shape {
        return full;
    }
    // operand was scalar-broadcast: reduce to one element
    let total: f64 = full.data().iter().sum();
    Tensor::from_vec(shape, vec![total]).expect("scalar collapse")
}

fn backprop(inner: &mut TapeInner, idx: usize, grad: &Tensor, op: &Op) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (sa, sb) = (
                inner.nodes[*a].value.shape().to_vec(),
                inner.nodes[*b].value.shape().to_vec(),
            );
            accumulate(inner, *a, collapse_to(&sa, grad.clone()));
            accumulate(inner, *b, collapse_to(&sb, grad.clone()));
        }
        Op::Sub(a, b) => {
            let (sa, sb) = (
                inner.nodes[*a].value.shape().to_vec(),
                inner.nodes[*b].value.shape().to_vec(),
            );
            accumulate(inner, *a, collapse_to(&sa, grad.clone()));
            accumulate(inner, *b, collapse_to(&sb, grad.map(|g| -g)));
        }
        Op::Mul(a, b) => {
            let va = inner.nodes[*a].value.clone();
            let vb = inner.nodes[*b].value.clone();
            let ga = broadcast_combine(grad, &vb, |g, o| g * o);
            let gb = broadcast_combine(grad, &va, |g, o| g * o);
            accumulate(inner, *a, collapse_to(&va.shape().to_vec(), ga));
            accumulate(inner, *b, collapse_to(&vb.shape().to_vec(), gb));
        }
        Op::Neg(a) => accumulate(inner, *a, grad.map(|g| -g)),
        Op::Exp(a) => {
            let y = inner.nodes[idx].value.clone();
            accumulate(inner, *a, grad.zip_map(&y, |g, y| g * y));
        }
        Op::Log(a) => {
            let x = inner.nodes[*a].value.clone();
            accumulate(inner, *a, grad.zip_map(&x, |g, x| g / x));
        }
        Op::Tanh(a) => {
            let y = inner.nodes[idx].value.clone();
            accumulate(inner, *a, grad.zip_map(&y, |g, y| g * (1.0 - y * y)));
        }
        Op::Sigmoid(a) => {
            let y = inner.nodes[idx].value.clone();
            accumulate(inner, *a, grad.zip_map(&y, |g, y| g * y * (1.0 - y)));
        }
        Op::Relu(a) => {
            let x = inner.nodes[*a].value.clone();
            accumulate(inner, *a, grad.zip_map(&x, |g, x| if x > 0.0 { g } else { 0.0 }));
        }
        Op::Matmul(a, b) => {
            let va = inner.nodes[*a].value.clone();
            let vb = inner.nodes[*b].value.clone();
            // ga = grad · vbᵀ ; gb = vaᵀ · grad
            let ga = matmul_nt(grad, &vb);
            let gb = matmul_tn(&va, grad);
            accumulate(inner, *a, ga);
            accumulate(inner, *b, gb);
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
            depthwise,
        } => {
            let x = inner.nodes[*input].value.clone();
            let k = inner.nodes[*kernel].value.clone();
            let (gx, gk) = conv2d_backward(&x, &k, *stride, *depthwise, grad);
            accumulate(inner, *input, gx);
            accumulate(inner, *kernel, gk);
        }
        Op::AddChannel { input, bias } => {
            let xs = inner.nodes[*input].value.shape().to_vec();
            let (h, w, c) = (xs[0], xs[1], xs[2]);
            accumulate(inner, *input, grad.clone());
            let mut gb = Tensor::zeros(&[c]);
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        gb.data_mut()[ci] += grad.data()[(y * w + x) * c + ci];
                    }
                }
            }
            accumulate(inner, *bias, gb);
        }
        Op::MulChannel { input, scale } => {
            let xv = inner.nodes[*input].value.clone();
            let sv = inner.nodes[*scale].value.clone();
            let xs = xv.shape();
            let (h, w, c) = (xs[0], xs[1], xs[2]);
            let mut gx = Tensor::zeros(xs);
            let mut gs = Tensor::zeros(&[c]);
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        let off = (y * w + x) * c + ci;
                        gx.data_mut()[off] = grad.data()[off] * sv.data()[ci];
                        gs.data_mut()[ci] += grad.data()[off] * xv.data()[off];
                    }
                }
            }
            accumulate(inner, *input, gx);
            accumulate(inner, *scale, gs);
        }
        Op::Sum { input, axis } => {
            let xs = inner.nodes[*input].value.shape().to_vec();
            accumulate(inner, *input, broadcast_reduction_grad(&xs, *axis, grad, 1.0));
        }
        Op::Mean { input, axis } => {
            let xs = inner.nodes[*input].value.shape().to_vec();
            let n = match axis {
                Some(ax) => xs[*ax] as f64,
                None => xs.iter().product::<usize>() as f64,
            };
            accumulate(inner, *input, broadcast_reduction_grad(&xs, *axis, grad, 1.0 / n));
        }
        Op::Reshape { input } => {
            let xs = inner.nodes[*input].value.shape().to_vec();
            accumulate(inner, *input, grad.reshaped(&xs).expect("reshape grad"));
        }
        Op::StackChannels { parents } => {
            let k = parents.len();
            let gs = grad.shape();
            let (h, w) = (gs[0], gs[1]);
            for (ci, p) in parents.iter().enumerate() {
                let mut gp = Tensor::zeros(&[h, w]);
                for y in 0..h {
                    for x in 0..w {
                        gp.data_mut()[y * w + x] = grad.data()[(y * w + x) * k + ci];
                    }
                }
                accumulate(inner, *p, gp);
            }
        }
        Op::PlaceCols { entries, rows } => {
            for e in entries {
                let pshape = inner.nodes[e.node].value.shape().to_vec();
                let pcols = pshape[1];
                let cols = grad.shape()[1];
                let mut gp = Tensor::zeros(&pshape);
                for r in 0..*rows {
                    gp.data_mut()[r * pcols + e.src_col] = grad.data()[r * cols + e.dst_col];
                }
                accumulate(inner, e.node, gp);
            }
        }
    }
}

/// grad (full shape) combined with an operand that may be scalar.
fn broadcast_combine(grad: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if other.is_scalar() {
        let o = other.item();
        grad.map(|g| f(g, o))
    } else if grad.is_scalar() {
        let g = grad.item();
        other.map(|o| f(g, o))
    } else {
        grad.zip_map(other, f)
    }
}

/// Broadcast a reduction's gradient back to the input shape, scaled.
fn broadcast_reduction_grad(input_shape: &[usize], axis: Option<usize>, grad: &Tensor, scale: f64) -> Tensor {
    match axis {
        None => {
            let g = grad.item() * scale;
            Tensor::filled(input_shape, g)
        }
        Some(ax) => {
            let outer: usize = input_shape[..ax].iter().product();
            let n = input_shape[ax];
            let inner_n: usize = input_shape[ax + 1..].iter().product();
            let mut out = Tensor::zeros(input_shape);
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner_n {
                        out.data_mut()[(o * n + k) * inner_n + i] = grad.data()[o * inner_n + i] * scale;
                    }
                }
            }
            out
        }
    }
}

/// a[m,k] · b[n,k]ᵀ -> [m,n]
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    debug_assert_eq!(b.shape()[1], k);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[j * k + p];
            }
            out.data_mut()[i * n + j] = acc;
        }
    }
    out
}

/// a[k,m]ᵀ · b[k,n] -> [m,n]
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(b.shape()[0], k);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[p * m + i] * b.data()[p * n + j];
            }
            out.data_mut()[i * n + j] = acc;
        }
    }
    out
}

/// Same-padding geometry: output extent and leading pad for one axis.
fn same_pad(extent: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = extent.div_ceil(stride);
    let needed = (out - 1) * stride + kernel;
    let total = needed.saturating_sub(extent);
    (out, total / 2)
}

/// Forward same-padded convolution. Input [h,w,c]; kernel [kh,kw,c,c_out]
/// (depthwise: [kh,kw,c,1], output channels = c).
pub(crate) fn conv2d_forward(x: &Tensor, k: &Tensor, stride: usize, depthwise: bool) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, kc) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    let co = if depthwise { c } else { k.shape()[3] };
    debug_assert_eq!(kc, c);
    let (oh, pad_t) = same_pad(h, kh, stride);
    let (ow, pad_l) = same_pad(w, kw, stride);
    let mut out = Tensor::zeros(&[oh, ow, co]);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad_t as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad_l as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_base = ((iy as usize) * w + ix as usize) * c;
                    let out_base = (oy * ow + ox) * co;
                    if depthwise {
                        let k_base = (ky * kw + kx) * c;
                        for ci in 0..c {
                            out.data_mut()[out_base + ci] +=
                                x.data()[in_base + ci] * k.data()[k_base + ci];
                        }
                    } else {
                        let k_base = ((ky * kw + kx) * c) * co;
                        for ci in 0..c {
                            let xv = x.data()[in_base + ci];
                            let krow = k_base + ci * co;
                            for o in 0..co {
                                out.data_mut()[out_base + o] += xv * k.data()[krow + o];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of conv2d with respect to input and kernel.
fn conv2d_backward(x: &Tensor, k: &Tensor, stride: usize, depthwise: bool, grad: &Tensor) -> (Tensor, Tensor) {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (k.shape()[0], k.shape()[1]);
    let co = if depthwise { c } else { k.shape()[3] };
    let (oh, pad_t) = same_pad(h, kh, stride);
    let (ow, pad_l) = same_pad(w, kw, stride);
    debug_assert_eq!(grad.shape(), &[oh, ow, co]);
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(k.shape());
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad_t as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad_l as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_base = ((iy as usize) * w + ix as usize) * c;
                    let out_base = (oy * ow + ox) * co;
                    if depthwise {
                        let k_base = (ky * kw + kx) * c;
                        for ci in 0..c {
                            let g = grad.data()[out_base + ci];
                            gx.data_mut()[in_base + ci] += g * k.data()[k_base + ci];
                            gk.data_mut()[k_base + ci] += g * x.data()[in_base + ci];
                        }
                    } else {
                        let k_base = ((ky * kw + kx) * c) * co;
                        for ci in 0..c {
                            let xv = x.data()[in_base + ci];
                            let krow = k_base + ci * co;
                            let mut acc = 0.0;
                            for o in 0..co {
                                let g = grad.data()[out_base + o];
                                acc += g * k.data()[krow + o];
                                gk.data_mut()[krow + o] += g * xv;
                            }
                            gx.data_mut()[in_base + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}

impl Var {
    /// Current value (cloned out of the tape).
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.idx)
    }

    /// Gradient after [`Tape::backward`], if this node participates.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.inner.borrow().nodes[self.idx].grad.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.idx].value.shape().to_vec()
    }

    fn binary(&self, other: &Var, op_name: &'static str) -> Result<(Tensor, Tensor)> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::invalid(op_name, "operands on different tapes"));
        }
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() && !a.is_scalar() && !b.is_scalar() {
            return Err(Error::shapes(op_name, a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    fn elementwise_binary(&self, other: &Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: impl Fn(usize, usize) -> Op) -> Result<Var> {
        let (a, b) = self.binary(other, op_name)?;
        let out = if a.shape() == b.shape() {
            a.zip_map(&b, f)
        } else if b.is_scalar() {
            let bv = b.item();
            a.map(|x| f(x, bv))
        } else {
            let av = a.item();
            b.map(|x| f(av, x))
        };
        let needs = self.tape.needs(self.idx) || self.tape.needs(other.idx);
        Ok(self.tape.push(out, needs, op(self.idx, other.idx)))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.elementwise_binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.elementwise_binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    /// Elementwise (Hadamard) product; scalar operands broadcast.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.elementwise_binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var {
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, needs, op)
    }

    pub fn neg(&self) -> Var {
        let v = self.value().map(|x| -x);
        self.unary(v, Op::Neg(self.idx))
    }

    pub fn exp(&self) -> Var {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.idx))
    }

    /// Natural log; errors on non-positive input.
    pub fn log(&self) -> Result<Var> {
        let x = self.value();
        if x.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("log", "non-positive input"));
        }
        Ok(self.unary(x.map(f64::ln), Op::Log(self.idx)))
    }

    pub fn tanh(&self) -> Var {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.idx))
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.idx))
    }

    pub fn relu(&self) -> Var {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.idx))
    }

    /// Multiply by an untracked scalar constant.
    pub fn cmul(&self, c: f64) -> Var {
        self.mul(&self.tape.scalar(c)).expect("scalar mul")
    }

    /// Add an untracked scalar constant.
    pub fn cadd(&self, c: f64) -> Var {
        self.add(&self.tape.scalar(c)).expect("scalar add")
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::invalid("matmul", "operands on different tapes"));
        }
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shapes("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for p in 0..k {
                let av = a.data()[i * k + p];
                for j in 0..n {
                    out.data_mut()[i * n + j] += av * b.data()[p * n + j];
                }
            }
        }
        let needs = self.tape.needs(self.idx) || self.tape.needs(other.idx);
        Ok(self.tape.push(out, needs, Op::Matmul(self.idx, other.idx)))
    }

    /// Same-padded 2-D convolution. Input [h,w,c]; kernel [kh,kw,c,c_out]
    /// (depthwise: [kh,kw,c,1]). Output spatial extents are ⌈h/s⌉ × ⌈w/s⌉.
    pub fn conv2d(&self, kernel: &Var, stride: usize, depthwise: bool) -> Result<Var> {
        if !self.tape.same_tape(&kernel.tape) {
            return Err(Error::invalid("conv2d", "operands on different tapes"));
        }
        let x = self.value();
        let k = kernel.value();
        if x.rank() != 3 || k.rank() != 4 {
            return Err(Error::shapes("conv2d", x.shape(), k.shape()));
        }
        if k.shape()[0] % 2 == 0 || k.shape()[1] % 2 == 0 {
            return Err(Error::invalid("conv2d", "kernel extents must be odd"));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid("conv2d", format!("stride must be 1 or 2, got {stride}")));
        }
        if k.shape()[2] != x.shape()[2] {
            return Err(Error::ShapeMismatch {
                op: "conv2d (channel mismatch)",
                lhs: x.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        if depthwise && k.shape()[3] != 1 {
            return Err(Error::invalid(
                "conv2d",
                "depthwise kernel must have one filter per input channel",
            ));
        }
        let out = conv2d_forward(&x, &k, stride, depthwise);
        let needs = self.tape.needs(self.idx) || self.tape.needs(kernel.idx);
        Ok(self.tape.push(
            out,
            needs,
            Op::Conv2d {
                input: self.idx,
                kernel: kernel.idx,
                stride,
                depthwise,
            },
        ))
    }

    /// Per-channel bias: input [h,w,c] plus bias [c].
    pub fn add_channel(&self, bias: &Var) -> Result<Var> {
        if !self.tape.same_tape(&bias.tape) {
            return Err(Error::invalid("add_channel", "operands on different tapes"));
        }
        let x = self.value();
        let b = bias.value();
        if x.rank() != 3 || b.rank() != 1 || b.shape()[0] != x.shape()[2] {
            return Err(Error::shapes("add_channel", x.shape(), b.shape()));
        }
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = x.clone();
        for y in 0..h {
            for xx in 0..w {
                for ci in 0..c {
                    out.data_mut()[(y * w + xx) * c + ci] += b.data()[ci];
                }
            }
        }
        let needs = self.tape.needs(self.idx) || self.tape.needs(bias.idx);
        Ok(self.tape.push(
            out,
            needs,
            Op::AddChannel {
                input: self.idx,
                bias: bias.idx,
            },
        ))
    }

    /// Per-channel scale: input [h,w,c] times scale [c].
    pub fn mul_channel(&self, scale: &Var) -> Result<Var> {
        if !self.tape.same_tape(&scale.tape) {
            return Err(Error::invalid("mul_channel", "operands on different tapes"));
        }
        let x = self.value();
        let s = scale.value();
        if x.rank() != 3 || s.rank() != 1 || s.shape()[0] != x.shape()[2] {
            return Err(Error::shapes("mul_channel", x.shape(), s.shape()));
        }
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = x.clone();
        for y in 0..h {
            for xx in 0..w {
                for ci in 0..c {
                    out.data_mut()[(y * w + xx) * c + ci] *= s.data()[ci];
                }
            }
        }
        let needs = self.tape.needs(self.idx) || self.tape.needs(scale.idx);
        Ok(self.tape.push(
            out,
            needs,
            Op::MulChannel {
                input: self.idx,
                scale: scale.idx,
            },
        ))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(&self) -> Var {
        let total: f64 = self.value().data().iter().sum();
        self.unary(Tensor::scalar(total), Op::Sum {
            input: self.idx,
            axis: None,
        })
    }

    /// Sum along one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let (out, _) = self.reduce_axis(axis, false)?;
        Ok(self.unary(out, Op::Sum {
            input: self.idx,
            axis: Some(axis),
        }))
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean(&self) -> Var {
        let v = self.value();
        let total: f64 = v.data().iter().sum();
        self.unary(Tensor::scalar(total / v.len() as f64), Op::Mean {
            input: self.idx,
            axis: None,
        })
    }

    /// Mean along one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        let (out, _) = self.reduce_axis(axis, true)?;
        Ok(self.unary(out, Op::Mean {
            input: self.idx,
            axis: Some(axis),
        }))
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<(Tensor, usize)> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(Error::invalid(
                "reduce",
                format!("axis {axis} out of range for rank {}", v.rank()),
            ));
        }
        let shape = v.shape();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        let mut out = Tensor::zeros(&out_shape);
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out.data_mut()[o * inner + i] += v.data()[(o * n + k) * inner + i];
                }
            }
        }
        if mean {
            for x in out.data_mut() {
                *x /= n as f64;
            }
        }
        Ok((out, n))
    }

    /// View with a new shape (same element count).
    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().reshaped(shape)?;
        Ok(self.unary(v, Op::Reshape { input: self.idx }))
    }
}

/// Numerically stable log-softmax over all elements of a vector-shaped
/// tensor ([n] or [n,1]). The max is subtracted as an untracked constant,
/// which leaves the gradient exact (shifts cancel in softmax).
pub fn log_softmax(v: &Var) -> Result<Var> {
    let val = v.value();
    let max = val.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted = v.sub(&v.tape.scalar(max))?;
    let lse = shifted.exp().sum().log()?;
    shifted.sub(&lse)
}
