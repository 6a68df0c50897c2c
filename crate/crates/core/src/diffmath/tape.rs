//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Var::backward`] on a scalar replays the tape in reverse and returns
//! exact analytic gradients for every node that depends on a
//! gradient-requiring leaf. Tapes are single-threaded and meant to be
//! dropped after one forward/backward pass.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Atan2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Sin,
    Cos,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Square,
    Scale(f64),
    Offset(f64),
    Clamp(f64, f64),
    SmoothL1(f64),
}

enum Op {
    Leaf,
    Binary(BinaryKind, usize, usize),
    Unary(UnaryKind, usize),
    MatMul { a: usize, b: usize, trans_b: bool },
    Transpose(usize),
    Softmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    SumAll(usize),
    MeanAll(usize),
    SumLast(usize),
    Reshape(usize),
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    ShiftRows { x: usize, k: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(k, ..) => match k {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
                BinaryKind::Atan2 => "atan2",
            },
            Op::Unary(k, _) => match k {
                UnaryKind::Sin => "sin",
                UnaryKind::Cos => "cos",
                UnaryKind::Tanh => "tanh",
                UnaryKind::Exp => "exp",
                UnaryKind::Log => "log",
                UnaryKind::Sqrt => "sqrt",
                UnaryKind::Square => "square",
                UnaryKind::Scale(_) => "scale",
                UnaryKind::Offset(_) => "offset",
                UnaryKind::Clamp(..) => "clamp",
                UnaryKind::SmoothL1(_) => "smooth_l1",
            },
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumLast(_) => "sum_lastdim",
            Op::Reshape(_) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::ShiftRows { .. } => "shift_rows",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Finite-value checking follows the build profile: on with debug assertions.
    pub fn new() -> Self {
        Self::with_finite_check(cfg!(debug_assertions))
    }

    pub fn with_finite_check(check_finite: bool) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is tracked.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// A leaf sharing storage with the caller (model parameters).
    pub fn leaf(&self, value: Arc<Tensor>, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        let mut nodes = self.nodes.borrow_mut();
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: nodes.len(),
            });
        }
        let needs_grad = parents(&op).iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn binary(&self, kind: BinaryKind, a: usize, b: usize) -> Result<Var<'_>> {
        let (va, vb) = (self.value(a), self.value(b));
        let bc = Broadcast::new(va.shape(), vb.shape())?;
        let (da, db) = (va.data(), vb.data());
        let n: usize = bc.out_shape.iter().product();
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let (x, y) = (da[bc.a(k)], db[bc.b(k)]);
            out.push(match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => {
                    if y == 0.0 {
                        return Err(Error::Domain {
                            op: "div",
                            detail: "division by zero".into(),
                        });
                    }
                    x / y
                }
                BinaryKind::Atan2 => {
                    if x == 0.0 && y == 0.0 {
                        return Err(Error::Domain {
                            op: "atan2",
                            detail: "both arguments are zero".into(),
                        });
                    }
                    x.atan2(y)
                }
            });
        }
        self.push(Tensor::new(&bc.out_shape, out)?, Op::Binary(kind, a, b))
    }

    fn unary(&self, kind: UnaryKind, x: usize) -> Result<Var<'_>> {
        let v = self.value(x);
        let check_nonneg = |op, strict: bool| -> Result<()> {
            if let Some(bad) = v.data().iter().find(|&&e| e < 0.0 || (strict && e == 0.0)) {
                return Err(Error::Domain {
                    op,
                    detail: format!("argument {bad} out of domain"),
                });
            }
            Ok(())
        };
        match kind {
            UnaryKind::Log => check_nonneg("log", true)?,
            UnaryKind::Sqrt => check_nonneg("sqrt", false)?,
            _ => {}
        }
        let out = v.map(|e| match kind {
            UnaryKind::Sin => e.sin(),
            UnaryKind::Cos => e.cos(),
            UnaryKind::Tanh => e.tanh(),
            UnaryKind::Exp => e.exp(),
            UnaryKind::Log => e.ln(),
            UnaryKind::Sqrt => e.sqrt(),
            UnaryKind::Square => e * e,
            UnaryKind::Scale(c) => c * e,
            UnaryKind::Offset(c) => e + c,
            UnaryKind::Clamp(lo, hi) => e.clamp(lo, hi),
            UnaryKind::SmoothL1(beta) => {
                if e.abs() < beta {
                    0.5 * e * e / beta
                } else {
                    e.abs() - 0.5 * beta
                }
            }
        });
        self.push(out, Op::Unary(kind, x))
    }

    /// Sinusoidal positional table of shape `[frames, width]`.
    pub fn positional_encoding(frames: usize, width: usize) -> Tensor {
        let mut data = vec![0.0; frames * width];
        for t in 0..frames {
            for i in 0..width {
                let pair = (i / 2) as f64;
                let rate = 1.0 / 10000f64.powf(2.0 * pair / width as f64);
                let angle = t as f64 * rate;
                data[t * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        Tensor::new(&[frames, width], data).expect("consistent shape")
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Binary(_, a, b) | Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Unary(_, x)
        | Op::Transpose(x)
        | Op::Softmax(x)
        | Op::LayerNorm { x, .. }
        | Op::SumAll(x)
        | Op::MeanAll(x)
        | Op::SumLast(x)
        | Op::Reshape(x)
        | Op::SliceCols { x, .. }
        | Op::SliceRows { x, .. }
        | Op::ShiftRows { x, .. } => vec![*x],
        Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
    }
}

/// Index maps for numpy-style broadcasting of two operands.
struct Broadcast {
    out_shape: Vec<usize>,
    a_map: Option<Vec<usize>>,
    b_map: Option<Vec<usize>>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast {
                out_shape: a.to_vec(),
                a_map: None,
                b_map: None,
            });
        }
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            out_shape.push(match (x, y) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::Shape(format!(
                        "cannot broadcast {a:?} with {b:?}"
                    )))
                }
            });
        }
        let map = |p: &[usize]| -> Option<Vec<usize>> {
            if p == &out_shape[..] {
                return None;
            }
            let mut strides = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                strides[d] = if p[d] == 1 { 0 } else { acc };
                acc *= p[d];
            }
            // expand one axis at a time; the last axis varies fastest
            let mut out = vec![0usize];
            for (&len, &s) in out_shape.iter().zip(&strides) {
                out = out.iter().flat_map(|&o| (0..len).map(move |i| o + i * s)).collect();
            }
            Some(out)
        };
        let a_map = map(&pa);
        let b_map = map(&pb);
        Ok(Broadcast {
            out_shape,
            a_map,
            b_map,
        })
    }

    #[inline]
    fn a(&self, k: usize) -> usize {
        self.a_map.as_ref().map_or(k, |m| m[k])
    }

    #[inline]
    fn b(&self, k: usize) -> usize {
        self.b_map.as_ref().map_or(k, |m| m[k])
    }
}

/// `c (+)= op(a) * op(b)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every operand slice is large enough for the dimensions and
    // strides supplied by the callers below, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to one node on a [`Tape`].
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

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(BinaryKind::Add, self.id, o.id)
    }

    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(BinaryKind::Sub, self.id, o.id)
    }

    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(BinaryKind::Mul, self.id, o.id)
    }

    pub fn div(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(BinaryKind::Div, self.id, o.id)
    }

    /// Four-quadrant arctangent of `self / x`, in radians.
    pub fn atan2(self, x: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(BinaryKind::Atan2, self.id, x.id)
    }

    pub fn sin(self) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Sin, self.id)
    }

    pub fn cos(self) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Cos, self.id)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Tanh, self.id)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Exp, self.id)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Log, self.id)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Sqrt, self.id)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Square, self.id)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Scale(c), self.id)
    }

    pub fn offset(self, c: f64) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Offset(c), self.id)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.tape.unary(UnaryKind::Clamp(lo, hi), self.id)
    }

    /// Elementwise smooth-L1 (Huber) with transition point `beta`.
    pub fn smooth_l1(self, beta: f64) -> Result<Var<'t>> {
        if beta <= 0.0 {
            return Err(Error::Invalid("smooth-L1 beta must be positive".into()));
        }
        self.tape.unary(UnaryKind::SmoothL1(beta), self.id)
    }

    pub fn matmul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(o, false)
    }

    /// `self * o^T` without materialising the transpose.
    pub fn matmul_t(self, o: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(o, true)
    }

    fn matmul_impl(self, o: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        let (va, vb) = (self.value(), o.value());
        let (m, k) = va.dims2()?;
        let (br, bc) = vb.dims2()?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}{}",
                va.shape(),
                vb.shape(),
                if trans_b { "^T" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        let bs = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
        gemm(m, k, n, va.data(), (k as isize, 1), vb.data(), bs, &mut out, false);
        self.tape.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul {
                a: self.id,
                b: o.id,
                trans_b,
            },
        )
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        let d = v.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.tape
            .push(Tensor::new(&[c, r], out)?, Op::Transpose(self.id))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let v = self.value();
        let w = *v.shape().last().ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(w.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                z += *e;
            }
            row.iter_mut().for_each(|e| *e /= z);
        }
        self.tape
            .push(Tensor::new(v.shape(), out)?, Op::Softmax(self.id))
    }

    /// Zero-mean, unit-variance normalisation over the last axis (no affine part).
    pub fn layernorm(self, eps: f64) -> Result<Var<'t>> {
        let v = self.value();
        let w = *v.shape().last().ok_or_else(|| Error::Shape("layernorm of a scalar".into()))?;
        let mut out = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / w.max(1));
        for row in out.chunks_mut(w.max(1)) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|e| *e = (*e - mean) * is);
            inv_std.push(is);
        }
        self.tape.push(
            Tensor::new(v.shape(), out)?,
            Op::LayerNorm {
                x: self.id,
                inv_std,
            },
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.numel() == 0 {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.tape.push(Tensor::scalar(s), Op::MeanAll(self.id))
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_lastdim(self) -> Result<Var<'t>> {
        let v = self.value();
        let (&w, lead) = v
            .shape()
            .split_last()
            .ok_or_else(|| Error::Shape("sum_lastdim of a scalar".into()))?;
        let out: Vec<f64> = if w == 0 {
            vec![0.0; lead.iter().product()]
        } else {
            v.data().chunks(w).map(|r| r.iter().sum()).collect()
        };
        self.tape
            .push(Tensor::new(lead, out)?, Op::SumLast(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshaped(shape)?;
        self.tape.push(v, Op::Reshape(self.id))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "column slice {start}..{} of width {c}",
                start + len
            )));
        }
        let d = v.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        self.tape.push(
            Tensor::new(&[r, len], out)?,
            Op::SliceCols { x: self.id, start },
        )
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        if start + len > r {
            return Err(Error::Shape(format!(
                "row slice {start}..{} of height {r}",
                start + len
            )));
        }
        let out = v.data()[start * c..(start + len) * c].to_vec();
        self.tape.push(
            Tensor::new(&[len, c], out)?,
            Op::SliceRows { x: self.id, start },
        )
    }

    /// Moves rows down by `k` (row t receives row t-k), zero-filling the top.
    pub fn shift_rows(self, k: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        let mut out = vec![0.0; r * c];
        if k < r {
            out[k * c..].copy_from_slice(&v.data()[..(r - k) * c]);
        }
        self.tape
            .push(Tensor::new(&[r, c], out)?, Op::ShiftRows { x: self.id, k })
    }

    pub fn backward(self) -> Result<Gradients> {
        backward(self.tape, self.id)
    }
}

pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    let tape = first.tape;
    let values: Vec<_> = parts.iter().map(Var::value).collect();
    let rows = values[0].dims2()?.0;
    let mut widths = Vec::with_capacity(parts.len());
    for v in &values {
        let (r, c) = v.dims2()?;
        if r != rows {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for (v, &w) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
        }
    }
    tape.push(
        Tensor::new(&[rows, total], out)?,
        Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
    )
}

pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    let tape = first.tape;
    let values: Vec<_> = parts.iter().map(Var::value).collect();
    let cols = values[0].dims2()?.1;
    let mut rows = 0;
    let mut out = Vec::new();
    for v in &values {
        let (r, c) = v.dims2()?;
        if c != cols {
            return Err(Error::Shape("concat_rows column mismatch".into()));
        }
        rows += r;
        out.extend_from_slice(v.data());
    }
    tape.push(
        Tensor::new(&[rows, cols], out)?,
        Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
    )
}

/// Gradients of one scalar with respect to every node of its tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when the output does not depend on it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

/// Elementwise contribution of the same shape as the slot; the first one
/// is stored as is instead of being added to zeros.
fn accumulate_elementwise(slot: &mut Option<Tensor>, shape: &[usize], n: usize, f: impl Fn(usize) -> f64) {
    match slot {
        Some(t) => {
            for (k, g) in t.data_mut().iter_mut().enumerate() {
                *g += f(k);
            }
        }
        None => *slot = Some(Tensor::new(shape, (0..n).map(f).collect()).expect("gradient matches value shape")),
    }
}

fn backward(tape: &Tape, root: usize) -> Result<Gradients> {
    let nodes = tape.nodes.borrow();
    if nodes[root].value.numel() != 1 {
        return Err(Error::Shape(format!(
            "backward needs a scalar output, got shape {:?}",
            nodes[root].value.shape()
        )));
    }
    let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
    grads[root] = Some(Tensor::full(nodes[root].value.shape(), 1.0));

    for id in (0..=root).rev() {
        let node = &nodes[id];
        if !node.needs_grad {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        let gd = g.data();
        let out = node.value.data();
        let val = |i: usize| Arc::clone(&nodes[i].value);
        let wants = |i: usize| nodes[i].needs_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let bc = Broadcast::new(va.shape(), vb.shape())?;
                let (da, db) = (va.data(), vb.data());
                let da_k = |k: usize| {
                    let (x, y) = (da[bc.a(k)], db[bc.b(k)]);
                    gd[k] * match kind {
                        BinaryKind::Add | BinaryKind::Sub => 1.0,
                        BinaryKind::Mul => y,
                        BinaryKind::Div => 1.0 / y,
                        BinaryKind::Atan2 => y / (x * x + y * y),
                    }
                };
                let db_k = |k: usize| {
                    let (x, y) = (da[bc.a(k)], db[bc.b(k)]);
                    gd[k] * match kind {
                        BinaryKind::Add => 1.0,
                        BinaryKind::Sub => -1.0,
                        BinaryKind::Mul => x,
                        BinaryKind::Div => -x / (y * y),
                        BinaryKind::Atan2 => -x / (x * x + y * y),
                    }
                };
                if wants(*a) && bc.a_map.is_none() {
                    accumulate_elementwise(&mut grads[*a], va.shape(), gd.len(), da_k);
                } else if wants(*a) {
                    accumulate(&mut grads[*a], va.shape(), |ga| {
                        for k in 0..gd.len() {
                            ga[bc.a(k)] += da_k(k);
                        }
                    });
                }
                if wants(*b) && bc.b_map.is_none() {
                    accumulate_elementwise(&mut grads[*b], vb.shape(), gd.len(), db_k);
                } else if wants(*b) {
                    accumulate(&mut grads[*b], vb.shape(), |gb| {
                        for k in 0..gd.len() {
                            gb[bc.b(k)] += db_k(k);
                        }
                    });
                }
            }
            Op::Unary(kind, x) => {
                if wants(*x) {
                    let vx = val(*x);
                    let dx = vx.data();
                    accumulate_elementwise(&mut grads[*x], vx.shape(), gd.len(), |k| {
                        let e = dx[k];
                        let d = match *kind {
                            UnaryKind::Sin => e.cos(),
                            UnaryKind::Cos => -e.sin(),
                            UnaryKind::Tanh => 1.0 - out[k] * out[k],
                            UnaryKind::Exp => out[k],
                            UnaryKind::Log => 1.0 / e,
                            UnaryKind::Sqrt => 0.5 / out[k],
                            UnaryKind::Square => 2.0 * e,
                            UnaryKind::Scale(c) => c,
                            UnaryKind::Offset(_) => 1.0,
                            UnaryKind::Clamp(lo, hi) => {
                                if e >= lo && e <= hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::SmoothL1(beta) => {
                                if e.abs() < beta {
                                    e / beta
                                } else {
                                    e.signum()
                                }
                            }
                        };
                        gd[k] * d
                    });
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = va.dims2()?;
                let (br, bc) = vb.dims2()?;
                let n = if *trans_b { br } else { bc };
                if wants(*a) {
                    // dA = G * B^T  (or G * B when B was transposed)
                    let bs = if *trans_b { (bc as isize, 1) } else { (1, bc as isize) };
                    accumulate(&mut grads[*a], va.shape(), |ga| {
                        gemm(m, n, k, gd, (n as isize, 1), vb.data(), bs, ga, true);
                    });
                }
                if wants(*b) {
                    if *trans_b {
                        // dB = G^T * A, shape [n, k]
                        accumulate(&mut grads[*b], vb.shape(), |gb| {
                            gemm(n, m, k, gd, (1, n as isize), va.data(), (k as isize, 1), gb, true);
                        });
                    } else {
                        // dB = A^T * G, shape [k, n]
                        accumulate(&mut grads[*b], vb.shape(), |gb| {
                            gemm(k, m, n, va.data(), (1, k as isize), gd, (n as isize, 1), gb, true);
                        });
                    }
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let vx = val(*x);
                    let (r, c) = vx.dims2()?;
                    accumulate(&mut grads[*x], vx.shape(), |gx| {
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += gd[j * r + i];
                            }
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let w = *node.value.shape().last().unwrap_or(&1);
                    accumulate(&mut grads[*x], node.value.shape(), |gx| {
                        for ((gr, yr), gxr) in gd
                            .chunks(w)
                            .zip(out.chunks(w))
                            .zip(gx.chunks_mut(w))
                        {
                            let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                            for j in 0..w {
                                gxr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if wants(*x) {
                    let w = *node.value.shape().last().unwrap_or(&1);
                    accumulate(&mut grads[*x], node.value.shape(), |gx| {
                        for (r, ((gr, yr), gxr)) in gd
                            .chunks(w)
                            .zip(out.chunks(w))
                            .zip(gx.chunks_mut(w))
                            .enumerate()
                        {
                            let mg = gr.iter().sum::<f64>() / w as f64;
                            let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / w as f64;
                            for j in 0..w {
                                gxr[j] += inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                            }
                        }
                    });
                }
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                if wants(*x) {
                    let vx = val(*x);
                    let scale = if matches!(node.op, Op::MeanAll(_)) {
                        1.0 / vx.numel() as f64
                    } else {
                        1.0
                    };
                    let s = gd[0] * scale;
                    accumulate(&mut grads[*x], vx.shape(), |gx| {
                        gx.iter_mut().for_each(|e| *e += s);
                    });
                }
            }
            Op::SumLast(x) => {
                if wants(*x) {
                    let vx = val(*x);
                    let w = *vx.shape().last().unwrap_or(&1);
                    accumulate(&mut grads[*x], vx.shape(), |gx| {
                        if w > 0 {
                            for (row, g) in gx.chunks_mut(w).zip(gd) {
                                row.iter_mut().for_each(|e| *e += g);
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    let vx = val(*x);
                    accumulate(&mut grads[*x], vx.shape(), |gx| {
                        gx.iter_mut().zip(gd).for_each(|(a, b)| *a += b);
                    });
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let vx = val(*x);
                    let (r, c) = vx.dims2()?;
                    let len = node.value.shape()[1];
                    accumulate(&mut grads[*x], vx.shape(), |gx| {
                        for i in 0..r {
                            for j in 0..len {
                                gx[i * c + start + j] += gd[i * len + j];
                            }
                        }
                    });
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let vx = val(*x);
                    let c = vx.dims2()?.1;
                    accumulate(&mut grads[*x], vx.shape(), |gx| {
                        for (a, b) in gx[start * c..start * c + gd.len()].iter_mut().zip(gd) {
                            *a += b;
                        }
                    });
                }
            }
            Op::ShiftRows { x, k } => {
                if wants(*x) {
                    let vx = val(*x);
                    let (r, c) = vx.dims2()?;
                    accumulate(&mut grads[*x], vx.shape(), |gx| {
                        if *k < r {
                            for (a, b) in gx[..(r - k) * c].iter_mut().zip(&gd[k * c..]) {
                                *a += b;
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for &p in xs {
                    let vp = val(p);
                    let w = vp.shape()[1];
                    if wants(p) {
                        accumulate(&mut grads[p], vp.shape(), |gp| {
                            for i in 0..rows {
                                for j in 0..w {
                                    gp[i * w + j] += gd[i * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &p in xs {
                    let vp = val(p);
                    let n = vp.numel();
                    if wants(p) {
                        accumulate(&mut grads[p], vp.shape(), |gp| {
                            for (a, b) in gp.iter_mut().zip(&gd[offset..offset + n]) {
                                *a += b;
                            }
                        });
                    }
                    offset += n;
                }
            }
        }
        grads[id] = Some(g);
    }
    Ok(Gradients { grads })
}

/// Full turn, used to convert between cycles and radians.
pub const TAU: f64 = 2.0 * PI;

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn atan2_quadrants() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::from_vec(vec![0.0, 1.0]));
        let x = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let a = y.atan2(x).unwrap().value();
        assert_eq!(a.data()[0], 0.0);
        assert!((a.data()[1] - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn atan2_rejects_origin() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::from_vec(vec![0.0]));
        assert!(matches!(z.atan2(z), Err(Error::Domain { .. })));
    }

    #[test]
    fn log_and_sqrt_reject_negative() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_vec(vec![1.0, -2.0]));
        assert!(matches!(x.log(), Err(Error::Domain { op: "log", .. })));
        assert!(matches!(x.sqrt(), Err(Error::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let m = t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.5]]);
        let i = tape.constant(Tensor::eye(3));
        let mv = tape.constant(m.clone());
        assert_eq!(*i.matmul(mv).unwrap().value(), m);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(a), Err(Error::Shape(_))));
        assert!(a.matmul_t(a).is_ok());
    }

    #[test]
    fn broadcasting_row_and_column() {
        let tape = Tape::new();
        let col = tape.constant(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let row = tape.constant(Tensor::new(&[1, 3], vec![10.0, 20.0, 30.0]).unwrap());
        let p = col.mul(row).unwrap().value();
        assert_eq!(p.shape(), &[2, 3]);
        assert_eq!(p.data(), &[10.0, 20.0, 30.0, 20.0, 40.0, 60.0]);
        let bad = tape.constant(Tensor::zeros(&[4]));
        assert!(row.add(bad).is_err());
    }

    #[test]
    fn broadcast_gradient_sums_over_expanded_axes() {
        let tape = Tape::new();
        let m = tape.var(Tensor::zeros(&[3, 2]));
        let b = tape.var(Tensor::from_vec(vec![1.0, 2.0]));
        let s = m.add(b).unwrap().sum().unwrap();
        let g = s.backward().unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(g.get(m).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn non_finite_values_are_reported() {
        let tape = Tape::with_finite_check(true);
        let x = tape.var(Tensor::from_vec(vec![800.0]));
        assert!(matches!(x.exp(), Err(Error::NonFinite { op: "exp", .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[2]));
        assert!(x.sin().unwrap().backward().is_err());
    }

    #[test]
    fn gradients_skip_constants() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::from_vec(vec![2.0]));
        let x = tape.var(Tensor::from_vec(vec![3.0]));
        let g = c.mul(x).unwrap().sum().unwrap().backward().unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]]));
        let y = x.softmax().unwrap().value();
        for r in y.data().chunks(3) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert!((y.data()[3] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shift_rows_is_causal() {
        let tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0], &[2.0], &[3.0]]));
        assert_eq!(x.shift_rows(1).unwrap().value().data(), &[0.0, 1.0, 2.0]);
        assert_eq!(x.shift_rows(5).unwrap().value().data(), &[0.0; 3]);
    }
}
