//! Define-by-run tape and the primitive operations.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! nodes in exact reverse insertion order, so gradient accumulation order (and
//! therefore the floating-point result) depends only on how the graph was built.

use std::collections::HashMap;

use crate::broadcast::{broadcast_shape, mapping, Mapping};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Abs,
    Square,
    RotA,
    RotB,
}

// Below this squared angle the rotation coefficients switch to their series.
const ROT_SERIES_CUTOFF: f64 = 1e-4;

/// Rodrigues coefficients `(sin θ / θ, (1 − cos θ) / θ²)` as functions of
/// `θ²`, continuous through zero.
pub fn rotation_coefficients(theta_sq: f64) -> (f64, f64) {
    let x = theta_sq;
    if x < ROT_SERIES_CUTOFF {
        (
            1.0 - x / 6.0 + x * x / 120.0 - x * x * x / 5040.0,
            0.5 - x / 24.0 + x * x / 720.0 - x * x * x / 40320.0,
        )
    } else {
        let t = x.sqrt();
        let h = (0.5 * t).sin();
        (t.sin() / t, 2.0 * h * h / x)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Relu => "relu",
            UnaryOp::Abs => "abs",
            UnaryOp::Square => "square",
            UnaryOp::RotA => "rot_coeff_a",
            UnaryOp::RotB => "rot_coeff_b",
        }
    }

    #[inline]
    fn forward(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Abs => x.abs(),
            UnaryOp::Square => x * x,
            UnaryOp::RotA => rotation_coefficients(x).0,
            UnaryOp::RotB => rotation_coefficients(x).1,
        }
    }

    /// dy/dx given input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Sin => x.cos(),
            UnaryOp::Cos => -x.sin(),
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Square => 2.0 * x,
            UnaryOp::RotA => {
                if x < ROT_SERIES_CUTOFF {
                    -1.0 / 6.0 + x / 60.0 - x * x / 1680.0
                } else {
                    let t = x.sqrt();
                    (t * t.cos() - t.sin()) / (2.0 * x * t)
                }
            }
            UnaryOp::RotB => {
                if x < ROT_SERIES_CUTOFF {
                    -1.0 / 24.0 + x / 360.0 - x * x / 13440.0
                } else {
                    let t = x.sqrt();
                    let h = (0.5 * t).sin();
                    (t * t.sin() - 4.0 * h * h) / (2.0 * x * x)
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Gabor { u: Var, gamma: Var, omega: Var },
    Transpose(Var),
    Sum(Var),
    SumAxis { input: Var, axis: usize },
    Concat(Vec<Var>),
    Slice { input: Var, start: usize, end: usize },
    Reshape(Var),
    CumprodExclusive(Var),
    GatherRows { input: Var, index: Vec<usize> },
    Bilinear { coords: Var, image: Tensor },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Only used by leaves: accumulated across backward calls.
    grad: Option<Vec<f64>>,
}

/// Reverse-mode tape. Rebuild (or [`clear`](Graph::clear)) every iteration.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and saved activation. Parameters live in the store and
    /// are unaffected.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf created with [`input`](Graph::input).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf; its gradient is readable through [`grad`](Graph::grad).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "input")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.requires_grad, "param")?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    /// Same value with the gradient path cut.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).clone();
        self.push(value, Op::Leaf, false, "detach")
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = op.name();
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = numel(&out_shape);
        let data: Vec<f64> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| op.apply(x, y)).collect()
        } else {
            let ma = mapping(&sa, &out_shape);
            let mb = mapping(&sb, &out_shape);
            match (&ma, &mb) {
                (Mapping::Same, Mapping::Cycle(w)) => av
                    .chunks(*w)
                    .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| op.apply(x, y)))
                    .collect(),
                (Mapping::Same, Mapping::Scalar) => av.iter().map(|&x| op.apply(x, bv[0])).collect(),
                (Mapping::Scalar, Mapping::Same) => bv.iter().map(|&y| op.apply(av[0], y)).collect(),
                (Mapping::Same, Mapping::Repeat(k)) => av
                    .chunks(*k)
                    .zip(bv)
                    .flat_map(|(row, &y)| row.iter().map(move |&x| op.apply(x, y)))
                    .collect(),
                _ => (0..n).map(|i| op.apply(av[ma.index(i)], bv[mb.index(i)])).collect(),
            }
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(out_shape, data)?, Op::Binary(op, a, b), rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| op.forward(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(value, Op::Unary(op, a), rg, op.name())
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sin, a)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Cos, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }

    /// `sin(θ)/θ` evaluated at `θ² = a` (elementwise, `a ≥ 0`), smooth through zero.
    pub fn rot_coeff_a(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::RotA, a)
    }

    /// `(1 − cos θ)/θ²` evaluated at `θ² = a`, smooth through zero.
    pub fn rot_coeff_b(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::RotB, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())?;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect())?;
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg, "add_scalar")
    }

    /// `c − a`.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, c)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Affine layer `x · w + b` for `x: [n, k]`, `w: [k, m]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        let sb = self.shape(b);
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(Error::shape("linear", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (n, k, m) = (sx[0], sx[1], sw[1]);
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm(n, k, m, self.value(x).data(), (k, 1), self.value(w).data(), (m, 1), &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![n, m], out)?, Op::Linear { x, w, b }, rg, "linear")
    }

    /// Gabor activation `exp(−γ u²/2) · sin(ω u)` with per-column `γ` and `ω`
    /// (both rank-1, width of `u`'s last axis).
    pub fn gabor(&mut self, u: Var, gamma: Var, omega: Var) -> Result<Var> {
        let su = self.shape(u);
        let w = self.value(u).last_dim();
        if su.is_empty() || self.shape(gamma) != [w] || self.shape(omega) != [w] {
            return Err(Error::shape(
                "gabor",
                format!("u {su:?}, gamma {:?}, omega {:?}", self.shape(gamma), self.shape(omega)),
            ));
        }
        let uv = self.value(u).data();
        let gv = self.value(gamma).data();
        let ov = self.value(omega).data();
        let mut out = Vec::with_capacity(uv.len());
        for row in uv.chunks(w) {
            for c in 0..w {
                let x = row[c];
                out.push((-0.5 * gv[c] * x * x).exp() * (ov[c] * x).sin());
            }
        }
        let shape = su.to_vec();
        let rg = self.rg(u) || self.rg(gamma) || self.rg(omega);
        self.push(Tensor::new(shape, out)?, Op::Gabor { u, gamma, omega }, rg, "gabor")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg, "transpose")
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        self.push(Tensor::new(out_shape, out)?, Op::SumAxis { input: a, axis }, rg, "sum_axis")
    }

    /// `Σ |a|`.
    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.abs(a)?;
        self.sum(x)
    }

    /// `sqrt(Σ a²)`.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.square(a)?;
        let s = self.sum(x)?;
        self.sqrt(s)
    }

    /// Concatenation along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat",
                    format!("leading dims {lead:?} vs {s:?}"),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let x = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&x[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg, "concat")
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let w = *shape
            .last()
            .ok_or_else(|| Error::shape("slice", "cannot slice a scalar"))?;
        if start >= end || end > w {
            return Err(Error::shape("slice", format!("range {start}..{end} of width {w}")));
        }
        let rows = numel(&shape) / w;
        let x = self.value(a).data();
        let k = end - start;
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            out.extend_from_slice(&x[r * w + start..r * w + end]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = k;
        let rg = self.rg(a);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Slice { input: a, start, end },
            rg,
            "slice",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg, "reshape")
    }

    /// Exclusive cumulative product along the last axis:
    /// `out[.., k] = Π_{l<k} a[.., l]`, so `out[.., 0] = 1`.
    pub fn cumprod_exclusive(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::shape("cumprod", "cannot scan a scalar"));
        }
        let m = x.last_dim();
        let mut out = vec![0.0; x.len()];
        for (src, dst) in x.data().chunks(m).zip(out.chunks_mut(m)) {
            let mut acc = 1.0;
            for (s, d) in src.iter().zip(dst.iter_mut()) {
                *d = acc;
                acc *= s;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::CumprodExclusive(a), rg, "cumprod")
    }

    /// Rows of a rank-2 tensor selected by `index` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", format!("expected rank 2, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {n}")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(vec![index.len(), d], out)?,
            Op::GatherRows {
                input: a,
                index: index.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    /// Bilinear lookup of a constant `[H, W, C]` image at continuous pixel
    /// coordinates `coords: [n, 2]` given as `(u = column, v = row)`.
    /// Coordinates are clamped to the image; clamped axes carry no gradient.
    pub fn bilinear_sample(&mut self, image: &Tensor, coords: Var) -> Result<Var> {
        let is = image.shape();
        let cs = self.shape(coords);
        if is.len() != 3 || cs.len() != 2 || cs[1] != 2 {
            return Err(Error::shape("bilinear", format!("image {is:?}, coords {cs:?}")));
        }
        let (h, w, c) = (is[0], is[1], is[2]);
        let n = cs[0];
        let uv = self.value(coords).data();
        let img = image.data();
        let mut out = vec![0.0; n * c];
        for p in 0..n {
            let s = BilinearTap::new(uv[2 * p], uv[2 * p + 1], w, h);
            for ch in 0..c {
                out[p * c + ch] = s.sample(img, w, c, ch);
            }
        }
        let rg = self.rg(coords);
        self.push(
            Tensor::new(vec![n, c], out)?,
            Op::Bilinear {
                coords,
                image: image.clone(),
            },
            rg,
            "bilinear",
        )
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added into
    /// `store`; leaf gradients accumulate in the graph. Nothing is zeroed.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        let nodes = &self.nodes;

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    op: op_name(&node.op),
                });
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => leaf_grads.push((i, g)),
                Op::Binary(op, a, b) => {
                    backward_binary(*op, *a, *b, &node.value, &g, nodes, &mut grads);
                }
                Op::Unary(op, a) => {
                    let x = nodes[a.0].value.data();
                    let y = node.value.data();
                    with_grad(&mut grads, nodes, *a, |ga| {
                        for k in 0..g.len() {
                            ga[k] += g[k] * op.derivative(x[k], y[k]);
                        }
                    });
                }
                Op::Scale(a, c) => with_grad(&mut grads, nodes, *a, |ga| {
                    for (d, s) in ga.iter_mut().zip(&g) {
                        *d += c * s;
                    }
                }),
                Op::Offset(a) | Op::Reshape(a) => with_grad(&mut grads, nodes, *a, |ga| {
                    for (d, s) in ga.iter_mut().zip(&g) {
                        *d += s;
                    }
                }),
                Op::MatMul(a, b) => {
                    let sa = nodes[a.0].value.shape();
                    let (m, k) = (sa[0], sa[1]);
                    let n = nodes[b.0].value.shape()[1];
                    let bv = nodes[b.0].value.data();
                    let av = nodes[a.0].value.data();
                    // dA = G · Bᵀ
                    with_grad(&mut grads, nodes, *a, |ga| {
                        gemm(m, n, k, &g, (n, 1), bv, (1, n), ga);
                    });
                    // dB = Aᵀ · G
                    with_grad(&mut grads, nodes, *b, |gb| {
                        gemm(k, m, n, av, (1, k), &g, (n, 1), gb);
                    });
                }
                Op::Linear { x, w, b } => {
                    let sx = nodes[x.0].value.shape();
                    let (n, k) = (sx[0], sx[1]);
                    let m = nodes[w.0].value.shape()[1];
                    let wv = nodes[w.0].value.data();
                    let xv = nodes[x.0].value.data();
                    with_grad(&mut grads, nodes, *x, |gx| {
                        gemm(n, m, k, &g, (m, 1), wv, (1, m), gx);
                    });
                    with_grad(&mut grads, nodes, *w, |gw| {
                        gemm(k, n, m, xv, (1, k), &g, (m, 1), gw);
                    });
                    with_grad(&mut grads, nodes, *b, |gb| {
                        for row in g.chunks(m) {
                            for (d, s) in gb.iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                    });
                }
                Op::Gabor { u, gamma, omega } => {
                    let uv = nodes[u.0].value.data();
                    let gv = nodes[gamma.0].value.data();
                    let ov = nodes[omega.0].value.data();
                    let y = node.value.data();
                    let w = gv.len();
                    let need_u = nodes[u.0].requires_grad;
                    let need_p = nodes[gamma.0].requires_grad || nodes[omega.0].requires_grad;
                    let mut du = if need_u { vec![0.0; uv.len()] } else { Vec::new() };
                    let mut dg = vec![0.0; w];
                    let mut dom = vec![0.0; w];
                    for (r, row) in uv.chunks(w).enumerate() {
                        for c in 0..w {
                            let i = r * w + c;
                            let x = row[c];
                            let env = (-0.5 * gv[c] * x * x).exp();
                            let (sn, cs) = (ov[c] * x).sin_cos();
                            if need_u {
                                du[i] = g[i] * env * (ov[c] * cs - gv[c] * x * sn);
                            }
                            if need_p {
                                dg[c] += g[i] * (-0.5 * x * x * y[i]);
                                dom[c] += g[i] * env * x * cs;
                            }
                        }
                    }
                    with_grad(&mut grads, nodes, *u, |gu| {
                        for (d, s) in gu.iter_mut().zip(&du) {
                            *d += s;
                        }
                    });
                    with_grad(&mut grads, nodes, *gamma, |gg| {
                        for (d, s) in gg.iter_mut().zip(&dg) {
                            *d += s;
                        }
                    });
                    with_grad(&mut grads, nodes, *omega, |go| {
                        for (d, s) in go.iter_mut().zip(&dom) {
                            *d += s;
                        }
                    });
                }
                Op::Transpose(a) => {
                    let s = nodes[a.0].value.shape();
                    let (m, n) = (s[0], s[1]);
                    with_grad(&mut grads, nodes, *a, |ga| {
                        for i in 0..m {
                            for j in 0..n {
                                ga[i * n + j] += g[j * m + i];
                            }
                        }
                    });
                }
                Op::Sum(a) => with_grad(&mut grads, nodes, *a, |ga| {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }),
                Op::SumAxis { input, axis } => {
                    let shape = nodes[input.0].value.shape();
                    let outer = numel(&shape[..*axis]);
                    let len = shape[*axis];
                    let inner = numel(&shape[axis + 1..]);
                    with_grad(&mut grads, nodes, *input, |ga| {
                        for o in 0..outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for l in 0..len {
                                let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let total = node.value.last_dim();
                    let rows = node.value.len() / total;
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.last_dim();
                        with_grad(&mut grads, nodes, p, |gp| {
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                for (d, s) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        });
                        offset += w;
                    }
                }
                Op::Slice { input, start, end } => {
                    let w = nodes[input.0].value.last_dim();
                    let k = end - start;
                    let rows = node.value.len() / k;
                    with_grad(&mut grads, nodes, *input, |ga| {
                        for r in 0..rows {
                            let dst = &mut ga[r * w + start..r * w + end];
                            for (d, s) in dst.iter_mut().zip(&g[r * k..(r + 1) * k]) {
                                *d += s;
                            }
                        }
                    });
                }
                Op::CumprodExclusive(a) => {
                    let x = nodes[a.0].value.data();
                    let y = node.value.data();
                    let m = node.value.last_dim();
                    with_grad(&mut grads, nodes, *a, |ga| {
                        for r in 0..x.len() / m {
                            let (xs, ys, gs) = (&x[r * m..(r + 1) * m], &y[r * m..(r + 1) * m], &g[r * m..(r + 1) * m]);
                            // s = Σ_{k>l} g_k Π_{l<i<k} x_i, built from the back without division.
                            let mut s = 0.0;
                            for l in (0..m).rev() {
                                if l + 1 < m {
                                    s = gs[l + 1] + xs[l + 1] * s;
                                }
                                ga[r * m + l] += ys[l] * s;
                            }
                        }
                    });
                }
                Op::GatherRows { input, index } => {
                    let d = node.value.last_dim();
                    with_grad(&mut grads, nodes, *input, |ga| {
                        for (r, &i) in index.iter().enumerate() {
                            for c in 0..d {
                                ga[i * d + c] += g[r * d + c];
                            }
                        }
                    });
                }
                Op::Bilinear { coords, image } => {
                    let is = image.shape();
                    let (h, w, c) = (is[0], is[1], is[2]);
                    let uv = nodes[coords.0].value.data();
                    let img = image.data();
                    with_grad(&mut grads, nodes, *coords, |gc| {
                        for p in 0..uv.len() / 2 {
                            let s = BilinearTap::new(uv[2 * p], uv[2 * p + 1], w, h);
                            for ch in 0..c {
                                let (du, dv) = s.gradient(img, w, c, ch);
                                gc[2 * p] += g[p * c + ch] * du;
                                gc[2 * p + 1] += g[p * c + ch] * dv;
                            }
                        }
                    });
                }
            }
        }

        for (i, g) in leaf_grads {
            match self.nodes[i].op {
                Op::Param(id) => store.accumulate(id, &g),
                _ => {
                    let node = &mut self.nodes[i];
                    match node.grad.as_mut() {
                        Some(buf) => {
                            for (b, v) in buf.iter_mut().zip(&g) {
                                *b += v;
                            }
                        }
                        None => node.grad = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Binary(b, ..) => b.name(),
        Op::Unary(u, _) => u.name(),
        Op::Scale(..) => "scale",
        Op::Offset(_) => "add_scalar",
        Op::MatMul(..) => "matmul",
        Op::Linear { .. } => "linear",
        Op::Gabor { .. } => "gabor",
        Op::Transpose(_) => "transpose",
        Op::Sum(_) => "sum",
        Op::SumAxis { .. } => "sum_axis",
        Op::Concat(_) => "concat",
        Op::Slice { .. } => "slice",
        Op::Reshape(_) => "reshape",
        Op::CumprodExclusive(_) => "cumprod",
        Op::GatherRows { .. } => "gather_rows",
        Op::Bilinear { .. } => "bilinear",
    }
}

fn with_grad(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
    f(buf);
}

fn backward_binary(
    op: BinaryOp,
    a: Var,
    b: Var,
    out: &Tensor,
    g: &[f64],
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
) {
    let out_shape = out.shape();
    let av = nodes[a.0].value.data();
    let bv = nodes[b.0].value.data();
    let ma = mapping(nodes[a.0].value.shape(), out_shape);
    let mb = mapping(nodes[b.0].value.shape(), out_shape);
    let n = g.len();
    let y = out.data();
    with_grad(grads, nodes, a, |ga| match op {
        BinaryOp::Add | BinaryOp::Sub => scatter(ga, &ma, n, |k| g[k]),
        BinaryOp::Mul => scatter(ga, &ma, n, |k| g[k] * bv[mb.index(k)]),
        BinaryOp::Div => scatter(ga, &ma, n, |k| g[k] / bv[mb.index(k)]),
    });
    with_grad(grads, nodes, b, |gb| match op {
        BinaryOp::Add => scatter(gb, &mb, n, |k| g[k]),
        BinaryOp::Sub => scatter(gb, &mb, n, |k| -g[k]),
        BinaryOp::Mul => scatter(gb, &mb, n, |k| g[k] * av[ma.index(k)]),
        BinaryOp::Div => scatter(gb, &mb, n, |k| -g[k] * y[k] / bv[mb.index(k)]),
    });
}

#[inline]
fn scatter(dst: &mut [f64], map: &Mapping, n: usize, f: impl Fn(usize) -> f64) {
    match map {
        Mapping::Same => {
            for (k, d) in dst.iter_mut().enumerate() {
                *d += f(k);
            }
        }
        Mapping::Cycle(w) => {
            for base in (0..n).step_by(*w) {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d += f(base + j);
                }
            }
        }
        Mapping::Repeat(k) => {
            for (i, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in i * k..(i + 1) * k {
                    acc += f(j);
                }
                *d += acc;
            }
        }
        _ => {
            for k in 0..n {
                dst[map.index(k)] += f(k);
            }
        }
    }
}

/// `C += A · B` with explicit (row, column) strides for `A` and `B`; `C` is
/// dense row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every access stays inside `m×k`, `k×n` and `m×n` views whose
    // extents were checked against the buffers by the callers' shape checks.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Four-tap bilinear stencil at a clamped location.
struct BilinearTap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    u_inside: bool,
    v_inside: bool,
}

impl BilinearTap {
    fn new(u: f64, v: f64, w: usize, h: usize) -> Self {
        let (x0, x1, fx, u_inside) = Self::axis(u, w);
        let (y0, y1, fy, v_inside) = Self::axis(v, h);
        Self {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            u_inside,
            v_inside,
        }
    }

    fn axis(p: f64, len: usize) -> (usize, usize, f64, bool) {
        let max = (len - 1) as f64;
        let inside = p >= 0.0 && p <= max;
        let pc = p.clamp(0.0, max);
        if len == 1 {
            return (0, 0, 0.0, inside);
        }
        let i0 = (pc.floor() as usize).min(len - 2);
        (i0, i0 + 1, pc - i0 as f64, inside)
    }

    #[inline]
    fn corners(&self, img: &[f64], w: usize, c: usize, ch: usize) -> [f64; 4] {
        let at = |x: usize, y: usize| img[(y * w + x) * c + ch];
        [at(self.x0, self.y0), at(self.x1, self.y0), at(self.x0, self.y1), at(self.x1, self.y1)]
    }

    fn sample(&self, img: &[f64], w: usize, c: usize, ch: usize) -> f64 {
        let [i00, i10, i01, i11] = self.corners(img, w, c, ch);
        let (fx, fy) = (self.fx, self.fy);
        (1.0 - fx) * (1.0 - fy) * i00 + fx * (1.0 - fy) * i10 + (1.0 - fx) * fy * i01 + fx * fy * i11
    }

    fn gradient(&self, img: &[f64], w: usize, c: usize, ch: usize) -> (f64, f64) {
        let [i00, i10, i01, i11] = self.corners(img, w, c, ch);
        let (fx, fy) = (self.fx, self.fy);
        let du = if self.u_inside {
            (1.0 - fy) * (i10 - i00) + fy * (i11 - i01)
        } else {
            0.0
        };
        let dv = if self.v_inside {
            (1.0 - fx) * (i01 - i00) + fx * (i11 - i10)
        } else {
            0.0
        };
        (du, dv)
    }
}
