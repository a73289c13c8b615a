//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation applied to its variables in execution
//! order, so the node list is always a valid topological order. Calling
//! [`Tape::backward`] sweeps it once in reverse and freezes the tape.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::conv::{self, ConvGeometry, ConvSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Relu,
    Negate,
    Sigmoid,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Unary(UnaryKind, Var),
    Scale(Var, T),
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Concat(Vec<Var>),
    Slice {
        src: Var,
        start: usize,
    },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Cosine {
        a: Var,
        b: Var,
        eps: T,
    },
    BceLogits {
        logits: Var,
        targets: Tensor<T>,
    },
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        spec: ConvSpec,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    Deform {
        input: Var,
        offsets: Var,
        weight: Var,
        bias: Var,
        spec: ConvSpec,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Clone, Debug)]
pub struct GradientMap<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Tape<T> {
    id: usize,
    nodes: Vec<Node<T>>,
    frozen: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            frozen: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(Error::UnknownVar(v.index));
        }
        self.nodes.get(v.index).ok_or(Error::UnknownVar(v.index))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    pub fn dims(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.dims())
    }

    fn grad_flag(&self, vars: &[Var]) -> Result<bool> {
        let mut any = false;
        for &v in vars {
            any |= self.node(v)?.requires_grad;
        }
        Ok(any)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.frozen {
            return Err(Error::TapeConsumed);
        }
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(t.clone(), Op::Leaf, true, "tensor_from")
    }

    /// Registers a constant leaf; no gradient is reported for it.
    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(t.clone(), Op::Leaf, false, "tensor_from")
    }

    pub fn tensor_from(&mut self, dims: &[usize], values: Vec<T>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(dims, values)?;
        if requires_grad {
            self.param(&t)
        } else {
            self.constant(&t)
        }
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let x = self.value(a)?;
        let y = match kind {
            UnaryKind::Exp => x.map(T::exp),
            UnaryKind::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            UnaryKind::Negate => x.map(|v| -v),
            UnaryKind::Sigmoid => x.map(sigmoid),
            UnaryKind::Abs => x.map(T::abs),
        };
        let rg = self.grad_flag(&[a])?;
        let name = match kind {
            UnaryKind::Exp => "exp",
            UnaryKind::Relu => "relu",
            UnaryKind::Negate => "negate",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Abs => "abs",
        };
        self.push(y, Op::Unary(kind, a), rg, name)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn negate(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Negate, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let y = self.value(a)?.map(|v| v * s);
        let rg = self.grad_flag(&[a])?;
        self.push(y, Op::Scale(a, s), rg, "scale")
    }

    /// Elementwise `a ∘ b`.
    ///
    /// `b` must either match `a` exactly or be a `[1, h, w]` per-pixel map
    /// applied to every channel of a `[c, h, w]` tensor.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a)?, self.value(b)?);
        let broadcast = match (x.dims(), y.dims()) {
            (l, r) if l == r => false,
            ([_, h, w], [1, h2, w2]) if h == h2 && w == w2 => true,
            (l, r) => {
                return Err(Error::ShapeMismatch {
                    op: "binary_elementwise",
                    left: l.to_vec(),
                    right: r.to_vec(),
                })
            }
        };
        if kind == BinaryKind::Div && y.data().iter().any(|v| *v == T::zero()) {
            return Err(Error::DivisionByZero);
        }
        let plane = y.len();
        let f = |p: T, q: T| match kind {
            BinaryKind::Add => p + q,
            BinaryKind::Sub => p - q,
            BinaryKind::Mul => p * q,
            BinaryKind::Div => p / q,
        };
        let out: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &p)| f(p, y.data()[if broadcast { i % plane } else { i }]))
            .collect();
        let value = Tensor::from_parts(x.dims().to_vec(), out);
        let rg = self.grad_flag(&[a, b])?;
        self.push(value, Op::Binary { kind, a, b, broadcast }, rg, "binary_elementwise")
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tail = self.dims(*first)?[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p)?;
            if t.rank() == 0 || t.dims()[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: self.dims(*first)?.to_vec(),
                    right: t.dims().to_vec(),
                });
            }
            lead += t.dims()[0];
            data.extend_from_slice(t.data());
        }
        let mut dims = vec![lead];
        dims.extend(tail);
        let rg = self.grad_flag(parts)?;
        self.push(Tensor::from_parts(dims, data), Op::Concat(parts.to_vec()), rg, "concat_channels")
    }

    /// `concat_channels(a, b)` for `[c1,h,w]` and `[c2,h,w]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        for v in [a, b] {
            if self.dims(v)?.len() != 3 {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: self.dims(a)?.to_vec(),
                    right: self.dims(b)?.to_vec(),
                });
            }
        }
        self.concat(&[a, b])
    }

    /// Leading-axis slice `[start, start+len)`.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src)?;
        let lead = *t.dims().first().ok_or_else(|| Error::invalid("slice of a scalar"))?;
        if len == 0 || start + len > lead {
            return Err(Error::invalid(format!("slice {start}..{} of leading extent {lead}", start + len)));
        }
        let inner = t.len() / lead;
        let mut dims = t.dims().to_vec();
        dims[0] = len;
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let rg = self.grad_flag(&[src])?;
        self.push(Tensor::from_parts(dims, data), Op::Slice { src, start }, rg, "slice")
    }

    /// Softmax across the leading axis of `[m, h, w]`, independently per pixel.
    pub fn softmax_over_leading_axis(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a)?;
        let (m, h, w) = conv::chw(x, "softmax_over_leading_axis")?;
        let plane = h * w;
        let mut out = vec![T::zero(); m * plane];
        for p in 0..plane {
            let max = (0..m).map(|k| x.data()[k * plane + p]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..m {
                let e = (x.data()[k * plane + p] - max).exp();
                out[k * plane + p] = e;
                total = total + e;
            }
            for k in 0..m {
                out[k * plane + p] = out[k * plane + p] / total;
            }
        }
        let value = Tensor::from_parts(vec![m, h, w], out);
        let rg = self.grad_flag(&[a])?;
        self.push(value, Op::Softmax(a), rg, "softmax_over_leading_axis")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a)?.sum();
        let rg = self.grad_flag(&[a])?;
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a)?;
        let s = x.sum() / T::from_usize(x.len()).unwrap();
        let rg = self.grad_flag(&[a])?;
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Per-pixel cosine similarity across channels of two `[c,h,w]` tensors,
    /// `⟨a,b⟩ / (‖a‖‖b‖ + eps)`, as a `[1,h,w]` map.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let (x, y) = (self.value(a)?, self.value(b)?);
        if x.dims() != y.dims() {
            return Err(Error::ShapeMismatch {
                op: "cosine_similarity",
                left: x.dims().to_vec(),
                right: y.dims().to_vec(),
            });
        }
        let (c, h, w) = conv::chw(x, "cosine_similarity")?;
        let plane = h * w;
        let out: Vec<T> = (0..plane)
            .map(|p| {
                let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
                for ch in 0..c {
                    let (u, v) = (x.data()[ch * plane + p], y.data()[ch * plane + p]);
                    dot = dot + u * v;
                    na = na + u * u;
                    nb = nb + v * v;
                }
                dot / (na.sqrt() * nb.sqrt() + eps)
            })
            .collect();
        let rg = self.grad_flag(&[a, b])?;
        self.push(
            Tensor::from_parts(vec![1, h, w], out),
            Op::Cosine { a, b, eps },
            rg,
            "cosine_similarity",
        )
    }

    /// Elementwise binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let x = self.value(logits)?;
        if x.dims() != targets.dims() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                left: x.dims().to_vec(),
                right: targets.dims().to_vec(),
            });
        }
        let out = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let value = Tensor::from_parts(x.dims().to_vec(), out);
        let rg = self.grad_flag(&[logits])?;
        self.push(
            value,
            Op::BceLogits {
                logits,
                targets: targets.clone(),
            },
            rg,
            "bce_with_logits",
        )
    }

    /// Standard 2D convolution with zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: &ConvSpec) -> Result<Var> {
        let (out, geom) = conv::conv2d_forward(self.value(input)?, self.value(weight)?, self.value(bias)?, spec)?;
        let rg = self.grad_flag(&[input, weight, bias])?;
        self.push(
            out.output,
            Op::Conv {
                input,
                weight,
                bias,
                spec: *spec,
                geom,
                cols: out.cols,
            },
            rg,
            "conv2d",
        )
    }

    /// Deformable 2D convolution; `offsets` is a `[2N, h_out, w_out]` field
    /// shared by every input channel.
    pub fn deform_conv2d(&mut self, input: Var, offsets: Var, weight: Var, bias: Var, spec: &ConvSpec) -> Result<Var> {
        let (out, geom) = conv::deform_forward(
            self.value(input)?,
            self.value(offsets)?,
            self.value(weight)?,
            self.value(bias)?,
            spec,
        )?;
        let rg = self.grad_flag(&[input, offsets, weight, bias])?;
        self.push(
            out.output,
            Op::Deform {
                input,
                offsets,
                weight,
                bias,
                spec: *spec,
                geom,
                cols: out.cols,
            },
            rg,
            "deform_conv2d",
        )
    }

    /// Offset-predicting convolution: plain `conv2d` with `2N` outputs for the
    /// deformable layer `deform_spec`, no activation.
    pub fn offset_conv(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        spec: &ConvSpec,
        deform_spec: &ConvSpec,
    ) -> Result<Var> {
        if spec.out_channels != 2 * deform_spec.taps() {
            return Err(Error::invalid(format!(
                "offset convolution must produce {} channels, has {}",
                2 * deform_spec.taps(),
                spec.out_channels
            )));
        }
        self.conv2d(input, weight, bias, spec)
    }

    /// Gradients of the scalar `loss` with respect to every differentiable leaf.
    ///
    /// Consumes the tape: later operations and a second backward pass fail.
    pub fn backward(&mut self, loss: Var) -> Result<GradientMap<T>> {
        if self.frozen {
            return Err(Error::TapeConsumed);
        }
        let dims = self.dims(loss)?.to_vec();
        if !dims.is_empty() {
            return Err(Error::NotScalar(dims));
        }
        self.frozen = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(vec![T::one()]);
        let mut out = HashMap::new();

        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let send = |v: Var, contrib: Vec<T>, grads: &mut Vec<Option<Vec<T>>>| {
                if !self.nodes[v.index].requires_grad {
                    return;
                }
                match grads[v.index].as_mut() {
                    Some(acc) => add_into(acc, &contrib),
                    None => grads[v.index] = Some(contrib),
                }
            };
            let val = |v: Var| self.nodes[v.index].value.data();
            let wants = |v: Var| self.nodes[v.index].requires_grad;
            match &node.op {
                Op::Leaf => {
                    out.insert(
                        Var { tape: self.id, index: idx },
                        Tensor::from_parts(node.value.dims().to_vec(), g),
                    );
                }
                Op::Unary(kind, a) => {
                    let x = val(*a);
                    let y = node.value.data();
                    let d: Vec<T> = match kind {
                        UnaryKind::Exp => g.iter().zip(y).map(|(&g, &y)| g * y).collect(),
                        UnaryKind::Relu => g
                            .iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                            .collect(),
                        UnaryKind::Negate => g.iter().map(|&g| -g).collect(),
                        UnaryKind::Sigmoid => g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect(),
                        UnaryKind::Abs => g
                            .iter()
                            .zip(x)
                            .map(|(&g, &x)| {
                                if x > T::zero() {
                                    g
                                } else if x < T::zero() {
                                    -g
                                } else {
                                    T::zero()
                                }
                            })
                            .collect(),
                    };
                    send(*a, d, &mut grads);
                }
                Op::Scale(a, s) => {
                    let d = g.iter().map(|&g| g * *s).collect();
                    send(*a, d, &mut grads);
                }
                Op::Binary { kind, a, b, broadcast } => {
                    let (x, y) = (val(*a), val(*b));
                    let plane = y.len();
                    let yb = |i: usize| y[if *broadcast { i % plane } else { i }];
                    if wants(*a) {
                        let da: Vec<T> = match kind {
                            BinaryKind::Add | BinaryKind::Sub => g.clone(),
                            BinaryKind::Mul => g.iter().enumerate().map(|(i, &g)| g * yb(i)).collect(),
                            BinaryKind::Div => g.iter().enumerate().map(|(i, &g)| g / yb(i)).collect(),
                        };
                        send(*a, da, &mut grads);
                    }
                    if wants(*b) {
                        let mut db = vec![T::zero(); plane];
                        for (i, &g) in g.iter().enumerate() {
                            let term = match kind {
                                BinaryKind::Add => g,
                                BinaryKind::Sub => -g,
                                BinaryKind::Mul => g * x[i],
                                BinaryKind::Div => -g * x[i] / (yb(i) * yb(i)),
                            };
                            let j = if *broadcast { i % plane } else { i };
                            db[j] = db[j] + term;
                        }
                        send(*b, db, &mut grads);
                    }
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.nodes[p.index].value.len();
                        send(p, g[at..at + n].to_vec(), &mut grads);
                        at += n;
                    }
                }
                Op::Slice { src, start } => {
                    let s = &self.nodes[src.index].value;
                    let inner = s.len() / s.dims()[0];
                    let mut d = vec![T::zero(); s.len()];
                    d[start * inner..start * inner + g.len()].copy_from_slice(&g);
                    send(*src, d, &mut grads);
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let (m, h, w) = (node.value.dims()[0], node.value.dims()[1], node.value.dims()[2]);
                    let plane = h * w;
                    let mut d = vec![T::zero(); y.len()];
                    for p in 0..plane {
                        let dot: T = (0..m).map(|k| g[k * plane + p] * y[k * plane + p]).sum();
                        for k in 0..m {
                            let i = k * plane + p;
                            d[i] = y[i] * (g[i] - dot);
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.index].value.len();
                    send(*a, vec![g[0]; n], &mut grads);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.index].value.len();
                    send(*a, vec![g[0] / T::from_usize(n).unwrap(); n], &mut grads);
                }
                Op::Cosine { a, b, eps } => {
                    let (x, y) = (val(*a), val(*b));
                    let c = self.nodes[a.index].value.dims()[0];
                    let plane = g.len();
                    let mut da = vec![T::zero(); x.len()];
                    let mut db = vec![T::zero(); y.len()];
                    for p in 0..plane {
                        let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
                        for ch in 0..c {
                            let (u, v) = (x[ch * plane + p], y[ch * plane + p]);
                            dot = dot + u * v;
                            na = na + u * u;
                            nb = nb + v * v;
                        }
                        let (na, nb) = (na.sqrt(), nb.sqrt());
                        let den = na * nb + *eps;
                        let gp = g[p];
                        // d(dot/den) = (d dot)/den − dot·(d den)/den²
                        let ra = if na > T::zero() { nb / na } else { T::zero() };
                        let rb = if nb > T::zero() { na / nb } else { T::zero() };
                        let k = dot / (den * den);
                        for ch in 0..c {
                            let i = ch * plane + p;
                            da[i] = gp * (y[i] / den - k * ra * x[i]);
                            db[i] = gp * (x[i] / den - k * rb * y[i]);
                        }
                    }
                    if wants(*a) {
                        send(*a, da, &mut grads);
                    }
                    if wants(*b) {
                        send(*b, db, &mut grads);
                    }
                }
                Op::BceLogits { logits, targets } => {
                    let x = val(*logits);
                    let d = g
                        .iter()
                        .zip(x)
                        .zip(targets.data())
                        .map(|((&g, &z), &t)| g * (sigmoid(z) - t))
                        .collect();
                    send(*logits, d, &mut grads);
                }
                Op::Conv {
                    input,
                    weight,
                    bias,
                    spec,
                    geom,
                    cols,
                } => {
                    let k = geom.c * spec.taps();
                    let hw = geom.ho * geom.wo;
                    let cg = conv::column_backward(&g, cols, val(*weight), spec.out_channels, k, hw, wants(*input));
                    if let Some(dcols) = cg.dcols {
                        send(*input, conv::conv2d_input_grad(&dcols, geom, spec), &mut grads);
                    }
                    send(*weight, cg.dweight, &mut grads);
                    send(*bias, cg.dbias, &mut grads);
                }
                Op::Deform {
                    input,
                    offsets,
                    weight,
                    bias,
                    spec,
                    geom,
                    cols,
                } => {
                    let k = geom.c * spec.taps();
                    let hw = geom.ho * geom.wo;
                    let need = wants(*input) || wants(*offsets);
                    let cg = conv::column_backward(&g, cols, val(*weight), spec.out_channels, k, hw, need);
                    if let Some(dcols) = cg.dcols {
                        let (di, doff) = conv::deform_input_offset_grads(
                            &dcols,
                            val(*input),
                            val(*offsets),
                            geom,
                            spec,
                            wants(*input),
                            wants(*offsets),
                        );
                        if let Some(di) = di {
                            send(*input, di, &mut grads);
                        }
                        if let Some(doff) = doff {
                            send(*offsets, doff, &mut grads);
                        }
                    }
                    send(*weight, cg.dweight, &mut grads);
                    send(*bias, cg.dbias, &mut grads);
                }
            }
        }

        // leaves never reached still get an explicit zero gradient
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out.entry(Var { tape: self.id, index: idx })
                    .or_insert_with(|| Tensor::zeros(node.value.dims()));
            }
        }
        Ok(GradientMap { grads: out })
    }
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(dims, v).unwrap()
    }

    #[test]
    fn unary_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(&t(&[1], &[0.0])).unwrap();
        let e = tape.exp(z).unwrap();
        assert_eq!(tape.value(e).unwrap().data(), &[1.0]);
        let o = tape.constant(&t(&[1], &[1.0])).unwrap();
        let e1 = tape.exp(o).unwrap();
        assert_eq!(tape.value(e1).unwrap().item(), std::f64::consts::E);
        let r = tape.constant(&t(&[2], &[-1.0, 2.0])).unwrap();
        let r = tape.relu(r).unwrap();
        assert_eq!(tape.value(r).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let big = tape.constant(&t(&[1], &[1000.0])).unwrap();
        assert!(matches!(tape.exp(big), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn binary_and_broadcast() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&t(&[2], &[1.0, 2.0])).unwrap();
        let b = tape.constant(&t(&[2], &[3.0, 4.0])).unwrap();
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[4.0, 6.0]);

        let ones = tape.constant(&Tensor::full(&[2, 2, 2], 1.0)).unwrap();
        let half = tape.constant(&Tensor::full(&[1, 2, 2], 0.5)).unwrap();
        let m = tape.mul(ones, half).unwrap();
        assert!(tape.value(m).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(tape.mul(half, ones).is_err());
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&t(&[1], &[1.0])).unwrap();
        let b = tape.constant(&t(&[1], &[0.0])).unwrap();
        assert!(matches!(tape.div(a, b), Err(Error::DivisionByZero)));
    }

    #[test]
    fn concat_and_slice_recover_inputs() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::full(&[1, 2, 2], 1.0)).unwrap();
        let b = tape.constant(&Tensor::zeros(&[1, 2, 2])).unwrap();
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.dims(c).unwrap(), &[2, 2, 2]);
        assert_eq!(tape.value(c).unwrap().data(), &[1., 1., 1., 1., 0., 0., 0., 0.]);
        let aa = tape.concat_channels(a, a).unwrap();
        assert_eq!(tape.dims(aa).unwrap()[0], 2);
        let s = tape.slice(c, 1, 1).unwrap();
        assert_eq!(tape.value(s).unwrap(), tape.value(b).unwrap());

        let tall = tape.constant(&Tensor::zeros(&[1, 3, 2])).unwrap();
        assert!(tape.concat_channels(a, tall).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::<f64>::new();
        let eq = tape.constant(&Tensor::full(&[3, 1, 2], 0.7)).unwrap();
        let s = tape.softmax_over_leading_axis(eq).unwrap();
        for &v in tape.value(s).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let one = tape.constant(&t(&[1, 1, 2], &[-3.0, 8.0])).unwrap();
        let s = tape.softmax_over_leading_axis(one).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[1.0, 1.0]);
        let two = tape.constant(&t(&[2, 1, 1], &[0.0, 3f64.ln()])).unwrap();
        let s = tape.softmax_over_leading_axis(two).unwrap();
        let v = tape.value(s).unwrap().data().to_vec();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&t(&[2, 3], &[1., -2., 3., 0.5, 0., 9.])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut tape = Tape::<f64>::new();
        let x = tape.param(&t(&[1], &[3.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
        assert!(matches!(tape.sum(x), Err(Error::TapeConsumed)));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&t(&[3], &[-1.0, 0.0, 1.0])).unwrap();
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn foreign_vars_are_rejected() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.param(&t(&[1], &[1.0])).unwrap();
        assert!(matches!(b.exp(x), Err(Error::UnknownVar(_))));
    }

    #[test]
    fn bce_at_even_odds_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let z = tape.param(&Tensor::zeros(&[4])).unwrap();
        let l = tape.bce_with_logits(z, &t(&[4], &[0.0, 1.0, 0.0, 1.0])).unwrap();
        let m = tape.mean(l).unwrap();
        assert!((tape.value(m).unwrap().item() - 2f64.ln()).abs() < 1e-15);
    }
}
