//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive application appends a node to a [`Tape`]; operands always
//! precede the node that consumes them, so a single reverse sweep over the
//! node list is a valid topological order. Values are [`Tensor`]s and a
//! [`Var`] is an index into the tape.
//!
//! ```
//! use care_core::autodiff::{ParamId, Tape};
//! use care_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(ParamId(0), Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(ParamId(0)).unwrap().item(), Some(6.0));
//! ```

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Identifies a trainable leaf across tapes (a model's parameter slot).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    ScalarMul(f32),
    ScalarAdd(f32),
    MatMul,
    /// Operands: input `B×C×H×W`, weight `O×C×kh×kw`, optional bias `[O]`.
    Conv2d { stride: usize, padding: usize },
    Relu,
    Sigmoid,
    Exp,
    /// Mean over every element (`None`) or along one axis.
    Mean { axis: Option<usize> },
    Sum,
    Square,
    Abs,
    /// Concatenation along axis 1 (channels).
    Concat,
    Upsample2x,
    MaxPool2x,
    Clamp { min: f32, max: f32 },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::ScalarMul(_) => "scalar_mul",
            Primitive::ScalarAdd(_) => "scalar_add",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Mean { .. } => "mean",
            Primitive::Sum => "sum",
            Primitive::Square => "square",
            Primitive::Abs => "abs",
            Primitive::Concat => "concat",
            Primitive::Upsample2x => "upsample2x",
            Primitive::MaxPool2x => "maxpool2x",
            Primitive::Clamp { .. } => "clamp",
        }
    }
}

#[derive(Debug)]
enum Saved {
    Nothing,
    Conv(ConvGeom),
    Argmax(Vec<usize>),
}

#[derive(Debug)]
enum Origin {
    Leaf(Option<ParamId>),
    Op {
        prim: Primitive,
        inputs: Vec<Var>,
        saved: Saved,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every parameter leaf on a tape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id, grad);
    }

    /// Global L2 norm over every stored gradient.
    pub fn norm(&self) -> f64 {
        let sq: f64 = self.map.values().flat_map(|t| t.data()).map(|&g| g as f64 * g as f64).sum();
        libm::sqrt(sq)
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f32) -> f64 {
        let n = self.norm();
        if n > max_norm as f64 {
            let k = (max_norm as f64 / n) as f32;
            for t in self.map.values_mut() {
                t.data_mut().iter_mut().for_each(|g| *g *= k);
            }
        }
        n
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Origin::Leaf(None), false)
    }

    /// A trainable leaf; `backward` reports its gradient under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Origin::Leaf(Some(id)), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the current value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, origin: Origin, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            origin,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Applies `prim` to `operands`, recording a tape entry.
    pub fn apply(&mut self, prim: Primitive, operands: &[Var]) -> Result<Var> {
        let op = prim.name();
        let arity_ok = match prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul => operands.len() == 2,
            Primitive::Conv2d { .. } => operands.len() == 2 || operands.len() == 3,
            Primitive::Concat => !operands.is_empty(),
            _ => operands.len() == 1,
        };
        if !arity_ok {
            return Err(Error::InvalidShape {
                op,
                msg: alloc::format!("wrong operand count {}", operands.len()),
            });
        }
        let (value, saved) = self.forward(prim, operands)?;
        value.check_finite(op)?;
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            value,
            Origin::Op {
                prim,
                inputs: operands.to_vec(),
                saved,
            },
            requires_grad,
        ))
    }

    fn forward(&self, prim: Primitive, operands: &[Var]) -> Result<(Tensor, Saved)> {
        let op = prim.name();
        let x = self.value(operands[0]);
        let unary = |f: &dyn Fn(f32) -> f32| Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect());
        let out = match prim {
            Primitive::Add => binary(op, x, self.value(operands[1]), |a, b| a + b)?,
            Primitive::Sub => binary(op, x, self.value(operands[1]), |a, b| a - b)?,
            Primitive::Mul => binary(op, x, self.value(operands[1]), |a, b| a * b)?,
            Primitive::ScalarMul(k) => unary(&|v| v * k),
            Primitive::ScalarAdd(k) => unary(&|v| v + k),
            Primitive::Relu => unary(&|v| if v > 0.0 { v } else { 0.0 }),
            Primitive::Sigmoid => unary(&sigmoid),
            Primitive::Exp => unary(&libm::expf),
            Primitive::Square => unary(&|v| v * v),
            Primitive::Abs => unary(&libm::fabsf),
            Primitive::Clamp { min, max } => {
                if !(min <= max) {
                    return Err(Error::InvalidShape {
                        op,
                        msg: alloc::format!("clamp bounds {min} > {max}"),
                    });
                }
                unary(&|v| v.clamp(min, max))
            }
            Primitive::MatMul => {
                let y = self.value(operands[1]);
                if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
                    return Err(mismatch(op, x, y));
                }
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                Tensor::from_parts(vec![m, n], kernels::matmul(x.data(), y.data(), m, k, n))
            }
            Primitive::Conv2d { stride, padding } => {
                let w = self.value(operands[1]);
                let geom = conv_geom(op, x, w, stride, padding)?;
                let bias = match operands.get(2) {
                    Some(&b) => {
                        let b = self.value(b);
                        if b.shape() != [geom.out_ch] {
                            return Err(mismatch(op, w, b));
                        }
                        Some(b.data())
                    }
                    None => None,
                };
                let data = kernels::conv2d_forward(&geom, x.data(), w.data(), bias);
                let t = Tensor::from_parts(vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()], data);
                return Ok((t, Saved::Conv(geom)));
            }
            Primitive::Mean { axis: None } => {
                let s: f64 = x.data().iter().map(|&v| v as f64).sum();
                Tensor::scalar((s / x.numel().max(1) as f64) as f32)
            }
            Primitive::Mean { axis: Some(axis) } => {
                if axis >= x.rank() {
                    return Err(Error::InvalidShape {
                        op,
                        msg: alloc::format!("axis {axis} out of range for shape {:?}", x.shape()),
                    });
                }
                let (outer, len, inner) = split_axis(x.shape(), axis);
                let mut out = vec![0.0f32; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let s: f64 = (0..len).map(|k| x.data()[(o * len + k) * inner + i] as f64).sum();
                        out[o * inner + i] = (s / len.max(1) as f64) as f32;
                    }
                }
                let mut shape = x.shape().to_vec();
                shape.remove(axis);
                Tensor::from_parts(shape, out)
            }
            Primitive::Sum => {
                let s: f64 = x.data().iter().map(|&v| v as f64).sum();
                Tensor::scalar(s as f32)
            }
            Primitive::Concat => {
                let first = x.shape();
                if first.len() < 2 {
                    return Err(Error::InvalidShape {
                        op,
                        msg: alloc::format!("needs rank >= 2, got {first:?}"),
                    });
                }
                let mut channels = 0;
                for &v in operands {
                    let s = self.value(v).shape();
                    if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                        return Err(mismatch(op, x, self.value(v)));
                    }
                    channels += s[1];
                }
                let inner: usize = first[2..].iter().product();
                let mut data = Vec::with_capacity(first[0] * channels * inner);
                for b in 0..first[0] {
                    for &v in operands {
                        let t = self.value(v);
                        let chunk = t.shape()[1] * inner;
                        data.extend_from_slice(&t.data()[b * chunk..][..chunk]);
                    }
                }
                let mut shape = first.to_vec();
                shape[1] = channels;
                Tensor::from_parts(shape, data)
            }
            Primitive::Upsample2x => {
                let [b, c, h, w] = rank4(op, x)?;
                let mut data = vec![0.0f32; b * c * 4 * h * w];
                for p in 0..b * c {
                    let src = &x.data()[p * h * w..][..h * w];
                    let dst = &mut data[p * 4 * h * w..][..4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                        }
                    }
                }
                Tensor::from_parts(vec![b, c, 2 * h, 2 * w], data)
            }
            Primitive::MaxPool2x => {
                let [b, c, h, w] = rank4(op, x)?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::InvalidShape {
                        op,
                        msg: alloc::format!("spatial extents must be even, got {h}x{w}"),
                    });
                }
                let (oh, ow) = (h / 2, w / 2);
                let mut data = vec![0.0f32; b * c * oh * ow];
                let mut argmax = vec![0usize; data.len()];
                for p in 0..b * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut best = p * h * w + 2 * y * w + 2 * xx;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = p * h * w + (2 * y + dy) * w + 2 * xx + dx;
                                if x.data()[idx] > x.data()[best] {
                                    best = idx;
                                }
                            }
                            let o = p * oh * ow + y * ow + xx;
                            data[o] = x.data()[best];
                            argmax[o] = best;
                        }
                    }
                }
                return Ok((Tensor::from_parts(vec![b, c, oh, ow], data), Saved::Argmax(argmax)));
            }
        };
        Ok((out, Saved::Nothing))
    }

    /// Reverse sweep from a scalar output. Every parameter leaf on the tape gets
    /// an entry; leaves the output does not depend on receive zeros.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let out_shape = self.value(output).shape();
        if !out_shape.is_empty() {
            return Err(Error::NotScalar(out_shape.to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Origin::Op { prim, inputs, saved } = &node.origin else {
                continue;
            };
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.local_grads(*prim, inputs, saved, &node.value, &g);
            for (input, contrib) in inputs.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Origin::Leaf(Some(id)) = node.origin {
                let data = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                let t = Tensor::from_parts(node.value.shape().to_vec(), data);
                t.check_finite("backward")?;
                match out.map.get_mut(&id) {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                    None => {
                        out.map.insert(id, t);
                    }
                }
            }
        }
        Ok(out)
    }

    fn local_grads(
        &self,
        prim: Primitive,
        inputs: &[Var],
        saved: &Saved,
        out: &Tensor,
        g: &[f32],
    ) -> Vec<Option<Vec<f32>>> {
        let needs = |i: usize| self.nodes[inputs[i].0].requires_grad;
        let val = |i: usize| self.value(inputs[i]);
        let map1 = |f: &dyn Fn(usize, f32) -> f32| -> Vec<Option<Vec<f32>>> {
            vec![Some(g.iter().enumerate().map(|(i, &gv)| f(i, gv)).collect())]
        };
        match prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let (a, b) = (val(0), val(1));
                let sign = if prim == Primitive::Sub { -1.0 } else { 1.0 };
                let ga = needs(0).then(|| {
                    let local: Vec<f32> = if prim == Primitive::Mul {
                        g.iter().enumerate().map(|(i, &gv)| gv * bcast(b, i)).collect()
                    } else {
                        g.to_vec()
                    };
                    reduce_to(a, local)
                });
                let gb = needs(1).then(|| {
                    let local: Vec<f32> = if prim == Primitive::Mul {
                        g.iter().enumerate().map(|(i, &gv)| gv * bcast(a, i)).collect()
                    } else {
                        g.iter().map(|&gv| sign * gv).collect()
                    };
                    reduce_to(b, local)
                });
                vec![ga, gb]
            }
            Primitive::ScalarMul(k) => map1(&|_, gv| gv * k),
            Primitive::ScalarAdd(_) => vec![Some(g.to_vec())],
            Primitive::Relu => {
                let x = val(0).data();
                map1(&|i, gv| if x[i] > 0.0 { gv } else { 0.0 })
            }
            Primitive::Sigmoid => {
                let s = out.data();
                map1(&|i, gv| gv * s[i] * (1.0 - s[i]))
            }
            Primitive::Exp => {
                let e = out.data();
                map1(&|i, gv| gv * e[i])
            }
            Primitive::Square => {
                let x = val(0).data();
                map1(&|i, gv| 2.0 * x[i] * gv)
            }
            Primitive::Abs => {
                let x = val(0).data();
                map1(&|i, gv| {
                    if x[i] > 0.0 {
                        gv
                    } else if x[i] < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })
            }
            Primitive::Clamp { min, max } => {
                let x = val(0).data();
                map1(&|i, gv| if x[i] >= min && x[i] <= max { gv } else { 0.0 })
            }
            Primitive::Mean { axis: None } => {
                let n = val(0).numel().max(1) as f32;
                vec![Some(vec![g[0] / n; val(0).numel()])]
            }
            Primitive::Mean { axis: Some(axis) } => {
                let x = val(0);
                let (outer, len, inner) = split_axis(x.shape(), axis);
                let mut gx = vec![0.0f32; x.numel()];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx[(o * len + k) * inner + i] = g[o * inner + i] / len as f32;
                        }
                    }
                }
                vec![Some(gx)]
            }
            Primitive::Sum => vec![Some(vec![g[0]; val(0).numel()])],
            Primitive::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = needs(0).then(|| kernels::matmul(g, &kernels::transpose(b.data(), k, n), m, n, k));
                let gb = needs(1).then(|| kernels::matmul(&kernels::transpose(a.data(), m, k), g, k, m, n));
                vec![ga, gb]
            }
            Primitive::Conv2d { .. } => {
                let Saved::Conv(geom) = saved else {
                    unreachable!("conv2d node without geometry")
                };
                let (gx, gw, gb) = kernels::conv2d_backward(geom, val(0).data(), val(1).data(), g, needs(0), needs(1));
                let mut v = vec![needs(0).then_some(gx), needs(1).then_some(gw)];
                if inputs.len() == 3 {
                    v.push(needs(2).then_some(gb));
                }
                v
            }
            Primitive::Concat => {
                let batch = out.shape()[0];
                let inner: usize = out.shape()[2..].iter().product();
                let mut parts: Vec<Vec<f32>> = inputs.iter().map(|v| Vec::with_capacity(self.value(*v).numel())).collect();
                let mut offset = 0;
                for _ in 0..batch {
                    for (k, v) in inputs.iter().enumerate() {
                        let chunk = self.value(*v).shape()[1] * inner;
                        parts[k].extend_from_slice(&g[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                parts.into_iter().enumerate().map(|(k, p)| needs(k).then_some(p)).collect()
            }
            Primitive::Upsample2x => {
                let x = val(0);
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let planes = x.shape()[0] * x.shape()[1];
                let mut gx = vec![0.0f32; x.numel()];
                for p in 0..planes {
                    let src = &g[p * 4 * h * w..][..4 * h * w];
                    let dst = &mut gx[p * h * w..][..h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                vec![Some(gx)]
            }
            Primitive::MaxPool2x => {
                let Saved::Argmax(argmax) = saved else {
                    unreachable!("maxpool node without argmax")
                };
                let mut gx = vec![0.0f32; val(0).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
                vec![Some(gx)]
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scalar_mul(&mut self, a: Var, k: f32) -> Result<Var> {
        self.apply(Primitive::ScalarMul(k), &[a])
    }

    pub fn scalar_add(&mut self, a: Var, k: f32) -> Result<Var> {
        self.apply(Primitive::ScalarAdd(k), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let prim = Primitive::Conv2d { stride, padding };
        match bias {
            Some(b) => self.apply(prim, &[x, w, b]),
            None => self.apply(prim, &[x, w]),
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean { axis: None }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Mean { axis: Some(axis) }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Abs, &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, parts)
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Upsample2x, &[a])
    }

    pub fn maxpool2x(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::MaxPool2x, &[a])
    }

    pub fn clamp(&mut self, a: Var, min: f32, max: f32) -> Result<Var> {
        self.apply(Primitive::Clamp { min, max }, &[a])
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::expf(-v))
    } else {
        let e = libm::expf(v);
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Equal shapes, or one side rank-0.
fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    } else if b.is_scalar() {
        let y = b.data()[0];
        Ok(Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x, y)).collect()))
    } else if a.is_scalar() {
        let x = a.data()[0];
        Ok(Tensor::from_parts(b.shape().to_vec(), b.data().iter().map(|&y| f(x, y)).collect()))
    } else {
        Err(mismatch(op, a, b))
    }
}

fn bcast(t: &Tensor, i: usize) -> f32 {
    if t.is_scalar() {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// Sums a broadcast gradient back down to a scalar operand.
fn reduce_to(target: &Tensor, local: Vec<f32>) -> Vec<f32> {
    if target.is_scalar() && local.len() != 1 {
        vec![local.iter().map(|&v| v as f64).sum::<f64>() as f32]
    } else {
        local
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn rank4(op: &'static str, x: &Tensor) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::InvalidShape {
            op,
            msg: alloc::format!("expected B x C x H x W, got {:?}", x.shape()),
        }),
    }
}

fn conv_geom(op: &'static str, x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    let [batch, in_ch, height, width] = rank4(op, x)?;
    let [out_ch, w_in, kh, kw] = rank4(op, w)?;
    if w_in != in_ch {
        return Err(mismatch(op, x, w));
    }
    if stride == 0 {
        return Err(Error::InvalidShape {
            op,
            msg: "stride must be positive".into(),
        });
    }
    if height + 2 * padding < kh || width + 2 * padding < kw {
        return Err(mismatch(op, x, w));
    }
    Ok(ConvGeom {
        batch,
        in_ch,
        height,
        width,
        out_ch,
        kh,
        kw,
        stride,
        pad: padding,
    })
}
