//! Primitive operations: shape rules, forward evaluation and vector-Jacobian
//! products.
//!
//! Broadcasting is never implicit. Elementwise binary ops require identical
//! shapes; the only exceptions are the scalar ops and the per-feature
//! `Affine`/`AddBias` maps over the last axis of a 2-D tensor. Anything else
//! goes through an explicit `Expand`.

use super::kernels::{col2im, gemm, im2col, ConvGeom, MatRef};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    /// `[a, b] × [b, c] → [a, c]`.
    MatMul,
    /// Input `[N, C, H, W]`, weight `[O, C, kh, kw]`, bias `[O]`.
    Conv2d { stride: usize, padding: usize },
    /// Non-overlapping `size × size` windows over `[N, C, H, W]`.
    MaxPool2d { size: usize },
    Relu,
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
    Sum,
    Mean,
    /// 2-D reductions keeping the reduced axis with length 1.
    SumAxis(usize),
    MeanAxis(usize),
    /// Biased variance (divides by the axis length).
    VarAxis(usize),
    /// Repeats a length-1 axis of a 2-D tensor `size` times.
    Expand { axis: usize, size: usize },
    Concat { axis: usize },
    /// `x[m, H] ⊙ gamma[H] + beta[H]`.
    Affine,
    /// `x[m, H] + bias[H]`.
    AddBias,
    /// Row-wise log-softmax of a 2-D tensor.
    LogSoftmax,
    Reshape(Vec<usize>),
    /// Identity in the forward pass; blocks gradient flow.
    Detach,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis(_) => "sum_axis",
            Op::MeanAxis(_) => "mean_axis",
            Op::VarAxis(_) => "var_axis",
            Op::Expand { .. } => "expand",
            Op::Concat { .. } => "concat",
            Op::Affine => "affine",
            Op::AddBias => "add_bias",
            Op::LogSoftmax => "log_softmax",
            Op::Reshape(_) => "reshape",
            Op::Detach => "detach",
        }
    }

    /// Builds an op from its name and numeric attributes.
    ///
    /// Attribute meaning per op: scalar ops take the constant, `conv2d`
    /// takes `[stride, padding]`, `maxpool2d` `[size]`, axis reductions and
    /// `concat` `[axis]`, `expand` `[axis, size]`, `reshape` the new shape.
    pub fn from_name(name: &str, attrs: &[f64]) -> Result<Op> {
        let int = |i: usize| -> Result<usize> {
            let v = *attrs.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("{name}: missing attribute {i}"))
            })?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name}: attribute {i} must be a non-negative integer, got {v}"
                )));
            }
            Ok(v as usize)
        };
        let scalar = || -> Result<f64> {
            attrs
                .first()
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("{name}: missing constant")))
        };
        Ok(match name {
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "add_scalar" => Op::AddScalar(scalar()?),
            "mul_scalar" => Op::MulScalar(scalar()?),
            "matmul" => Op::MatMul,
            "conv2d" => Op::Conv2d {
                stride: int(0)?,
                padding: int(1)?,
            },
            "maxpool2d" => Op::MaxPool2d { size: int(0)? },
            "relu" => Op::Relu,
            "exp" => Op::Exp,
            "log" => Op::Log,
            "abs" => Op::Abs,
            "square" => Op::Square,
            "sqrt" => Op::Sqrt,
            "sum" => Op::Sum,
            "mean" => Op::Mean,
            "sum_axis" => Op::SumAxis(int(0)?),
            "mean_axis" => Op::MeanAxis(int(0)?),
            "var_axis" => Op::VarAxis(int(0)?),
            "expand" => Op::Expand {
                axis: int(0)?,
                size: int(1)?,
            },
            "concat" => Op::Concat { axis: int(0)? },
            "affine" => Op::Affine,
            "add_bias" => Op::AddBias,
            "log_softmax" => Op::LogSoftmax,
            "reshape" => Op::Reshape((0..attrs.len()).map(int).collect::<Result<_>>()?),
            "detach" => Op::Detach,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }

    /// Whether the op is non-differentiable at isolated points.
    pub fn has_kinks(&self) -> bool {
        matches!(self, Op::Relu | Op::Abs | Op::MaxPool2d { .. })
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul | Op::AddBias => Some(2),
            Op::Conv2d { .. } | Op::Affine => Some(3),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected a 2-D tensor".into(),
        }),
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected a 4-D tensor".into(),
        }),
    }
}

fn axis_check(op: &'static str, t: &Tensor, axis: usize) -> Result<(usize, usize)> {
    let (r, c) = dims2(op, t)?;
    if axis > 1 {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    Ok((r, c))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn conv_geom(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    let (_, c, h, wd) = dims4("conv2d", x)?;
    let (o, wc, kh, kw) = dims4("conv2d", w)?;
    if wc != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if b.shape() != [o] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: w.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(Error::InvalidShape {
            op: "conv2d",
            shape: x.shape().to_vec(),
            reason: format!("kernel {kh}x{kw} with stride {stride}, padding {padding} does not fit"),
        });
    }
    Ok(ConvGeom {
        channels: c,
        height: h,
        width: wd,
        kh,
        kw,
        stride,
        padding,
        out_h: (h + 2 * padding - kh) / stride + 1,
        out_w: (wd + 2 * padding - kw) / stride + 1,
    })
}

/// Index of the first maximum in each pooling window, in output order.
pub(super) fn pool_argmax(x: &Tensor, size: usize) -> Vec<usize> {
    let (n, c, h, w) = dims4("maxpool2d", x).expect("checked by caller");
    let (oh, ow) = (h / size, w / size);
    let data = x.data();
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = base + oi * size * w + oj * size;
                for di in 0..size {
                    for dj in 0..size {
                        let k = base + (oi * size + di) * w + oj * size + dj;
                        if data[k] > data[best] {
                            best = k;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

/// Evaluates `op` on `inputs`, checking every shape rule.
pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(k) = op.arity() {
        if inputs.len() != k {
            return Err(Error::Arity {
                op: op.name(),
                expected: k,
                got: inputs.len(),
            });
        }
    } else if inputs.is_empty() {
        return Err(Error::Arity {
            op: op.name(),
            expected: 1,
            got: 0,
        });
    }
    let out = match op {
        Op::Leaf => unreachable!("leaves are inserted directly"),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(op.name(), a, b)?;
            match op {
                Op::Add => zip(a, b, |x, y| x + y),
                Op::Sub => zip(a, b, |x, y| x - y),
                Op::Mul => zip(a, b, |x, y| x * y),
                _ => zip(a, b, |x, y| x / y),
            }
        }
        Op::AddScalar(c) => map(inputs[0], |x| x + c),
        Op::MulScalar(c) => map(inputs[0], |x| x * c),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = dims2("matmul", a)?;
            let (kb, n) = dims2("matmul", b)?;
            if k != kb {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; m * n];
            gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), 0.0, &mut out);
            Tensor::new(vec![m, n], out)?
        }
        Op::Conv2d { stride, padding } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let g = conv_geom(x, w, b, *stride, *padding)?;
            let n = x.shape()[0];
            let o = w.shape()[0];
            let in_len = g.channels * g.height * g.width;
            let plane = g.out_len();
            let mut cols = vec![0.0; g.patch_len() * plane];
            let mut out = vec![0.0; n * o * plane];
            for s in 0..n {
                im2col(&x.data()[s * in_len..(s + 1) * in_len], &g, &mut cols);
                let dst = &mut out[s * o * plane..(s + 1) * o * plane];
                for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                    chunk.fill(b.data()[oc]);
                }
                gemm(
                    MatRef::new(w.data(), o, g.patch_len()),
                    MatRef::new(&cols, g.patch_len(), plane),
                    1.0,
                    dst,
                );
            }
            Tensor::new(vec![n, o, g.out_h, g.out_w], out)?
        }
        Op::MaxPool2d { size } => {
            let x = inputs[0];
            let (n, c, h, w) = dims4("maxpool2d", x)?;
            if *size == 0 || h % size != 0 || w % size != 0 {
                return Err(Error::InvalidShape {
                    op: "maxpool2d",
                    shape: x.shape().to_vec(),
                    reason: format!("spatial dims must be divisible by {size}"),
                });
            }
            let data = pool_argmax(x, *size).into_iter().map(|k| x.data()[k]).collect();
            Tensor::new(vec![n, c, h / size, w / size], data)?
        }
        Op::Relu => map(inputs[0], |x| if x > 0.0 { x } else { 0.0 }),
        Op::Exp => map(inputs[0], f64::exp),
        Op::Log => map(inputs[0], f64::ln),
        Op::Abs => map(inputs[0], f64::abs),
        Op::Square => map(inputs[0], |x| x * x),
        Op::Sqrt => map(inputs[0], f64::sqrt),
        Op::Sum => Tensor::scalar(inputs[0].data().iter().sum()),
        Op::Mean => {
            let x = inputs[0];
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        Op::SumAxis(axis) | Op::MeanAxis(axis) => {
            let x = inputs[0];
            let (r, c) = axis_check(op.name(), x, *axis)?;
            let scale = match op {
                Op::MeanAxis(_) => 1.0 / if *axis == 0 { r } else { c } as f64,
                _ => 1.0,
            };
            reduce_axis(x, r, c, *axis, scale)
        }
        Op::VarAxis(axis) => {
            let x = inputs[0];
            let (r, c) = axis_check("var_axis", x, *axis)?;
            let mean = reduce_axis(x, r, c, *axis, 1.0 / if *axis == 0 { r } else { c } as f64);
            let count = if *axis == 0 { r } else { c } as f64;
            let mut out = vec![0.0; mean.len()];
            for i in 0..r {
                for j in 0..c {
                    let k = if *axis == 0 { j } else { i };
                    let d = x.data()[i * c + j] - mean.data()[k];
                    out[k] += d * d;
                }
            }
            out.iter_mut().for_each(|v| *v /= count);
            Tensor::new(mean.shape().to_vec(), out)?
        }
        Op::Expand { axis, size } => {
            let x = inputs[0];
            let (r, c) = axis_check("expand", x, *axis)?;
            let along = if *axis == 0 { r } else { c };
            if along != 1 || *size == 0 {
                return Err(Error::InvalidShape {
                    op: "expand",
                    shape: x.shape().to_vec(),
                    reason: format!("axis {axis} must have length 1 to expand to {size}"),
                });
            }
            if *axis == 0 {
                let data = (0..*size).flat_map(|_| x.data().iter().copied()).collect();
                Tensor::new(vec![*size, c], data)?
            } else {
                let data = x
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat(v).take(*size))
                    .collect();
                Tensor::new(vec![r, *size], data)?
            }
        }
        Op::Concat { axis } => concat(inputs, *axis)?,
        Op::Affine => {
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let (m, h) = dims2("affine", x)?;
            for p in [gamma, beta] {
                if p.shape() != [h] {
                    return Err(Error::ShapeMismatch {
                        op: "affine",
                        lhs: x.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            let mut out = x.data().to_vec();
            for i in 0..m {
                for j in 0..h {
                    out[i * h + j] = out[i * h + j] * gamma.data()[j] + beta.data()[j];
                }
            }
            Tensor::new(vec![m, h], out)?
        }
        Op::AddBias => {
            let (x, b) = (inputs[0], inputs[1]);
            let (m, h) = dims2("add_bias", x)?;
            if b.shape() != [h] {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(h) {
                row.iter_mut().zip(b.data()).for_each(|(v, bj)| *v += bj);
            }
            Tensor::new(vec![m, h], out)?
        }
        Op::LogSoftmax => {
            let x = inputs[0];
            let (m, n) = dims2("log_softmax", x)?;
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::new(vec![m, n], out)?
        }
        Op::Reshape(shape) => inputs[0].clone().reshape(shape.clone())?,
        Op::Detach => inputs[0].clone(),
    };
    if !out.is_finite() && inputs.iter().all(|t| t.is_finite()) {
        return Err(Error::NonFinite { op: op.name() });
    }
    Ok(out)
}

fn reduce_axis(x: &Tensor, r: usize, c: usize, axis: usize, scale: f64) -> Tensor {
    let (shape, mut out) = if axis == 0 {
        (vec![1, c], vec![0.0; c])
    } else {
        (vec![r, 1], vec![0.0; r])
    };
    for i in 0..r {
        for j in 0..c {
            out[if axis == 0 { j } else { i }] += x.data()[i * c + j];
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(shape, out).expect("reduced shape")
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs[0];
    let (r0, c0) = axis_check("concat", first, axis)?;
    for t in &inputs[1..] {
        let (r, c) = dims2("concat", t)?;
        if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    if axis == 0 {
        let rows = inputs.iter().map(|t| t.shape()[0]).sum();
        let data = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(vec![rows, c0], data)
    } else {
        let cols: usize = inputs.iter().map(|t| t.shape()[1]).sum();
        let mut data = Vec::with_capacity(r0 * cols);
        for i in 0..r0 {
            for t in inputs {
                data.extend_from_slice(t.row(i));
            }
        }
        Tensor::new(vec![r0, cols], data)
    }
}

fn acc(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

/// Accumulates `∂loss/∂input` into `grads[k]` for every input `k` whose
/// `wanted[k]` flag is set, given the upstream gradient `g` of the output.
pub(crate) fn backward(
    op: &Op,
    inputs: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    wanted: &[bool],
    grads: &mut [Option<Vec<f64>>],
) {
    let len = |k: usize| inputs[k].len();
    match op {
        Op::Leaf | Op::Detach => {}
        Op::Add | Op::Sub | Op::Reshape(_) | Op::AddScalar(_) => {
            if wanted[0] {
                let d = acc(&mut grads[0], len(0));
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if inputs.len() > 1 && wanted[1] {
                let d = acc(&mut grads[1], len(1));
                if matches!(op, Op::Sub) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                } else {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            if wanted[0] {
                let d = acc(&mut grads[0], a.len());
                for i in 0..d.len() {
                    d[i] += g[i] * b[i];
                }
            }
            if wanted[1] {
                let d = acc(&mut grads[1], b.len());
                for i in 0..d.len() {
                    d[i] += g[i] * a[i];
                }
            }
        }
        Op::Div => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            if wanted[0] {
                let d = acc(&mut grads[0], a.len());
                for i in 0..d.len() {
                    d[i] += g[i] / b[i];
                }
            }
            if wanted[1] {
                let d = acc(&mut grads[1], b.len());
                for i in 0..d.len() {
                    d[i] -= g[i] * a[i] / (b[i] * b[i]);
                }
            }
        }
        Op::MulScalar(c) => {
            let d = acc(&mut grads[0], len(0));
            d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let gm = MatRef::new(g, m, n);
            if wanted[0] {
                let d = acc(&mut grads[0], m * k);
                gemm(gm, MatRef::new(b.data(), k, n).t(), 1.0, d);
            }
            if wanted[1] {
                let d = acc(&mut grads[1], k * n);
                gemm(MatRef::new(a.data(), m, k).t(), gm, 1.0, d);
            }
        }
        Op::Conv2d { stride, padding } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let geom = conv_geom(x, w, b, *stride, *padding).expect("validated in forward");
            let n = x.shape()[0];
            let o = w.shape()[0];
            let in_len = geom.channels * geom.height * geom.width;
            let plane = geom.out_len();
            let patch = geom.patch_len();
            let mut cols = vec![0.0; patch * plane];
            let mut dcols = vec![0.0; patch * plane];
            for s in 0..n {
                let gs = MatRef::new(&g[s * o * plane..(s + 1) * o * plane], o, plane);
                if wanted[1] {
                    im2col(&x.data()[s * in_len..(s + 1) * in_len], &geom, &mut cols);
                    let dw = acc(&mut grads[1], o * patch);
                    gemm(gs, MatRef::new(&cols, patch, plane).t(), 1.0, dw);
                }
                if wanted[0] {
                    gemm(MatRef::new(w.data(), o, patch).t(), gs, 0.0, &mut dcols);
                    let dx = acc(&mut grads[0], x.len());
                    col2im(&dcols, &geom, &mut dx[s * in_len..(s + 1) * in_len]);
                }
            }
            if wanted[2] {
                let db = acc(&mut grads[2], o);
                for (k, chunk) in g.chunks(plane).enumerate() {
                    db[k % o] += chunk.iter().sum::<f64>();
                }
            }
        }
        Op::MaxPool2d { size } => {
            let d = acc(&mut grads[0], len(0));
            for (gi, k) in g.iter().zip(pool_argmax(inputs[0], *size)) {
                d[k] += gi;
            }
        }
        Op::Relu | Op::Abs | Op::Square | Op::Log => {
            let x = inputs[0].data();
            let d = acc(&mut grads[0], x.len());
            for i in 0..d.len() {
                d[i] += g[i]
                    * match op {
                        Op::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Op::Abs => {
                            if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Op::Square => 2.0 * x[i],
                        _ => 1.0 / x[i],
                    };
            }
        }
        Op::Exp => {
            let d = acc(&mut grads[0], len(0));
            for i in 0..d.len() {
                d[i] += g[i] * out.data()[i];
            }
        }
        Op::Sqrt => {
            let d = acc(&mut grads[0], len(0));
            for i in 0..d.len() {
                d[i] += g[i] * 0.5 / out.data()[i];
            }
        }
        Op::Sum | Op::Mean => {
            let scale = if matches!(op, Op::Mean) {
                1.0 / len(0) as f64
            } else {
                1.0
            };
            let d = acc(&mut grads[0], len(0));
            d.iter_mut().for_each(|v| *v += g[0] * scale);
        }
        Op::SumAxis(axis) | Op::MeanAxis(axis) | Op::VarAxis(axis) => {
            let x = inputs[0];
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let count = if *axis == 0 { r } else { c } as f64;
            let mean = matches!(op, Op::VarAxis(_))
                .then(|| reduce_axis(x, r, c, *axis, 1.0 / count));
            let d = acc(&mut grads[0], r * c);
            for i in 0..r {
                for j in 0..c {
                    let k = if *axis == 0 { j } else { i };
                    d[i * c + j] += match op {
                        Op::SumAxis(_) => g[k],
                        Op::MeanAxis(_) => g[k] / count,
                        _ => {
                            let mu = mean.as_ref().expect("variance mean").data()[k];
                            g[k] * 2.0 * (x.data()[i * c + j] - mu) / count
                        }
                    };
                }
            }
        }
        Op::Expand { axis, size } => {
            let x = inputs[0];
            let d = acc(&mut grads[0], x.len());
            if *axis == 0 {
                let c = x.shape()[1];
                for row in g.chunks(c) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            } else {
                for (i, chunk) in g.chunks(*size).enumerate() {
                    d[i] += chunk.iter().sum::<f64>();
                }
            }
        }
        Op::Concat { axis } => {
            if *axis == 0 {
                let mut offset = 0;
                for (k, t) in inputs.iter().enumerate() {
                    if wanted[k] {
                        let d = acc(&mut grads[k], t.len());
                        d.iter_mut()
                            .zip(&g[offset..offset + t.len()])
                            .for_each(|(d, g)| *d += g);
                    }
                    offset += t.len();
                }
            } else {
                let rows = inputs[0].shape()[0];
                let total: usize = inputs.iter().map(|t| t.shape()[1]).sum();
                let mut offset = 0;
                for (k, t) in inputs.iter().enumerate() {
                    let c = t.shape()[1];
                    if wanted[k] {
                        let d = acc(&mut grads[k], t.len());
                        for i in 0..rows {
                            let src = &g[i * total + offset..i * total + offset + c];
                            d[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += c;
                }
            }
        }
        Op::Affine => {
            let (x, gamma) = (inputs[0], inputs[1]);
            let h = gamma.len();
            if wanted[0] {
                let d = acc(&mut grads[0], x.len());
                for (k, dv) in d.iter_mut().enumerate() {
                    *dv += g[k] * gamma.data()[k % h];
                }
            }
            if wanted[1] {
                let d = acc(&mut grads[1], h);
                for (k, gv) in g.iter().enumerate() {
                    d[k % h] += gv * x.data()[k];
                }
            }
            if wanted[2] {
                let d = acc(&mut grads[2], h);
                for (k, gv) in g.iter().enumerate() {
                    d[k % h] += gv;
                }
            }
        }
        Op::AddBias => {
            let h = inputs[1].len();
            if wanted[0] {
                let d = acc(&mut grads[0], len(0));
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if wanted[1] {
                let d = acc(&mut grads[1], h);
                for (k, gv) in g.iter().enumerate() {
                    d[k % h] += gv;
                }
            }
        }
        Op::LogSoftmax => {
            let n = out.shape()[1];
            let d = acc(&mut grads[0], len(0));
            for ((drow, grow), orow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                let gsum: f64 = grow.iter().sum();
                for j in 0..n {
                    drow[j] += grow[j] - orow[j].exp() * gsum;
                }
            }
        }
    }
}
