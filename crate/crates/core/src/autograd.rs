//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Each node
//! records the op that produced it and whatever that op needs for its
//! vector-Jacobian product. [`Tape::backward`] walks the nodes once in
//! reverse insertion order, which is a valid reverse topological order
//! because inputs are always inserted before their consumers.
//!
//! Reductions run in a fixed index order; per-sample work may be fanned out
//! through [`crate::par`] but is always reduced sequentially, so gradients are
//! bit-reproducible with or without the `parallel` feature.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{matmul, Layout, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

/// Spatial output size of a convolution, or None if it would be empty.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    InstanceNorm {
        input: Var,
        inv_std: Vec<T>,
    },
    MaxPool2x2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::MaxPool2x2 { .. } => "maxpool2x2",
            Op::Linear { .. } => "linear",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a forward computation for later differentiation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], one per differentiable leaf.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf recorded with `requires_grad`. Leaves the loss does
    /// not depend on get an all-zero gradient.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// First node whose value contains NaN or ±Inf, with the op that made it.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Flattens everything after the leading (batch) dimension.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        if shape.is_empty() {
            return Err(Error::shape("flatten", "rank-0 input"));
        }
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    /// The discrete choices made by the non-smooth ops: one bit per ReLU
    /// input (active or not) and the winning index of every max-pool window.
    /// Two forward passes with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.value(*a).data().iter().map(|&v| (v > T::zero()) as u32)),
                Op::MaxPool2x2 { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Relu(a))
    }

    /// Cross-correlation of an NCHW input with an OIHW weight plus bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        let bs = self.value(bias).shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input and OIHW weight, got {xs:?} and {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {bs:?} for {} output channels", ws[0]),
            ));
        }
        let (ho, wo) = match (
            conv_out_dim(xs[2], ws[2], stride, padding),
            conv_out_dim(xs[3], ws[3], stride, padding),
        ) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {ws:?} does not fit input {xs:?} (stride {stride}, padding {padding})"),
                ))
            }
        };
        let g = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            ho,
            wo,
        };
        let keep_cols = self.nodes[weight.0].requires_grad;
        let (k, p) = (g.k(), g.p());
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); g.n * g.cout * p];
        let mut cols = if keep_cols {
            vec![T::zero(); g.n * k * p]
        } else {
            Vec::new()
        };
        let sample_in = g.cin * g.h * g.w;
        let forward_one = |i: usize, y: &mut [T], col: &mut [T]| {
            im2col(&x[i * sample_in..(i + 1) * sample_in], &g, col);
            matmul(y, w, Layout::Normal, col, Layout::Normal, g.cout, k, p, false);
            for (row, &bv) in y.chunks_mut(p).zip(b) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        };
        if keep_cols {
            par::for_each_chunk2(&mut out, g.cout * p, &mut cols, k * p, forward_one);
        } else {
            par::for_each_chunk(&mut out, g.cout * p, |i, y| {
                let mut col = vec![T::zero(); k * p];
                forward_one(i, y, &mut col);
            });
        }
        let out = Tensor::new(vec![g.n, g.cout, ho, wo], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom: g,
                cols,
            },
        ))
    }

    /// Per-(sample, channel) normalization over spatial positions, no affine.
    pub fn instance_norm(&mut self, input: Var, eps: T) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 || xs[2] * xs[3] == 0 {
            return Err(Error::shape("instance_norm", format!("need NCHW with spatial ≥ 1, got {xs:?}")));
        }
        let plane = xs[2] * xs[3];
        let planes = xs[0] * xs[1];
        let mut out = self.value(input).data().to_vec();
        let mut inv_std = vec![T::zero(); planes];
        let count = T::from_f64(plane as f64);
        par::for_each_chunk2(&mut out, plane, &mut inv_std, 1, |_, y, s| {
            let mean = y.iter().fold(T::zero(), |a, &v| a + v) / count;
            let var = y.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / count;
            let inv = T::one() / (var + eps).sqrt();
            y.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            s[0] = inv;
        });
        let out = Tensor::new(xs, out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, rg, Op::InstanceNorm { input, inv_std }))
    }

    /// Non-overlapping 2×2 max pooling; odd trailing rows/cols are dropped.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::shape("maxpool2x2", format!("need NCHW with H, W ≥ 2, got {xs:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let planes = xs[0] * xs[1];
        let x = self.value(input).data();
        let mut out = vec![T::zero(); planes * ho * wo];
        let mut argmax = vec![0u32; planes * ho * wo];
        par::for_each_chunk2(&mut out, ho * wo, &mut argmax, ho * wo, |pl, y, am| {
            let src = &x[pl * h * w..(pl + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    y[oy * wo + ox] = src[best];
                    am[oy * wo + ox] = best as u32;
                }
            }
        });
        let out = Tensor::new(vec![xs[0], xs[1], ho, wo], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, rg, Op::MaxPool2x2 { input, argmax }))
    }

    /// `input (N×F) · weightᵀ (F×O) + bias (O)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        let bs = self.value(bias).shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        matmul(
            &mut out,
            self.value(input).data(),
            Layout::Normal,
            self.value(weight).data(),
            Layout::Transposed,
            n,
            f,
            o,
            false,
        );
        let b = self.value(bias).data();
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
        }
        let out = Tensor::new(vec![n, o], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(out, rg, Op::Linear { input, weight, bias }))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let zs = self.value(logits).shape();
        if zs.len() != 2 || zs[0] != labels.len() || zs[0] == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {zs:?} for {} labels", labels.len()),
            ));
        }
        let c = zs[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Invalid(format!("label {bad} out of range for {c} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); z.len()];
        let mut total = T::zero();
        for ((row, pr), &label) in z.chunks(c).zip(probs.chunks_mut(c)).zip(labels) {
            let lse = log_softmax_into(row, pr);
            total += lse - row[label];
        }
        let loss = total / T::from_f64(labels.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let produced = self.vjp(node, &g);
            for (var, buf) in produced {
                if buf.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: node.op.name(),
                        node: i,
                    });
                }
                accumulate(&mut grads[var.0], buf);
            }
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(d) => Tensor::new(node.value.shape().to_vec(), d)
                        .expect("gradient length matches its value"),
                    None => Tensor::zeros(node.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Input gradients of one node given its output gradient `g`. Only
    /// inputs that require gradients are returned.
    fn vjp(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if rg(v) {
                        out.push((*v, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if rg(a) {
                    out.push((*a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect()));
                }
                if rg(b) {
                    out.push((*b, g.iter().zip(x).map(|(&gi, &xi)| gi * xi).collect()));
                }
            }
            Op::Scale(a, c) => {
                if rg(a) {
                    out.push((*a, g.iter().map(|&gi| gi * *c).collect()));
                }
            }
            Op::Sum(a) => {
                if rg(a) {
                    out.push((*a, vec![g[0]; self.value(*a).numel()]));
                }
            }
            Op::Reshape(a) => {
                if rg(a) {
                    out.push((*a, g.to_vec()));
                }
            }
            Op::Relu(a) => {
                if rg(a) {
                    let x = self.value(*a).data();
                    out.push((
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                            .collect(),
                    ));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => out.extend(self.conv2d_vjp(*input, *weight, *bias, geom, cols, g)),
            Op::InstanceNorm { input, inv_std } => {
                if rg(input) {
                    let y = node.value.data();
                    let s = node.value.shape();
                    let plane = s[2] * s[3];
                    let count = T::from_f64(plane as f64);
                    let mut dx = g.to_vec();
                    par::for_each_chunk(&mut dx, plane, |pl, d| {
                        let yp = &y[pl * plane..(pl + 1) * plane];
                        let mean_g = d.iter().fold(T::zero(), |a, &v| a + v) / count;
                        let mean_gy = d
                            .iter()
                            .zip(yp)
                            .fold(T::zero(), |a, (&gv, &yv)| a + gv * yv)
                            / count;
                        let inv = inv_std[pl];
                        for (dv, &yv) in d.iter_mut().zip(yp) {
                            *dv = inv * (*dv - mean_g - yv * mean_gy);
                        }
                    });
                    out.push((*input, dx));
                }
            }
            Op::MaxPool2x2 { input, argmax } => {
                if rg(input) {
                    let s = self.value(*input).shape();
                    let plane_in = s[2] * s[3];
                    let plane_out = (s[2] / 2) * (s[3] / 2);
                    let mut dx = vec![T::zero(); self.value(*input).numel()];
                    par::for_each_chunk(&mut dx, plane_in, |pl, d| {
                        let gs = &g[pl * plane_out..(pl + 1) * plane_out];
                        let am = &argmax[pl * plane_out..(pl + 1) * plane_out];
                        for (&gi, &idx) in gs.iter().zip(am) {
                            d[idx as usize] += gi;
                        }
                    });
                    out.push((*input, dx));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.value(*input).shape();
                let (n, f) = (xs[0], xs[1]);
                let o = self.value(*weight).shape()[0];
                if rg(input) {
                    let mut dx = vec![T::zero(); n * f];
                    let w = self.value(*weight).data();
                    matmul(&mut dx, g, Layout::Normal, w, Layout::Normal, n, o, f, false);
                    out.push((*input, dx));
                }
                if rg(weight) {
                    let mut dw = vec![T::zero(); o * f];
                    let x = self.value(*input).data();
                    matmul(&mut dw, g, Layout::Transposed, x, Layout::Normal, o, n, f, false);
                    out.push((*weight, dw));
                }
                if rg(bias) {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    out.push((*bias, db));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if rg(logits) {
                    let c = self.value(*logits).shape()[1];
                    let scale = g[0] / T::from_f64(labels.len() as f64);
                    let mut dz = probs.clone();
                    for (row, &label) in dz.chunks_mut(c).zip(labels) {
                        row[label] = row[label] - T::one();
                        row.iter_mut().for_each(|v| *v = *v * scale);
                    }
                    out.push((*logits, dz));
                }
            }
        }
        out
    }

    fn conv2d_vjp(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        g_: &ConvGeom,
        cols: &[T],
        g: &[T],
    ) -> Vec<(Var, Vec<T>)> {
        let geom = *g_;
        let (k, p) = (geom.k(), geom.p());
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        let w = self.value(weight).data();
        if rg(input) {
            let sample_in = geom.cin * geom.h * geom.w;
            let mut dx = vec![T::zero(); geom.n * sample_in];
            par::for_each_chunk(&mut dx, sample_in, |i, d| {
                let gi = &g[i * geom.cout * p..(i + 1) * geom.cout * p];
                let mut dcol = vec![T::zero(); k * p];
                matmul(&mut dcol, w, Layout::Transposed, gi, Layout::Normal, k, geom.cout, p, false);
                col2im(&dcol, &geom, d);
            });
            out.push((input, dx));
        }
        if rg(weight) {
            let per = geom.cout * k;
            let mut partial = vec![T::zero(); geom.n * per];
            par::for_each_chunk(&mut partial, per, |i, dw| {
                let gi = &g[i * geom.cout * p..(i + 1) * geom.cout * p];
                let col = &cols[i * k * p..(i + 1) * k * p];
                matmul(dw, gi, Layout::Normal, col, Layout::Transposed, geom.cout, p, k, false);
            });
            let mut dw = partial[..per].to_vec();
            for chunk in partial.chunks(per).skip(1) {
                dw.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
            }
            out.push((weight, dw));
        }
        if rg(bias) {
            let mut db = vec![T::zero(); geom.cout];
            for sample in g.chunks(geom.cout * p) {
                for (d, row) in db.iter_mut().zip(sample.chunks(p)) {
                    *d += row.iter().fold(T::zero(), |a, &v| a + v);
                }
            }
            out.push((bias, db));
        }
        out
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, buf: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(buf).for_each(|(a, b)| *a += b),
        None => *slot = Some(buf),
    }
}

/// Writes softmax(row) into `probs` and returns logsumexp(row).
fn log_softmax_into<T: Scalar>(row: &[T], probs: &mut [T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut denom = T::zero();
    for (p, &z) in probs.iter_mut().zip(row) {
        *p = (z - max).exp();
        denom += *p;
    }
    probs.iter_mut().for_each(|p| *p = *p / denom);
    max + denom.ln()
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 && g.pad == 0 {
                        dst.copy_from_slice(&src[kx..kx + g.wo]);
                        continue;
                    }
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Central-difference gradient of `f` at `x`, evaluated in 64-bit arithmetic:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` per coordinate.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error used by gradient checks: `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_of_double() {
        // y = (2x)^2, dy/dx = 8x = 24 at x = 3.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let a = tape.scale(x, 2.0);
        let y = tape.mul(a, a).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 24.0);
    }

    #[test]
    fn disconnected_parameter_gets_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let p = tape.leaf(Tensor::from_vec(vec![5.0, 6.0, 7.0]), true);
        let y = tape.sum(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::new(vec![2, 3, 2], (0..12).map(|i| i as f32).collect()).unwrap(), true);
        let y = tape.sum(w);
        let g = tape.backward(y).unwrap();
        assert!(g.get(w).unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(g.get(w).unwrap().shape(), &[2, 3, 2]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = tape.relu(w);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn reused_parameter_accumulates() {
        // f(w) = sum(w * w) + sum(3w) -> 2w + 3
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let lin = tape.scale(w, 3.0);
        let both = tape.add(sq, lin).unwrap();
        let y = tape.sum(both);
        let g = tape.backward(y).unwrap();
        let want = finite_difference_grad(
            |v| v.data().iter().map(|x| x * x + 3.0 * x).sum(),
            &t(&[3], &[0.5, -1.0, 2.0]),
            1e-5,
        );
        for (a, b) in g.get(w).unwrap().data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn non_finite_backward_names_op() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0]), true);
        let a = tape.scale(x, f32::MAX);
        let b = tape.scale(a, 4.0);
        let s = tape.sum(b);
        assert_eq!(tape.first_non_finite().map(|(_, op)| op), Some("scale"));
        match tape.backward(s) {
            Err(Error::NonFinite { op, node }) => {
                assert_eq!(op, "scale");
                assert_eq!(node, a.index());
            }
            other => panic!("expected NonFinite, got {:?}", other.err()),
        }
    }

    #[test]
    fn fd_square_at_three() {
        let g = finite_difference_grad(|v| v.item() * v.item(), &Tensor::scalar(3.0), 1e-4);
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fd_constant_and_sum() {
        let x = t(&[4], &[0.1, -0.2, 0.3, 0.9]);
        let g = finite_difference_grad(|_| 42.0, &x, 1e-3);
        assert!(g.data().iter().all(|&v| v == 0.0));
        let g = finite_difference_grad(|v| v.data().iter().sum(), &x, 1e-3);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn conv_sum_of_nine() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|i| i as f32).collect()).unwrap());
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 45.0);
    }

    #[test]
    fn conv_identity_and_zero() {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..2 * 2 * 4 * 5).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = tape.constant(Tensor::new(vec![2, 2, 4, 5], data.clone()).unwrap());
        // 1×1 identity kernel mapping channel c -> c
        let w = tape.constant(Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);

        let z = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w2 = tape.constant(Tensor::full(&[3, 2, 3, 3], 0.7));
        let b2 = tape.constant(Tensor::zeros(&[3]));
        let y2 = tape.conv2d(z, w2, b2, 1, 0).unwrap();
        assert!(tape.value(y2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_shape_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.conv2d(x, w, b, 1, 0).is_err());
        let w = tape.constant(Tensor::zeros(&[3, 2, 5, 5]));
        assert!(tape.conv2d(x, w, b, 1, 0).is_err());
    }

    #[test]
    fn instance_norm_hand_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.instance_norm(x, 1e-5).unwrap();
        let want = [-1.3416, -0.4472, 0.4472, 1.3416];
        for (a, b) in tape.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        let c = tape.constant(Tensor::full(&[1, 1, 3, 3], 4.2));
        let yc = tape.instance_norm(c, 1e-5).unwrap();
        assert!(tape.value(yc).data().iter().all(|v| v.abs() < 1e-5f64.sqrt()));
    }

    #[test]
    fn instance_norm_moments() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 5 * 5).map(|i| ((i * 7919) % 101) as f64 / 50.0).collect();
        let x = tape.constant(t(&[2, 3, 5, 5], &data));
        let y = tape.instance_norm(x, 1e-5).unwrap();
        for plane in tape.value(y).data().chunks(25) {
            let mean: f64 = plane.iter().sum::<f64>() / 25.0;
            let var: f64 = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn relu_and_pool() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let p = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let q = tape.maxpool2x2(p).unwrap();
        assert_eq!(tape.value(q).data(), &[4.0]);

        let c = tape.constant(Tensor::full(&[1, 2, 5, 7], 3.5));
        let d = tape.maxpool2x2(c).unwrap();
        assert_eq!(tape.value(d).shape(), &[1, 2, 2, 3]);
        assert!(tape.value(d).data().iter().all(|&v| v == 3.5));

        let small = tape.constant(Tensor::zeros(&[1, 1, 1, 4]));
        assert!(tape.maxpool2x2(small).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = tape.cross_entropy(z, &[0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let z = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let l = tape.cross_entropy(z, &[0]).unwrap();
        let v = tape.value(l).item();
        assert!(v.is_finite() && v.abs() < 1e-12);

        let z = tape.constant(t(&[2, 5], &[0.3; 10]));
        let l = tape.cross_entropy(z, &[1, 4]).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);

        assert!(tape.cross_entropy(z, &[0, 5]).is_err());
    }
}
