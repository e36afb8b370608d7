//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operator in creation order; [`Graph::backward`]
//! walks that record in reverse. Parameters enter as borrowed leaves and
//! receive their gradients in [`Parameter::grad`], accumulating across calls
//! until the caller resets them.

use super::conv::{self, ConvGeometry};
use super::{Parameter, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Element-wise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Leaky rectifier with negative slope 0.2.
    LeakyRelu,
    Tanh,
}

pub const LEAKY_SLOPE: f64 = 0.2;

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    ReflectPad { x: Var, pad: usize },
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Act { x: Var, kind: Activation },
    MeanSpatial { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    AddScalar { x: Var },
    Square { x: Var },
    Mean { x: Var },
    Sum { x: Var },
    SelectChannels { x: Var, start: usize },
    Reshape { x: Var },
    Linear { x: Var, w: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::ReflectPad { .. } => "reflect_pad",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Act { .. } => "activation",
            Op::MeanSpatial { .. } => "reduce_mean_spatial",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Square { .. } => "square",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::SelectChannels { .. } => "select_channels",
            Op::Reshape { .. } => "reshape",
            Op::Linear { .. } => "linear",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<'p, T: Real> {
    value: Value<'p, T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<&'p Parameter<T>>,
    /// Accumulated gradient of a non-parameter leaf.
    grad: Option<Tensor<T>>,
}

/// Ordered record of applied operators.
pub struct Graph<'p, T: Real = f32> {
    nodes: Vec<Node<'p, T>>,
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad, param: None, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf_node(&mut self, value: Value<'p, T>, requires_grad: bool, param: Option<&'p Parameter<T>>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, param, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf_node(Value::Owned(value), false, None)
    }

    /// Owned leaf whose gradient is kept on the graph (see [`Graph::grad`]).
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_node(Value::Owned(value), requires_grad, None)
    }

    /// Trainable parameter; gradients accumulate into `param.grad`.
    pub fn param(&mut self, param: &'p Parameter<T>) -> Var {
        self.leaf_node(Value::Borrowed(&param.value), true, Some(param))
    }

    /// Parameter treated as a constant for this graph.
    pub fn frozen(&mut self, param: &'p Parameter<T>) -> Var {
        self.leaf_node(Value::Borrowed(&param.value), false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of an owned leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn check_bias(&self, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.value(b).shape() != [channels] {
                return Err(Error::Dimension(format!(
                    "bias shape {:?} does not match {channels} output channels",
                    self.value(b).shape()
                )));
            }
        }
        Ok(())
    }

    /// Cross-correlation with zero padding. Weight is `[cout, cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if cin != wcin {
            return Err(Error::Dimension(format!(
                "conv2d input has {cin} channels but the weight expects {wcin}"
            )));
        }
        self.check_bias(b, cout)?;
        let geom = ConvGeometry::conv(cin, h, wd, kh, kw, stride, pad)?;
        let out = conv::conv2d_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
            &geom,
        );
        let value = Tensor::new(&[n, cout, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Transposed convolution (the input-gradient of [`Graph::conv2d`]).
    /// Weight is `[cin, cout, kh, kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, kh, kw) = self.value(w).dims4()?;
        if cin != wcin {
            return Err(Error::Dimension(format!(
                "conv_transpose2d input has {cin} channels but the weight expects {wcin}"
            )));
        }
        self.check_bias(b, cout)?;
        let geom = ConvGeometry::transposed(cout, h, wd, kh, kw, stride, pad)?;
        let out = conv::conv_transpose2d_forward(
            self.value(x).data(),
            n,
            cin,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(&[n, cout, geom.h, geom.w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::ConvTranspose2d { x, w, b, geom }, &inputs)
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if pad >= h || pad >= w {
            return Err(Error::Dimension(format!("reflection pad {pad} needs extents above it, got {h}x{w}")));
        }
        let out = conv::reflect_pad_forward(self.value(x).data(), n * c, h, w, pad);
        let value = Tensor::new(&[n, c, h + 2 * pad, w + 2 * pad], out)?;
        self.push(value, Op::ReflectPad { x, pad }, &[x])
    }

    /// Per-(sample, channel) spatial standardization followed by
    /// `gamma · x̂ + beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let m = h * w;
        if m < 2 {
            return Err(Error::Degenerate(format!(
                "instance_norm needs at least 2 spatial positions, got {h}x{w}"
            )));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Dimension(format!("instance_norm affine parameters must have shape [{c}]")));
        }
        let eps = T::lit(eps);
        let inv_m = T::lit(1.0 / m as f64);
        let xs = self.value(x).data();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); n * c];
        for plane in 0..n * c {
            let src = &xs[plane * m..(plane + 1) * m];
            // shifted by the first sample so a constant plane has exactly zero deviation
            let shift = src[0];
            let mean = shift + src.iter().fold(T::zero(), |a, &v| a + (v - shift)) * inv_m;
            let var = src.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_m;
            let is = T::one() / (var + eps).sqrt();
            inv_std[plane] = is;
            let ch = plane % c;
            for k in 0..m {
                let xh = (src[k] - mean) * is;
                xhat[plane * m + k] = xh;
                out[plane * m + k] = gs[ch] * xh + bs[ch];
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        self.push(value, Op::InstanceNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let slope = T::lit(LEAKY_SLOPE);
        let value = match kind {
            Activation::Relu => self.value(x).map(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::LeakyRelu => self.value(x).map(|v| if v > T::zero() { v } else { v * slope }),
            Activation::Tanh => self.value(x).map(|v| v.tanh()),
        };
        self.push(value, Op::Act { x, kind }, &[x])
    }

    /// `[N, C, H, W] -> [N, C]` channel means.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let m = h * w;
        let inv = T::lit(1.0 / m as f64);
        let out = self
            .value(x)
            .data()
            .chunks(m)
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        self.push(value, Op::MeanSpatial { x }, &[x])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor { shape: self.value(a).shape().to_vec(), data }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip(a, b, |p, q| p + q);
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip(a, b, |p, q| p - q);
        self.push(value, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip(a, b, |p, q| p * q);
        self.push(value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = T::lit(factor);
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Result<Var> {
        let offset = T::lit(offset);
        let value = self.value(x).map(|v| v + offset);
        self.push(value, Op::AddScalar { x }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square { x }, &[x])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().fold(T::zero(), |a, &v| a + v);
        let value = Tensor::scalar(s / T::lit(t.numel() as f64));
        self.push(value, Op::Mean { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Channels `start..start+len` of an `[N, C, ...]` tensor.
    pub fn select_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || start + len > shape[1] || len == 0 {
            return Err(Error::Dimension(format!(
                "cannot select channels {start}..{} of shape {shape:?}",
                start + len
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let (n, c) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * inner);
        for s in 0..n {
            out.extend_from_slice(&src[(s * c + start) * inner..(s * c + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[1] = len;
        let value = Tensor::new(&new_shape, out)?;
        self.push(value, Op::SelectChannels { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// `x · wᵀ + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let (n, fin, fout) = match (xs, ws) {
            ([n, fin], [fout, win]) if fin == win => (*n, *fin, *fout),
            _ => {
                return Err(Error::Dimension(format!("linear: input {xs:?} incompatible with weight {ws:?}")));
            }
        };
        self.check_bias(Some(b), fout)?;
        let mut out = vec![T::zero(); n * fout];
        T::gemm(n, fin, fout, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        let bias = self.value(b).data();
        for row in out.chunks_mut(fout) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let value = Tensor::new(&[n, fout], out)?;
        self.push(value, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match self.value(logits).shape() {
            [n, k] => (*n, *k),
            s => return Err(Error::Dimension(format!("cross_entropy expects [N, K] logits, got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::Contract(format!("{} labels for a batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} outside [0, {k})")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / sum;
            }
            total += sum.ln() + max - row[label];
        }
        let value = Tensor::scalar(total / T::lit(n as f64));
        self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits])
    }

    /// Accumulates `d loss / d leaf` into every reachable gradient-requiring
    /// leaf. Repeated calls add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                if let Some(p) = node.param {
                    let mut slot = p.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&g),
                        None => *slot = Some(g),
                    }
                } else {
                    match node.grad.as_mut() {
                        Some(acc) => acc.add_assign(&g),
                        None => node.grad = Some(g),
                    }
                }
                continue;
            }
            self.backward_op(i, g, &mut grads)?;
        }
        Ok(())
    }

    fn backward_op(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor<T>| {
            if nodes[v.0].requires_grad {
                match grads[v.0].as_mut() {
                    Some(a) => a.add_assign(&t),
                    None => grads[v.0] = Some(t),
                }
            }
        };
        let shaped = |v: Var, data: Vec<T>| Tensor { shape: self.value(v).shape().to_vec(), data };
        let out = self.value(Var(i));
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Conv2d { x, w, b, geom } => {
                let n = self.value(*x).shape()[0];
                let cout = self.value(*w).shape()[0];
                let r = conv::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    self.value(*w).data(),
                    cout,
                    geom,
                    g.data(),
                    needs(*x),
                    needs(*w),
                    b.is_some_and(needs),
                );
                if let Some(d) = r.input {
                    acc(*x, shaped(*x, d));
                }
                if let Some(d) = r.weight {
                    acc(*w, shaped(*w, d));
                }
                if let (Some(b), Some(d)) = (b, r.bias) {
                    acc(*b, shaped(*b, d));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (n, cin, _, _) = self.value(*x).dims4()?;
                let r = conv::conv_transpose2d_backward(
                    self.value(*x).data(),
                    n,
                    cin,
                    self.value(*w).data(),
                    geom,
                    g.data(),
                    needs(*x),
                    needs(*w),
                    b.is_some_and(needs),
                );
                if let Some(d) = r.input {
                    acc(*x, shaped(*x, d));
                }
                if let Some(d) = r.weight {
                    acc(*w, shaped(*w, d));
                }
                if let (Some(b), Some(d)) = (b, r.bias) {
                    acc(*b, shaped(*b, d));
                }
            }
            Op::ReflectPad { x, pad } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                acc(*x, shaped(*x, conv::reflect_pad_backward(g.data(), n * c, h, w, *pad)));
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let m = h * w;
                let gs = self.value(*gamma).data();
                let gd = g.data();
                let mut dx = vec![T::zero(); n * c * m];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mf = T::lit(m as f64);
                for plane in 0..n * c {
                    let ch = plane % c;
                    let range = plane * m..(plane + 1) * m;
                    let (gp, xp) = (&gd[range.clone()], &xhat[range.clone()]);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for k in 0..m {
                        dgamma[ch] += gp[k] * xp[k];
                        dbeta[ch] += gp[k];
                        let d = gp[k] * gs[ch];
                        sum_d += d;
                        sum_dx += d * xp[k];
                    }
                    let scale = inv_std[plane] / mf;
                    for k in 0..m {
                        let d = gp[k] * gs[ch];
                        dx[plane * m + k] = scale * (mf * d - sum_d - xp[k] * sum_dx);
                    }
                }
                acc(*x, shaped(*x, dx));
                acc(*gamma, shaped(*gamma, dgamma));
                acc(*beta, shaped(*beta, dbeta));
            }
            Op::Act { x, kind } => {
                let slope = T::lit(LEAKY_SLOPE);
                let xs = self.value(*x).data();
                let d: Vec<T> = match kind {
                    Activation::Relu => {
                        g.data().iter().zip(xs).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }).collect()
                    }
                    Activation::LeakyRelu => {
                        g.data().iter().zip(xs).map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * slope }).collect()
                    }
                    Activation::Tanh => {
                        g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * (T::one() - y * y)).collect()
                    }
                };
                acc(*x, shaped(*x, d));
            }
            Op::MeanSpatial { x } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let m = h * w;
                let inv = T::lit(1.0 / m as f64);
                let d = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, m)).collect();
                acc(*x, shaped(*x, d));
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, shaped(*a, g.data().iter().zip(bv.data()).map(|(&p, &q)| p * q).collect()));
                acc(*b, shaped(*b, g.data().iter().zip(av.data()).map(|(&p, &q)| p * q).collect()));
            }
            Op::Scale { x, factor } => acc(*x, g.map(|v| v * *factor)),
            Op::AddScalar { x } => acc(*x, g),
            Op::Square { x } => {
                let two = T::lit(2.0);
                let xs = self.value(*x).data();
                acc(*x, shaped(*x, g.data().iter().zip(xs).map(|(&p, &q)| two * p * q).collect()));
            }
            Op::Mean { x } => {
                let t = self.value(*x);
                let v = g.item() / T::lit(t.numel() as f64);
                acc(*x, Tensor::full(t.shape(), v));
            }
            Op::Sum { x } => acc(*x, Tensor::full(self.value(*x).shape(), g.item())),
            Op::SelectChannels { x, start } => {
                let shape = self.value(*x).shape();
                let inner: usize = shape[2..].iter().product();
                let (n, c, len) = (shape[0], shape[1], out.shape()[1]);
                let mut d = vec![T::zero(); n * c * inner];
                for s in 0..n {
                    d[(s * c + start) * inner..(s * c + start + len) * inner]
                        .copy_from_slice(&g.data()[s * len * inner..(s + 1) * len * inner]);
                }
                acc(*x, shaped(*x, d));
            }
            Op::Reshape { x } => acc(*x, shaped(*x, g.into_data())),
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let fout = self.value(*w).shape()[0];
                if needs(*x) {
                    let mut d = vec![T::zero(); n * fin];
                    T::gemm(n, fout, fin, g.data(), false, self.value(*w).data(), false, &mut d, false);
                    acc(*x, shaped(*x, d));
                }
                if needs(*w) {
                    let mut d = vec![T::zero(); fout * fin];
                    T::gemm(fout, n, fin, g.data(), true, self.value(*x).data(), false, &mut d, false);
                    acc(*w, shaped(*w, d));
                }
                let mut db = vec![T::zero(); fout];
                for row in g.data().chunks(fout) {
                    for (a, &v) in db.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                acc(*b, shaped(*b, db));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).shape()[1];
                let scale = g.item() / T::lit(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= scale;
                }
                acc(*logits, shaped(*logits, d));
            }
        }
        Ok(())
    }
}
