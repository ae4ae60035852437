//! Reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live in
//! a [`ParamStore`] and enter a tape at most once, so a module that is
//! called at several scales contributes a single node per weight and its
//! gradient accumulates across all uses.

use crate::error::{Error, Result};
use crate::tensor::{self, conv_out, conv_transpose_out, Real, Tensor};

/// Handle to a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids whose canonical name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.names[id.0].starts_with(prefix))
    }

    /// Total scalar count of all parameters under `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.ids_with_prefix(prefix).map(|id| self.values[id.0].numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect() }
    }
}

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ReflectPad { x: Var, pad: usize },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Clamp(Var, T, T),
    Concat(Vec<Var>),
    ChannelGate { x: Var, gate: Var },
    SpatialGate { x: Var, gate: Var },
    SpatialMean(Var),
    ChannelMean(Var),
    ChannelMax { x: Var, argmax: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Upsample2x(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<Option<Var>>,
}

/// Parameter gradients produced by [`Tape::backward`], indexed by [`ParamId`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: ParamId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked; retrieve it with [`Tape::backward_full`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable parameter; repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.param_impl(store, id, true)
    }

    /// Parameter used as a constant (no weight gradient is computed).
    pub fn frozen_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.param_impl(store, id, false)
    }

    fn param_impl(&mut self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, trainable);
        self.params[id.0] = Some(v);
        v
    }

    /// Node of a parameter if it has entered this tape.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(id.0).copied().flatten()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.needs(&[x, w]) || b.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Transposed convolution with weight layout `Cin×Cout×k×k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let out = conv_transpose2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad, out_pad)?;
        let rg = self.needs(&[x, w]) || b.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride, pad }, rg))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let out = tensor::reflect_pad(self.value(x), pad)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::ReflectPad { x, pad }, rg))
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let plane = h * w;
        let inv_n = 1.0 / plane as f64;
        let mut out = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(n * c);
        for p in xv.data().chunks(plane) {
            let mean = p.iter().map(|v| v.to_f64()).sum::<f64>() * inv_n;
            let var = p.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() * inv_n;
            let inv = 1.0 / (var + eps).sqrt();
            let (mean_t, inv_t) = (T::from_f64(mean), T::from_f64(inv));
            out.extend(p.iter().map(|&v| (v - mean_t) * inv_t));
            inv_std.push(inv_t);
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::InstanceNorm { x, inv_std }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.needs(&[x]);
        self.push(out, op, rg)
    }

    /// Branch taken at every element of every piecewise op (ReLU, leaky
    /// ReLU, abs, clamp, channel max), in recording order. Two passes with
    /// equal patterns lie on the same smooth piece of the graph.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    out.extend(self.value(*x).data().iter().map(|&v| (v > T::zero()) as usize))
                }
                Op::Abs(x) => out.extend(self.value(*x).data().iter().map(|&v| (v >= T::zero()) as usize)),
                Op::Clamp(x, lo, hi) => {
                    out.extend(self.value(*x).data().iter().map(|&v| (v >= *lo) as usize + (v > *hi) as usize))
                }
                Op::ChannelMax { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        self.unary(x, move |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln σ(x)` evaluated without overflow.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let s = T::from_f64(factor);
        self.unary(x, move |v| v * s, Op::Scale(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(
            x,
            move |v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            },
            Op::Clamp(x, lo, hi),
        )
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "element-wise op on {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self.value(a).zip_map(self.value(b), f);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Concatenate `N×Ci×H×W` nodes along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat_channels(&vals)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Scale channel `c` of sample `n` by `gate[n, c]`.
    pub fn channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gate) != [n, c] {
            return Err(Error::Shape(format!(
                "channel gate {:?} does not match features {:?}",
                self.shape(gate),
                self.shape(x)
            )));
        }
        let g = self.value(gate).data();
        let mut out = self.value(x).clone();
        for (i, p) in out.data_mut().chunks_mut(h * w).enumerate() {
            let s = g[i];
            p.iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.needs(&[x, gate]);
        Ok(self.push(out, Op::ChannelGate { x, gate }, rg))
    }

    /// Scale every channel of sample `n` at `(y, x)` by `gate[n, 0, y, x]`.
    pub fn spatial_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gate) != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "spatial gate {:?} does not match features {:?}",
                self.shape(gate),
                self.shape(x)
            )));
        }
        let plane = h * w;
        let mut out = self.value(x).clone();
        let g = self.value(gate).data();
        for (i, p) in out.data_mut().chunks_mut(plane).enumerate() {
            let gn = &g[(i / c) * plane..(i / c + 1) * plane];
            p.iter_mut().zip(gn).for_each(|(v, &s)| *v *= s);
        }
        let rg = self.needs(&[x, gate]);
        Ok(self.push(out, Op::SpatialGate { x, gate }, rg))
    }

    /// Mean over H×W: `N×C×H×W → N×C`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let out = spatial_mean(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SpatialMean(x), rg))
    }

    /// Mean over channels: `N×C×H×W → N×1×H×W`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let inv = T::from_f64(1.0 / c as f64);
        let mut out = Tensor::zeros(&[n, 1, h, w]);
        let src = self.value(x).data();
        for ni in 0..n {
            let dst = &mut out.data_mut()[ni * plane..(ni + 1) * plane];
            for ci in 0..c {
                let p = &src[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                dst.iter_mut().zip(p).for_each(|(d, &v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::ChannelMean(x), rg))
    }

    /// Max over channels: `N×C×H×W → N×1×H×W`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * plane);
        let mut argmax = Vec::with_capacity(n * plane);
        for ni in 0..n {
            for p in 0..plane {
                let mut best = 0;
                let mut bv = src[ni * c * plane + p];
                for ci in 1..c {
                    let v = src[(ni * c + ci) * plane + p];
                    if v > bv {
                        bv = v;
                        best = ci;
                    }
                }
                out.push(bv);
                argmax.push(best);
            }
        }
        let out = Tensor::new(&[n, 1, h, w], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::ChannelMax { x, argmax }, rg))
    }

    /// `x·wᵀ + b` for `x: N×in`, `w: out×in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = self.value(x).dims2()?;
        let (fout, win) = self.value(w).dims2()?;
        if fin != win {
            return Err(Error::Shape(format!("linear input {fin} vs weight {fout}×{win}")));
        }
        let mut out = Tensor::zeros(&[n, fout]);
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            self.value(x).data(),
            fin as isize,
            1,
            self.value(w).data(),
            1,
            fin as isize,
            T::zero(),
            out.data_mut(),
            fout as isize,
            1,
        );
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(fout) {
                row.iter_mut().zip(&bias).for_each(|(o, &bb)| *o += bb);
            }
        }
        let rg = self.needs(&[x, w]) || b.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Bilinear 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = tensor::upsample2x(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.needs(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Sum of same-shaped nodes.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Gradients of scalar `loss` with respect to every trainable parameter
    /// on the tape.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let node_grads = self.backward_full(loss);
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.params.len());
        for slot in &self.params {
            grads.push(slot.and_then(|v| node_grads[v.0].clone()));
        }
        Gradients { grads }
    }

    /// Gradient of scalar `loss` with respect to a tracked leaf.
    pub fn grad_of(&self, loss: Var, leaf: Var) -> Option<Tensor<T>> {
        self.backward_full(loss).swap_remove(leaf.0)
    }

    fn backward_full(&self, loss: Var) -> Vec<Option<Tensor<T>>> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut kept: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param => {
                    kept[i] = Some(g);
                    continue;
                }
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        kept
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::ReflectPad { x, pad } => {
                let s = self.shape(*x);
                let dx = tensor::reflect_pad_backward(g, *pad, s[2], s[3]);
                self.accumulate(grads, *x, dx);
            }
            Op::InstanceNorm { x, inv_std } => {
                let plane = out.shape()[2] * out.shape()[3];
                let inv_n = T::from_f64(1.0 / plane as f64);
                let mut dx = Vec::with_capacity(out.numel());
                for ((yp, gp), &inv) in out.data().chunks(plane).zip(g.data().chunks(plane)).zip(inv_std) {
                    let mg: T = gp.iter().copied().sum::<T>() * inv_n;
                    let mgy: T = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                    dx.extend(gp.iter().zip(yp).map(|(&gv, &yv)| inv * (gv - mg - yv * mgy)));
                }
                self.accumulate(grads, *x, Tensor::new(out.shape(), dx).expect("shape"));
            }
            Op::Relu(x) => {
                let dx = g.zip_map(out, |gv, y| if y > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu(x, s) => {
                let s = *s;
                let dx = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { gv * s });
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = g.zip_map(out, |gv, y| gv * (T::one() - y * y));
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g.zip_map(out, |gv, y| gv * y * (T::one() - y));
                self.accumulate(grads, *x, dx);
            }
            Op::LogSigmoid(x) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| gv * sigmoid(-xv));
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Abs(x) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let dx = g.zip_map(self.value(*x), |gv, xv| if xv < lo || xv > hi { T::zero() } else { gv });
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let (n, ctot, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(n * pc * plane);
                        for ni in 0..n {
                            let start = (ni * ctot + offset) * plane;
                            dp.extend_from_slice(&g.data()[start..start + pc * plane]);
                        }
                        self.accumulate(grads, p, Tensor::new(&[n, pc, h, w], dp).expect("shape"));
                    }
                    offset += pc;
                }
            }
            Op::ChannelGate { x, gate } => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let gv = self.value(*gate).data();
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for (i, p) in dx.data_mut().chunks_mut(plane).enumerate() {
                        p.iter_mut().for_each(|v| *v *= gv[i]);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gate) {
                    let dg: Vec<T> = g
                        .data()
                        .chunks(plane)
                        .zip(self.value(*x).data().chunks(plane))
                        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| p * q).sum())
                        .collect();
                    self.accumulate(grads, *gate, Tensor::new(self.shape(*gate), dg).expect("shape"));
                }
            }
            Op::SpatialGate { x, gate } => {
                let s = self.shape(*x);
                let (c, plane) = (s[1], s[2] * s[3]);
                let gv = self.value(*gate).data();
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for (i, p) in dx.data_mut().chunks_mut(plane).enumerate() {
                        let gn = &gv[(i / c) * plane..(i / c + 1) * plane];
                        p.iter_mut().zip(gn).for_each(|(v, &s)| *v *= s);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gate) {
                    let mut dg = Tensor::zeros(self.shape(*gate));
                    let xv = self.value(*x).data();
                    for (i, (gp, xp)) in g.data().chunks(plane).zip(xv.chunks(plane)).enumerate() {
                        let dst = &mut dg.data_mut()[(i / c) * plane..(i / c + 1) * plane];
                        for ((d, &a), &b) in dst.iter_mut().zip(gp).zip(xp) {
                            *d += a * b;
                        }
                    }
                    self.accumulate(grads, *gate, dg);
                }
            }
            Op::SpatialMean(x) => {
                let s = self.shape(*x).to_vec();
                let plane = s[2] * s[3];
                let inv = T::from_f64(1.0 / plane as f64);
                let mut dx = Vec::with_capacity(s.iter().product());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, plane));
                }
                self.accumulate(grads, *x, Tensor::new(&s, dx).expect("shape"));
            }
            Op::ChannelMean(x) => {
                let s = self.shape(*x).to_vec();
                let (c, plane) = (s[1], s[2] * s[3]);
                let inv = T::from_f64(1.0 / c as f64);
                let mut dx = Vec::with_capacity(s.iter().product());
                for gp in g.data().chunks(plane) {
                    for _ in 0..c {
                        dx.extend(gp.iter().map(|&v| v * inv));
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&s, dx).expect("shape"));
            }
            Op::ChannelMax { x, argmax } => {
                let s = self.shape(*x).to_vec();
                let (c, plane) = (s[1], s[2] * s[3]);
                let mut dx = Tensor::zeros(&s);
                for (i, (&gv, &best)) in g.data().iter().zip(argmax).enumerate() {
                    let (ni, p) = (i / plane, i % plane);
                    dx.data_mut()[(ni * c + best) * plane + p] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(&[n, fin]);
                    T::gemm(
                        n,
                        fout,
                        fin,
                        T::one(),
                        g.data(),
                        fout as isize,
                        1,
                        self.value(*w).data(),
                        fin as isize,
                        1,
                        T::zero(),
                        dx.data_mut(),
                        fin as isize,
                        1,
                    );
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(&[fout, fin]);
                    T::gemm(
                        fout,
                        n,
                        fin,
                        T::one(),
                        g.data(),
                        1,
                        fout as isize,
                        self.value(*x).data(),
                        fin as isize,
                        1,
                        T::zero(),
                        dw.data_mut(),
                        fin as isize,
                        1,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); fout];
                        for row in g.data().chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                        self.accumulate(grads, *b, Tensor::new(&[fout], db).expect("shape"));
                    }
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let dx = tensor::upsample2x_backward(g, s[2], s[3]);
                self.accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let s = self.shape(*x);
                let numel: usize = s.iter().product();
                let gv = g.item() * T::from_f64(1.0 / numel as f64);
                self.accumulate(grads, *x, Tensor::full(s, gv));
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn log_sigmoid<T: Real>(v: T) -> T {
    let m = if v < T::zero() { v } else { T::zero() };
    m - (T::one() + (-v.abs()).exp()).ln()
}

/// `N×C×H×W → N×C` spatial mean.
pub fn spatial_mean<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h * w == 0 {
        return Err(Error::Shape("spatial mean of an empty map".into()));
    }
    let inv = 1.0 / (h * w) as f64;
    let data = x
        .data()
        .chunks(h * w)
        .map(|p| T::from_f64(p.iter().map(|v| v.to_f64()).sum::<f64>() * inv))
        .collect();
    Tensor::new(&[n, c], data)
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, wd) = x.dims4()?;
    let (co, ci, k, k2) = w.dims4()?;
    if ci != c || k != k2 {
        return Err(Error::Shape(format!("conv weight {:?} on input {:?}", w.shape(), x.shape())));
    }
    let (Some(oh), Some(ow)) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad)) else {
        return Err(Error::Shape(format!("{k}×{k} kernel does not fit input {h}×{wd} with padding {pad}")));
    };
    let (rows, plane) = (c * k * k, oh * ow);
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); rows * plane] };
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for ni in 0..n {
        let src = x.item_slice(ni);
        let colm: &[T] = if direct {
            src
        } else {
            tensor::im2col(src, c, h, wd, k, stride, pad, oh, ow, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[ni * co * plane..(ni + 1) * co * plane];
        T::gemm(co, rows, plane, T::one(), w.data(), rows as isize, 1, colm, plane as isize, 1, T::zero(), dst, plane as isize, 1);
        if let Some(b) = b {
            for (p, &bv) in dst.chunks_mut(plane).zip(b.data()) {
                p.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

#[allow(clippy::type_complexity)]
fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let s = x.shape();
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let (rows, plane) = (c * k * k, oh * ow);
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut cols = vec![T::zero(); rows * plane];
    let mut dx = need_x.then(|| Tensor::zeros(s));
    let mut dw = need_w.then(|| Tensor::zeros(w.shape()));
    let mut db = vec![T::zero(); co];
    for ni in 0..n {
        let gn = &g.data()[ni * co * plane..(ni + 1) * co * plane];
        for (d, p) in db.iter_mut().zip(gn.chunks(plane)) {
            *d += p.iter().copied().sum::<T>();
        }
        if let Some(dw) = dw.as_mut() {
            let colm: &[T] = if direct {
                x.item_slice(ni)
            } else {
                tensor::im2col(x.item_slice(ni), c, h, wd, k, stride, pad, oh, ow, &mut cols);
                &cols
            };
            T::gemm(co, plane, rows, T::one(), gn, plane as isize, 1, colm, 1, plane as isize, T::one(), dw.data_mut(), rows as isize, 1);
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[ni * c * h * wd..(ni + 1) * c * h * wd];
            if direct {
                T::gemm(rows, co, plane, T::one(), w.data(), 1, rows as isize, gn, plane as isize, 1, T::zero(), dst, plane as isize, 1);
            } else {
                T::gemm(rows, co, plane, T::one(), w.data(), 1, rows as isize, gn, plane as isize, 1, T::zero(), &mut cols, plane as isize, 1);
                tensor::col2im(&cols, c, h, wd, k, stride, pad, oh, ow, dst);
            }
        }
    }
    (dx, dw, Tensor::new(&[co], db).expect("shape"))
}

pub fn conv_transpose2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, wd) = x.dims4()?;
    let (ci, co, k, k2) = w.dims4()?;
    if ci != c || k != k2 || out_pad >= stride.max(1) {
        return Err(Error::Shape(format!("transposed conv weight {:?} on input {:?}", w.shape(), x.shape())));
    }
    let oh = conv_transpose_out(h, k, stride, pad, out_pad);
    let ow = conv_transpose_out(wd, k, stride, pad, out_pad);
    let (rows, plane_in) = (co * k * k, h * wd);
    let mut cols = vec![T::zero(); rows * plane_in];
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for ni in 0..n {
        T::gemm(rows, c, plane_in, T::one(), w.data(), 1, rows as isize, x.item_slice(ni), plane_in as isize, 1, T::zero(), &mut cols, plane_in as isize, 1);
        let dst = &mut out.data_mut()[ni * co * oh * ow..(ni + 1) * co * oh * ow];
        tensor::col2im(&cols, co, oh, ow, k, stride, pad, h, wd, dst);
        if let Some(b) = b {
            for (p, &bv) in dst.chunks_mut(oh * ow).zip(b.data()) {
                p.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

#[allow(clippy::type_complexity)]
fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let s = x.shape();
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let (co, k) = (w.shape()[1], w.shape()[2]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let (rows, plane_in) = (co * k * k, h * wd);
    let mut cols = vec![T::zero(); rows * plane_in];
    let mut dx = need_x.then(|| Tensor::zeros(s));
    let mut dw = need_w.then(|| Tensor::zeros(w.shape()));
    let mut db = vec![T::zero(); co];
    for ni in 0..n {
        let gn = &g.data()[ni * co * oh * ow..(ni + 1) * co * oh * ow];
        for (d, p) in db.iter_mut().zip(gn.chunks(oh * ow)) {
            *d += p.iter().copied().sum::<T>();
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        tensor::im2col(gn, co, oh, ow, k, stride, pad, h, wd, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[ni * c * plane_in..(ni + 1) * c * plane_in];
            T::gemm(c, rows, plane_in, T::one(), w.data(), rows as isize, 1, &cols, plane_in as isize, 1, T::zero(), dst, plane_in as isize, 1);
        }
        if let Some(dw) = dw.as_mut() {
            T::gemm(c, plane_in, rows, T::one(), x.item_slice(ni), plane_in as isize, 1, &cols, 1, plane_in as isize, T::one(), dw.data_mut(), rows as isize, 1);
        }
    }
    (dx, dw, Tensor::new(&[co], db).expect("shape"))
}
