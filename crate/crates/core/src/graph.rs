//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! pulled in from a [`ParamStore`] by id; after [`Graph::backward`] their
//! gradients are collected per id.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::ops::attention::{self, AttnLayout};
use crate::ops::blur::{self, Boundary};
use crate::ops::conv;
use crate::ops::resample::Resampler;
use crate::ops::sampling;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    DeformConv { x: Var, off: Var, w: Var, b: Option<Var> },
    Warp { x: Var, flow: Var },
    DeformAttn { values: Vec<Var>, attn: Var, off: Var, layout: AttnLayout },
    Blur { x: Var, kernel: Var, boundary: Boundary },
    Resample { x: Var, r: Box<Resampler> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, group: usize },
    ConcatChannels(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    ConcatBatch(Vec<Var>),
    SliceBatch { x: Var, start: usize },
    Reshape(Var),
    GlobalAvgPool(Var),
    MulChannel { x: Var, s: Var },
    PixelShuffle { x: Var, factor: usize },
    L1 { a: Var, b: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: BTreeMap<ParamId, Var>,
    frozen: fn(&str) -> bool,
}

/// Per-parameter gradients from one backward pass.
pub struct Gradients<T> {
    pub by_param: BTreeMap<ParamId, Tensor<T>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    /// Gradient reaching an arbitrary node, if any flowed there.
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

fn never_frozen(_: &str) -> bool {
    false
}

fn channel_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::shape(format!("expected NCHW, got {shape:?}"))),
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
            frozen: never_frozen,
        }
    }

    /// Parameters whose names match `frozen` enter the tape as constants.
    pub fn with_frozen(mut self, frozen: fn(&str) -> bool) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, op, needs)
    }

    /// A constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (for gradchecks and probes).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let frozen = (self.frozen)(self.params.name(id));
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param, !frozen);
        self.param_nodes.insert(id, v);
        v
    }

    /// Cut the tape: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let y = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), pad)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.derived(y, Op::Conv2d { x, w, b, pad }, &ins))
    }

    pub fn deform_conv(&mut self, x: Var, off: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = sampling::deform_conv2d(
            self.value(x),
            self.value(off),
            self.value(w),
            b.map(|b| self.value(b)),
        )?;
        let mut ins = vec![x, off, w];
        ins.extend(b);
        Ok(self.derived(y, Op::DeformConv { x, off, w, b }, &ins))
    }

    pub fn warp(&mut self, x: Var, flow: Var) -> Result<Var> {
        let y = sampling::warp(self.value(x), self.value(flow))?;
        Ok(self.derived(y, Op::Warp { x, flow }, &[x, flow]))
    }

    pub fn deform_attn(
        &mut self,
        layout: AttnLayout,
        values: &[Var],
        attn: Var,
        off: Var,
    ) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = values.iter().map(|&v| self.value(v)).collect();
        let y = attention::deform_attn(&layout, &vals, self.value(attn), self.value(off))?;
        let mut ins = values.to_vec();
        ins.extend([attn, off]);
        Ok(self.derived(
            y,
            Op::DeformAttn {
                values: values.to_vec(),
                attn,
                off,
                layout,
            },
            &ins,
        ))
    }

    pub fn blur(&mut self, x: Var, kernel: Var, boundary: Boundary) -> Result<Var> {
        let y = blur::blur(self.value(x), self.value(kernel), boundary)?;
        Ok(self.derived(
            y,
            Op::Blur {
                x,
                kernel,
                boundary,
            },
            &[x, kernel],
        ))
    }

    pub fn resample(&mut self, x: Var, r: &Resampler) -> Result<Var> {
        let y = r.apply(self.value(x))?;
        Ok(self.derived(
            y,
            Op::Resample {
                x,
                r: Box::new(r.clone()),
            },
            &[x],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.derived(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.derived(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.derived(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let y = self.value(a).map(|x| x * f);
        self.derived(y, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x.max(T::zero()));
        self.derived(y, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.derived(y, Op::Sigmoid(a), &[a])
    }

    /// Elementwise clamp to `[lo, hi]`; zero gradient where clipped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::lit(lo), T::lit(hi));
        let y = self.value(x).map(|v| v.max(l).min(h));
        self.derived(y, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Softmax over contiguous channel groups of size `group`, per pixel.
    pub fn softmax_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, c, hw) = channel_dims(self.shape(x))?;
        if group == 0 || c % group != 0 {
            return Err(Error::shape(format!(
                "{c} channels not divisible into groups of {group}"
            )));
        }
        let src = self.value(x);
        let mut y = Tensor::zeros(src.shape());
        let (xd, yd) = (src.data(), y.data_mut());
        for s in 0..n {
            for g0 in (0..c).step_by(group) {
                for p in 0..hw {
                    let at = |ch: usize| (s * c + g0 + ch) * hw + p;
                    let mx = (0..group).fold(T::neg_infinity(), |m, ch| m.max(xd[at(ch)]));
                    let mut total = T::zero();
                    for ch in 0..group {
                        let e = (xd[at(ch)] - mx).exp();
                        yd[at(ch)] = e;
                        total += e;
                    }
                    for ch in 0..group {
                        yd[at(ch)] = yd[at(ch)] / total;
                    }
                }
            }
        }
        Ok(self.derived(y, Op::Softmax { x, group }, &[x]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "cannot concat {:?} with {:?}",
                    self.shape(parts[0]),
                    self.shape(p)
                )));
            }
            total += pc;
        }
        let hw = h * w;
        let mut y = Tensor::zeros(&[n, total, h, w]);
        for s in 0..n {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                let pc = v.shape()[1];
                y.data_mut()[(s * total + off) * hw..(s * total + off + pc) * hw]
                    .copy_from_slice(&v.data()[s * pc * hw..(s + 1) * pc * hw]);
                off += pc;
            }
        }
        Ok(self.derived(y, Op::ConcatChannels(parts.to_vec()), parts))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c {
            return Err(Error::shape(format!(
                "channel range {start}..{} out of {c}",
                start + len
            )));
        }
        let hw = h * w;
        let mut y = Tensor::zeros(&[n, len, h, w]);
        for s in 0..n {
            y.data_mut()[s * len * hw..(s + 1) * len * hw].copy_from_slice(
                &self.value(x).data()[(s * c + start) * hw..(s * c + start + len) * hw],
            );
        }
        Ok(self.derived(y, Op::SliceChannels { x, start }, &[x]))
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let y = Tensor::stack0(&vals)?;
        Ok(self.derived(y, Op::ConcatBatch(parts.to_vec()), parts))
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).narrow0(start, len)?;
        Ok(self.derived(y, Op::SliceBatch { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(y, Op::Reshape(x), &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, hw) = channel_dims(self.shape(x))?;
        let inv = T::lit(1.0 / hw as f64);
        let src = self.value(x).data();
        let data = (0..n * c)
            .map(|i| src[i * hw..(i + 1) * hw].iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let y = Tensor::from_vec(&[n, c, 1, 1], data)?;
        Ok(self.derived(y, Op::GlobalAvgPool(x), &[x]))
    }

    /// `x[n, c, :, :] * s[n, c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, hw) = channel_dims(self.shape(x))?;
        if self.shape(s) != [n, c, 1, 1] {
            return Err(Error::shape(format!(
                "channel scale must be [{n}, {c}, 1, 1], got {:?}",
                self.shape(s)
            )));
        }
        let sv = self.value(s).data().to_vec();
        let mut y = self.value(x).clone();
        for (i, chunk) in y.data_mut().chunks_mut(hw).enumerate() {
            for v in chunk {
                *v *= sv[i];
            }
        }
        Ok(self.derived(y, Op::MulChannel { x, s }, &[x, s]))
    }

    /// `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`, channel `c*r*r + i*r + j`
    /// landing at sub-pixel `(i, j)`.
    pub fn pixel_shuffle(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = pixel_shuffle(self.value(x), factor)?;
        Ok(self.derived(y, Op::PixelShuffle { x, factor }, &[x]))
    }

    /// Mean absolute difference, as a one-element tensor.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        va.expect_same_shape(vb)?;
        let total = va
            .data()
            .iter()
            .zip(vb.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y).abs());
        let y = Tensor::from_vec(&[1], vec![total / T::lit(va.numel() as f64)])?;
        Ok(self.derived(y, Op::L1 { a, b }, &[a, b]))
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    /// Reverse pass from a scalar `loss` (seeded with gradient 1).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut by_param = BTreeMap::new();
        for (&id, &v) in &self.param_nodes {
            if let Some(g) = grads[v.0].as_ref() {
                by_param.insert(id, g.clone());
            }
        }
        Ok(Gradients {
            by_param,
            nodes: grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc.add_assign(&g)?,
            None => grads[v.0] = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::Conv2d { x, w, b, pad } => {
                let (dx, dw, db) =
                    conv::conv2d_backward(self.value(x), self.value(w), pad, g, self.needs(x))?;
                if let Some(dx) = dx {
                    self.accumulate(grads, x, dx)?;
                }
                self.accumulate(grads, w, dw)?;
                if let Some(b) = b {
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::DeformConv { x, off, w, b } => {
                let (dx, doff, dw, db) = sampling::deform_conv2d_backward(
                    self.value(x),
                    self.value(off),
                    self.value(w),
                    g,
                )?;
                self.accumulate(grads, x, dx)?;
                self.accumulate(grads, off, doff)?;
                self.accumulate(grads, w, dw)?;
                if let Some(b) = b {
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::Warp { x, flow } => {
                let (dx, dflow) = sampling::warp_backward(self.value(x), self.value(flow), g)?;
                self.accumulate(grads, x, dx)?;
                self.accumulate(grads, flow, dflow)?;
            }
            Op::DeformAttn {
                values,
                attn,
                off,
                layout,
            } => {
                let vals: Vec<&Tensor<T>> = values.iter().map(|&v| self.value(v)).collect();
                let (dvals, dattn, doff) = attention::deform_attn_backward(
                    layout,
                    &vals,
                    self.value(*attn),
                    self.value(*off),
                    g,
                )?;
                for (&v, dv) in values.iter().zip(dvals) {
                    self.accumulate(grads, v, dv)?;
                }
                self.accumulate(grads, *attn, dattn)?;
                self.accumulate(grads, *off, doff)?;
            }
            &Op::Blur {
                x,
                kernel,
                boundary,
            } => {
                let (dx, dk) = blur::blur_backward(
                    self.value(x),
                    self.value(kernel),
                    boundary,
                    g,
                    self.needs(x),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, x, dx)?;
                }
                self.accumulate(grads, kernel, dk)?;
            }
            Op::Resample { x, r } => {
                let dx = r.apply_transpose(g)?;
                self.accumulate(grads, *x, dx)?;
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.map(|v| -v))?;
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |u, v| u * v)?)?;
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |u, v| u * v)?)?;
                }
            }
            &Op::Scale(a, f) => {
                let f = T::lit(f);
                self.accumulate(grads, a, g.map(|v| v * f))?;
            }
            &Op::Relu(a) => {
                let d = g.zip_map(self.value(a), |u, x| if x > T::zero() { u } else { T::zero() })?;
                self.accumulate(grads, a, d)?;
            }
            &Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |u, y| u * y * (T::one() - y))?;
                self.accumulate(grads, a, d)?;
            }
            &Op::Clamp { x, lo, hi } => {
                let (l, h) = (T::lit(lo), T::lit(hi));
                let d = g.zip_map(self.value(x), |u, v| {
                    if v < l || v > h {
                        T::zero()
                    } else {
                        u
                    }
                })?;
                self.accumulate(grads, x, d)?;
            }
            &Op::Softmax { x, group } => {
                let (n, c, hw) = channel_dims(node.value.shape())?;
                let y = node.value.data();
                let mut d = Tensor::zeros(node.value.shape());
                for s in 0..n {
                    for g0 in (0..c).step_by(group) {
                        for p in 0..hw {
                            let at = |ch: usize| (s * c + g0 + ch) * hw + p;
                            let dot = (0..group)
                                .fold(T::zero(), |a, ch| a + g.data()[at(ch)] * y[at(ch)]);
                            for ch in 0..group {
                                d.data_mut()[at(ch)] = y[at(ch)] * (g.data()[at(ch)] - dot);
                            }
                        }
                    }
                }
                self.accumulate(grads, x, d)?;
            }
            Op::ConcatChannels(parts) => {
                let (n, total, hw) = channel_dims(node.value.shape())?;
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.needs(p) {
                        let mut d = Tensor::zeros(self.shape(p));
                        for s in 0..n {
                            d.data_mut()[s * pc * hw..(s + 1) * pc * hw].copy_from_slice(
                                &g.data()[(s * total + off) * hw..(s * total + off + pc) * hw],
                            );
                        }
                        self.accumulate(grads, p, d)?;
                    }
                    off += pc;
                }
            }
            &Op::SliceChannels { x, start } => {
                let (n, c, hw) = channel_dims(self.shape(x))?;
                let len = node.value.shape()[1];
                let mut d = Tensor::zeros(self.shape(x));
                for s in 0..n {
                    d.data_mut()[(s * c + start) * hw..(s * c + start + len) * hw]
                        .copy_from_slice(&g.data()[s * len * hw..(s + 1) * len * hw]);
                }
                self.accumulate(grads, x, d)?;
            }
            Op::ConcatBatch(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[0];
                    if self.needs(p) {
                        self.accumulate(grads, p, g.narrow0(start, len)?)?;
                    }
                    start += len;
                }
            }
            &Op::SliceBatch { x, start } => {
                let mut d = Tensor::zeros(self.shape(x));
                let inner: usize = self.shape(x)[1..].iter().product();
                d.data_mut()[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, x, d)?;
            }
            &Op::Reshape(x) => {
                let d = g.clone().reshape(self.shape(x))?;
                self.accumulate(grads, x, d)?;
            }
            &Op::GlobalAvgPool(x) => {
                let (_, _, hw) = channel_dims(self.shape(x))?;
                let inv = T::lit(1.0 / hw as f64);
                let mut d = Tensor::zeros(self.shape(x));
                for (i, chunk) in d.data_mut().chunks_mut(hw).enumerate() {
                    chunk.fill(g.data()[i] * inv);
                }
                self.accumulate(grads, x, d)?;
            }
            &Op::MulChannel { x, s } => {
                let (_, _, hw) = channel_dims(self.shape(x))?;
                let sv = self.value(s).data();
                let xv = self.value(x).data();
                if self.needs(x) {
                    let mut d = g.clone();
                    for (i, chunk) in d.data_mut().chunks_mut(hw).enumerate() {
                        for v in chunk {
                            *v *= sv[i];
                        }
                    }
                    self.accumulate(grads, x, d)?;
                }
                if self.needs(s) {
                    let data = (0..sv.len())
                        .map(|i| {
                            g.data()[i * hw..(i + 1) * hw]
                                .iter()
                                .zip(&xv[i * hw..(i + 1) * hw])
                                .fold(T::zero(), |a, (&u, &v)| a + u * v)
                        })
                        .collect();
                    self.accumulate(grads, s, Tensor::from_vec(self.shape(s), data)?)?;
                }
            }
            &Op::PixelShuffle { x, factor } => {
                let d = pixel_unshuffle(g, factor)?;
                self.accumulate(grads, x, d)?;
            }
            &Op::L1 { a, b } => {
                let scale = g.data()[0] / T::lit(self.value(a).numel() as f64);
                let sign = self.value(a).zip_map(self.value(b), |x, y| {
                    if x > y {
                        scale
                    } else if x < y {
                        -scale
                    } else {
                        T::zero()
                    }
                })?;
                if self.needs(b) {
                    self.accumulate(grads, b, sign.map(|v| -v))?;
                }
                self.accumulate(grads, a, sign)?;
            }
        }
        Ok(())
    }
}

pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape(format!(
            "{c} channels not divisible by {r}^2 for pixel shuffle"
        )));
    }
    let co = c / (r * r);
    let mut y = Tensor::zeros(&[n, co, h * r, w * r]);
    let (xd, yd) = (x.data(), y.data_mut());
    for s in 0..n {
        for o in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let ci = o * r * r + i * r + j;
                    for yy in 0..h {
                        for xx in 0..w {
                            yd[((s * co + o) * h * r + yy * r + i) * w * r + xx * r + j] =
                                xd[((s * c + ci) * h + yy) * w + xx];
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn pixel_unshuffle<T: Real>(y: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, co, hr, wr) = y.dims4()?;
    if r == 0 || hr % r != 0 || wr % r != 0 {
        return Err(Error::shape("pixel unshuffle dims not divisible"));
    }
    let (h, w, c) = (hr / r, wr / r, co * r * r);
    let mut x = Tensor::zeros(&[n, c, h, w]);
    let (yd, xd) = (y.data(), x.data_mut());
    for s in 0..n {
        for o in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let ci = o * r * r + i * r + j;
                    for yy in 0..h {
                        for xx in 0..w {
                            xd[((s * c + ci) * h + yy) * w + xx] =
                                yd[((s * co + o) * hr + yy * r + i) * wr + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(x)
}
