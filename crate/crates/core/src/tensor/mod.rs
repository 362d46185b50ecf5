//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node in creation order, so the
//! node list is already a topological order of the graph. [`Tape::backward`]
//! walks it once in reverse. Tensors are handled through [`Var`] indices.
//!
//! Broadcasting is limited to tensor-scalar pairs: a binary op accepts two
//! identical shapes or one operand with a single element.

mod adam;
pub mod gradcheck;
pub mod kernels;
mod real;

use std::sync::Arc;

pub use adam::{adam_step, AdamState, Parameter};
pub use kernels::{ConvGeometry, GaussianWindow};
pub use real::Real;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    MulConst(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Pow2(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    ChannelSum(Var),
    SpatialSum(Var),
    RepeatChannels(Var),
    SliceChannels(Var, usize),
    DiffX(Var),
    DiffY(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Blur(Var, Arc<GaussianWindow>),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
    /// Whether any trainable leaf is upstream of this node.
    tracked: bool,
    /// Accumulated gradient; only ever populated for tracked leaves.
    grad: Option<Vec<T>>,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[inline]
fn at<T: Copy>(v: &[T], i: usize) -> T {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

/// Sums a full-size gradient down to a scalar operand when broadcasting.
fn reduce_into<T: Real>(dst: &mut [T], contrib: impl Iterator<Item = T>) {
    if dst.len() == 1 {
        let s: f64 = contrib.map(|v| v.as_f64()).sum();
        dst[0] = dst[0] + T::of(s);
    } else {
        for (d, c) in dst.iter_mut().zip(contrib) {
            *d = *d + c;
        }
    }
}

fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let n = &nodes[v.0];
    if !n.tracked {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]))
}

fn chw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidArgument(format!("{op}: expected a [C, H, W] tensor, got {shape:?}"))),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of which side of its kink every `relu`, `abs` and `clamp`
    /// input element lies on. Two evaluations of the same graph with equal
    /// signatures lie in the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        };
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) | Op::Abs(a) => {
                    for &x in &self.nodes[a.0].value {
                        feed((x > T::zero()) as u8);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    for &x in &self.nodes[a.0].value {
                        let x = x.as_f64();
                        feed(if x < lo { 0 } else if x > hi { 2 } else { 1 });
                    }
                }
                _ => {}
            }
        }
        h
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn new_leaf(&mut self, shape: &[usize], data: Vec<T>, tracked: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidArgument(format!(
                "leaf of shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value: data,
            op: Op::Leaf,
            tracked,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf: gradients are accumulated for it by [`backward`](Self::backward).
    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        self.new_leaf(shape, data, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        self.new_leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![1], vec![T::of(v)], Op::Leaf, &[])
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a one-element tensor.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.fill(T::zero());
            }
        }
    }

    // ---- element-wise ----

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || numel(sb) == 1 {
            Ok(sa.to_vec())
        } else if numel(sa) == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        let shape = self.binary_shape(name, a, b)?;
        let n = numel(&shape);
        let (va, vb) = (self.value(a), self.value(b));
        let value = (0..n).map(|i| f(at(va, i), at(vb, i))).collect();
        Ok(self.push(shape, value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Element-wise division. Exact zeros in the divisor are rejected.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).iter().any(|v| v.is_zero()) {
            return Err(Error::ZeroDivisor { op: "div" });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let k = T::of(c);
        self.unary(a, |x| x * k, Op::MulConst(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn pow2(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Pow2(a))
    }

    /// Clamp to `[lo, hi]`; the gradient passes through inside the closed range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(a, |x| x.max(l).min(h), Op::Clamp(a, lo, hi))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|v| v.as_f64()).sum();
        self.push(vec![1], vec![T::of(s)], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.iter().map(|v| v.as_f64()).sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![T::of(s)], Op::Mean(a), &[a])
    }

    // ---- planar [C, H, W] ops ----

    /// Sums over the channel axis: `[C, H, W] -> [1, H, W]`.
    pub fn channel_sum(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = chw(self.shape(a), "channel_sum")?;
        let plane = h * w;
        let v = self.value(a);
        let value = (0..plane)
            .map(|p| (0..c).fold(T::zero(), |acc, ch| acc + v[ch * plane + p]))
            .collect();
        Ok(self.push(vec![1, h, w], value, Op::ChannelSum(a), &[a]))
    }

    /// Sums every channel plane: `[C, H, W] -> [C]`.
    pub fn spatial_sum(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = chw(self.shape(a), "spatial_sum")?;
        let plane = h * w;
        let v = self.value(a);
        let value = (0..c)
            .map(|ch| T::of(v[ch * plane..(ch + 1) * plane].iter().map(|x| x.as_f64()).sum()))
            .collect();
        Ok(self.push(vec![c], value, Op::SpatialSum(a), &[a]))
    }

    /// Tiles a single plane: `[1, H, W] -> [C, H, W]`.
    pub fn repeat_channels(&mut self, a: Var, channels: usize) -> Result<Var> {
        let (c, h, w) = chw(self.shape(a), "repeat_channels")?;
        if c != 1 {
            return Err(Error::shape("repeat_channels", self.shape(a), &[1, h, w]));
        }
        let v = self.value(a);
        let mut value = Vec::with_capacity(channels * h * w);
        for _ in 0..channels {
            value.extend_from_slice(v);
        }
        Ok(self.push(vec![channels, h, w], value, Op::RepeatChannels(a), &[a]))
    }

    /// Channels `start..start + len` of a `[C, H, W]` tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = chw(self.shape(a), "slice_channels")?;
        if start + len > c || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice_channels: {start}..{} out of {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let value = self.value(a)[start * plane..(start + len) * plane].to_vec();
        Ok(self.push(vec![len, h, w], value, Op::SliceChannels(a, start), &[a]))
    }

    /// Horizontal forward difference, zero in the last column.
    pub fn diff_x(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = chw(self.shape(a), "diff_x")?;
        let value = kernels::diff_x(self.value(a), c, h, w);
        Ok(self.push(vec![c, h, w], value, Op::DiffX(a), &[a]))
    }

    /// Vertical forward difference, zero in the last row.
    pub fn diff_y(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = chw(self.shape(a), "diff_y")?;
        let value = kernels::diff_y(self.value(a), c, h, w);
        Ok(self.push(vec![c, h, w], value, Op::DiffY(a), &[a]))
    }

    /// Same-padded 2-D cross-correlation with per-output-channel bias.
    ///
    /// `input` is `[C_in, H, W]`, `weight` is `[C_out, C_in, k, k]` with odd
    /// `k`, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (c_in, height, width) = chw(self.shape(input), "conv2d")?;
        let geom = match *self.shape(weight) {
            [c_out, wc_in, k, k2] if wc_in == c_in && k == k2 && k % 2 == 1 => ConvGeometry {
                c_in,
                c_out,
                height,
                width,
                kernel: k,
            },
            _ => return Err(Error::shape("conv2d", self.shape(input), self.shape(weight))),
        };
        if self.shape(bias) != [geom.c_out] {
            return Err(Error::shape("conv2d bias", self.shape(weight), self.shape(bias)));
        }
        let value = kernels::conv2d_forward(&geom, self.value(input), self.value(weight), self.value(bias));
        Ok(self.push(
            vec![geom.c_out, height, width],
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        ))
    }

    /// Border-renormalized separable Gaussian filter over each channel.
    pub fn blur(&mut self, a: Var, window: Arc<GaussianWindow>) -> Result<Var> {
        let (c, h, w) = chw(self.shape(a), "blur")?;
        let value = window.apply(self.value(a), c, h, w);
        Ok(self.push(vec![c, h, w], value, Op::Blur(a, window), &[a]))
    }

    // ---- reverse pass ----

    /// Accumulates `d root / d leaf` into every trainable leaf.
    ///
    /// Repeated calls add to the existing leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.shape(root);
        if numel(root_shape) != 1 {
            return Err(Error::NonScalarRoot(root_shape.to_vec()));
        }
        let count = root.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..count).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for i in (0..count).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let y = &node.value;
        match node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    reduce_into(ga, g.iter().copied());
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    reduce_into(gb, g.iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    reduce_into(ga, g.iter().copied());
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    reduce_into(gb, g.iter().map(|&v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot(nodes, grads, a) {
                    reduce_into(ga, g.iter().enumerate().map(|(i, &gi)| gi * at(vb, i)));
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    reduce_into(gb, g.iter().enumerate().map(|(i, &gi)| gi * at(va, i)));
                }
            }
            Op::Div(a, b) => {
                let vb = &nodes[b.0].value;
                if let Some(ga) = slot(nodes, grads, a) {
                    reduce_into(ga, g.iter().enumerate().map(|(i, &gi)| gi / at(vb, i)));
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    reduce_into(gb, g.iter().enumerate().map(|(i, &gi)| -gi * y[i] / at(vb, i)));
                }
            }
            Op::AddConst(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    reduce_into(ga, g.iter().copied());
                }
            }
            Op::MulConst(a, c) => {
                let c = T::of(c);
                if let Some(ga) = slot(nodes, grads, a) {
                    reduce_into(ga, g.iter().map(|&v| v * c));
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    reduce_into(ga, g.iter().zip(y).map(|(&gi, &s)| gi * s * (T::one() - s)));
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    reduce_into(ga, g.iter().zip(y).map(|(&gi, &t)| gi * (T::one() - t * t)));
                }
            }
            Op::Relu(a) => {
                let x = &nodes[a.0].value;
                if let Some(ga) = slot(nodes, grads, a) {
                    reduce_into(
                        ga,
                        g.iter().zip(x).map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() }),
                    );
                }
            }
            Op::Abs(a) => {
                let x = &nodes[a.0].value;
                if let Some(ga) = slot(nodes, grads, a) {
                    reduce_into(
                        ga,
                        g.iter().zip(x).map(|(&gi, &xi)| {
                            if xi > T::zero() {
                                gi
                            } else if xi < T::zero() {
                                -gi
                            } else {
                                T::zero()
                            }
                        }),
                    );
                }
            }
            Op::Pow2(a) => {
                let x = &nodes[a.0].value;
                let two = T::of(2.0);
                if let Some(ga) = slot(nodes, grads, a) {
                    reduce_into(ga, g.iter().zip(x).map(|(&gi, &xi)| two * xi * gi));
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = &nodes[a.0].value;
                let (lo, hi) = (T::of(lo), T::of(hi));
                if let Some(ga) = slot(nodes, grads, a) {
                    reduce_into(
                        ga,
                        g.iter()
                            .zip(x)
                            .map(|(&gi, &xi)| if xi >= lo && xi <= hi { gi } else { T::zero() }),
                    );
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().for_each(|v| *v = *v + g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    let s = g[0] / T::of(ga.len() as f64);
                    ga.iter_mut().for_each(|v| *v = *v + s);
                }
            }
            Op::ChannelSum(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    let plane = g.len();
                    for (i, v) in ga.iter_mut().enumerate() {
                        *v = *v + g[i % plane];
                    }
                }
            }
            Op::SpatialSum(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    let plane = ga.len() / g.len();
                    for (i, v) in ga.iter_mut().enumerate() {
                        *v = *v + g[i / plane];
                    }
                }
            }
            Op::RepeatChannels(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    let plane = ga.len();
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i % plane] = ga[i % plane] + gi;
                    }
                }
            }
            Op::SliceChannels(a, start) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    let plane = node.shape[1] * node.shape[2];
                    let dst = &mut ga[start * plane..start * plane + g.len()];
                    dst.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi);
                }
            }
            Op::DiffX(a) => {
                let (c, h, w) = (node.shape[0], node.shape[1], node.shape[2]);
                if let Some(ga) = slot(nodes, grads, a) {
                    kernels::diff_x_adjoint_add(g, c, h, w, ga);
                }
            }
            Op::DiffY(a) => {
                let (c, h, w) = (node.shape[0], node.shape[1], node.shape[2]);
                if let Some(ga) = slot(nodes, grads, a) {
                    kernels::diff_y_adjoint_add(g, c, h, w, ga);
                }
            }
            Op::Blur(a, ref window) => {
                let (c, h, w) = (node.shape[0], node.shape[1], node.shape[2]);
                if let Some(ga) = slot(nodes, grads, a) {
                    let back = window.apply_adjoint(g, c, h, w);
                    ga.iter_mut().zip(back).for_each(|(d, b)| *d = *d + b);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                // Conv needs three disjoint mutable slots at once.
                let want = |v: Var| nodes[v.0].tracked;
                let mut take = |v: Var| {
                    want(v).then(|| {
                        grads[v.0]
                            .take()
                            .unwrap_or_else(|| vec![T::zero(); nodes[v.0].value.len()])
                    })
                };
                let mut gi = take(input);
                let mut gw = take(weight);
                let mut gb = take(bias);
                kernels::conv2d_backward(
                    &geom,
                    &nodes[input.0].value,
                    &nodes[weight.0].value,
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, buf) in [(input, gi), (weight, gw), (bias, gb)] {
                    if buf.is_some() {
                        grads[v.0] = buf;
                    }
                }
            }
        }
    }
}
