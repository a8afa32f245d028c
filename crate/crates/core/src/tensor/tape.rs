//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends one node holding its value and enough context to
//! replay the adjoint. `backward` walks the nodes in exact reverse order, so
//! the tape is topologically sorted by construction.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParamStore};
use super::{numel, Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op whose forward value is computed outside the tape and whose adjoint
/// is supplied by the implementor.
pub trait CustomOp<T: Float>: Send {
    fn name(&self) -> &'static str;

    /// Gradient for each input, in input order. `None` means no contribution.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Float> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddSpatial { x: Var, map: Var },
    MulChannel { x: Var, scale: Var },
    MulSpatial { x: Var, map: Var },
    Relu(Var),
    Relu6(Var),
    Sigmoid(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Concat(Vec<Var>),
    Resize(Var),
    Softmax { x: Var, axis: usize },
    ChannelMax { x: Var, argmax: Vec<u32> },
    AvgPool(Var),
    Sum(Var),
    Mean(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of non-parameter leaves, returned by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Float> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    branch_hash: Option<u64>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            branch_hash: None,
        }
    }

    /// Tape for inference: values only, nothing saved for backward.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Records a fingerprint of every discrete branch taken by non-smooth ops
    /// (ReLU sign, max index, sort order, clamps). Two forward passes with the
    /// same fingerprint evaluate the same smooth piece of the function.
    pub fn track_branches(&mut self) {
        self.branch_hash = Some(FNV_OFFSET);
    }

    pub fn branch_fingerprint(&self) -> Option<u64> {
        self.branch_hash
    }

    /// Folds discrete decisions into the branch fingerprint, if tracking.
    pub fn note_branches(&mut self, bits: impl IntoIterator<Item = u32>) {
        if let Some(h) = self.branch_hash.as_mut() {
            for b in bits {
                for byte in b.to_le_bytes() {
                    *h ^= byte as u64;
                    *h = h.wrapping_mul(FNV_PRIME);
                }
            }
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        if self.branch_hash.is_some() {
            self.branch_hash = Some(FNV_OFFSET);
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {}", op_name(&op));
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported in [`Gradients`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Binds a parameter; repeated calls within one pass share a node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kt = T::narrow(k);
        let v = self.value(a).map(|x| x * kt);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, k), rg)
    }

    /// `x (C×H×W) + map (1×H×W)` broadcast over channels.
    pub fn add_spatial(&mut self, x: Var, map: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let (mc, mh, mw) = self.value(map).dims3()?;
        if mc != 1 || mh != h || mw != w {
            return Err(Error::dim("add_spatial", self.shape(x), self.shape(map)));
        }
        let hw = h * w;
        let m = self.value(map).data();
        let mut out = self.value(x).data().to_vec();
        for ch in 0..c {
            for (o, &mv) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(m) {
                *o += mv;
            }
        }
        let rg = self.rg(&[x, map]);
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::AddSpatial { x, map }, rg))
    }

    /// `x (C×H×W) ⊙ s (C)` per-channel scaling.
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(scale).numel() != c {
            return Err(Error::dim("mul_channel", self.shape(x), self.shape(scale)));
        }
        let hw = h * w;
        let s = self.value(scale).data();
        let mut out = self.value(x).data().to_vec();
        for ch in 0..c {
            out[ch * hw..(ch + 1) * hw].iter_mut().for_each(|o| *o *= s[ch]);
        }
        let rg = self.rg(&[x, scale]);
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::MulChannel { x, scale }, rg))
    }

    /// `x (C×H×W) ⊙ map (1×H×W)` broadcast over channels.
    pub fn mul_spatial(&mut self, x: Var, map: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let (mc, mh, mw) = self.value(map).dims3()?;
        if mc != 1 || mh != h || mw != w {
            return Err(Error::dim("mul_spatial", self.shape(x), self.shape(map)));
        }
        let hw = h * w;
        let m = self.value(map).data();
        let mut out = self.value(x).data().to_vec();
        for ch in 0..c {
            for (o, &mv) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(m) {
                *o *= mv;
            }
        }
        let rg = self.rg(&[x, map]);
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::MulSpatial { x, map }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if self.branch_hash.is_some() {
            let bits: Vec<u32> = self.value(x).data().iter().map(|&v| (v > T::zero()) as u32).collect();
            self.note_branches(bits);
        }
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let six = T::narrow(6.0);
        if self.branch_hash.is_some() {
            let bits: Vec<u32> = self
                .value(x)
                .data()
                .iter()
                .map(|&v| (v > T::zero()) as u32 + (v >= six) as u32)
                .collect();
            self.note_branches(bits);
        }
        let v = self.value(x).map(|v| v.max(T::zero()).min(six));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu6(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| T::narrow(sigmoid(v.widen())));
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    /// `a (P×Q) · b (Q×R)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (p, q, r) = match (sa.as_slice(), sb.as_slice()) {
            ([p, q], [q2, r]) if q == q2 => (*p, *q, *r),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), p, q, r, None);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![p, r], out)?, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).numel() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Cross-correlation of `x (C_in×H×W)` with `w (C_out×C_in×k×k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.value(x).dims3()?;
        let (c_out, c_in, k) = match *self.shape(w) {
            [o, i, k1, k2] if k1 == k2 => (o, i, k1),
            _ => return Err(Error::shape("conv2d", format!("weight shape {:?}", self.shape(w)))),
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size must be odd, got {k}")));
        }
        if c_in != c {
            return Err(Error::dim("conv2d", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::dim("conv2d bias", self.shape(b), &[c_out]));
            }
        }
        let geom = ConvGeom::new(c, h, wd, k, stride, pad)?;
        let plane = geom.out_h * geom.out_w;
        let bias = b.map(|b| self.value(b).data());
        let (out, cols) = if geom.is_pointwise() {
            let out = kernels::matmul(self.value(w).data(), self.value(x).data(), c_out, c, plane, bias);
            (out, None)
        } else {
            let cols = kernels::im2col(self.value(x).data(), &geom);
            let out = kernels::matmul(self.value(w).data(), &cols, c_out, c * k * k, plane, bias);
            (out, Some(cols))
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let value = Tensor::new(vec![c_out, geom.out_h, geom.out_w], out)?;
        let cols = if rg && self.grad_enabled { cols } else { None };
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Per-channel convolution, `w` is `C×1×k×k`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.value(x).dims3()?;
        let k = match *self.shape(w) {
            [o, 1, k1, k2] if k1 == k2 && o == c => k1,
            _ => return Err(Error::dim("depthwise_conv2d", self.shape(x), self.shape(w))),
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel size must be odd, got {k}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(Error::dim("depthwise bias", self.shape(b), &[c]));
            }
        }
        let geom = ConvGeom::new(c, h, wd, k, stride, pad)?;
        let out = kernels::depthwise_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let value = Tensor::new(vec![c, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, Op::Depthwise { x, w, b, geom }, rg))
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim("concat", self.shape(*first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Bilinear resize of `C×H×W` to `C×out_h×out_w` with half-pixel centers.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument(format!("resize target {out_h}×{out_w} has a zero extent")));
        }
        let (c, h, w) = self.value(x).dims3()?;
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let out = kernels::bilinear_forward(self.value(x).data(), c, h, w, out_h, out_w);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, out_h, out_w], out)?, Op::Resize(x), rg))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let out = softmax_along(self.value(x).data(), &shape, axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Max over channels: `C×H×W → 1×H×W`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let hw = h * w;
        let data = self.value(x).data();
        let mut out = data[..hw].to_vec();
        let mut argmax = vec![0u32; hw];
        for ch in 1..c {
            for p in 0..hw {
                let v = data[ch * hw + p];
                if v > out[p] {
                    out[p] = v;
                    argmax[p] = ch as u32;
                }
            }
        }
        self.note_branches(argmax.clone());
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![1, h, w], out)?, Op::ChannelMax { x, argmax }, rg))
    }

    /// Spatial mean per channel: `C×H×W → C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let hw = h * w;
        let data = self.value(x).data();
        let out = (0..c)
            .map(|ch| T::narrow(data[ch * hw..(ch + 1) * hw].iter().map(|v| v.widen()).sum::<f64>() / hw as f64))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c], out)?, Op::AvgPool(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::narrow(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::narrow(m)), Op::Mean(x), rg)
    }

    /// Records a custom op whose forward `output` was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Back-propagates from a scalar `loss`. Parameter gradients are added to
    /// `store`; gradients of other requires-grad leaves are returned. The tape
    /// is cleared afterwards.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut sink = Sink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {
                    leaves.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Param(id) => store.get_mut(*id).accumulate_grad(&g),
                op => backward_op(op, &node.value, &g, &mut sink),
            }
        }
        self.clear();
        Ok(Gradients { grads: leaves })
    }
}

struct Sink<'a, T: Float> {
    nodes: &'a [Node<T>],
    grads: &'a mut Vec<Option<Vec<T>>>,
}

impl<T: Float> Sink<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn add(&mut self, v: Var, g: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        debug_assert_eq!(g.len(), self.nodes[v.0].value.numel());
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn add_with(&mut self, v: Var, f: impl FnOnce() -> Vec<T>) {
        if self.wants(v) {
            let g = f();
            self.add(v, g);
        }
    }
}

fn backward_op<T: Float>(op: &Op<T>, out: &Tensor<T>, g: &[T], sink: &mut Sink<'_, T>) {
    match op {
        Op::Leaf | Op::Param(_) => unreachable!("leaves handled by caller"),
        Op::Add(a, b) => {
            sink.add(*a, g.to_vec());
            sink.add(*b, g.to_vec());
        }
        Op::Sub(a, b) => {
            sink.add(*a, g.to_vec());
            sink.add_with(*b, || g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (sink.value(*a).data().to_vec(), sink.value(*b).data().to_vec());
            sink.add_with(*a, || g.iter().zip(&bv).map(|(&g, &y)| g * y).collect());
            sink.add_with(*b, || g.iter().zip(&av).map(|(&g, &x)| g * x).collect());
        }
        Op::Scale(a, k) => {
            let k = T::narrow(*k);
            sink.add(*a, g.iter().map(|&v| v * k).collect());
        }
        Op::AddSpatial { x, map } => {
            sink.add(*x, g.to_vec());
            let hw = sink.value(*map).numel();
            sink.add_with(*map, || {
                let mut acc = vec![0f64; hw];
                for chunk in g.chunks(hw) {
                    acc.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v.widen());
                }
                acc.into_iter().map(T::narrow).collect()
            });
        }
        Op::MulChannel { x, scale } => {
            let c = sink.value(*scale).numel();
            let hw = g.len() / c;
            let s = sink.value(*scale).data().to_vec();
            let xv = sink.value(*x).data().to_vec();
            sink.add_with(*x, || {
                g.chunks(hw)
                    .zip(&s)
                    .flat_map(|(chunk, &sv)| chunk.iter().map(move |&v| v * sv))
                    .collect()
            });
            sink.add_with(*scale, || {
                g.chunks(hw)
                    .zip(xv.chunks(hw))
                    .map(|(gc, xc)| T::narrow(gc.iter().zip(xc).map(|(a, b)| a.widen() * b.widen()).sum()))
                    .collect()
            });
        }
        Op::MulSpatial { x, map } => {
            let hw = sink.value(*map).numel();
            let m = sink.value(*map).data().to_vec();
            let xv = sink.value(*x).data().to_vec();
            sink.add_with(*x, || {
                g.chunks(hw)
                    .flat_map(|chunk| chunk.iter().zip(&m).map(|(&g, &mv)| g * mv))
                    .collect()
            });
            sink.add_with(*map, || {
                let mut acc = vec![0f64; hw];
                for (gc, xc) in g.chunks(hw).zip(xv.chunks(hw)) {
                    for ((a, &g), &x) in acc.iter_mut().zip(gc).zip(xc) {
                        *a += g.widen() * x.widen();
                    }
                }
                acc.into_iter().map(T::narrow).collect()
            });
        }
        Op::Relu(x) => {
            let xv = sink.value(*x).data();
            let gi = g.iter().zip(xv).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect();
            sink.add(*x, gi);
        }
        Op::Relu6(x) => {
            let six = T::narrow(6.0);
            let xv = sink.value(*x).data();
            let gi = g
                .iter()
                .zip(xv)
                .map(|(&g, &x)| if x > T::zero() && x < six { g } else { T::zero() })
                .collect();
            sink.add(*x, gi);
        }
        Op::Sigmoid(x) => {
            let gi = g.iter().zip(out.data()).map(|(&g, &y)| g * y * (T::one() - y)).collect();
            sink.add(*x, gi);
        }
        Op::Matmul(a, b) => {
            let (p, q) = sink.value(*a).dims2().expect("matrix");
            let r = out.shape()[1];
            if sink.wants(*a) {
                let bt = kernels::transpose(sink.value(*b).data(), q, r);
                let ga = kernels::matmul(g, &bt, p, r, q, None);
                sink.add(*a, ga);
            }
            if sink.wants(*b) {
                let at = kernels::transpose(sink.value(*a).data(), p, q);
                let gb = kernels::matmul(&at, g, q, p, r, None);
                sink.add(*b, gb);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = sink.value(*a).dims2().expect("matrix");
            sink.add(*a, kernels::transpose(g, c, r));
        }
        Op::Reshape(a) => sink.add(*a, g.to_vec()),
        Op::Conv2d { x, w, b, geom, cols } => {
            let c_out = out.shape()[0];
            let plane = geom.out_h * geom.out_w;
            let kk = geom.channels * geom.kernel * geom.kernel;
            if let Some(b) = b {
                sink.add_with(*b, || {
                    g.chunks(plane)
                        .map(|row| T::narrow(row.iter().map(|v| v.widen()).sum()))
                        .collect()
                });
            }
            if sink.wants(*w) {
                let src = cols.as_deref().unwrap_or_else(|| sink.value(*x).data());
                let src_t = kernels::transpose(src, kk, plane);
                let gw = kernels::matmul(g, &src_t, c_out, plane, kk, None);
                sink.add(*w, gw);
            }
            if sink.wants(*x) {
                let wt = kernels::transpose(sink.value(*w).data(), c_out, kk);
                let gcols = kernels::matmul(&wt, g, kk, c_out, plane, None);
                let gx = if geom.is_pointwise() {
                    gcols
                } else {
                    kernels::col2im(&gcols, geom)
                };
                sink.add(*x, gx);
            }
        }
        Op::Depthwise { x, w, b, geom } => {
            let (dx, dw, db) = kernels::depthwise_backward(
                sink.value(*x).data(),
                sink.value(*w).data(),
                g,
                geom,
                sink.wants(*x),
            );
            if let Some(dx) = dx {
                sink.add(*x, dx);
            }
            sink.add(*w, dw);
            if let Some(b) = b {
                sink.add(*b, db);
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = sink.value(p).numel();
                sink.add(p, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::Resize(x) => {
            let (c, h, w) = sink.value(*x).dims3().expect("chw");
            let (oh, ow) = (out.shape()[1], out.shape()[2]);
            sink.add(*x, kernels::bilinear_backward(g, c, h, w, oh, ow));
        }
        Op::Softmax { x, axis } => {
            let shape = out.shape();
            let (outer, len, inner) = axis_split(shape, *axis);
            let y = out.data();
            let mut gi = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| g[idx(j)].widen() * y[idx(j)].widen()).sum();
                    for j in 0..len {
                        gi[idx(j)] = T::narrow(y[idx(j)].widen() * (g[idx(j)].widen() - dot));
                    }
                }
            }
            sink.add(*x, gi);
        }
        Op::ChannelMax { x, argmax } => {
            let n = sink.value(*x).numel();
            let hw = argmax.len();
            let mut gi = vec![T::zero(); n];
            for (p, &ch) in argmax.iter().enumerate() {
                gi[ch as usize * hw + p] = g[p];
            }
            sink.add(*x, gi);
        }
        Op::AvgPool(x) => {
            let n = sink.value(*x).numel();
            let c = g.len();
            let hw = n / c;
            let inv = 1.0 / hw as f64;
            let gi = g
                .iter()
                .flat_map(|&v| std::iter::repeat_n(T::narrow(v.widen() * inv), hw))
                .collect();
            sink.add(*x, gi);
        }
        Op::Sum(x) => {
            let n = sink.value(*x).numel();
            sink.add(*x, vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = sink.value(*x).numel();
            sink.add(*x, vec![T::narrow(g[0].widen() / n as f64); n]);
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| sink.value(v)).collect();
            let gt = Tensor::new(out.shape().to_vec(), g.to_vec()).expect("grad shape");
            let gs = op.backward(&ins, out, &gt);
            debug_assert_eq!(gs.len(), inputs.len(), "custom op {} gradient arity", op.name());
            for (&v, gi) in inputs.iter().zip(gs) {
                if let Some(gi) = gi {
                    sink.add(v, gi.into_data());
                }
            }
        }
    }
}

fn op_name<T: Float>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddSpatial { .. } => "add_spatial",
        Op::MulChannel { .. } => "mul_channel",
        Op::MulSpatial { .. } => "mul_spatial",
        Op::Relu(_) => "relu",
        Op::Relu6(_) => "relu6",
        Op::Sigmoid(_) => "sigmoid",
        Op::Matmul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::Conv2d { .. } => "conv2d",
        Op::Depthwise { .. } => "depthwise_conv2d",
        Op::Concat(_) => "concat",
        Op::Resize(_) => "resize_bilinear",
        Op::Softmax { .. } => "softmax",
        Op::ChannelMax { .. } => "channel_max",
        Op::AvgPool(_) => "global_avg_pool",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Custom { op, .. } => op.name(),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, axis_len, inner)` such that index = (o·len + j)·inner + i.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_along<T: Float>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    let mut buf = vec![0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)].widen()).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (x[idx(j)].widen() - max).exp();
                total += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                out[idx(j)] = T::narrow(b / total);
            }
        }
    }
    out
}
