//! Recorded-operation tape for reverse-mode differentiation.
//!
//! Every forward op evaluates eagerly, pushes a node holding its value and whatever it
//! needs for the backward pass, and returns a [`Var`] handle. [`Tape::backward`] walks the
//! nodes in reverse and deposits parameter gradients into the [`ParamStore`].

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{self, gemm, ConvGeometry, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

/// Backward rule for a user-supplied op: `(input values, output value, output grad) -> input grads`.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        // im2col buffer; empty for 1x1/stride-1/no-pad kernels where it equals the input.
        cols: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Resize(Var),
    Softmax(Var),
    FuseBroadcast {
        feat: Var,
        text: Var,
        weight: Var,
        bias: Var,
    },
    WeightedSum {
        levels: Vec<Var>,
        weights: Var,
    },
    EmbedMean {
        table: Var,
        ids: Vec<usize>,
    },
    SpatialMean(Var),
    PixelNll {
        probs: Var,
        gt: Vec<usize>,
        eps: f64,
    },
    CosineDistance(Var, Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Norm below which a vector is treated as zero by [`Tape::cosine_distance`].
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf bound to a named parameter. Repeated lookups of one name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = tensor::matmul_dims(self.value(a).shape(), self.value(b).shape())?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Zero-padded cross-correlation of `[Cin, H, W]` with `[Cout, Cin, kh, kw]`, plus an
    /// optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (geom, cout) = ConvGeometry::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::dim(alloc::format!(
                    "conv2d bias shape {:?} does not match {cout} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let pointwise = geom.kh == 1 && geom.kw == 1 && stride == 1 && pad == 0;
        let cols = if pointwise {
            Vec::new()
        } else {
            geom.im2col(self.value(x).data())
        };
        let p = geom.out_len();
        let mut out = vec![0.0; cout * p];
        if let Some(b) = b {
            for (row, &bv) in out.chunks_mut(p).zip(self.value(b).data()) {
                row.fill(bv);
            }
        }
        let src = if pointwise { self.value(x).data() } else { &cols };
        gemm(cout, geom.patch_len(), p, self.value(w).data(), false, src, false, 1.0, &mut out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(&[cout, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(alloc::format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Align-corners bilinear resize of a `[C, H, W]` value.
    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = tensor::bilinear_resize(self.value(a), out_h, out_w)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Resize(a), rg))
    }

    /// Per-pixel softmax over the channel axis of a `[C, H, W]` value.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let value = tensor::softmax_channels(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Broadcasts `text` (`[D]`) to every pixel of `feat` (`[F, h, w]`), concatenates along
    /// channels and applies the pointwise map `weight` (`[Fo, F + D]`) plus `bias` (`[Fo]`).
    ///
    /// The text half of the product is spatially constant, so it is evaluated once per channel.
    pub fn fuse_broadcast(&mut self, feat: Var, text: Var, weight: Var, bias: Var) -> Result<Var> {
        let (f, h, w) = self.value(feat).chw()?;
        let d = match *self.value(text).shape() {
            [d] => d,
            ref s => return Err(Error::dim(alloc::format!("text embedding must be [D], got {s:?}"))),
        };
        let fo = match *self.value(weight).shape() {
            [fo, fd] if fd == f + d => fo,
            ref s => {
                return Err(Error::dim(alloc::format!(
                    "fusion weight {s:?} does not match {f} feature + {d} text channels"
                )))
            }
        };
        if self.value(bias).shape() != [fo] {
            return Err(Error::dim(alloc::format!(
                "fusion bias {:?} does not match {fo} outputs",
                self.value(bias).shape()
            )));
        }
        let p = h * w;
        let wt = self.value(weight).data();
        let (wf, wl) = split_fusion_weight(wt, fo, f, d);
        let text_v = self.value(text).data();
        let bias_v = self.value(bias).data();
        let mut out = vec![0.0; fo * p];
        for o in 0..fo {
            let lang: f64 = wl[o * d..(o + 1) * d].iter().zip(text_v).map(|(a, b)| a * b).sum();
            out[o * p..(o + 1) * p].fill(lang + bias_v[o]);
        }
        gemm(fo, f, p, &wf, false, self.value(feat).data(), false, 1.0, &mut out);
        let rg = self.rg(feat) || self.rg(text) || self.rg(weight) || self.rg(bias);
        let value = Tensor::new(&[fo, h, w], out)?;
        Ok(self.push(
            value,
            Op::FuseBroadcast {
                feat,
                text,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// `sum_k weights[k] * levels[k]`; `weights` is a `[K]` (or `[K, 1, 1]`) value.
    pub fn weighted_sum(&mut self, levels: &[Var], weights: Var) -> Result<Var> {
        let first = *levels
            .first()
            .ok_or_else(|| Error::contract("weighted_sum of an empty list"))?;
        if self.value(weights).len() != levels.len() {
            return Err(Error::dim(alloc::format!(
                "{} weights for {} levels",
                self.value(weights).len(),
                levels.len()
            )));
        }
        for &l in levels {
            self.same_shape(first, l, "weighted_sum")?;
        }
        let mut out = Tensor::zeros(self.value(first).shape());
        for (k, &l) in levels.iter().enumerate() {
            let wk = self.value(weights).data()[k];
            for (o, v) in out.data_mut().iter_mut().zip(self.value(l).data()) {
                *o += wk * v;
            }
        }
        let rg = self.rg(weights) || levels.iter().any(|&l| self.rg(l));
        Ok(self.push(
            out,
            Op::WeightedSum {
                levels: levels.to_vec(),
                weights,
            },
            rg,
        ))
    }

    /// Mean of the rows of `table` (`[V, D]`) selected by the non-zero ids; all-PAD gives zeros.
    pub fn embed_mean(&mut self, table: Var, ids: &[usize], pad: usize) -> Result<Var> {
        let (v, d) = match *self.value(table).shape() {
            [v, d] => (v, d),
            ref s => return Err(Error::dim(alloc::format!("embedding table must be [V, D], got {s:?}"))),
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::data(alloc::format!(
                "token id {bad} out of range for vocabulary of {v}"
            )));
        }
        let kept: Vec<usize> = ids.iter().copied().filter(|&i| i != pad).collect();
        let mut out = vec![0.0; d];
        if !kept.is_empty() {
            let t = self.value(table).data();
            for &i in &kept {
                for (o, x) in out.iter_mut().zip(&t[i * d..(i + 1) * d]) {
                    *o += x;
                }
            }
            let n = kept.len() as f64;
            for o in &mut out {
                *o /= n;
            }
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::from_vec(out), Op::EmbedMean { table, ids: kept }, rg))
    }

    /// Global average pool: `[C, H, W]` to `[C]`.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        let p = h * w;
        let data = self
            .value(a)
            .data()
            .chunks(p)
            .map(|ch| ch.iter().sum::<f64>() / p as f64)
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[c], data)?, Op::SpatialMean(a), rg))
    }

    /// `-(1/N) sum_i ln(max(p[gt_i, i], eps))` over the `N = H*W` pixels of a `[C, H, W]` distribution.
    pub fn pixel_nll(&mut self, probs: Var, gt: &[usize], eps: f64) -> Result<Var> {
        let (c, h, w) = self.value(probs).chw()?;
        let p = h * w;
        if gt.len() != p {
            return Err(Error::dim(alloc::format!(
                "mask has {} pixels, prediction is {h}x{w}",
                gt.len()
            )));
        }
        if let Some((i, &g)) = gt.iter().enumerate().find(|(_, &g)| g >= c) {
            return Err(Error::data(alloc::format!(
                "class id {g} >= {c} at pixel (row {}, col {})",
                i / w,
                i % w
            )));
        }
        let data = self.value(probs).data();
        let total: f64 = gt
            .iter()
            .enumerate()
            .map(|(i, &g)| -libm::log(data[g * p + i].max(eps)))
            .sum();
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(total / p as f64),
            Op::PixelNll {
                probs,
                gt: gt.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// `1 - u.v / (|u| |v|)`, defined as 1 when either norm is below [`COSINE_NORM_FLOOR`].
    pub fn cosine_distance(&mut self, u: Var, v: Var) -> Result<Var> {
        self.same_shape(u, v, "cosine_distance")?;
        let (dot, nu, nv) = cosine_parts(self.value(u).data(), self.value(v).data());
        let d = if nu < COSINE_NORM_FLOOR || nv < COSINE_NORM_FLOOR {
            1.0
        } else {
            1.0 - dot / (nu * nv)
        };
        let rg = self.rg(u) || self.rg(v);
        Ok(self.push(Tensor::scalar(d), Op::CosineDistance(u, v), rg))
    }

    /// Records an op with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Accumulates `d loss / d param` into every parameter reached from `loss`.
    /// Gradients add onto whatever the store already holds.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, &v) in &self.params {
            if let Some(g) = &grads[v.0] {
                store.accumulate(name, g)?;
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to every node (None where unreachable).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn give(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = tensor::matmul_dims(self.value(*a).shape(), self.value(*b).shape())?;
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, 0.0, &mut ga);
                    self.give(grads, *a, Tensor::new(&[m, k], ga)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, 0.0, &mut gb);
                    self.give(grads, *b, Tensor::new(&[k, n], gb)?);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let cout = out.shape()[0];
                let p = geom.out_len();
                let plen = geom.patch_len();
                let pointwise = cols.is_empty();
                if self.rg(*w) {
                    let src = if pointwise { self.value(*x).data() } else { cols };
                    let mut gw = vec![0.0; cout * plen];
                    gemm(cout, p, plen, g.data(), false, src, true, 0.0, &mut gw);
                    self.give(grads, *w, Tensor::new(self.value(*w).shape(), gw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let gb = g.data().chunks(p).map(|r| r.iter().sum()).collect();
                        self.give(grads, *b, Tensor::from_vec(gb));
                    }
                }
                if self.rg(*x) {
                    let mut gcols = vec![0.0; plen * p];
                    gemm(plen, cout, p, self.value(*w).data(), true, g.data(), false, 0.0, &mut gcols);
                    let gx = if pointwise {
                        gcols
                    } else {
                        let mut gx = vec![0.0; geom.cin * geom.h * geom.w];
                        geom.col2im(&gcols, &mut gx);
                        gx
                    };
                    self.give(grads, *x, Tensor::new(self.value(*x).shape(), gx)?);
                }
            }
            Op::Add(a, b) => {
                self.give(grads, *a, g.clone());
                self.give(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    self.give(grads, *a, Tensor::new(va.shape(), d)?);
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    self.give(grads, *b, Tensor::new(vb.shape(), d)?);
                }
            }
            Op::Scale(a, s) => self.give(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.give(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.give(grads, *a, Tensor::new(out.shape(), d)?);
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.give(grads, *a, Tensor::new(out.shape(), d)?);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.give(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.give(grads, *a, Tensor::full(self.value(*a).shape(), g.item() / n));
            }
            Op::Reshape(a) => {
                let gr = g.clone().reshape(self.value(*a).shape())?;
                self.give(grads, *a, gr);
            }
            Op::Resize(a) => {
                let gx = resize_backward(self.value(*a).shape(), g)?;
                self.give(grads, *a, gx);
            }
            Op::Softmax(a) => {
                let (c, h, w) = out.chw()?;
                let p = h * w;
                let y = out.data();
                let gd = g.data();
                let mut dot = vec![0.0; p];
                for ch in 0..c {
                    for i in 0..p {
                        dot[i] += y[ch * p + i] * gd[ch * p + i];
                    }
                }
                let mut gx = vec![0.0; c * p];
                for ch in 0..c {
                    for i in 0..p {
                        gx[ch * p + i] = y[ch * p + i] * (gd[ch * p + i] - dot[i]);
                    }
                }
                self.give(grads, *a, Tensor::new(out.shape(), gx)?);
            }
            Op::FuseBroadcast {
                feat,
                text,
                weight,
                bias,
            } => {
                let (f, h, w) = self.value(*feat).chw()?;
                let p = h * w;
                let fo = out.shape()[0];
                let d = self.value(*text).len();
                let gsum: Vec<f64> = g.data().chunks(p).map(|r| r.iter().sum()).collect();
                let (wf, wl) = split_fusion_weight(self.value(*weight).data(), fo, f, d);
                if self.rg(*weight) {
                    let mut gwf = vec![0.0; fo * f];
                    gemm(fo, p, f, g.data(), false, self.value(*feat).data(), true, 0.0, &mut gwf);
                    let tv = self.value(*text).data();
                    let mut gw = vec![0.0; fo * (f + d)];
                    for o in 0..fo {
                        let row = &mut gw[o * (f + d)..(o + 1) * (f + d)];
                        row[..f].copy_from_slice(&gwf[o * f..(o + 1) * f]);
                        for (r, t) in row[f..].iter_mut().zip(tv) {
                            *r = gsum[o] * t;
                        }
                    }
                    self.give(grads, *weight, Tensor::new(&[fo, f + d], gw)?);
                }
                if self.rg(*bias) {
                    self.give(grads, *bias, Tensor::from_vec(gsum.clone()));
                }
                if self.rg(*text) {
                    let mut gt = vec![0.0; d];
                    for o in 0..fo {
                        for (t, wv) in gt.iter_mut().zip(&wl[o * d..(o + 1) * d]) {
                            *t += wv * gsum[o];
                        }
                    }
                    self.give(grads, *text, Tensor::from_vec(gt));
                }
                if self.rg(*feat) {
                    let mut gf = vec![0.0; f * p];
                    gemm(f, fo, p, &wf, true, g.data(), false, 0.0, &mut gf);
                    self.give(grads, *feat, Tensor::new(&[f, h, w], gf)?);
                }
            }
            Op::WeightedSum { levels, weights } => {
                let wv = self.value(*weights);
                if self.rg(*weights) {
                    let gw = levels
                        .iter()
                        .map(|&l| {
                            self.value(l)
                                .data()
                                .iter()
                                .zip(g.data())
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    self.give(grads, *weights, Tensor::new(wv.shape(), gw)?);
                }
                for (k, &l) in levels.iter().enumerate() {
                    let wk = wv.data()[k];
                    self.give(grads, l, g.map(|v| v * wk));
                }
            }
            Op::EmbedMean { table, ids } => {
                if !ids.is_empty() {
                    let shape = self.value(*table).shape();
                    let d = shape[1];
                    let mut gt = Tensor::zeros(shape);
                    let n = ids.len() as f64;
                    for &i in ids {
                        for (t, gv) in gt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(g.data()) {
                            *t += gv / n;
                        }
                    }
                    self.give(grads, *table, gt);
                }
            }
            Op::SpatialMean(a) => {
                let shape = self.value(*a).shape();
                let p = shape[1] * shape[2];
                let mut gx = Tensor::zeros(shape);
                for (ch, gv) in gx.data_mut().chunks_mut(p).zip(g.data()) {
                    ch.fill(gv / p as f64);
                }
                self.give(grads, *a, gx);
            }
            Op::PixelNll { probs, gt, eps } => {
                let pv = self.value(*probs);
                let p = gt.len();
                let scale = g.item() / p as f64;
                let mut gp = Tensor::zeros(pv.shape());
                let data = pv.data();
                let gd = gp.data_mut();
                for (i, &cls) in gt.iter().enumerate() {
                    let q = data[cls * p + i];
                    // flat below the floor
                    if q > *eps {
                        gd[cls * p + i] = -scale / q;
                    }
                }
                self.give(grads, *probs, gp);
            }
            Op::CosineDistance(u, v) => {
                let (uv, vv) = (self.value(*u).data(), self.value(*v).data());
                let (dot, nu, nv) = cosine_parts(uv, vv);
                if nu >= COSINE_NORM_FLOOR && nv >= COSINE_NORM_FLOOR {
                    let gs = g.item();
                    let inv = 1.0 / (nu * nv);
                    let cos = dot * inv;
                    if self.rg(*u) {
                        let d = uv
                            .iter()
                            .zip(vv)
                            .map(|(a, b)| -gs * (b * inv - cos * a / (nu * nu)))
                            .collect();
                        self.give(grads, *u, Tensor::new(self.value(*u).shape(), d)?);
                    }
                    if self.rg(*v) {
                        let d = vv
                            .iter()
                            .zip(uv)
                            .map(|(b, a)| -gs * (a * inv - cos * b / (nv * nv)))
                            .collect();
                        self.give(grads, *v, Tensor::new(self.value(*v).shape(), d)?);
                    }
                }
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let gs = backward(&vals, out, g);
                if gs.len() != inputs.len() {
                    return Err(Error::contract("custom backward returned wrong number of gradients"));
                }
                for (&i, gi) in inputs.iter().zip(gs) {
                    if gi.shape() != self.value(i).shape() {
                        return Err(Error::dim("custom backward gradient shape mismatch"));
                    }
                    self.give(grads, i, gi);
                }
            }
        }
        Ok(())
    }
}

fn cosine_parts(u: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = libm::sqrt(u.iter().map(|a| a * a).sum());
    let nv = libm::sqrt(v.iter().map(|b| b * b).sum());
    (dot, nu, nv)
}

/// Splits a `[Fo, F + D]` fusion weight into contiguous feature and language blocks.
fn split_fusion_weight(w: &[f64], fo: usize, f: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut wf = Vec::with_capacity(fo * f);
    let mut wl = Vec::with_capacity(fo * d);
    for row in w.chunks(f + d) {
        wf.extend_from_slice(&row[..f]);
        wl.extend_from_slice(&row[f..]);
    }
    (wf, wl)
}

fn resize_backward(in_shape: &[usize], g: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match *in_shape {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::dim("resize input must be [C, H, W]")),
    };
    let (_, oh, ow) = g.chw()?;
    if oh == h && ow == w {
        return Ok(g.clone());
    }
    let rows = tensor::resize_axis(h, oh);
    let cols = tensor::resize_axis(w, ow);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &g.data()[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                let gv = src[oi * ow + oj];
                dst[r0 * w + c0] += gv * (1.0 - fr) * (1.0 - fc);
                dst[r0 * w + c1] += gv * (1.0 - fr) * fc;
                dst[r1 * w + c0] += gv * fr * (1.0 - fc);
                dst[r1 * w + c1] += gv * fr * fc;
            }
        }
    }
    Tensor::new(in_shape, gx)
}
