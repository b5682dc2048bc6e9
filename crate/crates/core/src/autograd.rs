//! A small tape-based reverse-mode autodiff engine over [`Tensor`]s, with
//! exactly the operations the denoiser and autoencoder need.
//!
//! Image tensors are `[N, C, H, W]`. Parameters are borrowed from a
//! [`ParamStore`](crate::nn::ParamStore) for the lifetime of the graph, so a
//! forward pass never copies weights.

use std::collections::HashMap;

use crate::attention::{
    mha, mha_backward, routed_attention, routed_attention_backward, shape_adaptive_mha,
    shape_adaptive_mha_backward, KeyValue, TokenMask, TokenMatrix,
};
use crate::error::{shape_err, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How attention tokens are partitioned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// Foreground queries see foreground keys, background queries see
    /// background keys (self-attention) or the null tokens (cross-attention).
    ShapeAdaptive,
    /// Every query sees every key; cross-attention uses only the prompt.
    Plain,
}

enum Value<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

/// Token layout for an attention call: per-item masks and the groups of
/// items whose tokens form one joint sequence.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub masks: Vec<TokenMask>,
    pub groups: Vec<Vec<usize>>,
}

impl AttnLayout {
    /// Every item attends within itself.
    pub fn independent(masks: Vec<TokenMask>) -> Self {
        let groups = (0..masks.len()).map(|i| vec![i]).collect();
        Self { masks, groups }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(T, T)>,
    },
    Silu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, T),
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    ConcatChannels(Var, Var),
    NarrowChannels {
        x: Var,
        start: usize,
    },
    Upsample2(Var),
    Embedding {
        table: Var,
        idx: Vec<usize>,
    },
    SelfAttention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        heads: usize,
        routing: Routing,
    },
    CrossAttention {
        q: Var,
        pk: Var,
        pv: Var,
        nk: Var,
        nv: Var,
        masks: Vec<TokenMask>,
        heads: usize,
        routing: Routing,
    },
    Mse {
        x: Var,
        target: Tensor<T>,
    },
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    params: HashMap<String, Var>,
    track: bool,
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// A graph that records what backward needs.
    pub fn training() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            track: true,
        }
    }

    /// A graph for inference; parameters never require gradients.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::training()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        match std::mem::replace(&mut self.nodes[v.0].value, Value::Owned(Tensor::zeros(&[0]))) {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t.clone(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.track && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf borrowed from a parameter store.
    pub fn param(&mut self, name: &str, t: &'a Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            needs_grad: self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.shape().len() != 2 || wt.shape().len() != 2 || xt.dim(1) != wt.dim(1) {
            return Err(shape_err(format!(
                "linear: input {:?} vs weight {:?}",
                xt.shape(),
                wt.shape()
            )));
        }
        let (n, f, o) = (xt.dim(0), xt.dim(1), wt.dim(0));
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = b {
            let bt = self.value(b);
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bt.data());
            }
        }
        T::gemm(
            n,
            f,
            o,
            T::one(),
            xt.data(),
            f as isize,
            1,
            wt.data(),
            1,
            f as isize,
            if b.is_some() { T::one() } else { T::zero() },
            &mut out,
            o as isize,
            1,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::Linear { x, w, b }, &inputs))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (out, stats) = group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups)?;
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// `x[n, c, :, :] += bias[n, c]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(bias));
        let (n, c, hw) = nchw(xt)?;
        if bt.shape() != [n, c] {
            return Err(shape_err(format!(
                "channel bias {:?} for input {:?}",
                bt.shape(),
                xt.shape()
            )));
        }
        let mut out = xt.clone();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let b = bt.data()[i];
            plane.iter_mut().for_each(|v| *v += b);
        }
        let _ = n;
        Ok(self.push(out, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (n, ca, hw) = nchw(at)?;
        let (nb, cb, hwb) = nchw(bt)?;
        if n != nb || hw != hwb || at.shape()[2..] != bt.shape()[2..] {
            return Err(shape_err(format!(
                "concat {:?} with {:?}",
                at.shape(),
                bt.shape()
            )));
        }
        let mut data = Vec::with_capacity((ca + cb) * hw * n);
        for i in 0..n {
            data.extend_from_slice(&at.data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&bt.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let shape = [n, ca + cb, at.dim(2), at.dim(3)];
        Ok(self.push(Tensor::new(&shape, data)?, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        let (n, c, hw) = nchw(xt)?;
        if start + len > c {
            return Err(shape_err(format!("channels {start}..{} of {c}", start + len)));
        }
        let mut data = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            let base = (i * c + start) * hw;
            data.extend_from_slice(&xt.data()[base..base + len * hw]);
        }
        let shape = [n, len, xt.dim(2), xt.dim(3)];
        Ok(self.push(Tensor::new(&shape, data)?, Op::NarrowChannels { x, start }, &[x]))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        nchw(xt)?;
        let (nc, h, w) = (xt.dim(0) * xt.dim(1), xt.dim(2), xt.dim(3));
        let mut data = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            let src = &xt.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let shape = [xt.dim(0), xt.dim(1), 2 * h, 2 * w];
        Ok(self.push(Tensor::new(&shape, data)?, Op::Upsample2(x), &[x]))
    }

    /// Rows of `table` selected by `idx`, shape `[idx.len(), D]`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(shape_err("embedding table must be 2-D"));
        }
        let (r, d) = (tt.dim(0), tt.dim(1));
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= r {
                return Err(shape_err(format!("embedding row {i} of {r}")));
            }
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(&[idx.len(), d], data)?,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// Self-attention over `[N, C, H, W]` projections.
    pub fn self_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        heads: usize,
        routing: Routing,
    ) -> Result<Var> {
        let out = self_attention_forward(self.value(q), self.value(k), self.value(v), layout, heads, routing)?;
        Ok(self.push(
            out,
            Op::SelfAttention {
                q,
                k,
                v,
                layout: layout.clone(),
                heads,
                routing,
            },
            &[q, k, v],
        ))
    }

    /// Cross-attention of `[N, C, H, W]` queries against per-item prompt and
    /// null tokens, each given as `[N, L * C]`.
    #[allow(clippy::too_many_arguments)]
    pub fn cross_attention(
        &mut self,
        q: Var,
        pk: Var,
        pv: Var,
        nk: Var,
        nv: Var,
        masks: &[TokenMask],
        heads: usize,
        routing: Routing,
    ) -> Result<Var> {
        let out = cross_attention_forward(
            self.value(q),
            [self.value(pk), self.value(pv), self.value(nk), self.value(nv)],
            masks,
            heads,
            routing,
        )?;
        Ok(self.push(
            out,
            Op::CrossAttention {
                q,
                pk,
                pv,
                nk,
                nv,
                masks: masks.to_vec(),
                heads,
                routing,
            },
            &[q, pk, pv, nk, nv],
        ))
    }

    /// Mean squared error against a constant target; a `[1]` tensor.
    pub fn mse(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        let xt = self.value(x);
        xt.check_same_shape(&target)?;
        let n = T::from_usize_lossy(xt.len());
        let loss: T = xt
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        Ok(self.push(Tensor::new(&[1], vec![loss])?, Op::Mse { x, target }, &[x]))
    }

    /// Reverse pass from a scalar `loss`; returns gradients of every
    /// parameter leaf by name.
    pub fn backward(&self, loss: Var) -> Result<HashMap<String, Tensor<T>>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(self
            .params
            .iter()
            .filter_map(|(name, v)| grads[v.0].take().map(|g| (name.clone(), g)))
            .collect())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.wants(*x),
                    self.wants(*w),
                )?;
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, f, o) = (xt.dim(0), xt.dim(1), wt.dim(0));
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(n, o, f, T::one(), g.data(), o as isize, 1, wt.data(), f as isize, 1, T::zero(), &mut dx, f as isize, 1);
                    accumulate(grads, *x, Tensor::new(&[n, f], dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * f];
                    T::gemm(o, n, f, T::one(), g.data(), 1, o as isize, xt.data(), f as isize, 1, T::zero(), &mut dw, f as isize, 1);
                    accumulate(grads, *w, Tensor::new(&[o, f], dw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in g.data().chunks(o) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(grads, *b, Tensor::new(&[o], db)?);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (dx, dg, db) = group_norm_backward(self.value(*x), self.value(*gamma), g, *groups, stats)?;
                if self.wants(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, db);
                }
            }
            Op::Silu(x) => {
                let d = self.value(*x).zip_map(g, |v, gv| {
                    let s = sigmoid(v);
                    gv * s * (T::one() + v * (T::one() - s))
                })?;
                accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = node.value.get().zip_map(g, |s, gv| gv * s * (T::one() - s))?;
                accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, g.scale(*s));
            }
            Op::AddChannelBias { x, bias } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*bias) {
                    let (n, c, hw) = nchw(g)?;
                    let db: Vec<T> = g.data().chunks(hw).map(|p| p.iter().copied().sum()).collect();
                    accumulate(grads, *bias, Tensor::new(&[n, c], db)?);
                }
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.value(*a).dim(1);
                let cb = self.value(*b).dim(1);
                let (n, _, hw) = nchw(g)?;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut dbv = Vec::with_capacity(n * cb * hw);
                for item in g.data().chunks((ca + cb) * hw) {
                    da.extend_from_slice(&item[..ca * hw]);
                    dbv.extend_from_slice(&item[ca * hw..]);
                }
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::new(self.value(*a).shape(), da)?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Tensor::new(self.value(*b).shape(), dbv)?);
                }
            }
            Op::NarrowChannels { x, start } => {
                let xt = self.value(*x);
                let (n, c, hw) = nchw(xt)?;
                let len = g.dim(1);
                let mut dx = Tensor::zeros(xt.shape());
                for item in 0..n {
                    let dst = (item * c + start) * hw;
                    let src = item * len * hw;
                    dx.data_mut()[dst..dst + len * hw].copy_from_slice(&g.data()[src..src + len * hw]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let xt = self.value(*x);
                let (nc, h, w) = (xt.dim(0) * xt.dim(1), xt.dim(2), xt.dim(3));
                let mut dx = vec![T::zero(); nc * h * w];
                for p in 0..nc {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xt.shape(), dx)?);
            }
            Op::Embedding { table, idx } => {
                let tt = self.value(*table);
                let d = tt.dim(1);
                let mut dt = Tensor::zeros(tt.shape());
                for (row, &i) in idx.iter().enumerate() {
                    for (dst, &src) in dt.data_mut()[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g.data()[row * d..(row + 1) * d])
                    {
                        *dst += src;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::SelfAttention {
                q,
                k,
                v,
                layout,
                heads,
                routing,
            } => {
                let (dq, dk, dv) = self_attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    layout,
                    *heads,
                    *routing,
                    g,
                )?;
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(var) {
                        accumulate(grads, var, d);
                    }
                }
            }
            Op::CrossAttention {
                q,
                pk,
                pv,
                nk,
                nv,
                masks,
                heads,
                routing,
            } => {
                let ds = cross_attention_backward(
                    self.value(*q),
                    [self.value(*pk), self.value(*pv), self.value(*nk), self.value(*nv)],
                    masks,
                    *heads,
                    *routing,
                    g,
                )?;
                for (var, d) in [*q, *pk, *pv, *nk, *nv].into_iter().zip(ds) {
                    if self.wants(var) {
                        accumulate(grads, var, d);
                    }
                }
            }
            Op::Mse { x, target } => {
                let xt = self.value(*x);
                let s = g.data()[0] * lit::<T>(2.0) / T::from_usize_lossy(xt.len());
                let d = xt.zip_map(target, |a, b| s * (a - b))?;
                accumulate(grads, *x, d);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn nchw<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if t.shape().len() != 4 {
        return Err(shape_err(format!("expected [N, C, H, W], got {:?}", t.shape())));
    }
    Ok((t.dim(0), t.dim(1), t.dim(2) * t.dim(3)))
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one `[C, H, W]` image into `[C * k * k, Ho * Wo]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..((ci * k + ky) * k + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
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

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [T],
) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..((ci * k + ky) * k + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<[usize; 7]> {
    let (n, c, _) = nchw(x)?;
    if w.shape().len() != 4 || w.dim(1) != c || w.dim(2) != w.dim(3) {
        return Err(shape_err(format!(
            "conv weight {:?} for input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let (h, wd, k) = (x.dim(2), x.dim(3), w.dim(2));
    if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
        return Err(shape_err("conv kernel larger than padded input"));
    }
    Ok([n, c, h, wd, k, w.dim(0), conv_out(h, k, stride, pad) * conv_out(wd, k, stride, pad)])
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, wd, k, co, p] = conv_dims(x, w, stride, pad)?;
    let kk = c * k * k;
    let mut out = vec![T::zero(); n * co * p];
    let mut cols = vec![T::zero(); if is_pointwise(k, stride, pad) { 0 } else { kk * p }];
    for i in 0..n {
        let xi = &x.data()[i * c * h * wd..(i + 1) * c * h * wd];
        let cols_ref: &[T] = if is_pointwise(k, stride, pad) {
            xi
        } else {
            im2col(xi, c, h, wd, k, stride, pad, &mut cols);
            &cols
        };
        let oi = &mut out[i * co * p..(i + 1) * co * p];
        if let Some(b) = b {
            for (row, &bv) in oi.chunks_mut(p).zip(b.data()) {
                row.fill(bv);
            }
        }
        T::gemm(
            co,
            kk,
            p,
            T::one(),
            w.data(),
            kk as isize,
            1,
            cols_ref,
            p as isize,
            1,
            if b.is_some() { T::one() } else { T::zero() },
            oi,
            p as isize,
            1,
        );
    }
    let shape = [
        n,
        co,
        conv_out(h, k, stride, pad),
        conv_out(wd, k, stride, pad),
    ];
    Tensor::new(&shape, out)
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>);

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_x: bool,
    want_w: bool,
) -> Result<ConvGrads<T>> {
    let [n, c, h, wd, k, co, p] = conv_dims(x, w, stride, pad)?;
    let kk = c * k * k;
    let pointwise = is_pointwise(k, stride, pad);
    let mut dx = want_x.then(|| vec![T::zero(); n * c * h * wd]);
    let mut dw = want_w.then(|| vec![T::zero(); co * kk]);
    let mut db = vec![T::zero(); co];
    let mut cols = vec![T::zero(); if pointwise { 0 } else { kk * p }];
    let mut dcols = vec![T::zero(); if pointwise || !want_x { 0 } else { kk * p }];
    for i in 0..n {
        let gi = &g.data()[i * co * p..(i + 1) * co * p];
        for (d, row) in db.iter_mut().zip(gi.chunks(p)) {
            *d += row.iter().copied().sum::<T>();
        }
        let xi = &x.data()[i * c * h * wd..(i + 1) * c * h * wd];
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[T] = if pointwise {
                xi
            } else {
                im2col(xi, c, h, wd, k, stride, pad, &mut cols);
                &cols
            };
            // dW += dY [co, p] * cols^T [p, kk]
            T::gemm(co, p, kk, T::one(), gi, p as isize, 1, cols_ref, 1, p as isize, T::one(), dw, kk as isize, 1);
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * c * h * wd..(i + 1) * c * h * wd];
            if pointwise {
                // dX = W^T [kk, co] * dY [co, p]
                T::gemm(kk, co, p, T::one(), w.data(), 1, kk as isize, gi, p as isize, 1, T::one(), dxi, p as isize, 1);
            } else {
                T::gemm(kk, co, p, T::one(), w.data(), 1, kk as isize, gi, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                col2im(&dcols, c, h, wd, k, stride, pad, dxi);
            }
        }
    }
    Ok((
        dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
        Tensor::new(&[co], db)?,
    ))
}

const GROUP_NORM_EPS: f64 = 1e-5;

type GroupStats<T> = Vec<(T, T)>;

fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
) -> Result<(Tensor<T>, GroupStats<T>)> {
    let (n, c, hw) = nchw(x)?;
    if groups == 0 || c % groups != 0 || gamma.len() != c || beta.len() != c {
        return Err(shape_err(format!(
            "group norm with {groups} groups over {c} channels"
        )));
    }
    let cg = c / groups;
    let m = T::from_usize_lossy(cg * hw);
    let eps = lit::<T>(GROUP_NORM_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut stats = Vec::with_capacity(n * groups);
    for i in 0..n {
        for gi in 0..groups {
            let base = (i * c + gi * cg) * hw;
            let xs = &x.data()[base..base + cg * hw];
            let mean = xs.iter().copied().sum::<T>() / m;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let rstd = T::one() / (var + eps).sqrt();
            stats.push((mean, rstd));
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                let src = &xs[cc * hw..(cc + 1) * hw];
                let dst = &mut out[base + cc * hw..base + (cc + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - mean) * rstd * ga + be;
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), out)?, stats))
}

type Grads3<T> = (Tensor<T>, Tensor<T>, Tensor<T>);

fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    groups: usize,
    stats: &[(T, T)],
) -> Result<Grads3<T>> {
    let (n, c, hw) = nchw(x)?;
    let cg = c / groups;
    let m = T::from_usize_lossy(cg * hw);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for gi in 0..groups {
            let (mean, rstd) = stats[i * groups + gi];
            let base = (i * c + gi * cg) * hw;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let ga = gamma.data()[ch];
                for j in 0..hw {
                    let idx = base + cc * hw + j;
                    let xhat = (x.data()[idx] - mean) * rstd;
                    let gv = g.data()[idx];
                    dgamma[ch] += gv * xhat;
                    dbeta[ch] += gv;
                    let dxhat = gv * ga;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let mean_d = sum_dxhat / m;
            let mean_dx = sum_dxhat_xhat / m;
            for cc in 0..cg {
                let ga = gamma.data()[gi * cg + cc];
                for j in 0..hw {
                    let idx = base + cc * hw + j;
                    let xhat = (x.data()[idx] - mean) * rstd;
                    let dxhat = g.data()[idx] * ga;
                    dx[idx] = rstd * (dxhat - mean_d - xhat * mean_dx);
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

/// `[C, HW]` planes of the listed items, as one `[sum HW, C]` token matrix.
fn gather_tokens<T: Scalar>(t: &Tensor<T>, items: &[usize]) -> TokenMatrix<T> {
    let (c, hw) = (t.dim(1), t.dim(2) * t.dim(3));
    let mut data = vec![T::zero(); items.len() * hw * c];
    for (slot, &i) in items.iter().enumerate() {
        let src = &t.data()[i * c * hw..(i + 1) * c * hw];
        for ch in 0..c {
            for j in 0..hw {
                data[(slot * hw + j) * c + ch] = src[ch * hw + j];
            }
        }
    }
    TokenMatrix::new(items.len() * hw, c, data).expect("sizes consistent")
}

fn scatter_tokens<T: Scalar>(tokens: &TokenMatrix<T>, items: &[usize], out: &mut Tensor<T>) {
    let (c, hw) = (out.dim(1), out.dim(2) * out.dim(3));
    let data = out.data_mut();
    for (slot, &i) in items.iter().enumerate() {
        let dst = &mut data[i * c * hw..(i + 1) * c * hw];
        for j in 0..hw {
            let row = tokens.row(slot * hw + j);
            for ch in 0..c {
                dst[ch * hw + j] = row[ch];
            }
        }
    }
}

fn check_layout<T: Scalar>(q: &Tensor<T>, layout: &AttnLayout) -> Result<()> {
    let (n, _, hw) = nchw(q)?;
    if layout.masks.len() != n || layout.masks.iter().any(|m| m.len() != hw) {
        return Err(shape_err("attention masks do not match the token grid"));
    }
    let mut seen = vec![false; n];
    for &i in layout.groups.iter().flatten() {
        if i >= n || seen[i] {
            return Err(shape_err("attention groups must partition the batch"));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(shape_err("attention groups must cover the batch"));
    }
    Ok(())
}

fn group_mask(layout: &AttnLayout, items: &[usize]) -> TokenMask {
    TokenMask::concat(&items.iter().map(|&i| &layout.masks[i]).collect::<Vec<_>>())
}

fn self_attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &AttnLayout,
    heads: usize,
    routing: Routing,
) -> Result<Tensor<T>> {
    check_layout(q, layout)?;
    q.check_same_shape(k)?;
    q.check_same_shape(v)?;
    let mut out = Tensor::zeros(q.shape());
    for items in &layout.groups {
        let (qt, kt, vt) = (gather_tokens(q, items), gather_tokens(k, items), gather_tokens(v, items));
        let o = match routing {
            Routing::ShapeAdaptive => {
                let m = group_mask(layout, items);
                shape_adaptive_mha(&qt, &kt, &vt, &m, &m, heads)?
            }
            Routing::Plain => mha(&qt, &kt, &vt, heads)?,
        };
        scatter_tokens(&o, items, &mut out);
    }
    Ok(out)
}

fn self_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &AttnLayout,
    heads: usize,
    routing: Routing,
    g: &Tensor<T>,
) -> Result<Grads3<T>> {
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(q.shape());
    let mut dv = Tensor::zeros(q.shape());
    for items in &layout.groups {
        let (qt, kt, vt) = (gather_tokens(q, items), gather_tokens(k, items), gather_tokens(v, items));
        let gt = gather_tokens(g, items);
        let grads = match routing {
            Routing::ShapeAdaptive => {
                let m = group_mask(layout, items);
                shape_adaptive_mha_backward(&qt, &kt, &vt, &m, &m, heads, &gt)?
            }
            Routing::Plain => mha_backward(&qt, &kt, &vt, heads, &gt)?,
        };
        scatter_tokens(&grads.d_q, items, &mut dq);
        scatter_tokens(&grads.d_k, items, &mut dk);
        scatter_tokens(&grads.d_v, items, &mut dv);
    }
    Ok((dq, dk, dv))
}

fn context_tokens<T: Scalar>(t: &Tensor<T>, item: usize, dim: usize) -> Result<TokenMatrix<T>> {
    let per = t.len() / t.dim(0);
    if !per.is_multiple_of(dim) {
        return Err(shape_err("context tokens do not divide into the query dim"));
    }
    TokenMatrix::new(per / dim, dim, t.data()[item * per..(item + 1) * per].to_vec())
}

fn cross_attention_forward<T: Scalar>(
    q: &Tensor<T>,
    ctx: [&Tensor<T>; 4],
    masks: &[TokenMask],
    heads: usize,
    routing: Routing,
) -> Result<Tensor<T>> {
    let (n, c, hw) = nchw(q)?;
    if masks.len() != n || masks.iter().any(|m| m.len() != hw) {
        return Err(shape_err("cross-attention masks do not match the token grid"));
    }
    let mut out = Tensor::zeros(q.shape());
    for i in 0..n {
        let qt = gather_tokens(q, &[i]);
        let [pk, pv, nk, nv] = ctx.map(|t| context_tokens(t, i, c));
        let (pk, pv, nk, nv) = (pk?, pv?, nk?, nv?);
        let o = match routing {
            Routing::ShapeAdaptive => routed_attention(
                &qt,
                &masks[i],
                KeyValue::new(&pk, &pv),
                KeyValue::new(&nk, &nv),
                heads,
            )?,
            Routing::Plain => mha(&qt, &pk, &pv, heads)?,
        };
        scatter_tokens(&o, &[i], &mut out);
    }
    Ok(out)
}

fn cross_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    ctx: [&Tensor<T>; 4],
    masks: &[TokenMask],
    heads: usize,
    routing: Routing,
    g: &Tensor<T>,
) -> Result<[Tensor<T>; 5]> {
    let (n, c, _) = nchw(q)?;
    let mut dq = Tensor::zeros(q.shape());
    let mut dctx: Vec<Vec<T>> = ctx.iter().map(|t| vec![T::zero(); t.len()]).collect();
    for i in 0..n {
        let qt = gather_tokens(q, &[i]);
        let gt = gather_tokens(g, &[i]);
        let [pk, pv, nk, nv] = ctx.map(|t| context_tokens(t, i, c));
        let (pk, pv, nk, nv) = (pk?, pv?, nk?, nv?);
        let (d_q, parts) = match routing {
            Routing::ShapeAdaptive => {
                let r = routed_attention_backward(
                    &qt,
                    &masks[i],
                    KeyValue::new(&pk, &pv),
                    KeyValue::new(&nk, &nv),
                    heads,
                    &gt,
                )?;
                (r.d_q, [r.fg.0, r.fg.1, r.bg.0, r.bg.1])
            }
            Routing::Plain => {
                let r = mha_backward(&qt, &pk, &pv, heads, &gt)?;
                (
                    r.d_q,
                    [
                        r.d_k,
                        r.d_v,
                        TokenMatrix::zeros(nk.n_tokens(), c),
                        TokenMatrix::zeros(nv.n_tokens(), c),
                    ],
                )
            }
        };
        scatter_tokens(&d_q, &[i], &mut dq);
        for (dst, part) in dctx.iter_mut().zip(parts) {
            let per = part.data().len();
            for (d, &s) in dst[i * per..(i + 1) * per].iter_mut().zip(part.data()) {
                *d += s;
            }
        }
    }
    let mut it = dctx.into_iter().zip(ctx);
    let mut next = || -> Result<Tensor<T>> {
        let (d, t) = it.next().expect("four context tensors");
        Tensor::new(t.shape(), d)
    };
    Ok([dq, next()?, next()?, next()?, next()?])
}
