//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every operation appends one node holding its output value and enough
//! context to run its backward rule. Inputs always precede the node that
//! consumes them, so [`Tape::backward`] walks the record in reverse.

use std::collections::HashMap;
use std::fmt::Debug;

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::{cost, Conv2dSpec, Element, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside the tape.
pub trait Function<T: Element>: Debug {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

#[derive(Debug)]
enum Op<T: Element> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        beta: Var,
    },
    GlobalAvg(Var),
    GlobalStd(Var),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        function: Box<dyn Function<T>>,
    },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug)]
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    flops: u64,
    bytes: usize,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of non-parameter leaves produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T> Gradients<T> {
    /// Gradient reaching input `v`; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn std_normal_cdf<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn std_normal_pdf<T: Element>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * T::from_f64(0.5)).exp()
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Shape plus `(1 / plane size, plane)` for each `(n, c)` plane.
type PerChannel<'a, T> = ([usize; 4], Vec<(T, &'a [T])>);

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            flops: 0,
            bytes: 0,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, flops: u64) -> Var {
        self.bytes += value.size_bytes();
        if let Op::LayerNorm { xhat, rstd, .. } = &op {
            self.bytes += (xhat.len() + rstd.len()) * std::mem::size_of::<T>();
        }
        self.flops += flops;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FLOPs of every operation recorded so far, under the [`cost`] conventions.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Bytes held by recorded values; the tape never frees, so this is also the peak.
    pub fn live_bytes(&self) -> usize {
        self.bytes
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, 0)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), 0)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|b| self.value(b));
        let geometry = ConvGeometry::new(xv, wv, bv, spec)?;
        let out = conv2d_forward(xv, wv, bv, spec)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, geometry.flops(cost::MAC_FLOPS)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let flops = cost::ADD * out.numel() as u64;
        Ok(self.push(out, Op::Add(a, b), flops))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        let flops = cost::ADD * out.numel() as u64;
        Ok(self.push(out, Op::Sub(a, b), flops))
    }

    /// Element-wise product. `b` may also be `[N, C, 1, 1]` against `a` of
    /// shape `[N, C, H, W]`, in which case it is replicated over space.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let out = av.zip_map(bv, |p, q| p * q)?;
            let flops = cost::MUL * out.numel() as u64;
            return Ok(self.push(out, Op::Mul(a, b), flops));
        }
        let [n, c, h, w] = av.dims4()?;
        if bv.shape() != [n, c, 1, 1] {
            return Err(Error::shape("mul", av.shape(), bv.shape()));
        }
        let plane = h * w;
        let mut out = av.clone();
        for (chunk, &s) in out.data_mut().chunks_exact_mut(plane).zip(bv.data()) {
            for v in chunk {
                *v *= s;
            }
        }
        let flops = cost::MUL * out.numel() as u64;
        Ok(self.push(out, Op::MulBroadcast(a, b), flops))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let flops = cost::MUL * out.numel() as u64;
        self.push(out, Op::Scale(x, factor), flops)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let flops = cost::SIGMOID * out.numel() as u64;
        self.push(out, Op::Sigmoid(x), flops)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * std_normal_cdf(v));
        let flops = cost::GELU * out.numel() as u64;
        self.push(out, Op::Gelu(x), flops)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        let flops = out.numel() as u64;
        self.push(out, Op::Abs(x), flops)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let flops = out.numel() as u64;
        self.push(out, Op::Square(x), flops)
    }

    /// Normalizes each `(n, h, w)` position across channels, then applies the
    /// per-channel affine `gamma·x̂ + beta`. Variance is the population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4()?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let plane = h * w;
        let eps = T::from_f64(eps);
        let inv_c = T::one() / T::from_f64(c as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); n * plane];
        let mut out = Tensor::zeros(xv.shape());
        let xd = xv.data();
        for ni in 0..n {
            let base = ni * c * plane;
            for p in 0..plane {
                let mut mean = T::zero();
                for ci in 0..c {
                    mean += xd[base + ci * plane + p];
                }
                mean *= inv_c;
                let mut var = T::zero();
                for ci in 0..c {
                    let d = xd[base + ci * plane + p] - mean;
                    var += d * d;
                }
                var *= inv_c;
                let r = T::one() / (var + eps).sqrt();
                rstd[ni * plane + p] = r;
                for ci in 0..c {
                    let idx = base + ci * plane + p;
                    let xh = (xd[idx] - mean) * r;
                    xhat[idx] = xh;
                    out.data_mut()[idx] = gv.data()[ci] * xh + bv.data()[ci];
                }
            }
        }
        let flops = cost::LAYER_NORM * out.numel() as u64;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                xhat,
                rstd,
                beta,
            },
            flops,
        ))
    }

    fn per_channel(&self, x: Var) -> Result<PerChannel<'_, T>> {
        let xv = self.value(x);
        let dims @ [_, _, h, w] = xv.dims4()?;
        let plane = h * w;
        let inv = T::one() / T::from_f64(plane as f64);
        Ok((
            dims,
            xv.data()
                .chunks_exact(plane)
                .map(|chunk| (chunk.iter().copied().sum::<T>() * inv, chunk))
                .collect(),
        ))
    }

    /// Per-channel spatial mean, `[N, C, 1, 1]`.
    pub fn global_avg(&mut self, x: Var) -> Result<Var> {
        let ([n, c, _, _], stats) = self.per_channel(x)?;
        let numel = self.value(x).numel() as u64;
        let out = Tensor::new(vec![n, c, 1, 1], stats.into_iter().map(|(m, _)| m).collect())?;
        Ok(self.push(out, Op::GlobalAvg(x), cost::GLOBAL_AVG * numel))
    }

    /// Per-channel population standard deviation over space, `[N, C, 1, 1]`.
    pub fn global_std(&mut self, x: Var) -> Result<Var> {
        let ([n, c, h, w], stats) = self.per_channel(x)?;
        let inv = T::one() / T::from_f64((h * w) as f64);
        let std: Vec<T> = stats
            .into_iter()
            .map(|(mean, chunk)| {
                let ss: T = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum();
                (ss * inv).sqrt()
            })
            .collect();
        let numel = self.value(x).numel() as u64;
        let out = Tensor::new(vec![n, c, 1, 1], std)?;
        Ok(self.push(out, Op::GlobalStd(x), cost::GLOBAL_STD * numel))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat_channels: no inputs".into()));
        };
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut channels = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape("concat_channels", self.value(first).shape(), self.value(p).shape()));
            }
            channels += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for ni in 0..n {
            for &p in parts {
                let pv = self.value(p);
                let pc = pv.shape()[1];
                data.extend_from_slice(&pv.data()[ni * pc * plane..(ni + 1) * pc * plane]);
            }
        }
        let out = Tensor::new(vec![n, channels, h, w], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), 0))
    }

    /// Slices `x` along channels into consecutive blocks of the given sizes.
    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let total: usize = sizes.iter().sum();
        if total != c {
            return Err(Error::InvalidArgument(format!(
                "split_channels: sizes {sizes:?} sum to {total}, tensor has {c} channels"
            )));
        }
        let plane = h * w;
        let mut start = 0;
        let mut outs = Vec::with_capacity(sizes.len());
        for &len in sizes {
            let xv = self.value(x);
            let mut data = Vec::with_capacity(n * len * plane);
            for ni in 0..n {
                let off = (ni * c + start) * plane;
                data.extend_from_slice(&xv.data()[off..off + len * plane]);
            }
            let out = Tensor::new(vec![n, len, h, w], data)?;
            outs.push(self.push(out, Op::Narrow { x, start }, 0));
            start += len;
        }
        Ok(outs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let flops = xv.numel() as u64;
        let out = Tensor::scalar(xv.sum());
        self.push(out, Op::Sum(x), flops)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let flops = xv.numel() as u64;
        let out = Tensor::scalar(xv.sum() / T::from_f64(xv.numel() as f64));
        self.push(out, Op::Mean(x), flops)
    }

    /// Records an externally computed operation together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, function: Box<dyn Function<T>>, flops: u64) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                function,
            },
            flops,
        )
    }

    /// Propagates `∂loss/∂node` back through the record, adding parameter
    /// gradients into `store` (accumulating onto whatever is already there).
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be a scalar, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));
        let mut leaves = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {
                    leaves.insert(Var(i), g);
                }
                Op::Param(id) => {
                    store.get_mut(*id).grad.add_assign(&g)?;
                }
                Op::Conv2d { x, w, b, spec } => {
                    let cg = conv2d_backward(self.value(*x), self.value(*w), b.is_some(), *spec, &g)?;
                    accumulate(&mut grads, *x, cg.dx)?;
                    accumulate(&mut grads, *w, cg.dw)?;
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |d, q| d * q)?;
                    let db = g.zip_map(self.value(*a), |d, p| d * p)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::MulBroadcast(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let [_, _, h, w] = av.dims4()?;
                    let plane = h * w;
                    let mut da = g.clone();
                    let mut db = Tensor::zeros(bv.shape());
                    for (k, &s) in bv.data().iter().enumerate() {
                        let gs = &g.data()[k * plane..(k + 1) * plane];
                        let xs = &av.data()[k * plane..(k + 1) * plane];
                        db.data_mut()[k] = gs.iter().zip(xs).map(|(&d, &x)| d * x).sum();
                        for v in &mut da.data_mut()[k * plane..(k + 1) * plane] {
                            *v *= s;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Scale(x, factor) => {
                    let f = *factor;
                    accumulate(&mut grads, *x, g.map(|d| d * f))?;
                }
                Op::Sigmoid(x) => {
                    let dx = g.zip_map(&node.value, |d, y| d * y * (T::one() - y))?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Gelu(x) => {
                    let dx = g.zip_map(self.value(*x), |d, v| d * (std_normal_cdf(v) + v * std_normal_pdf(v)))?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Abs(x) => {
                    let dx = g.zip_map(self.value(*x), |d, v| {
                        if v > T::zero() {
                            d
                        } else if v < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    })?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Square(x) => {
                    let two = T::from_f64(2.0);
                    let dx = g.zip_map(self.value(*x), |d, v| two * v * d)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    xhat,
                    rstd,
                    beta,
                } => {
                    let [n, c, h, w] = node.value.dims4()?;
                    let plane = h * w;
                    let gv = self.value(*gamma);
                    let inv_c = T::one() / T::from_f64(c as f64);
                    let mut dx = Tensor::zeros(node.value.shape());
                    let mut dgamma = Tensor::zeros(&[c]);
                    let mut dbeta = Tensor::zeros(&[c]);
                    let gd = g.data();
                    for ni in 0..n {
                        let base = ni * c * plane;
                        for p in 0..plane {
                            let mut mean_d = T::zero();
                            let mut mean_dx = T::zero();
                            for ci in 0..c {
                                let idx = base + ci * plane + p;
                                let dxh = gd[idx] * gv.data()[ci];
                                mean_d += dxh;
                                mean_dx += dxh * xhat[idx];
                                dgamma.data_mut()[ci] += gd[idx] * xhat[idx];
                                dbeta.data_mut()[ci] += gd[idx];
                            }
                            mean_d *= inv_c;
                            mean_dx *= inv_c;
                            let r = rstd[ni * plane + p];
                            for ci in 0..c {
                                let idx = base + ci * plane + p;
                                let dxh = gd[idx] * gv.data()[ci];
                                dx.data_mut()[idx] = r * (dxh - mean_d - xhat[idx] * mean_dx);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gamma, dgamma)?;
                    accumulate(&mut grads, *beta, dbeta)?;
                }
                Op::GlobalAvg(x) => {
                    let xv = self.value(*x);
                    let [_, _, h, w] = xv.dims4()?;
                    let plane = h * w;
                    let inv = T::one() / T::from_f64(plane as f64);
                    let mut dx = Tensor::zeros(xv.shape());
                    for (chunk, &d) in dx.data_mut().chunks_exact_mut(plane).zip(g.data()) {
                        chunk.fill(d * inv);
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::GlobalStd(x) => {
                    let xv = self.value(*x);
                    let [_, _, h, w] = xv.dims4()?;
                    let plane = h * w;
                    let inv = T::one() / T::from_f64(plane as f64);
                    let mut dx = Tensor::zeros(xv.shape());
                    for (k, chunk) in dx.data_mut().chunks_exact_mut(plane).enumerate() {
                        let s = node.value.data()[k];
                        // The derivative of sqrt is unbounded at 0; a flat channel gets no gradient.
                        if s <= T::zero() {
                            continue;
                        }
                        let xs = &xv.data()[k * plane..(k + 1) * plane];
                        let mean = xs.iter().copied().sum::<T>() * inv;
                        let coef = g.data()[k] * inv / s;
                        for (o, &v) in chunk.iter_mut().zip(xs) {
                            *o = coef * (v - mean);
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Concat(parts) => {
                    let [n, c, h, w] = g.dims4()?;
                    let plane = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).shape()[1];
                        let mut data = Vec::with_capacity(n * pc * plane);
                        for ni in 0..n {
                            let off = (ni * c + offset) * plane;
                            data.extend_from_slice(&g.data()[off..off + pc * plane]);
                        }
                        accumulate(&mut grads, p, Tensor::new(vec![n, pc, h, w], data)?)?;
                        offset += pc;
                    }
                }
                Op::Narrow { x, start } => {
                    let xv = self.value(*x);
                    let [n, c, h, w] = xv.dims4()?;
                    let len = g.shape()[1];
                    let plane = h * w;
                    let mut dx = Tensor::zeros(xv.shape());
                    for ni in 0..n {
                        let dst = (ni * c + start) * plane;
                        dx.data_mut()[dst..dst + len * plane]
                            .copy_from_slice(&g.data()[ni * len * plane..(ni + 1) * len * plane]);
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Sum(x) => {
                    let d = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), d))?;
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let d = g.data()[0] / T::from_f64(xv.numel() as f64);
                    accumulate(&mut grads, *x, Tensor::full(xv.shape(), d))?;
                }
                Op::Custom { inputs, function } => {
                    let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                    let dins = function.backward(&values, &node.value, &g)?;
                    if dins.len() != inputs.len() {
                        return Err(Error::InvalidArgument(format!(
                            "{}: backward returned {} gradients for {} inputs",
                            function.name(),
                            dins.len(),
                            inputs.len()
                        )));
                    }
                    for (&v, d) in inputs.iter().zip(dins) {
                        accumulate(&mut grads, v, d)?;
                    }
                }
            }
        }
        Ok(Gradients { leaves })
    }
}
