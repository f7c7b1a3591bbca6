//! Straight-line reference for one split block, written against raw
//! buffers and parameter names only. It shares no code with the layer
//! implementations it checks.

use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tensor};

/// A single image as `channels × h × w` values.
#[derive(Clone, Debug)]
struct Map<T> {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<T>,
}

impl<T: Element> Map<T> {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map {
            c,
            h,
            w,
            v: vec![T::zero(); c * h * w],
        }
    }

    fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.v[(c * self.h + y) * self.w + x]
    }

    fn set(&mut self, c: usize, y: usize, x: usize, val: T) {
        let (h, w) = (self.h, self.w);
        self.v[(c * h + y) * w + x] = val;
    }

    fn channels(&self, from: usize, count: usize) -> Self {
        let plane = self.h * self.w;
        Map {
            c: count,
            h: self.h,
            w: self.w,
            v: self.v[from * plane..(from + count) * plane].to_vec(),
        }
    }

    fn map(&self, f: impl Fn(T) -> T) -> Self {
        Map {
            v: self.v.iter().map(|&a| f(a)).collect(),
            ..*self
        }
    }

    fn zip(&self, o: &Self, f: impl Fn(T, T) -> T) -> Self {
        Map {
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
            ..*self
        }
    }
}

impl<T> Map<T> {
    fn with(c: usize, h: usize, w: usize, v: Vec<T>) -> Self {
        Map { c, h, w, v }
    }
}

fn param<'a, T: Element>(store: &'a ParamStore<T>, name: &str) -> Result<&'a Tensor<T>> {
    store
        .find(name)
        .map(|id| &store.get(id).value)
        .ok_or_else(|| Error::InvalidArgument(format!("oracle: no parameter `{name}`")))
}

fn sigmoid<T: Element>(a: T) -> T {
    T::one() / (T::one() + (-a).exp())
}

fn gelu<T: Element>(a: T) -> T {
    let half = T::from_f64(0.5);
    a * half * (T::one() + (a / T::from_f64(2f64.sqrt())).erf())
}

/// Zero-padded "same" convolution, `groups` equal channel groups.
fn conv<T: Element>(x: &Map<T>, store: &ParamStore<T>, name: &str, groups: usize) -> Result<Map<T>> {
    let w = param(store, &format!("{name}.weight"))?;
    let b = param(store, &format!("{name}.bias"))?;
    let (cout, cin_g, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let cout_g = cout / groups;
    let pad = (k / 2) as isize;
    let mut out = Map::zeros(cout, x.h, x.w);
    for o in 0..cout {
        let g = o / cout_g;
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = b.data()[o];
                for i in 0..cin_g {
                    let ci = g * cin_g + i;
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy >= 0 && sx >= 0 && (sy as usize) < x.h && (sx as usize) < x.w {
                                let wv = w.data()[((o * cin_g + i) * k + ky) * k + kx];
                                acc += wv * x.get(ci, sy as usize, sx as usize);
                            }
                        }
                    }
                }
                out.set(o, y, xx, acc);
            }
        }
    }
    Ok(out)
}

/// Per-pixel normalization across channels.
fn layer_norm<T: Element>(x: &Map<T>, store: &ParamStore<T>, name: &str, eps: f64) -> Result<Map<T>> {
    let g = param(store, &format!("{name}.gamma"))?;
    let b = param(store, &format!("{name}.beta"))?;
    let n = T::from_f64(x.c as f64);
    let mut out = Map::zeros(x.c, x.h, x.w);
    for y in 0..x.h {
        for xx in 0..x.w {
            let mean = (0..x.c).map(|c| x.get(c, y, xx)).fold(T::zero(), |a, b| a + b) / n;
            let var = (0..x.c)
                .map(|c| (x.get(c, y, xx) - mean) * (x.get(c, y, xx) - mean))
                .fold(T::zero(), |a, b| a + b)
                / n;
            let inv = T::one() / (var + T::from_f64(eps)).sqrt();
            for c in 0..x.c {
                out.set(c, y, xx, (x.get(c, y, xx) - mean) * inv * g.data()[c] + b.data()[c]);
            }
        }
    }
    Ok(out)
}

/// Channel `c` of the first `4g` reads from `(y + dy, x + dx)`; order left, right, up, down.
fn shift<T: Element>(x: &Map<T>, g: usize) -> Map<T> {
    let mut out = x.clone();
    if g == 0 {
        return out;
    }
    for c in 0..(4 * g).min(x.c) {
        let (dy, dx): (isize, isize) = [(0, 1), (0, -1), (1, 0), (-1, 0)][c / g];
        for y in 0..x.h {
            for xx in 0..x.w {
                let (sy, sx) = (y as isize + dy, xx as isize + dx);
                let inside = sy >= 0 && sx >= 0 && (sy as usize) < x.h && (sx as usize) < x.w;
                out.set(c, y, xx, if inside { x.get(c, sy as usize, sx as usize) } else { T::zero() });
            }
        }
    }
    out
}

pub struct OracleSpec {
    pub eps: f64,
    /// Channels moved per direction in the shift stages.
    pub shift_group: usize,
}

/// Evaluates block `prefix` (e.g. `lisb.0`) of a default-variant model on
/// a batch-1 input `f`.
pub fn split_block<T: Element>(f: &Tensor<T>, store: &ParamStore<T>, prefix: &str, spec: &OracleSpec) -> Result<Tensor<T>> {
    let [n, c, h, w] = f.dims4()?;
    if n != 1 || c % 4 != 0 {
        return Err(Error::InvalidArgument("oracle: batch 1 and channels divisible by 4 required".into()));
    }
    let input = Map::with(c, h, w, f.data().to_vec());

    let r1 = input.channels(0, c / 2);
    let mut m1 = input.channels(c / 2, c / 2);
    for l in 0..2 {
        let layer = format!("{prefix}.sbb.{l}");
        m1 = shift(&m1, spec.shift_group);
        let z = layer_norm(&m1, store, &format!("{layer}.norm"), spec.eps)?;
        let e = conv(&z, store, &format!("{layer}.ffn.expand"), 1)?.map(gelu);
        let gate = conv(&e, store, &format!("{layer}.ffn.pa.conv"), 1)?.map(sigmoid);
        let pa = e.zip(&gate, |a, b| a * b);
        let proj = conv(&pa, store, &format!("{layer}.ffn.project"), 1)?;
        m1 = proj.zip(&m1, |a, b| a + b);
    }

    let r2 = m1.channels(0, c / 4);
    let m2 = m1.channels(c / 4, c / 4);
    let d = conv(&m2, store, &format!("{prefix}.rdb.dw"), c / 4)?;
    let p = conv(&d, store, &format!("{prefix}.rdb.pw"), 1)?;
    let m3 = p.zip(&m2, |a, b| sigmoid(a + b));

    let mut x_in = r1.v.clone();
    x_in.extend_from_slice(&r2.v);
    x_in.extend_from_slice(&m3.v);
    let x_in = Map::with(c, h, w, x_in);

    // channel statistics, then the two 1×1 convolutions on a single pixel
    let hw = T::from_f64((h * w) as f64);
    let mut t1 = Map::zeros(c, 1, 1);
    for ch in 0..c {
        let vals = &x_in.v[ch * h * w..(ch + 1) * h * w];
        let mean = vals.iter().fold(T::zero(), |a, &b| a + b) / hw;
        let var = vals.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / hw;
        t1.set(ch, 0, 0, var.sqrt() + mean);
    }
    let reduced = conv(&t1, store, &format!("{prefix}.cca.reduce"), 1)?;
    let gate = conv(&reduced, store, &format!("{prefix}.cca.expand"), 1)?.map(sigmoid);
    let mut out = Map::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out.set(ch, y, xx, gate.get(ch, 0, 0) * x_in.get(ch, y, xx) + input.get(ch, y, xx));
            }
        }
    }
    Tensor::new(vec![1, c, h, w], out.v)
}
