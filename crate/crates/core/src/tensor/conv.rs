//! 2-D convolution (cross-correlation) kernels with zero padding.
//!
//! Dense and grouped convolutions lower to im2col + GEMM; the depth-wise case
//! (one input and one output channel per group) runs as a direct loop.

use serde::{Deserialize, Serialize};

use super::{gemm, Element, Layout, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Conv2dSpec { stride, pad, groups }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub const fn same(kernel: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            pad: kernel / 2,
            groups: 1,
        }
    }

    pub const fn depthwise(kernel: usize, channels: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            pad: kernel / 2,
            groups: channels,
        }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if self.stride == 0 || padded < kernel {
            None
        } else {
            Some((padded - kernel) / self.stride + 1)
        }
    }
}

/// Validated geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeometry {
    pub fn new<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: Conv2dSpec) -> Result<Self> {
        let [n, cin, h, wd] = x.dims4()?;
        let [cout, cin_g, kh, kw] = w.dims4()?;
        if spec.groups == 0 || spec.stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: stride and groups must be positive, got {spec:?}"
            )));
        }
        if kh != kw {
            return Err(Error::InvalidArgument(format!(
                "conv2d: only square kernels are supported, weight shape {:?}",
                w.shape()
            )));
        }
        if cin % spec.groups != 0 || cout % spec.groups != 0 || cin / spec.groups != cin_g {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if let Some(b) = b {
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d bias", b.shape(), &[cout]));
            }
        }
        let (Some(ho), Some(wo)) = (spec.output_size(h, kh), spec.output_size(wd, kw)) else {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with pad {}",
                spec.pad
            )));
        };
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w: wd,
            cout,
            k: kh,
            ho,
            wo,
            spec,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }

    fn is_depthwise(&self) -> bool {
        self.spec.groups == self.cin && self.cout == self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.pad == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    pub fn flops(&self, mac_flops: u64) -> u64 {
        super::cost::conv(self.k, self.cin_g(), self.cout, self.ho, self.wo, mac_flops)
    }

    /// Input row feeding output row `o` at kernel tap `t`, if inside the image.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + t) as isize - self.spec.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col<T: Element>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let (k, ho, wo) = (g.k, g.ho, g.wo);
    let plane = ho * wo;
    for ci in 0..g.cin_g() {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..ho {
                    let out = &mut row[oy * wo..(oy + 1) * wo];
                    match g.source(oy, ky, g.h) {
                        None => out.fill(T::zero()),
                        Some(iy) => {
                            let xr = &xc[iy * g.w..(iy + 1) * g.w];
                            for (ox, o) in out.iter_mut().enumerate() {
                                *o = match g.source(ox, kx, g.w) {
                                    Some(ix) => xr[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let (k, ho, wo) = (g.k, g.ho, g.wo);
    let plane = ho * wo;
    for ci in 0..g.cin_g() {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..ho {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    let dxr = &mut dxc[iy * g.w..(iy + 1) * g.w];
                    for (ox, &v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            dxr[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x, w, b, spec)?;
    let mut out = Tensor::zeros(&g.output_shape());
    if g.is_depthwise() {
        depthwise_forward(&g, x.data(), w.data(), b.map(|b| b.data()), out.data_mut());
        return Ok(out);
    }

    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let rows = cin_g * g.k * g.k;
    let plane = g.ho * g.wo;
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * plane] };
    let od = out.data_mut();
    for n in 0..g.n {
        for grp in 0..spec.groups {
            let xin = &x.data()[(n * g.cin + grp * cin_g) * g.h * g.w..][..cin_g * g.h * g.w];
            let wg = &w.data()[grp * cout_g * rows..][..cout_g * rows];
            let og = &mut od[(n * g.cout + grp * cout_g) * plane..][..cout_g * plane];
            if let Some(b) = b {
                for (co, orow) in og.chunks_exact_mut(plane).enumerate() {
                    orow.fill(b.data()[grp * cout_g + co]);
                }
            }
            let src: &[T] = if g.is_pointwise() {
                xin
            } else {
                im2col(&g, xin, &mut col);
                &col
            };
            gemm(
                wg,
                Layout::row_major(cout_g, rows),
                src,
                Layout::row_major(rows, plane),
                T::one(),
                og,
                Layout::row_major(cout_g, plane),
            );
        }
    }
    Ok(out)
}

fn depthwise_forward<T: Element>(g: &ConvGeometry, x: &[T], w: &[T], b: Option<&[T]>, out: &mut [T]) {
    let (k, ho, wo) = (g.k, g.ho, g.wo);
    for n in 0..g.n {
        for c in 0..g.cin {
            let xc = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let wc = &w[c * k * k..][..k * k];
            let oc = &mut out[(n * g.cout + c) * ho * wo..][..ho * wo];
            let bias = b.map_or(T::zero(), |b| b[c]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let Some(iy) = g.source(oy, ky, g.h) else { continue };
                        for kx in 0..k {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                acc += wc[ky * k + kx] * xc[iy * g.w + ix];
                            }
                        }
                    }
                    oc[oy * wo + ox] = acc + bias;
                }
            }
        }
    }
}

pub struct Conv2dGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    spec: Conv2dSpec,
    dy: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let g = ConvGeometry::new(x, w, None, spec)?;
    if dy.shape() != g.output_shape() {
        return Err(Error::shape("conv2d backward", dy.shape(), &g.output_shape()));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let plane = g.ho * g.wo;
    let db = has_bias.then(|| {
        let mut db = Tensor::zeros(&[g.cout]);
        for n in 0..g.n {
            for co in 0..g.cout {
                let s: T = dy.data()[(n * g.cout + co) * plane..][..plane].iter().copied().sum();
                db.data_mut()[co] += s;
            }
        }
        db
    });

    if g.is_depthwise() {
        depthwise_backward(&g, x.data(), w.data(), dy.data(), dx.data_mut(), dw.data_mut());
        return Ok(Conv2dGrads { dx, dw, db });
    }

    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let rows = cin_g * g.k * g.k;
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); rows * plane] };
    let mut dcol = vec![T::zero(); rows * plane];
    for n in 0..g.n {
        for grp in 0..spec.groups {
            let xoff = (n * g.cin + grp * cin_g) * g.h * g.w;
            let xin = &x.data()[xoff..][..cin_g * g.h * g.w];
            let wg = &w.data()[grp * cout_g * rows..][..cout_g * rows];
            let dyg = &dy.data()[(n * g.cout + grp * cout_g) * plane..][..cout_g * plane];

            let src: &[T] = if pointwise {
                xin
            } else {
                im2col(&g, xin, &mut col);
                &col
            };
            // dW_g += dY_g · colᵀ
            gemm(
                dyg,
                Layout::row_major(cout_g, plane),
                src,
                Layout::transposed(rows, plane),
                T::one(),
                &mut dw.data_mut()[grp * cout_g * rows..][..cout_g * rows],
                Layout::row_major(cout_g, rows),
            );
            // dcol = W_gᵀ · dY_g
            let dxg = &mut dx.data_mut()[xoff..][..cin_g * g.h * g.w];
            if pointwise {
                gemm(
                    wg,
                    Layout::transposed(cout_g, rows),
                    dyg,
                    Layout::row_major(cout_g, plane),
                    T::zero(),
                    dxg,
                    Layout::row_major(rows, plane),
                );
            } else {
                gemm(
                    wg,
                    Layout::transposed(cout_g, rows),
                    dyg,
                    Layout::row_major(cout_g, plane),
                    T::zero(),
                    &mut dcol,
                    Layout::row_major(rows, plane),
                );
                col2im(&g, &dcol, dxg);
            }
        }
    }
    Ok(Conv2dGrads { dx, dw, db })
}

fn depthwise_backward<T: Element>(g: &ConvGeometry, x: &[T], w: &[T], dy: &[T], dx: &mut [T], dw: &mut [T]) {
    let (k, ho, wo) = (g.k, g.ho, g.wo);
    for n in 0..g.n {
        for c in 0..g.cin {
            let xc = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let dxc = &mut dx[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let wc = &w[c * k * k..][..k * k];
            let dwc = &mut dw[c * k * k..][..k * k];
            let dyc = &dy[(n * g.cout + c) * ho * wo..][..ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let d = dyc[oy * wo + ox];
                    for ky in 0..k {
                        let Some(iy) = g.source(oy, ky, g.h) else { continue };
                        for kx in 0..k {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                dxc[iy * g.w + ix] += wc[ky * k + kx] * d;
                                dwc[ky * k + kx] += xc[iy * g.w + ix] * d;
                            }
                        }
                    }
                }
            }
        }
    }
}
