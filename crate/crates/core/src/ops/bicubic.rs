//! Separable bicubic resampling (cubic convolution, `a = -0.5`).
//!
//! Output pixel centres map to the source by `src = (dst + 0.5) / scale - 0.5`;
//! taps outside the image clamp to the nearest edge pixel. No anti-alias
//! prefilter is applied when shrinking.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const A: f64 = -0.5;

/// Cubic convolution kernel.
pub fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

struct Taps {
    index: [usize; 4],
    weight: [f64; 4],
}

fn taps(out_len: usize, in_len: usize, inv_scale: f64) -> Vec<Taps> {
    (0..out_len)
        .map(|d| {
            let src = (d as f64 + 0.5) * inv_scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut index = [0; 4];
            let mut weight = [0.0; 4];
            for k in 0..4 {
                let i = base as isize + k as isize - 1;
                index[k] = i.clamp(0, in_len as isize - 1) as usize;
                weight[k] = cubic_weight(t - (k as f64 - 1.0));
            }
            Taps { index, weight }
        })
        .collect()
}

fn resample<T: Element>(img: &Tensor<T>, ho: usize, wo: usize, inv_h: f64, inv_w: f64) -> Result<Tensor<T>> {
    let [n, c, h, w] = img.dims4()?;
    if ho == 0 || wo == 0 {
        return Err(Error::InvalidArgument(format!(
            "bicubic_resize: target size {ho}x{wo} from {h}x{w} is empty"
        )));
    }
    let tx = taps(wo, w, inv_w);
    let ty = taps(ho, h, inv_h);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut rows = vec![0.0f64; h * wo];
    for plane in img.data().chunks_exact(h * w) {
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            for (x, t) in tx.iter().enumerate() {
                rows[y * wo + x] = (0..4).map(|k| t.weight[k] * src[t.index[k]].as_f64()).sum();
            }
        }
        for t in &ty {
            for x in 0..wo {
                let v: f64 = (0..4).map(|k| t.weight[k] * rows[t.index[k] * wo + x]).sum();
                out.push(T::from_f64(v));
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Resizes by `scale`; the output is `round(H·scale) × round(W·scale)`.
pub fn bicubic_resize<T: Element>(img: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("bicubic_resize: invalid scale {scale}")));
    }
    let [_, _, h, w] = img.dims4()?;
    let ho = (h as f64 * scale).round() as usize;
    let wo = (w as f64 * scale).round() as usize;
    resample(img, ho, wo, 1.0 / scale, 1.0 / scale)
}

/// Resizes to an explicit `ho × wo`, scaling each axis by out/in.
pub fn bicubic_resize_to<T: Element>(img: &Tensor<T>, ho: usize, wo: usize) -> Result<Tensor<T>> {
    let [_, _, h, w] = img.dims4()?;
    resample(img, ho, wo, h as f64 / ho.max(1) as f64, w as f64 / wo.max(1) as f64)
}
