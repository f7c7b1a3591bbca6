//! Fixed Sobel gradient filters used by the edge term of the training loss.
//!
//! Each channel is filtered independently. Borders replicate the nearest
//! pixel, so a constant image has zero gradient everywhere.

use crate::error::Result;
use crate::tensor::{Element, Function, Tape, Tensor, Var};

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SobelAxis {
    X,
    Y,
}

impl SobelAxis {
    pub fn kernel(self) -> &'static [[f64; 3]; 3] {
        match self {
            SobelAxis::X => &SOBEL_X,
            SobelAxis::Y => &SOBEL_Y,
        }
    }
}

#[inline]
fn clamp(i: usize, d: usize, n: usize) -> usize {
    (i + d).saturating_sub(1).min(n - 1)
}

fn filter<T: Element>(x: &Tensor<T>, axis: SobelAxis) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let k = axis.kernel().map(|row| row.map(T::from_f64));
    let mut out = Tensor::zeros(x.shape());
    let plane = h * w;
    for (src, dst) in x.data().chunks_exact(plane).zip(out.data_mut().chunks_exact_mut(plane)).take(n * c) {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = T::zero();
                for (dy, krow) in k.iter().enumerate() {
                    let sy = clamp(y, dy, h);
                    for (dx, &kv) in krow.iter().enumerate() {
                        acc += kv * src[sy * w + clamp(xx, dx, w)];
                    }
                }
                dst[y * w + xx] = acc;
            }
        }
    }
    Ok(out)
}

fn filter_adjoint<T: Element>(g: &Tensor<T>, axis: SobelAxis) -> Result<Tensor<T>> {
    let [_, _, h, w] = g.dims4()?;
    let k = axis.kernel().map(|row| row.map(T::from_f64));
    let mut out = Tensor::zeros(g.shape());
    let plane = h * w;
    for (src, dst) in g.data().chunks_exact(plane).zip(out.data_mut().chunks_exact_mut(plane)) {
        for y in 0..h {
            for xx in 0..w {
                let d = src[y * w + xx];
                for (dy, krow) in k.iter().enumerate() {
                    let sy = clamp(y, dy, h);
                    for (dx, &kv) in krow.iter().enumerate() {
                        dst[sy * w + clamp(xx, dx, w)] += kv * d;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Horizontal and vertical Sobel responses of every channel.
pub fn sobel<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((filter(x, SobelAxis::X)?, filter(x, SobelAxis::Y)?))
}

#[derive(Debug)]
struct SobelFn(SobelAxis);

impl<T: Element> Function<T> for SobelFn {
    fn name(&self) -> &'static str {
        "sobel"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![filter_adjoint(grad, self.0)?])
    }
}

impl<T: Element> Tape<T> {
    pub fn sobel(&mut self, x: Var, axis: SobelAxis) -> Result<Var> {
        let out = filter(self.value(x), axis)?;
        let flops = 2 * 9 * out.numel() as u64;
        Ok(self.custom(&[x], out, Box::new(SobelFn(axis)), flops))
    }
}
