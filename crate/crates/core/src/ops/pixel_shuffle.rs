//! Sub-pixel rearrangement `[N, C·r², H, W] ↔ [N, C, H·r, W·r]`.

use crate::error::{Error, Result};
use crate::tensor::{Element, Function, Tape, Tensor, Var};

/// `out[n, c, h·r + i, w·r + j] = in[n, c·r² + i·r + j, h, w]`.
pub fn pixel_shuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, cr2, h, w] = x.dims4()?;
    if r == 0 || cr2 % (r * r) != 0 {
        return Err(Error::InvalidArgument(format!(
            "pixel_shuffle: {cr2} channels not divisible by r² = {}",
            r * r
        )));
    }
    let c = cr2 / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![T::zero(); x.numel()];
    let src = x.data();
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let plane = &src[((ni * cr2) + ci * r * r + i * r + j) * h * w..][..h * w];
                    for y in 0..h {
                        let dst = &mut out[((ni * c + ci) * ho + y * r + i) * wo..][..wo];
                        for xx in 0..w {
                            dst[xx * r + j] = plane[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Inverse index map of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(y: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, ho, wo] = y.dims4()?;
    if r == 0 || ho % r != 0 || wo % r != 0 {
        return Err(Error::InvalidArgument(format!(
            "pixel_unshuffle: spatial size {ho}x{wo} not divisible by {r}"
        )));
    }
    let (h, w) = (ho / r, wo / r);
    let cr2 = c * r * r;
    let mut out = vec![T::zero(); y.numel()];
    let src = y.data();
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let plane = &mut out[((ni * cr2) + ci * r * r + i * r + j) * h * w..][..h * w];
                    for yy in 0..h {
                        let row = &src[((ni * c + ci) * ho + yy * r + i) * wo..][..wo];
                        for xx in 0..w {
                            plane[yy * w + xx] = row[xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cr2, h, w], out)
}

#[derive(Debug)]
struct PixelShuffleFn(usize);

impl<T: Element> Function<T> for PixelShuffleFn {
    fn name(&self) -> &'static str {
        "pixel_shuffle"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![pixel_unshuffle(grad, self.0)?])
    }
}

impl<T: Element> Tape<T> {
    /// Records a [`pixel_shuffle`]; a pure permutation, zero FLOPs.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = pixel_shuffle(self.value(x), r)?;
        Ok(self.custom(&[x], out, Box::new(PixelShuffleFn(r)), 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_channels_to_two_by_two() {
        let x = Tensor::<f32>::new(vec![1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_law() {
        let x = Tensor::<f32>::zeros(&[1, 16, 8, 8]);
        assert_eq!(pixel_shuffle(&x, 4).unwrap().shape(), &[1, 1, 32, 32]);
        assert!(pixel_shuffle(&Tensor::<f32>::zeros(&[1, 6, 2, 2]), 2).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_and_multiset(n in 1usize..3, c in 1usize..3, h in 1usize..5, w in 1usize..5, r in 2usize..5, seed in any::<u64>()) {
            let mut s = seed;
            let x = Tensor::<f32>::from_fn([n, c * r * r, h, w], |_, _, _, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 40) as f32 / 1024.0
            });
            let y = pixel_shuffle(&x, r).unwrap();
            prop_assert_eq!(y.shape(), &[n, c, h * r, w * r][..]);
            let back = pixel_unshuffle(&y, r).unwrap();
            prop_assert_eq!(&back, &x);
            let mut a: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
