//! Four-direction channel shift: a parameter-free spatial mixing step.
//!
//! The first `4·g` channels, `g = floor(gamma·C)`, are split into four
//! consecutive blocks translated one pixel left, right, up and down
//! respectively. Vacated pixels are zero. The rest pass through.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ratio::Ratio;
use crate::tensor::{Element, Function, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ORDER: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn opposite(self) -> Self {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        }
    }

    /// `(dy, dx)` such that `out[y][x] = in[y + dy][x + dx]`.
    fn offset(self) -> (isize, isize) {
        match self {
            Direction::Left => (0, 1),
            Direction::Right => (0, -1),
            Direction::Up => (1, 0),
            Direction::Down => (-1, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub gamma: Ratio,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            gamma: Ratio::new(1, 12),
        }
    }
}

impl ShiftSpec {
    pub fn new(gamma: Ratio) -> Self {
        ShiftSpec { gamma }
    }

    /// Channels moved in each direction for a `channels`-wide input.
    pub fn group_size(&self, channels: usize) -> usize {
        self.gamma.floor_mul(channels)
    }

    /// Direction applied to channel `c`, `None` for pass-through channels.
    pub fn direction_of(&self, c: usize, channels: usize) -> Option<Direction> {
        let g = self.group_size(channels);
        if g == 0 || c >= 4 * g {
            None
        } else {
            Some(Direction::ORDER[c / g])
        }
    }
}

/// Translates one `h × w` plane by one pixel with zero fill.
pub fn shift_plane<T: Element>(src: &[T], dst: &mut [T], h: usize, w: usize, dir: Direction) {
    let (dy, dx) = dir.offset();
    for y in 0..h {
        let sy = y as isize + dy;
        let row = &mut dst[y * w..(y + 1) * w];
        if sy < 0 || sy >= h as isize {
            row.fill(T::zero());
            continue;
        }
        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
        for (x, o) in row.iter_mut().enumerate() {
            let sx = x as isize + dx;
            *o = if sx < 0 || sx >= w as isize { T::zero() } else { srow[sx as usize] };
        }
    }
}

fn apply<T: Element>(x: &Tensor<T>, spec: &ShiftSpec, reverse: bool) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let plane = h * w;
    let mut out = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let Some(dir) = spec.direction_of(ci, c) else { continue };
            let dir = if reverse { dir.opposite() } else { dir };
            let off = (ni * c + ci) * plane;
            shift_plane(&x.data()[off..off + plane], &mut out.data_mut()[off..off + plane], h, w, dir);
        }
    }
    Ok(out)
}

/// Forward shift of a `[N, C, H, W]` tensor.
pub fn shift4<T: Element>(x: &Tensor<T>, spec: &ShiftSpec) -> Result<Tensor<T>> {
    apply(x, spec, false)
}

/// Adjoint of [`shift4`]: every block moves the opposite way.
pub fn shift4_adjoint<T: Element>(x: &Tensor<T>, spec: &ShiftSpec) -> Result<Tensor<T>> {
    apply(x, spec, true)
}

#[derive(Debug)]
struct Shift4Fn(ShiftSpec);

impl<T: Element> Function<T> for Shift4Fn {
    fn name(&self) -> &'static str {
        "shift4"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![shift4_adjoint(grad, &self.0)?])
    }
}

impl<T: Element> Tape<T> {
    /// Records a [`shift4`]; zero FLOPs.
    pub fn shift4(&mut self, x: Var, spec: ShiftSpec) -> Result<Var> {
        let out = shift4(self.value(x), &spec)?;
        Ok(self.custom(&[x], out, Box::new(Shift4Fn(spec)), 0))
    }
}
