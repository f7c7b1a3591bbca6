//! Structural operators specific to super-resolution: channel shift, pixel
//! shuffle, Sobel gradients and bicubic resampling.

pub mod bicubic;
pub mod pixel_shuffle;
pub mod shift;
pub mod sobel;

pub use bicubic::{bicubic_resize, bicubic_resize_to};
pub use pixel_shuffle::{pixel_shuffle, pixel_unshuffle};
pub use shift::{shift4, shift4_adjoint, Direction, ShiftSpec};
pub use sobel::{sobel, SobelAxis};
