//! FLOP accounting constants shared by the op tape and the symbolic profiler.
//!
//! A multiply-accumulate counts as [`MAC_FLOPS`] operations. Bias adds inside
//! a convolution are not counted.

pub const MAC_FLOPS: u64 = 2;

pub const ADD: u64 = 1;
pub const MUL: u64 = 1;
pub const SIGMOID: u64 = 4;
pub const GELU: u64 = 4;
/// Mean, centre, square, variance accumulate, rescale, affine multiply, affine add.
pub const LAYER_NORM: u64 = 7;
pub const GLOBAL_AVG: u64 = 1;
/// Centre, square, accumulate.
pub const GLOBAL_STD: u64 = 3;

/// FLOPs of a convolution producing `cout × hout × wout` outputs.
pub fn conv(kernel: usize, cin_per_group: usize, cout: usize, hout: usize, wout: usize, mac_flops: u64) -> u64 {
    mac_flops * (kernel * kernel * cin_per_group * cout * hout * wout) as u64
}
