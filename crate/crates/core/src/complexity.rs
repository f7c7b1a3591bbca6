//! Symbolic parameter / FLOP accounting and wall-clock measurement.
//!
//! The network is described as a flat list of primitive layers, each with
//! the spatial size it runs at. Costs use the constants in
//! [`crate::tensor::cost`], the same ones the op tape uses when it executes.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{LisnConfig, LisnModel, Variant};
use crate::tensor::{cost, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerOp {
    Conv2d {
        cin: usize,
        cout: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
    },
    LayerNorm { channels: usize },
    Shift { channels: usize },
    PixelShuffle { channels: usize, factor: usize },
    /// Any per-element op over `channels` planes.
    Elementwise {
        channels: usize,
        flops_per_element: u64,
    },
    /// Per-channel reduction over the full input plane (mean or std).
    GlobalPool {
        channels: usize,
        flops_per_element: u64,
        /// Spatial size of the plane being reduced.
        input_hw: (usize, usize),
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
    /// Output spatial size.
    pub hw: (usize, usize),
}

impl Layer {
    pub fn new(name: impl Into<String>, op: LayerOp, hw: (usize, usize)) -> Self {
        Layer {
            name: name.into(),
            op,
            hw,
        }
    }

    pub fn params(&self) -> u64 {
        match self.op {
            LayerOp::Conv2d {
                cin,
                cout,
                kernel,
                groups,
                bias,
            } => (cout * (cin / groups) * kernel * kernel + if bias { cout } else { 0 }) as u64,
            LayerOp::LayerNorm { channels } => 2 * channels as u64,
            _ => 0,
        }
    }

    pub fn flops(&self, mac_flops: u64) -> u64 {
        let (h, w) = self.hw;
        let plane = (h * w) as u64;
        match self.op {
            LayerOp::Conv2d {
                cin,
                cout,
                kernel,
                groups,
                ..
            } => cost::conv(kernel, cin / groups, cout, h, w, mac_flops),
            LayerOp::LayerNorm { channels } => cost::LAYER_NORM * channels as u64 * plane,
            LayerOp::Shift { .. } | LayerOp::PixelShuffle { .. } => 0,
            LayerOp::Elementwise {
                channels,
                flops_per_element,
            } => flops_per_element * channels as u64 * plane,
            LayerOp::GlobalPool {
                channels,
                flops_per_element,
                input_hw,
            } => flops_per_element * (channels * input_hw.0 * input_hw.1) as u64,
        }
    }
}

/// Something whose layers can be enumerated at a given LR input size.
pub trait Profile {
    fn profile_name(&self) -> String;
    fn layers(&self, lr_hw: (usize, usize)) -> Vec<Layer>;
}

/// A plain list of layers, for ad-hoc models.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub name: String,
    /// Layers with `hw` given at unit input scale; an input of `(h, w)`
    /// multiplies every size by `(h, w)`.
    pub layers: Vec<Layer>,
}

impl Profile for Sequential {
    fn profile_name(&self) -> String {
        self.name.clone()
    }

    fn layers(&self, lr_hw: (usize, usize)) -> Vec<Layer> {
        self.layers
            .iter()
            .map(|l| Layer {
                hw: (l.hw.0 * lr_hw.0, l.hw.1 * lr_hw.1),
                ..l.clone()
            })
            .collect()
    }
}

struct Plan {
    layers: Vec<Layer>,
    hw: (usize, usize),
}

impl Plan {
    fn conv(&mut self, name: &str, (cin, cout): (usize, usize), kernel: usize, groups: usize) {
        let op = LayerOp::Conv2d {
            cin,
            cout,
            kernel,
            groups,
            bias: true,
        };
        self.layers.push(Layer::new(name, op, self.hw));
    }

    fn pooled_conv(&mut self, name: &str, (cin, cout): (usize, usize)) {
        let op = LayerOp::Conv2d {
            cin,
            cout,
            kernel: 1,
            groups: 1,
            bias: true,
        };
        self.layers.push(Layer::new(name, op, (1, 1)));
    }

    fn elementwise(&mut self, name: &str, channels: usize, flops_per_element: u64) {
        self.elementwise_at(name, channels, flops_per_element, self.hw);
    }

    fn elementwise_at(&mut self, name: &str, channels: usize, flops_per_element: u64, hw: (usize, usize)) {
        let op = LayerOp::Elementwise {
            channels,
            flops_per_element,
        };
        self.layers.push(Layer::new(name, op, hw));
    }

    fn pool(&mut self, name: &str, channels: usize, flops_per_element: u64) {
        let op = LayerOp::GlobalPool {
            channels,
            flops_per_element,
            input_hw: self.hw,
        };
        self.layers.push(Layer::new(name, op, (1, 1)));
    }

    fn pixel_attention(&mut self, name: &str, channels: usize) {
        self.conv(&format!("{name}.conv"), (channels, channels), 1, 1);
        self.elementwise(&format!("{name}.sigmoid"), channels, cost::SIGMOID);
        self.elementwise(&format!("{name}.mul"), channels, cost::MUL);
    }
}

impl Profile for LisnConfig {
    fn profile_name(&self) -> String {
        format!("lisn-{}-x{}", self.variant, self.scale)
    }

    fn layers(&self, lr_hw: (usize, usize)) -> Vec<Layer> {
        let c = self.width;
        let bw = self.block_widths();
        let mut p = Plan { layers: Vec::new(), hw: lr_hw };
        p.conv("sfe", (self.in_channels, c), 3, 1);
        for i in 0..self.n_blocks {
            for l in 0..2 {
                let name = format!("lisb.{i}.sbb.{l}");
                p.layers.push(Layer::new(format!("{name}.shift"), LayerOp::Shift { channels: bw.sbb }, lr_hw));
                p.layers.push(Layer::new(format!("{name}.norm"), LayerOp::LayerNorm { channels: bw.sbb }, lr_hw));
                p.conv(&format!("{name}.ffn.expand"), (bw.sbb, bw.ffn_hidden), 1, 1);
                p.elementwise(&format!("{name}.ffn.gelu"), bw.ffn_hidden, cost::GELU);
                p.pixel_attention(&format!("{name}.ffn.pa"), bw.ffn_hidden);
                p.conv(&format!("{name}.ffn.project"), (bw.ffn_hidden, bw.sbb), 1, 1);
                p.elementwise(&format!("{name}.residual"), bw.sbb, cost::ADD);
            }
            let name = format!("lisb.{i}");
            if self.variant != Variant::NoRdb {
                p.conv(&format!("{name}.rdb.dw"), (bw.rdb, bw.rdb), 3, bw.rdb);
                p.conv(&format!("{name}.rdb.pw"), (bw.rdb, bw.rdb), 1, 1);
                p.elementwise(&format!("{name}.rdb.residual"), bw.rdb, cost::ADD);
                p.elementwise(&format!("{name}.rdb.sigmoid"), bw.rdb, cost::SIGMOID);
            }
            if self.variant != Variant::NoCca {
                p.pool(&format!("{name}.cca.std"), c, cost::GLOBAL_STD);
                p.pool(&format!("{name}.cca.avg"), c, cost::GLOBAL_AVG);
                p.elementwise_at(&format!("{name}.cca.sum"), c, cost::ADD, (1, 1));
                p.pooled_conv(&format!("{name}.cca.reduce"), (c, bw.cca_hidden));
                p.pooled_conv(&format!("{name}.cca.expand"), (bw.cca_hidden, c));
                p.elementwise_at(&format!("{name}.cca.sigmoid"), c, cost::SIGMOID, (1, 1));
                p.elementwise(&format!("{name}.cca.mul"), c, cost::MUL);
            }
            p.elementwise(&format!("{name}.skip"), c, cost::ADD);
        }
        p.conv("dff.fuse", (self.n_blocks * c, c), 1, 1);
        p.conv("dff.conv", (c, c), 3, 1);
        p.pixel_attention("dff.pa", c);
        p.elementwise("global_skip", c, cost::ADD);
        let out = self.in_channels * self.scale * self.scale;
        p.conv("iir", (c, out), 3, 1);
        p.layers.push(Layer::new(
            "iir.shuffle",
            LayerOp::PixelShuffle {
                channels: out,
                factor: self.scale,
            },
            (lr_hw.0 * self.scale, lr_hw.1 * self.scale),
        ));
        p.layers
    }
}

impl<T: Element> Profile for LisnModel<T> {
    fn profile_name(&self) -> String {
        self.config().profile_name()
    }

    fn layers(&self, lr_hw: (usize, usize)) -> Vec<Layer> {
        self.config().layers(lr_hw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub op: LayerOp,
    pub hw: (usize, usize),
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub model: String,
    pub input_hw: (usize, usize),
    /// FLOPs charged per multiply-accumulate.
    pub mac_flops: u64,
    pub rows: Vec<LayerRow>,
    pub total_params: u64,
    pub total_flops: u64,
}

pub fn report(model: &impl Profile, lr_hw: (usize, usize), mac_flops: u64) -> Result<ComplexityReport> {
    if lr_hw.0 == 0 || lr_hw.1 == 0 {
        return Err(Error::InvalidArgument(format!("input size must be positive, got {lr_hw:?}")));
    }
    if mac_flops == 0 {
        return Err(Error::InvalidArgument("MAC convention must be at least 1 FLOP".into()));
    }
    let rows: Vec<LayerRow> = model
        .layers(lr_hw)
        .into_iter()
        .map(|l| LayerRow {
            params: l.params(),
            flops: l.flops(mac_flops),
            name: l.name,
            op: l.op,
            hw: l.hw,
        })
        .collect();
    Ok(ComplexityReport {
        model: model.profile_name(),
        input_hw: lr_hw,
        mac_flops,
        total_params: rows.iter().map(|r| r.params).sum(),
        total_flops: rows.iter().map(|r| r.flops).sum(),
        rows,
    })
}

/// Trainable element count.
pub fn count_params(model: &impl Profile) -> u64 {
    model.layers((1, 1)).iter().map(Layer::params).sum()
}

/// Forward FLOPs at `lr_hw` with a multiply-accumulate counted as two FLOPs.
pub fn count_flops(model: &impl Profile, lr_hw: (usize, usize)) -> u64 {
    model.layers(lr_hw).iter().map(|l| l.flops(cost::MAC_FLOPS)).sum()
}

/// Top-level block of a layer name: `sfe`, `lisb.3`, `dff`, `iir`, ...
fn group_of(name: &str) -> &str {
    let mut parts = name.splitn(3, '.');
    let first = parts.next().unwrap_or(name);
    match (first, parts.next()) {
        ("lisb", Some(i)) => &name[..first.len() + 1 + i.len()],
        _ => first,
    }
}

impl ComplexityReport {
    /// Per-block totals in first-appearance order.
    pub fn groups(&self) -> Vec<(String, u64, u64)> {
        let mut out: Vec<(String, u64, u64)> = Vec::new();
        for r in &self.rows {
            let g = group_of(&r.name);
            match out.iter_mut().find(|(n, _, _)| n == g) {
                Some(e) => {
                    e.1 += r.params;
                    e.2 += r.flops;
                }
                None => out.push((g.to_string(), r.params, r.flops)),
            }
        }
        out
    }

    pub fn to_table(&self, detailed: bool) -> String {
        let entries: Vec<(String, u64, u64)> = if detailed {
            self.rows.iter().map(|r| (r.name.clone(), r.params, r.flops)).collect()
        } else {
            self.groups()
        };
        let width = entries.iter().map(|e| e.0.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} at {}x{} LR input, MAC = {} FLOPs",
            self.model, self.input_hw.0, self.input_hw.1, self.mac_flops
        );
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", "layer", "params", "FLOPs");
        for (name, params, flops) in &entries {
            let _ = writeln!(out, "{name:<width$}  {params:>12}  {flops:>16}");
        }
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", "total", self.total_params, self.total_flops);
        let _ = writeln!(
            out,
            "{:<width$}  {:>11.1}K  {:>15.3}G",
            "",
            self.total_params as f64 / 1e3,
            self.total_flops as f64 / 1e9
        );
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Measurement {
    pub input_hw: (usize, usize),
    pub repeats: usize,
    pub timings_ms: Vec<f64>,
    pub median_ms: f64,
    /// Largest total of live tensor bytes during one inference.
    pub peak_bytes: usize,
    pub hardware: String,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// CPU model, logical core count and architecture.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}, {cores} logical cores, {}", std::env::consts::ARCH)
}

/// Median single-image inference time after one warm-up run.
pub fn measure(model: &LisnModel<f32>, lr_hw: (usize, usize), repeats: usize) -> Result<Measurement> {
    if repeats < 3 {
        return Err(Error::InvalidArgument(format!("at least 3 repeats are needed, got {repeats}")));
    }
    let c = model.config().in_channels;
    let x = Tensor::from_fn([1, c, lr_hw.0, lr_hw.1], |_, ci, y, xi| {
        ((ci * 7 + y * 13 + xi * 29) % 97) as f32 / 96.0
    });
    let (_, peak_bytes) = model.infer_profiled(&x)?;
    let mut timings_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(model.infer(&x)?);
        timings_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Measurement {
        input_hw: lr_hw,
        repeats,
        median_ms: median(&timings_ms),
        timings_ms,
        peak_bytes,
        hardware: hardware_descriptor(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_hand_counts() {
        let l = Layer::new(
            "sfe",
            LayerOp::Conv2d {
                cin: 1,
                cout: 64,
                kernel: 3,
                groups: 1,
                bias: true,
            },
            (64, 64),
        );
        assert_eq!(l.params(), 640);
        let l = Layer::new(
            "c",
            LayerOp::Conv2d {
                cin: 64,
                cout: 64,
                kernel: 3,
                groups: 1,
                bias: true,
            },
            (64, 64),
        );
        assert_eq!(l.flops(2), 301_989_888);
    }

    #[test]
    fn empty_model_counts_nothing() {
        let s = Sequential::default();
        assert_eq!(count_params(&s), 0);
        assert_eq!(count_flops(&s, (64, 64)), 0);
    }

    #[test]
    fn default_hand_count() {
        // sfe 640, six blocks of 33,856, fusion 65,728, reconstruction 9,232
        let cfg = LisnConfig::default();
        assert_eq!(count_params(&cfg), 640 + 6 * 33_856 + 65_728 + 9_232);
        let m = LisnModel::<f32>::build(&cfg, 0).unwrap();
        assert_eq!(count_params(&m), m.num_params() as u64);
    }

    #[test]
    fn shift_rows_are_free() {
        let r = report(&LisnConfig::default(), (64, 64), 2).unwrap();
        let shifts: Vec<_> = r.rows.iter().filter(|r| matches!(r.op, LayerOp::Shift { .. })).collect();
        assert_eq!(shifts.len(), 12);
        assert!(shifts.iter().all(|r| r.params == 0 && r.flops == 0));
        assert_eq!(r.total_flops, r.rows.iter().map(|r| r.flops).sum::<u64>());
    }

    #[test]
    fn groups_partition_totals() {
        let r = report(&LisnConfig::default(), (16, 16), 2).unwrap();
        let g = r.groups();
        assert_eq!(g.len(), 1 + 6 + 1 + 1 + 1);
        assert_eq!(g.iter().map(|e| e.1).sum::<u64>(), r.total_params);
        assert_eq!(g.iter().map(|e| e.2).sum::<u64>(), r.total_flops);
    }

    #[test]
    fn median_picks_middle() {
        assert_eq!(median(&[5.0, 1.0, 4.0, 2.0, 3.0]), 3.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), 2.5);
    }
}
