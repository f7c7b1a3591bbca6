//! PSNR / SSIM and the dataset evaluation runner.

use std::fmt::Write as _;

use serde::{Serialize, Serializer};

use crate::data::{crop, crop_to_multiple, degrade, Dataset};
use crate::error::{Error, Result};
use crate::model::LisnModel;
use crate::ops::bicubic_resize_to;
use crate::tensor::{Element, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::InvalidArgument(format!("{op}: peak must be positive, got {peak}")));
    }
    if a.numel() == 0 {
        return Err(Error::InvalidArgument(format!("{op}: empty images")));
    }
    Ok(())
}

pub fn mse<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", a.shape(), b.shape()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(sum / a.numel().max(1) as f64)
}

/// `10·log10(peak² / MSE)` in dB; `+∞` for identical images.
pub fn psnr<T: Element>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    check_pair("psnr", a, b, peak)?;
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11×11 Gaussian window (sigma 1.5) over valid positions,
/// averaged over all planes.
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    check_pair("ssim", a, b, peak)?;
    let [_, _, h, w] = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim: {h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let k = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.data().chunks_exact(plane).zip(b.data().chunks_exact(plane)) {
        let x: Vec<f64> = pa.iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = pb.iter().map(|v| v.as_f64()).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_x = filter_valid(&x, h, w, &k);
        let mu_y = filter_valid(&y, h, w, &k);
        let e_xx = filter_valid(&prod(&x, &x), h, w, &k);
        let e_yy = filter_valid(&prod(&y, &y), h, w, &k);
        let e_xy = filter_valid(&prod(&x, &y), h, w, &k);
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Anything that maps an LR image to an SR image.
pub trait Upscaler: Sync {
    fn name(&self) -> String;
    fn scale(&self) -> usize;
    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Upscaler for LisnModel<f32> {
    fn name(&self) -> String {
        format!("lisn-{}-x{}", self.config().variant, self.config().scale)
    }

    fn scale(&self) -> usize {
        self.config().scale
    }

    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.infer(lr)
    }
}

/// Plain bicubic interpolation, the reference baseline.
#[derive(Clone, Copy, Debug)]
pub struct Bicubic {
    pub scale: usize,
}

impl Upscaler for Bicubic {
    fn name(&self) -> String {
        format!("bicubic-x{}", self.scale)
    }

    fn scale(&self) -> usize {
        self.scale
    }

    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [_, _, h, w] = lr.dims4()?;
        bicubic_resize_to(lr, h * self.scale, w * self.scale)
    }
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub path: String,
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub model: String,
    pub scale: usize,
    pub images: Vec<ImageMetrics>,
    /// Mean over images with finite PSNR; `+∞` if none is finite.
    #[serde(serialize_with = "serialize_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Images left out of `mean_psnr` because their PSNR is infinite.
    pub excluded: usize,
}

#[derive(Serialize)]
struct Aggregate<'a> {
    record: &'static str,
    model: &'a str,
    scale: usize,
    images: usize,
    #[serde(serialize_with = "serialize_db")]
    mean_psnr: f64,
    mean_ssim: f64,
    excluded: usize,
}

#[derive(Serialize)]
struct PerImage<'a> {
    record: &'static str,
    #[serde(flatten)]
    metrics: &'a ImageMetrics,
}

impl MetricReport {
    pub fn from_images(model: String, scale: usize, images: Vec<ImageMetrics>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("no images were evaluated".into()));
        }
        let finite: Vec<f64> = images.iter().map(|m| m.psnr).filter(|p| p.is_finite()).collect();
        let excluded = images.len() - finite.len();
        if excluded > 0 {
            log::warn!("{excluded} image(s) reconstructed exactly (infinite PSNR); left out of the mean");
        }
        let mean_psnr = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let mean_ssim = images.iter().map(|m| m.ssim).sum::<f64>() / images.len() as f64;
        Ok(MetricReport {
            model,
            scale,
            images,
            mean_psnr,
            mean_ssim,
            excluded,
        })
    }

    pub fn to_table(&self) -> String {
        let width = self.images.iter().map(|m| m.path.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>7}", "image", "PSNR(dB)", "SSIM");
        for m in &self.images {
            let _ = writeln!(out, "{:<width$}  {:>9.4}  {:>7.4}", m.path, m.psnr, m.ssim);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.4}  {:>7.4}",
            format!("mean ({}, x{})", self.model, self.scale),
            self.mean_psnr,
            self.mean_ssim
        );
        out
    }

    /// One JSON object per image followed by one aggregate record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.images {
            let rec = PerImage { record: "image", metrics: m };
            out.push_str(&serde_json::to_string(&rec).expect("serializable"));
            out.push('\n');
        }
        let agg = Aggregate {
            record: "aggregate",
            model: &self.model,
            scale: self.scale,
            images: self.images.len(),
            mean_psnr: self.mean_psnr,
            mean_ssim: self.mean_ssim,
            excluded: self.excluded,
        };
        out.push_str(&serde_json::to_string(&agg).expect("serializable"));
        out.push('\n');
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub peak: f64,
    /// Border pixels removed from each side before computing metrics.
    pub shave: usize,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            peak: 1.0,
            shave: 0,
            threads: 1,
        }
    }
}

fn shave<T: Element>(x: &Tensor<T>, border: usize) -> Result<Tensor<T>> {
    if border == 0 {
        return Ok(x.clone());
    }
    let [_, _, h, w] = x.dims4()?;
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::InvalidArgument(format!("shave {border} leaves nothing of a {h}x{w} image")));
    }
    crop(x, (border, border), (h - 2 * border, w - 2 * border))
}

/// Metrics of one HR image: crop to a multiple of the scale, degrade,
/// upscale, clamp to `[0, 1]` and compare against the cropped HR.
pub fn evaluate_image(model: &dyn Upscaler, hr: &Tensor<f32>, opts: &EvalOptions) -> Result<(f64, f64)> {
    let hr = crop_to_multiple(hr, model.scale())?;
    let lr = degrade(&hr, model.scale())?;
    let sr = model.upscale(&lr)?.map(|v| v.clamp(0.0, 1.0));
    let (sr, hr) = (shave(&sr, opts.shave)?, shave(&hr, opts.shave)?);
    Ok((psnr(&sr, &hr, opts.peak)?, ssim(&sr, &hr, opts.peak)?))
}

/// Evaluates every image of `dataset`, optionally across several threads.
pub fn evaluate(model: &dyn Upscaler, dataset: &Dataset, opts: &EvalOptions) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("test set is empty".into()));
    }
    let threads = opts.threads.clamp(1, dataset.len());
    let run = |i: usize| -> Result<ImageMetrics> {
        let s = &dataset.samples[i];
        let (p, q) = evaluate_image(model, &s.hr, opts)?;
        Ok(ImageMetrics {
            path: s.path.display().to_string(),
            psnr: p,
            ssim: q,
        })
    };
    let images: Vec<ImageMetrics> = if threads == 1 {
        (0..dataset.len()).map(run).collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<ImageMetrics>>> = (0..dataset.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (t, chunk) in slots.chunks_mut(dataset.len().div_ceil(threads)).enumerate() {
                let start = t * dataset.len().div_ceil(threads);
                let run = &run;
                scope.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run(start + j));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every slot filled")).collect::<Result<_>>()?
    };
    MetricReport::from_images(model.name(), model.scale(), images)
}
