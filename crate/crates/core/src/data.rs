//! Image I/O, bicubic degradation, augmentation and patch sampling.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, GrayImage, ImageEncoder, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::bicubic_resize_to;
use crate::tensor::{Element, Tensor};

pub const DEFAULT_PATCH: usize = 48;
pub const DEFAULT_BATCH: usize = 16;
pub const TRAIN_FRACTION: f64 = 0.8;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "pnm", "ppm"];

/// A high-resolution image in `[0, 1]`, shape `[1, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub hr: Tensor<f32>,
    pub path: PathBuf,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.hr.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.hr.shape()[3]
    }
}

/// An aligned LR/HR training pair. `lr` is always the bicubic degradation of `hr`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPatch {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    /// Top-left corner `(y, x)` of the crop in LR coordinates.
    pub lr_offset: (usize, usize),
    /// Top-left corner in HR coordinates; always `lr_offset · scale`.
    pub hr_offset: (usize, usize),
}

fn bt601_luma(r: u8, g: u8, b: u8) -> f32 {
    (0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32) / 255.0
}

fn image_to_tensor(img: DynamicImage) -> Result<Tensor<f32>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLumaA8(g) => g.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        other => other.to_rgb8().pixels().map(|p| bt601_luma(p.0[0], p.0[1], p.0[2])).collect(),
    };
    Tensor::new(vec![1, 1, h, w], data)
}

/// Reads a PNG or PNM file as a single luma channel scaled to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageSample> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(ImageSample {
        hr: image_to_tensor(img)?,
        path: path.to_path_buf(),
    })
}

/// Writes the first plane of `img`, clamped to `[0, 1]`, as 8-bit grayscale.
/// The format follows the file extension.
pub fn save_image<T: Element>(img: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [_, _, h, w] = img.dims4()?;
    let mut out = GrayImage::new(w as u32, h as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let v = img.data()[i].as_f64().clamp(0.0, 1.0);
        *px = Luma([(v * 255.0).round() as u8]);
    }
    let err = |e: image::ImageError| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if !is_pgm {
        return out.save(path).map_err(err);
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    PnmEncoder::new(&mut writer)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(out.as_raw(), w as u32, h as u32, ExtendedColorType::L8)
        .map_err(err)?;
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Crops the bottom and right edges so both sides are multiples of `scale`.
pub fn crop_to_multiple<T: Element>(img: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let [_, _, h, w] = img.dims4()?;
    let (ho, wo) = (h - h % scale, w - w % scale);
    if ho == 0 || wo == 0 {
        return Err(Error::InvalidArgument(format!(
            "image of shape {:?} is smaller than scale {scale}",
            img.shape()
        )));
    }
    crop(img, (0, 0), (ho, wo))
}

/// Extracts a `size.0 × size.1` window with top-left corner `at`.
pub fn crop<T: Element>(img: &Tensor<T>, at: (usize, usize), size: (usize, usize)) -> Result<Tensor<T>> {
    let [n, c, h, w] = img.dims4()?;
    if at.0 + size.0 > h || at.1 + size.1 > w {
        return Err(Error::InvalidArgument(format!(
            "crop {size:?} at {at:?} exceeds image {h}x{w}"
        )));
    }
    Ok(Tensor::from_fn([n, c, size.0, size.1], |ni, ci, y, x| {
        img.at(ni, ci, at.0 + y, at.1 + x)
    }))
}

/// Bicubic downsampling by an integer factor that divides both sides.
pub fn degrade<T: Element>(hr: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let [_, _, h, w] = hr.dims4()?;
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::InvalidArgument(format!(
            "degrade: {h}x{w} is not divisible by scale {scale}; crop first"
        )));
    }
    bicubic_resize_to(hr, h / scale, w / scale)
}

/// An element of the dihedral group of the square: `rot90^k ∘ flip^f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
    /// Mirror left-right before rotating.
    pub hflip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        quarter_turns: 0,
        hflip: false,
    };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral::from_index)
    }

    pub fn from_index(i: u8) -> Self {
        Dihedral {
            quarter_turns: i % 4,
            hflip: i >= 4,
        }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Self::from_index(rng.random_range(0..8))
    }

    pub fn apply<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, h, w] = x.dims4()?;
        if self.quarter_turns % 2 == 1 && h != w {
            return Err(Error::InvalidArgument(format!(
                "quarter-turn rotation needs a square patch, got {h}x{w}"
            )));
        }
        let mut out = if self.hflip { hflip(x)? } else { x.clone() };
        for _ in 0..self.quarter_turns {
            out = rot90(&out)?;
        }
        Ok(out)
    }
}

/// Mirrors each plane left-right.
pub fn hflip<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    Ok(Tensor::from_fn([n, c, h, w], |ni, ci, y, xi| x.at(ni, ci, y, w - 1 - xi)))
}

/// Rotates each plane by 90° counter-clockwise; `[H, W]` becomes `[W, H]`.
pub fn rot90<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    Ok(Tensor::from_fn([n, c, w, h], |ni, ci, y, xi| x.at(ni, ci, xi, w - 1 - y)))
}

/// Applies the same transform to both halves of a patch.
pub fn augment(patch: &TrainPatch, t: Dihedral) -> Result<TrainPatch> {
    Ok(TrainPatch {
        lr: t.apply(&patch.lr)?,
        hr: t.apply(&patch.hr)?,
        ..patch.clone()
    })
}

/// An ordered collection of HR images.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Loads every image under `dir` (recursively), in sorted path order.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths = Vec::new();
        collect_images(dir, &mut paths)?;
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Empty(format!("no PNG/PGM images under {}", dir.display())));
        }
        Self::load_all(&paths)
    }

    /// Loads the images listed in a manifest, one path per line relative to
    /// the manifest's directory. Blank lines and `#` comments are ignored.
    pub fn from_manifest(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let paths: Vec<PathBuf> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| base.join(l))
            .collect();
        if paths.is_empty() {
            return Err(Error::Empty(format!("manifest {} lists no images", manifest.display())));
        }
        Self::load_all(&paths)
    }

    /// A directory or a manifest file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.is_dir() {
            Self::from_dir(path)
        } else {
            Self::from_manifest(path)
        }
    }

    fn load_all(paths: &[PathBuf]) -> Result<Self> {
        let samples = paths.iter().map(load_image).collect::<Result<_>>()?;
        Ok(Dataset { samples })
    }

    /// Deterministic split: sort by path, shuffle with `seed`, then the first
    /// `fraction` of images (rounded) train and the rest test.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.samples[a].path.cmp(&self.samples[b].path));
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (self.len() as f64 * fraction).round() as usize;
        let pick = |idx: &[usize]| Dataset::new(idx.iter().map(|&i| self.samples[i].clone()).collect());
        (pick(&order[..n_train]), pick(&order[n_train..]))
    }
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in walkdir::WalkDir::new(dir) {
        let entry = entry.map_err(|e| Error::Image {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?;
        let path = entry.path();
        if entry.file_type().is_file()
            && path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        {
            out.push(path.to_path_buf());
        }
    }
    Ok(())
}

/// Draws aligned, augmented LR/HR crops from the images large enough for them.
#[derive(Debug)]
pub struct PatchSampler<'a> {
    dataset: &'a Dataset,
    usable: Vec<usize>,
    patch: usize,
    scale: usize,
    augment: bool,
}

impl<'a> PatchSampler<'a> {
    pub fn new(dataset: &'a Dataset, patch: usize, scale: usize) -> Result<Self> {
        if patch == 0 || scale == 0 {
            return Err(Error::InvalidArgument("patch size and scale must be positive".into()));
        }
        let need = patch * scale;
        let mut usable = Vec::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            if s.height() >= need && s.width() >= need {
                usable.push(i);
            } else {
                log::warn!(
                    "skipping {} ({}x{}): smaller than the {need}x{need} HR crop",
                    s.path.display(),
                    s.height(),
                    s.width()
                );
            }
        }
        if usable.is_empty() {
            return Err(Error::Empty(format!(
                "no image is at least {need}x{need} pixels (patch {patch}, scale {scale})"
            )));
        }
        Ok(PatchSampler {
            dataset,
            usable,
            patch,
            scale,
            augment: true,
        })
    }

    pub fn with_augment(mut self, augment: bool) -> Self {
        self.augment = augment;
        self
    }

    pub fn usable(&self) -> usize {
        self.usable.len()
    }

    /// One patch: random image, random aligned crop, random dihedral
    /// transform of the HR crop, then degradation. Degrading after the
    /// transform keeps `lr == degrade(hr)` exact.
    pub fn draw(&self, rng: &mut impl Rng) -> Result<TrainPatch> {
        let sample = &self.dataset.samples[self.usable[rng.random_range(0..self.usable.len())]];
        let (lh, lw) = (sample.height() / self.scale, sample.width() / self.scale);
        let oy = rng.random_range(0..=lh - self.patch);
        let ox = rng.random_range(0..=lw - self.patch);
        let side = self.patch * self.scale;
        let hr_offset = (oy * self.scale, ox * self.scale);
        let hr = crop(&sample.hr, hr_offset, (side, side))?;
        let t = if self.augment { Dihedral::random(rng) } else { Dihedral::IDENTITY };
        let hr = t.apply(&hr)?;
        Ok(TrainPatch {
            lr: degrade(&hr, self.scale)?,
            hr,
            lr_offset: (oy, ox),
            hr_offset,
        })
    }

    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<TrainPatch>> {
        (0..batch).map(|_| self.draw(rng)).collect()
    }
}

pub fn sample_batch(
    dataset: &Dataset,
    batch: usize,
    patch: usize,
    scale: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TrainPatch>> {
    PatchSampler::new(dataset, patch, scale)?.sample(batch, rng)
}

/// Stacks patches into `[B, 1, p, p]` and `[B, 1, p·s, p·s]` batches.
pub fn stack(patches: &[TrainPatch]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = patches.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
    let join = |get: &dyn Fn(&TrainPatch) -> &Tensor<f32>| -> Result<Tensor<f32>> {
        let shape = get(first).shape().to_vec();
        let mut data = Vec::with_capacity(shape.iter().product::<usize>() * patches.len());
        for p in patches {
            let t = get(p);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("stack", &shape, t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let mut out = shape.clone();
        out[0] *= patches.len();
        Tensor::new(out, data)
    };
    Ok((join(&|p| &p.lr)?, join(&|p| &p.hr)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn([1, 1, h, w], |_, _, y, x| ((y * 31 + x * 17) % 256) as f32 / 255.0)
    }

    fn dataset(sizes: &[(usize, usize)]) -> Dataset {
        Dataset::new(
            sizes
                .iter()
                .enumerate()
                .map(|(i, &(h, w))| ImageSample {
                    hr: ramp(h, w),
                    path: PathBuf::from(format!("img{i}.png")),
                })
                .collect(),
        )
    }

    #[test]
    fn dihedral_group_laws() {
        let x = ramp(5, 5);
        let mut r = x.clone();
        for _ in 0..4 {
            r = rot90(&r).unwrap();
        }
        assert_eq!(r, x);
        assert_eq!(hflip(&hflip(&x).unwrap()).unwrap(), x);
        let outputs: Vec<_> = Dihedral::all().map(|t| t.apply(&x).unwrap()).collect();
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(outputs[i], outputs[j]);
            }
        }
    }

    #[test]
    fn rotation_of_non_square_is_rejected() {
        let x = ramp(4, 6);
        assert!(Dihedral::from_index(1).apply(&x).is_err());
        assert!(Dihedral::from_index(2).apply(&x).is_ok());
    }

    #[test]
    fn rot90_direction() {
        let x = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rot90(&x).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn degrade_shapes_and_constants() {
        assert_eq!(degrade(&ramp(128, 128), 4).unwrap().shape(), &[1, 1, 32, 32]);
        assert!(degrade(&ramp(10, 12), 4).is_err());
        let c = degrade(&Tensor::<f32>::full(&[1, 1, 16, 16], 0.25), 2).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn rot180_commutes_with_degradation() {
        let hr = Tensor::<f64>::from_fn([1, 1, 16, 16], |_, _, y, x| ((y * 7 + x * 3) % 11) as f64 / 10.0);
        let t = Dihedral::from_index(2);
        let a = degrade(&t.apply(&hr).unwrap(), 4).unwrap();
        let b = t.apply(&degrade(&hr, 4).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn sample_batch_contract() {
        let ds = dataset(&[(200, 210), (100, 100), (256, 192)]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = sample_batch(&ds, 4, 48, 4, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        for p in &batch {
            assert_eq!(p.lr.shape(), &[1, 1, 48, 48]);
            assert_eq!(p.hr.shape(), &[1, 1, 192, 192]);
            assert_eq!(p.hr_offset, (p.lr_offset.0 * 4, p.lr_offset.1 * 4));
            assert_eq!(p.lr, degrade(&p.hr, 4).unwrap());
        }
        let again = sample_batch(&ds, 4, 48, 4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(batch, again);
    }

    #[test]
    fn too_small_images_are_skipped_or_rejected() {
        let ds = dataset(&[(20, 20), (64, 64)]);
        let sampler = PatchSampler::new(&ds, 16, 4).unwrap();
        assert_eq!(sampler.usable(), 1);
        assert!(PatchSampler::new(&dataset(&[(20, 20)]), 16, 4).is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ds = dataset(&[(8, 8); 10]);
        let (a, b) = ds.split(TRAIN_FRACTION, 3);
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a2, _) = ds.split(TRAIN_FRACTION, 3);
        let names = |d: &Dataset| d.samples.iter().map(|s| s.path.clone()).collect::<Vec<_>>();
        assert_eq!(names(&a), names(&a2));
        for p in names(&b) {
            assert!(!names(&a).contains(&p));
        }
    }

    #[test]
    fn stack_concatenates_batch() {
        let ds = dataset(&[(64, 64)]);
        let batch = sample_batch(&ds, 3, 8, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (lr, hr) = stack(&batch).unwrap();
        assert_eq!(lr.shape(), &[3, 1, 8, 8]);
        assert_eq!(hr.shape(), &[3, 1, 16, 16]);
        assert_eq!(&hr.data()[256..512], batch[1].hr.data());
    }
}
