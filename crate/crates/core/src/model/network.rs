use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{ContrastChannelAttention, Conv, PixelAttention, ResidualDepthwiseBlock, ShiftBuildingBlock, SplitBlock};
use super::config::{LisnConfig, Variant};
use crate::error::{Error, Result};
use crate::ops::SobelAxis;
use crate::tensor::{Element, ParamStore, Tape, Tensor, Var};

/// Deep feature fusion: `PA(conv3×3(conv1×1([F1, …, FN])))`.
#[derive(Clone, Debug)]
pub struct FeatureFusion {
    pub fuse: Conv,
    pub conv: Conv,
    pub pa: PixelAttention,
}

/// The full super-resolution network with its parameters.
#[derive(Clone, Debug)]
pub struct LisnModel<T: Element> {
    config: LisnConfig,
    params: ParamStore<T>,
    pub sfe: Conv,
    pub blocks: Vec<SplitBlock>,
    pub dff: FeatureFusion,
    /// Reconstruction conv; its output is pixel-shuffled by `scale`.
    pub iir: Conv,
}

impl<T: Element> LisnModel<T> {
    /// Builds a model whose weights are a pure function of `config` and `seed`.
    pub fn build(config: &LisnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.width;
        let widths = config.block_widths();

        let sfe = Conv::dense(&mut params, &mut rng, "sfe", (config.in_channels, c), 3)?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let name = format!("lisb.{i}");
            let p = &mut params;
            let sbb = ShiftBuildingBlock::new(p, &mut rng, &format!("{name}.sbb"), widths.sbb, widths.ffn_hidden, config.shift_spec())?;
            let rdb = match config.variant {
                Variant::NoRdb => None,
                _ => Some(ResidualDepthwiseBlock::new(p, &mut rng, &format!("{name}.rdb"), widths.rdb)?),
            };
            let cca = match config.variant {
                Variant::NoCca => None,
                _ => Some(ContrastChannelAttention::new(p, &mut rng, &format!("{name}.cca"), c, widths.cca_hidden)?),
            };
            blocks.push(SplitBlock { widths, sbb, rdb, cca });
        }
        let dff = FeatureFusion {
            fuse: Conv::dense(&mut params, &mut rng, "dff.fuse", (config.n_blocks * c, c), 1)?,
            conv: Conv::dense(&mut params, &mut rng, "dff.conv", (c, c), 3)?,
            pa: PixelAttention::new(&mut params, &mut rng, "dff.pa", c)?,
        };
        let out = config.in_channels * config.scale * config.scale;
        let iir = Conv::dense(&mut params, &mut rng, "iir", (c, out), 3)?;
        Ok(LisnModel {
            config: config.clone(),
            params,
            sfe,
            blocks,
            dff,
            iir,
        })
    }

    pub fn config(&self) -> &LisnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Element>(&self) -> LisnModel<U> {
        LisnModel {
            config: self.config.clone(),
            params: self.params.cast(),
            sfe: self.sfe.clone(),
            blocks: self.blocks.clone(),
            dff: self.dff.clone(),
            iir: self.iir.clone(),
        }
    }

    /// Copies every parameter of `other` whose name and shape match one of ours.
    /// Returns the number of parameters copied.
    pub fn copy_matching_params(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for p in self.params.iter_mut() {
            if let Some(id) = other.find(&p.name) {
                let src = &other.get(id).value;
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::InvalidArgument(format!(
                "model expects {} input channel(s), got shape {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!("empty input of shape {:?}", x.shape())));
        }
        Ok(())
    }

    fn shallow_features(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        self.sfe.forward(tape, params, x)
    }

    fn block_forward(&self, tape: &mut Tape<T>, params: &ParamStore<T>, index: usize, f: Var) -> Result<Var> {
        self.blocks[index].forward(tape, params, f)
    }

    /// Fusion and reconstruction from `F0` and the block outputs.
    fn reconstruct(&self, tape: &mut Tape<T>, params: &ParamStore<T>, f0: Var, feats: &[Var]) -> Result<Var> {
        let cat = if feats.len() == 1 {
            feats[0]
        } else {
            tape.concat_channels(feats)?
        };
        let fused = self.dff.fuse.forward(tape, params, cat)?;
        let fused = self.dff.conv.forward(tape, params, fused)?;
        let f_out = self.dff.pa.forward(tape, params, fused)?;
        let sum = tape.add(f_out, f0)?;
        let y = self.iir.forward(tape, params, sum)?;
        tape.pixel_shuffle(y, self.config.scale)
    }

    /// Records the full forward pass of `x` (`[N, in_channels, H, W]`) on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.forward_with(tape, &self.params, x)
    }

    /// [`forward`](Self::forward) with parameter values taken from `params`,
    /// which must have this model's layout (e.g. a modified clone of
    /// [`params`](Self::params)).
    pub fn forward_with(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter store has {} entries, model has {}",
                params.len(),
                self.params.len()
            )));
        }
        let f0 = self.shallow_features(tape, params, x)?;
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut f = f0;
        for i in 0..self.blocks.len() {
            f = self.block_forward(tape, params, i, f)?;
            feats.push(f);
        }
        self.reconstruct(tape, params, f0, &feats)
    }

    /// Forward pass without gradient bookkeeping. Each stage runs on its own
    /// tape so intermediate activations are freed early; the result is
    /// bit-identical to [`forward`](Self::forward).
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_profiled(x).map(|(y, _)| y)
    }

    /// [`infer`](Self::infer) that also reports the peak number of live
    /// tensor bytes, counting retained stage outputs and each stage's tape.
    pub fn infer_profiled(&self, x: &Tensor<T>) -> Result<(Tensor<T>, usize)> {
        self.check_input(x)?;
        let mut peak = 0;
        let f0 = stage(&[x], &mut peak, x.size_bytes(), |tape, v| self.shallow_features(tape, &self.params, v[0]))?;
        let mut held = f0.size_bytes();
        let mut feats: Vec<Tensor<T>> = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            let prev = feats.last().unwrap_or(&f0);
            let next = stage(&[prev], &mut peak, held, |tape, v| self.block_forward(tape, &self.params, i, v[0]))?;
            held += next.size_bytes();
            feats.push(next);
        }
        let mut inputs = vec![&f0];
        inputs.extend(feats.iter());
        let y = stage(&inputs, &mut peak, held, |tape, v| self.reconstruct(tape, &self.params, v[0], &v[1..]))?;
        Ok((y, peak))
    }
}

fn stage<T: Element>(
    inputs: &[&Tensor<T>],
    peak: &mut usize,
    held: usize,
    f: impl FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input((*t).clone())).collect();
    let out = f(&mut tape, &vars)?;
    *peak = (*peak).max(held + tape.live_bytes());
    Ok(tape.value(out).clone())
}

/// `mean|sr − hr| + alpha1 · (mean|Sx(sr) − Sx(hr)| + mean|Sy(sr) − Sy(hr)|)`.
pub fn lisn_loss<T: Element>(tape: &mut Tape<T>, sr: Var, hr: Var, alpha1: f64) -> Result<Var> {
    if tape.value(sr).shape() != tape.value(hr).shape() {
        return Err(Error::shape("lisn_loss", tape.value(sr).shape(), tape.value(hr).shape()));
    }
    let diff = tape.sub(sr, hr)?;
    let abs = tape.abs(diff);
    let l1 = tape.mean(abs);
    if alpha1 == 0.0 {
        return Ok(l1);
    }
    let mut edge = None;
    for axis in [SobelAxis::X, SobelAxis::Y] {
        let gs = tape.sobel(sr, axis)?;
        let gh = tape.sobel(hr, axis)?;
        let d = tape.sub(gs, gh)?;
        let a = tape.abs(d);
        let m = tape.mean(a);
        edge = Some(match edge {
            None => m,
            Some(e) => tape.add(e, m)?,
        });
    }
    let edge = edge.expect("two sobel axes");
    let weighted = tape.scale(edge, T::from_f64(alpha1));
    tape.add(l1, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(variant: Variant) -> LisnConfig {
        LisnConfig {
            scale: 2,
            width: 8,
            n_blocks: 2,
            shift_gamma: crate::ratio::Ratio::new(1, 4),
            cca_reduction: 2,
            ..LisnConfig::default()
        }
        .with_variant(variant)
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 1, h, w], |_, _, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn output_shapes() {
        let m = LisnModel::<f32>::build(&tiny(Variant::Default).with_scale(4), 0).unwrap();
        assert_eq!(m.infer(&image(32, 32, 0)).unwrap().shape(), &[1, 1, 128, 128]);
        let m = LisnModel::<f32>::build(&tiny(Variant::Default), 0).unwrap();
        assert_eq!(m.infer(&image(24, 24, 0)).unwrap().shape(), &[1, 1, 48, 48]);
    }

    #[test]
    fn default_has_six_blocks() {
        let m = LisnModel::<f32>::build(&LisnConfig::default(), 0).unwrap();
        assert_eq!(m.blocks.len(), 6);
        for i in 0..6 {
            assert!(m.params().iter().any(|p| p.name.starts_with(&format!("lisb.{i}."))));
        }
        assert!(!m.params().iter().any(|p| p.name.starts_with("lisb.6.")));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let m = LisnModel::<f32>::build(&tiny(Variant::Default), 0).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        assert!(m.infer(&x).is_err());
    }

    #[test]
    fn infer_matches_taped_forward_bitwise() {
        let m = LisnModel::<f32>::build(&tiny(Variant::Default), 3).unwrap();
        let x = image(10, 9, 1);
        let mut tape = Tape::new();
        let v = tape.input(x.clone());
        let y = m.forward(&mut tape, v).unwrap();
        assert_eq!(tape.value(y), &m.infer(&x).unwrap());
        assert_eq!(m.infer(&x).unwrap(), m.infer(&x).unwrap());
    }

    #[test]
    fn same_seed_same_params() {
        let a = LisnModel::<f32>::build(&tiny(Variant::Default), 11).unwrap();
        let b = LisnModel::<f32>::build(&tiny(Variant::Default), 11).unwrap();
        let c = LisnModel::<f32>::build(&tiny(Variant::Default), 12).unwrap();
        let values = |m: &LisnModel<f32>| m.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(values(&a), values(&b));
        assert_ne!(values(&a), values(&c));
    }

    #[test]
    fn zero_weights_stay_finite() {
        let mut m = LisnModel::<f32>::build(&tiny(Variant::Default), 0).unwrap();
        for p in m.params_mut().iter_mut().filter(|p| p.name.ends_with("weight") || p.name.ends_with("bias")) {
            p.value.data_mut().fill(0.0);
        }
        let x = image(8, 8, 2).map(|v| v * 1e4);
        assert!(m.infer(&x).unwrap().is_finite());
    }

    #[test]
    fn loss_cases() {
        let hr = image(12, 12, 4);
        let run = |sr: &Tensor<f32>, alpha: f64| {
            let mut tape = Tape::<f32>::new();
            let s = tape.input(sr.clone());
            let h = tape.input(hr.clone());
            let l = lisn_loss(&mut tape, s, h, alpha).unwrap();
            tape.value(l).item().unwrap()
        };
        assert_eq!(run(&hr, 0.1), 0.0);
        let sr = image(12, 12, 5);
        let l1 = sr.zip_map(&hr, |a, b| (a - b).abs()).unwrap().sum() / 144.0;
        assert!((run(&sr, 0.0) - l1).abs() < 1e-7);

        let mut tape = Tape::<f32>::new();
        let s = tape.input(Tensor::full(&[1, 1, 6, 6], 0.7));
        let h = tape.input(Tensor::full(&[1, 1, 6, 6], 0.4));
        let l = lisn_loss(&mut tape, s, h, 0.1).unwrap();
        assert!((tape.value(l).item().unwrap() - 0.3).abs() < 1e-7);

        let mut tape = Tape::<f32>::new();
        let s = tape.input(Tensor::zeros(&[1, 1, 6, 6]));
        let h = tape.input(Tensor::zeros(&[1, 1, 6, 5]));
        assert!(lisn_loss(&mut tape, s, h, 0.1).is_err());
    }

    #[test]
    fn variant_param_counts() {
        let count = |v| LisnModel::<f32>::build(&LisnConfig::default().with_variant(v), 0).unwrap().num_params();
        let base = count(Variant::Default);
        assert!(count(Variant::NoRdb) < base);
        assert!(count(Variant::NoCca) < base);
        let ratio = count(Variant::NoSplit) as f64 / base as f64;
        assert!((2.5..=4.5).contains(&ratio), "{ratio}");
        assert!((195_300..=362_700).contains(&base), "{base}");
    }
}
