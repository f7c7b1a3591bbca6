//! Building blocks of the network. Each block owns the [`ParamId`]s of its
//! weights; values live in the model's [`ParamStore`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ops::ShiftSpec;
use crate::tensor::{Conv2dSpec, Element, ParamId, ParamStore, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Convolution with bias, weights drawn from `U(-1/√fan_in, 1/√fan_in)`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        (cin, cout): (usize, usize),
        kernel: usize,
        groups: usize,
    ) -> Result<Self> {
        let spec = Conv2dSpec::new(1, kernel / 2, groups);
        let fan_in = (cin / groups) * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let shape = [cout, cin / groups, kernel, kernel];
        let values = (0..shape.iter().product::<usize>())
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        let weight = store.add(format!("{name}.weight"), Tensor::new(shape.to_vec(), values)?)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Conv {
            weight,
            bias,
            spec,
            cin,
            cout,
            kernel,
        })
    }

    pub fn dense<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: (usize, usize),
        kernel: usize,
    ) -> Result<Self> {
        Self::new(store, rng, name, channels, kernel, 1)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.spec)
    }

    /// Name shared by the weight and bias, e.g. `lisb.0.rdb.dw`.
    pub fn name<'a, T: Element>(&self, store: &'a ParamStore<T>) -> &'a str {
        store.get(self.weight).name.trim_end_matches(".weight")
    }
}

/// Pixel attention: `x ⊙ σ(conv1×1(x))`, a full `h × w × c` gate.
#[derive(Clone, Debug)]
pub struct PixelAttention {
    pub conv: Conv,
}

impl PixelAttention {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Result<Self> {
        Ok(PixelAttention {
            conv: Conv::dense(store, rng, &format!("{name}.conv"), (channels, channels), 1)?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let logits = self.conv.forward(tape, store, x)?;
        let gate = tape.sigmoid(logits);
        tape.mul(x, gate)
    }
}

/// Contrast-aware channel attention with the block's long skip:
/// `F_n = σ(expand(reduce(std(x_in) + avg(x_in)))) ⊙ x_in + F_{n-1}`.
#[derive(Clone, Debug)]
pub struct ContrastChannelAttention {
    pub reduce: Conv,
    pub expand: Conv,
}

impl ContrastChannelAttention {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(ContrastChannelAttention {
            reduce: Conv::dense(store, rng, &format!("{name}.reduce"), (channels, hidden), 1)?,
            expand: Conv::dense(store, rng, &format!("{name}.expand"), (hidden, channels), 1)?,
        })
    }

    /// Per-channel gate `[N, C, 1, 1]`.
    pub fn gate<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x_in: Var) -> Result<Var> {
        let contrast = tape.global_std(x_in)?;
        let mean = tape.global_avg(x_in)?;
        let t1 = tape.add(contrast, mean)?;
        let h = self.reduce.forward(tape, store, t1)?;
        let g = self.expand.forward(tape, store, h)?;
        Ok(tape.sigmoid(g))
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x_in: Var, skip: Var) -> Result<Var> {
        let gate = self.gate(tape, store, x_in)?;
        let gated = tape.mul(x_in, gate)?;
        tape.add(gated, skip)
    }
}

/// Residual depth-wise block: `σ(pw1×1(dw3×3(m)) + m)`.
#[derive(Clone, Debug)]
pub struct ResidualDepthwiseBlock {
    pub dw: Conv,
    pub pw: Conv,
}

impl ResidualDepthwiseBlock {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Result<Self> {
        Ok(ResidualDepthwiseBlock {
            dw: Conv::new(store, rng, &format!("{name}.dw"), (channels, channels), 3, channels)?,
            pw: Conv::dense(store, rng, &format!("{name}.pw"), (channels, channels), 1)?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, m2: Var) -> Result<Var> {
        let d = self.dw.forward(tape, store, m2)?;
        let p = self.pw.forward(tape, store, d)?;
        let r = tape.add(p, m2)?;
        Ok(tape.sigmoid(r))
    }
}

/// `project(PA(gelu(expand(x))))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub expand: Conv,
    pub pa: PixelAttention,
    pub project: Conv,
}

impl FeedForward {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            expand: Conv::dense(store, rng, &format!("{name}.expand"), (channels, hidden), 1)?,
            pa: PixelAttention::new(store, rng, &format!("{name}.pa"), hidden)?,
            project: Conv::dense(store, rng, &format!("{name}.project"), (hidden, channels), 1)?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.expand.forward(tape, store, x)?;
        let h = tape.gelu(h);
        let h = self.pa.forward(tape, store, h)?;
        self.project.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// One shift-Transformer layer: `x ← shift(x); x ← FFN(LN(x)) + x`.
#[derive(Clone, Debug)]
pub struct ShiftLayer {
    pub norm: LayerNormParams,
    pub ffn: FeedForward,
}

impl ShiftLayer {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, shift: ShiftSpec) -> Result<Var> {
        let shifted = tape.shift4(x, shift)?;
        let normed = self.norm.forward(tape, store, shifted)?;
        let f = self.ffn.forward(tape, store, normed)?;
        tape.add(f, shifted)
    }
}

/// Shift building block: two consecutive [`ShiftLayer`]s.
#[derive(Clone, Debug)]
pub struct ShiftBuildingBlock {
    pub layers: Vec<ShiftLayer>,
    pub shift: ShiftSpec,
}

pub const SBB_LAYERS: usize = 2;

impl ShiftBuildingBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        hidden: usize,
        shift: ShiftSpec,
    ) -> Result<Self> {
        let layers = (0..SBB_LAYERS)
            .map(|l| {
                let prefix = format!("{name}.{l}");
                Ok(ShiftLayer {
                    norm: LayerNormParams::new(store, &format!("{prefix}.norm"), channels)?,
                    ffn: FeedForward::new(store, rng, &format!("{prefix}.ffn"), channels, hidden)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ShiftBuildingBlock { layers, shift })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(tape, store, x, self.shift)?;
        }
        Ok(x)
    }
}

/// Lightweight information split block.
///
/// ```text
/// r1, m1 = split(F)          m1 = SBB(m1)
/// r2, m2 = split(m1)         m3 = RDB(m2)
/// F' = CCA([r1, r2, m3], F)
/// ```
#[derive(Clone, Debug)]
pub struct SplitBlock {
    pub widths: super::BlockWidths,
    pub sbb: ShiftBuildingBlock,
    pub rdb: Option<ResidualDepthwiseBlock>,
    pub cca: Option<ContrastChannelAttention>,
}

impl SplitBlock {
    /// Runs everything up to the channel gate and returns `x_in = [r1, r2, m3]`.
    pub fn features<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: Var) -> Result<Var> {
        let w = self.widths;
        let (r1, m1) = if w.kept_first == 0 {
            (None, input)
        } else {
            let parts = tape.split_channels(input, &[w.kept_first, w.sbb])?;
            (Some(parts[0]), parts[1])
        };
        let m1 = self.sbb.forward(tape, store, m1)?;
        let (r2, m2) = if w.kept_second == 0 {
            (None, m1)
        } else {
            let parts = tape.split_channels(m1, &[w.kept_second, w.rdb])?;
            (Some(parts[0]), parts[1])
        };
        let m3 = match &self.rdb {
            Some(rdb) => rdb.forward(tape, store, m2)?,
            None => m2,
        };
        let parts: Vec<Var> = [r1, r2, Some(m3)].into_iter().flatten().collect();
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_channels(&parts)
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: Var) -> Result<Var> {
        let x_in = self.features(tape, store, input)?;
        match &self.cca {
            Some(cca) => cca.forward(tape, store, x_in, input),
            None => tape.add(x_in, input),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| r.random_range(-1.0..1.0))
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
    }

    #[test]
    fn pixel_attention_limits() {
        let mut store = ParamStore::<f64>::new();
        let pa = PixelAttention::new(&mut store, &mut rng(), "pa", 3).unwrap();
        let xv = random([1, 3, 4, 4], 1);

        zero_all(&mut store);
        let mut tape = Tape::new();
        let x = tape.input(xv.clone());
        let y = pa.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), &xv.map(|v| 0.5 * v));

        store.get_mut(pa.conv.bias).value.data_mut().fill(20.0);
        let mut tape = Tape::new();
        let x = tape.input(xv.clone());
        let y = pa.forward(&mut tape, &store, x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(xv.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs());
        }
    }

    #[test]
    fn cca_zero_input_returns_skip() {
        let mut store = ParamStore::<f64>::new();
        let cca = ContrastChannelAttention::new(&mut store, &mut rng(), "cca", 4, 1).unwrap();
        let skip = random([1, 4, 3, 3], 2);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 4, 3, 3]));
        let s = tape.input(skip.clone());
        let y = cca.forward(&mut tape, &store, x, s).unwrap();
        assert_eq!(tape.value(y), &skip);
    }

    #[test]
    fn cca_identity_weights_on_constant_channels() {
        let mut store = ParamStore::<f64>::new();
        let cca = ContrastChannelAttention::new(&mut store, &mut rng(), "cca", 2, 2).unwrap();
        let eye = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        store.get_mut(cca.reduce.weight).value = eye.clone();
        store.get_mut(cca.expand.weight).value = eye;
        let vals = [0.3, -1.1];
        let xv = Tensor::from_fn([1, 2, 3, 3], |_, c, _, _| vals[c]);
        let skip = random([1, 2, 3, 3], 3);
        let mut tape = Tape::new();
        let x = tape.input(xv.clone());
        let s = tape.input(skip.clone());
        let y = cca.forward(&mut tape, &store, x, s).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let expect = Tensor::from_fn([1, 2, 3, 3], |n, c, h, w| sig(vals[c]) * vals[c] + skip.at(n, c, h, w));
        assert!(tape.value(y).max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn rdb_degenerate_cases_and_oracle() {
        let mut store = ParamStore::<f64>::new();
        let rdb = ResidualDepthwiseBlock::new(&mut store, &mut rng(), "rdb", 1).unwrap();
        let m2 = random([1, 1, 3, 3], 4);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());

        let run = |store: &ParamStore<f64>, x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.input(x.clone());
            let y = rdb.forward(&mut tape, store, v).unwrap();
            tape.value(y).clone()
        };

        // random weights against a straight-line evaluation
        let w3 = store.get(rdb.dw.weight).value.clone();
        let w1 = store.get(rdb.pw.weight).value.data()[0];
        store.get_mut(rdb.dw.bias).value.data_mut()[0] = 0.2;
        store.get_mut(rdb.pw.bias).value.data_mut()[0] = -0.1;
        let y = run(&store, &m2);
        for i in 0..3 {
            for j in 0..3 {
                let mut d = 0.2;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (si, sj) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                        if (0..3).contains(&si) && (0..3).contains(&sj) {
                            d += w3.at(0, 0, ky, kx) * m2.at(0, 0, si as usize, sj as usize);
                        }
                    }
                }
                let expect = sig(w1 * d - 0.1 + m2.at(0, 0, i, j));
                assert!((y.at(0, 0, i, j) - expect).abs() < 1e-14);
            }
        }

        zero_all(&mut store);
        assert!(run(&store, &m2).max_abs_diff(&m2.map(sig)) < 1e-15);
        assert!(run(&store, &Tensor::zeros(&[1, 1, 3, 3])).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn sbb_with_zero_ffn_is_double_shift() {
        let mut store = ParamStore::<f64>::new();
        let spec = ShiftSpec::new(crate::ratio::Ratio::new(1, 4));
        let sbb = ShiftBuildingBlock::new(&mut store, &mut rng(), "sbb", 4, 8, spec).unwrap();
        for p in store.iter_mut().filter(|p| p.name.contains("ffn")) {
            p.value.data_mut().fill(0.0);
        }
        let xv = random([1, 4, 5, 5], 5);
        let mut tape = Tape::new();
        let x = tape.input(xv.clone());
        let y = sbb.forward(&mut tape, &store, x).unwrap();
        let expect = crate::ops::shift4(&crate::ops::shift4(&xv, &spec).unwrap(), &spec).unwrap();
        assert_eq!(tape.value(y), &expect);
    }
}
