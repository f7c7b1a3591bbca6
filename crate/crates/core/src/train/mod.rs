//! Optimizer, learning-rate schedule, training loop and checkpoints.

pub mod adam;
pub mod checkpoint;
mod schedule;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_apply, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, load_into, read_manifest, save_checkpoint, Checkpoint, CheckpointError, Manifest, TensorEntry, FORMAT_VERSION,
    MANIFEST_FILE, OPTIMIZER_FILE, PARAMS_FILE,
};
pub use schedule::{lr_at, BASE_LR, CYCLE_EPOCHS, HALVING_EPOCHS};

use crate::data::{stack, Dataset, PatchSampler, DEFAULT_BATCH, DEFAULT_PATCH};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::model::{lisn_loss, LisnConfig, LisnModel};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total epochs; a resumed run continues until this many are complete.
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// LR patch side; HR crops are `patch_size · scale`.
    pub patch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    /// Validation PSNR is computed every this many epochs (0 disables it).
    pub val_every: usize,
    /// A checkpoint is written every this many epochs and at the end (0: end only).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            steps_per_epoch: 100,
            batch_size: DEFAULT_BATCH,
            patch_size: DEFAULT_PATCH,
            base_lr: BASE_LR,
            seed: 0,
            val_every: 10,
            checkpoint_every: 10,
            checkpoint_dir: None,
            augment: true,
        }
    }
}

/// Per-epoch log line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_psnr: Option<f64>,
}

/// Owns the model and optimizer state during training.
#[derive(Debug)]
pub struct Trainer {
    pub model: LisnModel<f32>,
    pub optimizer: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    step_in_epoch: usize,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(model_config: &LisnConfig, config: TrainConfig) -> Result<Self> {
        let model = LisnModel::build(model_config, config.seed)?;
        Ok(Self::from_model(model, config))
    }

    pub fn from_model(model: LisnModel<f32>, config: TrainConfig) -> Self {
        let optimizer = AdamState::new(model.params());
        Trainer {
            model,
            optimizer,
            epoch: 0,
            config,
            step_in_epoch: 0,
        }
    }

    /// Continues from a checkpoint. Without stored optimizer moments the
    /// optimizer restarts from zero.
    pub fn from_checkpoint(ckpt: Checkpoint, config: TrainConfig) -> Self {
        let optimizer = ckpt.optimizer.unwrap_or_else(|| AdamState::new(ckpt.model.params()));
        Trainer {
            model: ckpt.model,
            optimizer,
            epoch: ckpt.manifest.epoch,
            config,
            step_in_epoch: 0,
        }
    }

    /// One optimizer step on a batch; returns the loss before the update.
    pub fn step(&mut self, lr_batch: &Tensor<f32>, hr_batch: &Tensor<f32>, lr: f64) -> Result<f64> {
        self.model.params_mut().zero_grad();
        let mut tape = Tape::new();
        let x = tape.input(lr_batch.clone());
        let y = tape.input(hr_batch.clone());
        let sr = self.model.forward(&mut tape, x)?;
        let loss = lisn_loss(&mut tape, sr, y, self.model.config().alpha1)?;
        let value = tape.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: self.step_in_epoch,
            });
        }
        tape.backward(loss, self.model.params_mut())?;
        drop(tape);
        adam_apply(self.model.params_mut(), &mut self.optimizer, lr)?;
        self.step_in_epoch += 1;
        Ok(value)
    }

    /// Random stream for one epoch. Derived from the seed and epoch index
    /// alone so a resumed run draws the same batches.
    pub fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    pub fn run_epoch(&mut self, sampler: &PatchSampler<'_>) -> Result<EpochRecord> {
        let lr = lr_at(self.epoch, self.config.base_lr);
        let mut rng = self.epoch_rng(self.epoch);
        self.step_in_epoch = 0;
        let mut total = 0.0;
        for _ in 0..self.config.steps_per_epoch {
            let patches = sampler.sample(self.config.batch_size, &mut rng)?;
            let (x, y) = stack(&patches)?;
            total += self.step(&x, &y, lr)?;
        }
        let steps = self.config.steps_per_epoch;
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            steps,
            lr,
            mean_loss: if steps == 0 { 0.0 } else { total / steps as f64 },
            val_psnr: None,
        })
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<Manifest> {
        save_checkpoint(dir, &self.model, Some(&self.optimizer), self.epoch)
    }

    /// Trains until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each one. Writes periodic and final checkpoints when a
    /// directory is configured.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Empty("training set is empty".into()));
        }
        if self.epoch >= self.config.epochs {
            if let Some(dir) = &self.config.checkpoint_dir {
                self.save(dir)?;
            }
            return Ok(());
        }
        let scale = self.model.config().scale;
        let sampler = PatchSampler::new(train, self.config.patch_size, scale)?.with_augment(self.config.augment);
        while self.epoch < self.config.epochs {
            let mut record = self.run_epoch(&sampler)?;
            let every = self.config.val_every;
            if let Some(val) = val.filter(|v| every > 0 && !v.is_empty() && self.epoch.is_multiple_of(every)) {
                record.val_psnr = Some(evaluate(&self.model, val, &EvalOptions::default())?.mean_psnr);
            }
            on_epoch(&record)?;
            let every = self.config.checkpoint_every;
            if let Some(dir) = &self.config.checkpoint_dir {
                if every > 0 && self.epoch.is_multiple_of(every) && self.epoch < self.config.epochs {
                    self.save(dir)?;
                }
            }
        }
        if let Some(dir) = &self.config.checkpoint_dir {
            self.save(dir)?;
        }
        Ok(())
    }
}
