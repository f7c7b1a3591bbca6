//! Flat `key = value` run configuration covering the model and training fields.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use lisn::model::{LisnConfig, Variant};
use lisn::train::TrainConfig;
use lisn::Ratio;

use crate::UsageError;

/// Every accepted key, in the order they are written back out.
pub const KEYS: [&str; 18] = [
    "scale",
    "width",
    "n_blocks",
    "shift_gamma",
    "ffn_ratio",
    "cca_reduction",
    "variant",
    "alpha1",
    "in_channels",
    "epochs",
    "steps_per_epoch",
    "batch_size",
    "patch_size",
    "base_lr",
    "seed",
    "val_every",
    "checkpoint_every",
    "augment",
];

#[derive(Clone, Debug, Default)]
pub struct Settings {
    pub model: LisnConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| UsageError(format!("invalid value `{value}` for key `{key}`")).into())
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "scale" => m.scale = parse(key, value)?,
            "width" => m.width = parse(key, value)?,
            "n_blocks" => m.n_blocks = parse(key, value)?,
            "shift_gamma" => m.shift_gamma = parse::<Ratio>(key, value)?,
            "ffn_ratio" => m.ffn_ratio = parse::<Ratio>(key, value)?,
            "cca_reduction" => m.cca_reduction = parse(key, value)?,
            "variant" => m.variant = parse::<Variant>(key, value)?,
            "alpha1" => m.alpha1 = parse(key, value)?,
            "in_channels" => m.in_channels = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "steps_per_epoch" => t.steps_per_epoch = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "patch_size" => t.patch_size = parse(key, value)?,
            "base_lr" => t.base_lr = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "val_every" => t.val_every = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "augment" => t.augment = parse(key, value)?,
            _ => return Err(UsageError(format!("unknown config key `{key}`")).into()),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; repeated keys are errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let loc = format!("{origin}:{}", i + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("{loc}: expected `key = value`")))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(UsageError(format!("{loc}: key `{key}` given twice")).into());
            }
            seen.push(key);
            self.set(key, value.trim()).with_context(|| loc.clone())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> String {
        let (m, t) = (&self.model, &self.train);
        match key {
            "scale" => m.scale.to_string(),
            "width" => m.width.to_string(),
            "n_blocks" => m.n_blocks.to_string(),
            "shift_gamma" => m.shift_gamma.to_string(),
            "ffn_ratio" => m.ffn_ratio.to_string(),
            "cca_reduction" => m.cca_reduction.to_string(),
            "variant" => m.variant.to_string(),
            "alpha1" => m.alpha1.to_string(),
            "in_channels" => m.in_channels.to_string(),
            "epochs" => t.epochs.to_string(),
            "steps_per_epoch" => t.steps_per_epoch.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "patch_size" => t.patch_size.to_string(),
            "base_lr" => t.base_lr.to_string(),
            "seed" => t.seed.to_string(),
            "val_every" => t.val_every.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "augment" => t.augment.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// The resolved configuration in the same format `apply_text` reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut s = Settings::default();
        s.set("width", "32").unwrap();
        s.set("shift_gamma", "1/8").unwrap();
        s.set("variant", "no_rdb").unwrap();
        s.set("base_lr", "0.0001").unwrap();
        s.set("augment", "false").unwrap();
        let mut back = Settings::default();
        back.apply_text(&s.to_text(), "echo").unwrap();
        assert_eq!(back.to_text(), s.to_text());
        assert_eq!(back.model, s.model);
    }

    #[test]
    fn every_key_is_settable() {
        let s = Settings::default();
        for key in KEYS {
            let mut t = Settings::default();
            t.set(key, &s.get(key)).unwrap();
        }
    }

    #[test]
    fn unknown_and_duplicate_keys_are_usage_errors() {
        let mut s = Settings::default();
        for text in ["colour = red", "width = 8\nwidth = 16", "width 8", "width = eight"] {
            let err = s.apply_text(text, "t").unwrap_err();
            assert!(err.chain().any(|c| c.is::<UsageError>()), "{text}: {err:#}");
        }
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let mut s = Settings::default();
        s.apply_text("# header\n\n n_blocks = 2  # inline\n", "t").unwrap();
        assert_eq!(s.model.n_blocks, 2);
    }
}
