use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::ShiftSpec;
use crate::ratio::Ratio;

/// Structural ablations of the split block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Default,
    /// Neither channel split: the shift block and the depth-wise block run at full width.
    NoSplit,
    /// The residual depth-wise block is replaced by identity.
    NoRdb,
    /// The channel gate is removed; the block output is `x_in + F_{n-1}`.
    NoCca,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Default, Variant::NoSplit, Variant::NoRdb, Variant::NoCca];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Default => "default",
            Variant::NoSplit => "no_split",
            Variant::NoRdb => "no_rdb",
            Variant::NoCca => "no_cca",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of default, no_split, no_rdb, no_cca)"
                ))
            })
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LisnConfig {
    pub scale: usize,
    pub width: usize,
    pub n_blocks: usize,
    pub shift_gamma: Ratio,
    /// Hidden width of the feed-forward network relative to its input width.
    pub ffn_ratio: Ratio,
    pub cca_reduction: usize,
    pub variant: Variant,
    /// Weight of the Sobel edge term in the loss.
    pub alpha1: f64,
    pub in_channels: usize,
}

impl Default for LisnConfig {
    fn default() -> Self {
        LisnConfig {
            scale: 4,
            width: 64,
            n_blocks: 6,
            shift_gamma: Ratio::new(1, 12),
            ffn_ratio: Ratio::integer(3),
            cca_reduction: 4,
            variant: Variant::Default,
            alpha1: 0.1,
            in_channels: 1,
        }
    }
}

/// Channel widths inside one split block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockWidths {
    /// Channels passed straight to the concat by the first split (`r1`).
    pub kept_first: usize,
    /// Width processed by the shift building block (`m1`).
    pub sbb: usize,
    pub ffn_hidden: usize,
    /// Channels passed straight to the concat by the second split (`r2`).
    pub kept_second: usize,
    /// Width processed by the residual depth-wise block (`m2`).
    pub rdb: usize,
    pub cca_hidden: usize,
}

impl BlockWidths {
    pub fn concat(&self) -> usize {
        self.kept_first + self.kept_second + self.rdb
    }
}

impl LisnConfig {
    pub fn with_scale(mut self, scale: usize) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_blocks(mut self, n_blocks: usize) -> Self {
        self.n_blocks = n_blocks;
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn shift_spec(&self) -> ShiftSpec {
        ShiftSpec::new(self.shift_gamma)
    }

    pub fn block_widths(&self) -> BlockWidths {
        let c = self.width;
        let (kept_first, sbb) = match self.variant {
            Variant::NoSplit => (0, c),
            _ => (c / 2, c / 2),
        };
        let (kept_second, rdb) = match self.variant {
            Variant::NoSplit => (0, sbb),
            _ => (sbb / 2, sbb / 2),
        };
        BlockWidths {
            kept_first,
            sbb,
            ffn_hidden: self.ffn_ratio.exact_mul(sbb).unwrap_or(0),
            kept_second,
            rdb,
            cca_hidden: c / self.cca_reduction.max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.scale != 2 && self.scale != 4 {
            return bad(format!("scale must be 2 or 4, got {}", self.scale));
        }
        if self.width == 0 || !self.width.is_multiple_of(4) {
            return bad(format!("width must be a positive multiple of 4, got {}", self.width));
        }
        if self.n_blocks == 0 {
            return bad("at least one block is required".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if !(self.alpha1 >= 0.0 && self.alpha1.is_finite()) {
            return bad(format!("alpha1 must be finite and non-negative, got {}", self.alpha1));
        }
        if self.cca_reduction == 0 || !self.width.is_multiple_of(self.cca_reduction) {
            return bad(format!(
                "cca_reduction {} must divide width {}",
                self.cca_reduction, self.width
            ));
        }
        let w = self.block_widths();
        match self.ffn_ratio.exact_mul(w.sbb) {
            Some(h) if h > 0 => {}
            _ => {
                return bad(format!(
                    "ffn_ratio {} times width {} is not a positive whole number",
                    self.ffn_ratio, w.sbb
                ))
            }
        }
        if 4 * self.shift_spec().group_size(w.sbb) > w.sbb {
            return bad(format!("shift_gamma {} shifts more channels than exist", self.shift_gamma));
        }
        if w.concat() != self.width {
            return bad(format!(
                "block concat width {} does not match width {}",
                w.concat(),
                self.width
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_split_widths() {
        let c = LisnConfig::default();
        c.validate().unwrap();
        let w = c.block_widths();
        assert_eq!((w.kept_first, w.sbb, w.kept_second, w.rdb), (32, 32, 16, 16));
        assert_eq!(w.concat(), 64);
    }

    #[test]
    fn no_split_runs_at_full_width() {
        let w = LisnConfig::default().with_variant(Variant::NoSplit).block_widths();
        assert_eq!((w.kept_first, w.sbb, w.kept_second, w.rdb), (0, 64, 0, 64));
    }

    #[test]
    fn invalid_configs() {
        assert!(LisnConfig::default().with_width(30).validate().is_err());
        assert!(LisnConfig::default().with_blocks(0).validate().is_err());
        assert!(LisnConfig::default().with_scale(3).validate().is_err());
        let c = LisnConfig {
            alpha1: -0.1,
            ..LisnConfig::default()
        };
        assert!(c.validate().is_err());
        let c = LisnConfig {
            shift_gamma: Ratio::new(1, 3),
            ..LisnConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_parsing() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("no_shift".parse::<Variant>().is_err());
    }
}
