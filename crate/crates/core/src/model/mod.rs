//! The LISN network: configuration, building blocks and assembly.

pub mod blocks;
mod config;
mod network;

pub use config::{BlockWidths, LisnConfig, Variant};
pub use network::{lisn_loss, FeatureFusion, LisnModel};
