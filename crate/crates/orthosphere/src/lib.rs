//! File formats, configuration and experiment drivers for
//! [`orthosphere_core`].
//!
//! - [`cifar`]: CIFAR-10 binary batches, read and write.
//! - [`checkpoint`]: versioned little-endian model/optimizer container.
//! - [`tables`]: CSV outputs.
//! - [`pnm`]: P5/P6 heatmaps and overlays.
//! - [`config`]: presets and layered TOML configuration.
//! - [`commands`]: the drivers behind the command-line subcommands.

pub mod checkpoint;
pub mod cifar;
pub mod commands;
pub mod config;
pub mod error;
pub mod pnm;
pub mod tables;

pub use error::{Error, Result};
pub use orthosphere_core as core;
