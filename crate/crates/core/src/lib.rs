//! Orthogonal-sphere latent regularization for consistency-trained CNNs.
//!
//! The crate is `no_std` with `alloc`. The `std` feature only switches on
//! runtime CPU dispatch inside the matrix kernels. File formats, the command line and dataset readers live
//! in the companion `orthosphere` crate.
//!
//! Layout:
//!
//! - [`tensor`], [`autodiff`]: dense tensors and a tape-based reverse-mode
//!   engine with the convolutional primitives the classifier needs.
//! - [`data`]: in-memory datasets, synthetic generator, label splits,
//!   augmentation and standardization.
//! - [`model`]: the three-block convolutional classifier with latent taps.
//! - [`losses`]: cross-entropy, consistency, SNTG, AMC, the orthogonal-sphere
//!   term, schedules and the total-loss assembly.
//! - [`optim`], [`train`]: Adam and the semi-supervised mini-batch trainer.
//! - [`analysis`]: channel correlation, calibration, pruning and Grad-CAM.
#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Real;
pub use tensor::Tensor;
