//! Twin-branch convolutional network trained with a multi-scale contrastive
//! loss, followed by a linear SVM head and study-level evaluation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`kernels`], [`tape`]: dense tensors and reverse-mode differentiation
//! - [`backbone`], [`rpu`], [`checkpoint`]: the residual backbone, residual pooling units and their parameter file
//! - [`pairing`], [`contrastive`], [`trainer`]: pair sampling, the loss and SGD training
//! - [`classifier`], [`eval`]: embedding, SVM head, metrics and cross-validation
//! - [`data`], [`synth`]: on-disk dataset layout and the procedural dataset generator

pub mod backbone;
pub mod checkpoint;
pub mod classifier;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod pairing;
pub mod rpu;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
