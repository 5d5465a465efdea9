//! Few-shot segmentation under synthetic domain shift, with channel-statistics
//! style perturbation and a compact feature-rectifying adapter.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and tape-based reverse-mode autodiff
//! - [`optim`]: SGD with momentum
//! - [`stats`]: channel statistics and instance re-styling
//! - [`perturb`]: local/global style perturbation and the global stats bank
//! - [`adapter`]: the rectification adapter
//! - [`loss`]: alignment losses and the training objective
//! - [`model`]: encoder, episodes, prototype matching, mIoU
//! - [`data`]: synthetic benchmark generator and on-disk formats
//! - [`ckpt`]: binary checkpoint format
//! - [`train`] / [`eval`]: the two training phases and episodic evaluation
//! - [`verify`]: runtime verification suites (gradcheck, algebra, oracles)

pub mod adapter;
pub mod ckpt;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod perturb;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
