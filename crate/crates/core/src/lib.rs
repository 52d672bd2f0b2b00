//! Continual learning over a frozen convolutional backbone with per-task
//! kernel-wise soft masks.
//!
//! * [`tensor`]: dense tensors, reverse-mode tape, optimizers.
//! * [`mask`]: logistic relaxation, keep-probability, hardening, scaling
//!   tensor and soft-mask composition.
//! * [`model`]: backbone, masked convolution, per-task artifacts.
//! * [`baselines`]: mask strategy grid (STE binary masks, element-wise
//!   variants, fine-tuning reference).
//! * [`trainer`]: initial-task training, per-task mask learning, run ledger.
//! * [`data`]: CIFAR and synthetic datasets, task splits, file formats.
//! * [`report`]: per-layer mask statistics, overhead accounting, ledger output.

pub mod baselines;
pub mod data;
pub mod error;
pub mod mask;
pub mod model;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Param, Real, Tensor, Var};
