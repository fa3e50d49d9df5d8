//! Curriculum-trained, two-scale scanning-window classifier for large
//! grayscale images, with a procedural phantom generator for end-to-end
//! verification.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`] / [`tape`]: dense `f32` tensors with define-by-run
//!   reverse-mode differentiation (an `f64` instantiation backs the
//!   gradient-check oracle).
//! - [`wrn`]: wide residual patch classifiers and the two-scale image model
//!   built from them.
//! - [`phantom`]: synthetic mammogram-like cases with planted lesions and
//!   exact ground truth.
//! - [`sampling`]: resize-range math, Otsu foreground masking, augmentation,
//!   and curriculum patch streams.
//! - [`tiling`]: minimal-overlap tilings and overlap-normalized pooling
//!   weights.
//! - [`training`]: RMSProp, curriculum stage runners, checkpointing.
//! - [`eval`]: test-time augmentation, breast-level aggregation, ROC/AUC and
//!   bootstrap uncertainty.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gemm;
pub mod pgm;
pub mod phantom;
pub mod geometry;
pub mod gradcheck;
pub mod rng;
pub mod sampling;
pub mod tape;
pub mod tensor;
pub mod tiling;
pub mod training;
pub mod wrn;

pub use error::{Error, Result};
pub use tape::{BnMode, Mode, Tape, TensorId};
pub use tensor::{Scalar, Tensor};
