//! Multi-layer convolutional sparse coding (ML-CSC).
//!
//! * [`tensor`]: dense f64 tensors.
//! * [`conv`]: convolutional dictionaries as linear operators (Dᵀ, D, dense
//!   materialization, spectral bounds).
//! * [`pursuit`]: LTA, LBP, ML-ISTA and WSEBP forward solvers.
//! * [`grad`]: reverse-mode tape over the solver and classifier ops, with
//!   finite-difference checks.
//! * [`models`]: ML-CSC classifiers, presets, SGD training and checkpoints.
//! * [`data`]: CIFAR and tensor-file loaders, splits, synthetic problems.
//! * [`experiments`]: the command implementations behind the `mlcsc` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conv;
pub mod data;
pub mod error;
pub mod experiments;
pub mod grad;
pub mod models;
pub mod pursuit;
pub mod tensor;

pub use conv::{Boundary, ConvDictionary, ConvGeometry, DenseMatrix, SpectralEstimate};
pub use error::{Error, Result};
pub use pursuit::{
    AnchorPolicy, Layer, LayerParams, MlcscModel, Pursuit, PursuitResult, Shrinkage,
};
pub use tensor::Tensor;
