//! Multi-label chest radiograph classification with patient-metadata fusion.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: f64 tensors and a reverse-mode tape with the
//!   layer primitives (affine, conv2d, pooling, Swish, masked BCE).
//! - [`model`]: small CNN backbones, the metadata MLP and the shared classifier.
//! - [`labels`]: the 14-pathology label space, uncertainty policies and metadata encoding.
//! - [`report_labeler`]: rule-based extraction of label states from report text.
//! - [`data`]: synthetic data with planted metadata signal, manifest I/O, splitting.
//! - [`train`]: optimizers, the fit loop and the hyperparameter sweep.
//! - [`metrics`]: exact AUROC, evaluation reports and subgroup gaps.
//! - [`cli`]: the `cxr-fusion` command line.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod report_labeler;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
