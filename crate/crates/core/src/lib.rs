//! Alignment-regularized data augmentation workbench.
//!
//! Trains small classifiers with augmentation plus an alignment penalty on
//! logits, scores them for accuracy, worst-case robustness and invariance, and
//! checks the assumptions and computable bound terms behind the
//! worst-case/vertex augmentation rules.

pub mod assignment;
pub mod autodiff;
pub mod datasets;
pub mod dft;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod regularizers;
pub mod runner;
pub mod tensor;
pub mod theory;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
pub use tensor::Tensor;
