//! Fairness-aware domain generalization on tabular data: a multi-domain
//! generator, content/style disentanglement, a fair Gaussian mixture over
//! content codes and a primal-dual trainer, plus the evaluation metrics.

pub mod checkpoint;
pub mod datagen;
pub mod disentangle;
pub mod error;
pub mod fairgmm;
pub mod metrics;
pub mod numkernel;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
