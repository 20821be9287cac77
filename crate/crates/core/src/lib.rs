//! Reconstruction of subsurface vertical velocity from partially observed
//! ocean surface fields.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datastore;
pub mod embedder;
pub mod entropy;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{ParamStore, Real, Tensor};
