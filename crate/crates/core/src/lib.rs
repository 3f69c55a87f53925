//! Post-training conversion of a dense vision transformer into a
//! mixture-of-experts model.
//!
//! Token activations of each MLP are clustered with HDBSCAN; every cluster
//! becomes an expert that keeps the hidden neurons carrying most of the
//! cluster's activation variance, and tokens are routed to the expert whose
//! mean input they are most similar to. The [`pipeline`] module strings the
//! stages together; the `moec` binary exposes them on the command line.

pub mod analysis;
pub mod clustering;
pub mod error;
pub mod extraction;
pub mod finetune;
pub mod io;
pub mod moe;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod threads;
pub mod vit;

pub use error::{Error, ErrorCategory, Result};
pub use rng::Rng;
pub use tensor::Tensor;
