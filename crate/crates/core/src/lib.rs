//! Sparse deep generative models and the sparse VAE.
//!
//! Each observed feature `j` is decoded from a masked copy of the latent
//! vector, `f(w_j ⊙ z)_j`, where the selector matrix `W` carries a
//! spike-and-slab lasso prior. Fitting alternates closed-form updates of the
//! prior's inclusion probabilities with Adam steps on a reparameterized ELBO.

pub mod anchors;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nd;
pub mod ssl;
pub mod train;

pub use error::{Error, Result};
