//! Dense numerics: networks, optimizer, factorizations, seeded randomness.

pub mod adam;
pub mod linalg;
pub mod mlp;
pub mod rng;
pub mod serde_arrays;

pub use adam::{Adam, AdamState};
pub use linalg::{cholesky, SpdFactor};
pub use mlp::{Activation, BatchCache, Dense, DiagCache, Mlp, MlpGrads};
pub use rng::{stream, RunRng, Stream};

use crate::error::{shape_err, Error, Result};

/// `z = mu + sigma ⊙ eps`.
pub fn reparameterize(mu: &[f64], sigma: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != sigma.len() || mu.len() != eps.len() {
        return shape_err("reparameterize needs equal lengths");
    }
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Domain(format!("negative scale {s}")));
    }
    Ok(mu
        .iter()
        .zip(sigma)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect())
}
