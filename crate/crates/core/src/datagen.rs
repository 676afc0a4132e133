//! Synthetic and semi-synthetic data.

use ndarray::{Array1, Array2};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetMatrix, Likelihood};
use crate::error::{shape_err, Error, Result};
use crate::nd::cholesky;
use crate::nd::rng::{normal_matrix, standard_normal};

pub const SYNTHETIC_FEATURES: usize = 7;
pub const SYNTHETIC_FACTORS: usize = 2;

/// Unit diagonal, constant off-diagonal `rho`.
pub fn factor_covariance(k: usize, rho: f64) -> Array2<f64> {
    Array2::from_shape_fn((k, k), |(i, j)| if i == j { 1.0 } else { rho })
}

/// `n` i.i.d. rows from `N(0, C)` with `C = factor_covariance(k, rho)`.
pub fn gen_correlated_factors<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    rho: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let lower = if k > 1 { -1.0 / (k as f64 - 1.0) } else { f64::NEG_INFINITY };
    if !(rho > lower && rho < 1.0) {
        return Err(Error::Config(format!(
            "correlation {rho} outside ({lower}, 1) makes the factor covariance singular"
        )));
    }
    let l = cholesky(&factor_covariance(k, rho))?;
    let eps = normal_matrix(rng, n, k);
    Ok(eps.dot(&l.t()))
}

/// Noiseless mean `(z1, 2 z1, 3 z1^2, 4 z2, 5 z2, 6 sin z2, 7 z1 z2)`.
pub fn synthetic_mean(z1: f64, z2: f64) -> [f64; SYNTHETIC_FEATURES] {
    [
        z1,
        2.0 * z1,
        3.0 * z1 * z1,
        4.0 * z2,
        5.0 * z2,
        6.0 * z2.sin(),
        7.0 * z1 * z2,
    ]
}

/// Nonzero entries of the true selector, as 0-based `(feature, factor)`.
pub fn synthetic_support() -> Vec<(usize, usize)> {
    vec![(0, 0), (1, 0), (2, 0), (3, 1), (4, 1), (5, 1), (6, 0), (6, 1)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    #[serde(with = "crate::nd::serde_arrays::matrix")]
    pub z: Array2<f64>,
    /// 0-based `(feature, factor)` pairs.
    pub support: Vec<(usize, usize)>,
    #[serde(with = "crate::nd::serde_arrays::matrix")]
    pub c: Array2<f64>,
    pub noise_var: f64,
}

impl SyntheticTruth {
    pub fn means(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.z.nrows(), SYNTHETIC_FEATURES));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let m = synthetic_mean(self.z[[i, 0]], self.z[[i, 1]]);
            row.assign(&Array1::from(m.to_vec()));
        }
        out
    }
}

/// The 7-feature, 2-factor benchmark with correlated factors.
pub fn gen_synthetic<R: Rng + ?Sized>(
    n: usize,
    rho: f64,
    noise_var: f64,
    rng: &mut R,
) -> Result<(DatasetMatrix, SyntheticTruth)> {
    if !(noise_var >= 0.0) {
        return Err(Error::Config(format!("noise variance {noise_var} must be nonnegative")));
    }
    let z = gen_correlated_factors(n, SYNTHETIC_FACTORS, rho, rng)?;
    let truth = SyntheticTruth {
        z,
        support: synthetic_support(),
        c: factor_covariance(SYNTHETIC_FACTORS, rho),
        noise_var,
    };
    let sd = noise_var.sqrt();
    let mut x = truth.means();
    x.mapv_inplace(|m| m + sd * standard_normal(rng));
    Ok((DatasetMatrix::unnamed(x, Likelihood::Gaussian)?, truth))
}

const PROB_CLAMP: f64 = 1e-6;

fn logit(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Train/test count matrices whose factor distributions differ.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedSplit {
    pub train: DatasetMatrix,
    pub test: DatasetMatrix,
    /// Factors used to draw the training counts.
    pub train_factors: Array2<f64>,
}

/// Replaces the second half of the factor columns with noisy copies (in
/// logit space) of the first half for training; the test split keeps `theta`.
pub fn perturbed_factors<R: Rng + ?Sized>(
    theta: &Array2<f64>,
    sigma_shift: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let (n, k) = theta.dim();
    if k % 2 != 0 {
        return Err(Error::Config(format!("number of factors {k} must be even")));
    }
    if !(sigma_shift >= 0.0) {
        return Err(Error::Config("shift scale must be nonnegative".into()));
    }
    let half = k / 2;
    let mut out = theta.clone();
    for i in 0..n {
        for c in 0..half {
            let base = theta[[i, c]];
            out[[i, half + c]] = if sigma_shift == 0.0 {
                base
            } else {
                sigmoid(logit(base) + sigma_shift * standard_normal(rng))
            };
        }
    }
    Ok(out)
}

/// Multinomial counts with `doc_len` draws per row from row-normalized `factors · loadings`.
pub fn sample_counts<R: Rng + ?Sized>(
    factors: &Array2<f64>,
    loadings: &Array2<f64>,
    doc_len: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if factors.ncols() != loadings.nrows() {
        return shape_err("factor and loading dimensions disagree");
    }
    if loadings.iter().any(|v| *v < 0.0) || factors.iter().any(|v| *v < 0.0) {
        return Err(Error::Domain("factors and loadings must be nonnegative".into()));
    }
    let rates = factors.dot(loadings);
    let mut counts = Array2::zeros(rates.raw_dim());
    for (rate_row, mut count_row) in rates.rows().into_iter().zip(counts.rows_mut()) {
        let dist = WeightedIndex::new(rate_row.iter().copied())
            .map_err(|e| Error::Degenerate(format!("row has no mass: {e}")))?;
        for _ in 0..doc_len {
            count_row[dist.sample(rng)] += 1.0;
        }
    }
    Ok(counts)
}

pub fn gen_shifted_split<R: Rng + ?Sized>(
    theta: &Array2<f64>,
    beta_load: &Array2<f64>,
    sigma_shift: f64,
    doc_len: usize,
    rng: &mut R,
) -> Result<ShiftedSplit> {
    if theta.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
        return Err(Error::Domain("factor entries must lie in [0, 1]".into()));
    }
    let train_factors = perturbed_factors(theta, sigma_shift, rng)?;
    let train = sample_counts(&train_factors, beta_load, doc_len, rng)?;
    let test = sample_counts(theta, beta_load, doc_len, rng)?;
    Ok(ShiftedSplit {
        train: DatasetMatrix::unnamed(train, Likelihood::Multinomial)?,
        test: DatasetMatrix::unnamed(test, Likelihood::Multinomial)?,
        train_factors,
    })
}

/// `rows` independent draws from a symmetric Dirichlet on `dim` categories.
pub fn dirichlet_rows<R: Rng + ?Sized>(
    rows: usize,
    dim: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("dirichlet: {e}")))?;
    let mut out = Array2::zeros((rows, dim));
    for mut row in out.rows_mut() {
        loop {
            row.iter_mut().for_each(|v| *v = gamma.sample(rng));
            let total = row.sum();
            if total > 0.0 {
                row /= total;
                break;
            }
        }
    }
    Ok(out)
}
