//! Evaluation metrics: heldout likelihood and reconstruction error, DCI
//! disentanglement, ranking metrics, and support recovery of `W`.

use std::collections::HashSet;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Likelihood;
use crate::error::{shape_err, Error, Result};
use crate::model::SparseDgmModel;
use crate::nd::rng::normal_matrix;
use crate::nd::linalg::{solve_lower, solve_upper_t};
use crate::nd::{cholesky, SpdFactor};
use crate::train::{kl_general_factored, kl_standard};

/// Reparameterization samples used by [`heldout_nll`].
pub const NLL_SAMPLES: usize = 20;
/// Ridge penalty of the DCI importance regressions.
pub const DCI_RIDGE: f64 = 1e-3;
/// Default relative threshold for the support of `W`.
pub const SUPPORT_TAU: f64 = 0.05;

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Heldout negative ELBO per row, the NLL proxy.
///
/// Each of the `samples` passes draws one standard-normal vector shared by all
/// rows, so the value depends on the rows only through their empirical
/// distribution. No prior terms on `W` or the noise variance enter.
pub fn heldout_nll<R: Rng + ?Sized>(
    model: &SparseDgmModel,
    x: &Array2<f64>,
    samples: usize,
    rng: &mut R,
) -> Result<Estimate> {
    if samples == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    if x.nrows() == 0 {
        return shape_err("no test rows");
    }
    let n = x.nrows() as f64;
    let enc = model.encode_batch(x)?;
    let sigma2 = enc.sigma2();
    let factor = if model.sigma_z == Array2::<f64>::eye(model.latent_dim()) {
        None
    } else {
        Some(SpdFactor::new(&model.sigma_z)?)
    };
    let mut kl = 0.0;
    for (mu, s2) in enc.mu.rows().into_iter().zip(sigma2.rows()) {
        let (mu, s2) = (mu.to_vec(), s2.to_vec());
        kl += match &factor {
            None => kl_standard(&mu, &s2)?,
            Some(f) => kl_general_factored(&mu, &s2, f)?,
        };
    }
    let sigma = enc.logvar.mapv(|l| (0.5 * l).exp());
    let mut per_sample = Vec::with_capacity(samples);
    for _ in 0..samples {
        let eps = normal_matrix(rng, 1, model.latent_dim());
        let z = &enc.mu + &(&sigma * &eps.row(0));
        let out = model.decode_batch(&z)?.output;
        let mut recon = 0.0;
        for (xr, or) in x.rows().into_iter().zip(out.rows()) {
            recon += model.loglik(xr.as_slice().unwrap_or(&xr.to_vec()), &or.to_vec())?;
        }
        per_sample.push(-(recon - kl) / n);
    }
    let s = samples as f64;
    let mean = per_sample.iter().sum::<f64>() / s;
    let std_error = if samples > 1 {
        let var = per_sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1.0);
        (var / s).sqrt()
    } else {
        f64::NAN
    };
    Ok(Estimate { mean, std_error })
}

/// Decoder output at the posterior-mean factors.
pub fn reconstruct(model: &SparseDgmModel, x: &Array2<f64>) -> Result<Array2<f64>> {
    let enc = model.encode_batch(x)?;
    Ok(model.decode_batch(&enc.mu)?.output)
}

/// Mean squared reconstruction error over rows and features, using posterior means.
pub fn mse(model: &SparseDgmModel, x: &Array2<f64>) -> Result<f64> {
    if model.likelihood != Likelihood::Gaussian {
        return Err(Error::Config("mse needs a gaussian model".into()));
    }
    mse_from_predictions(x, &reconstruct(model, x)?)
}

pub fn mse_from_predictions(x: &Array2<f64>, predicted: &Array2<f64>) -> Result<f64> {
    if x.dim() != predicted.dim() {
        return shape_err("prediction shape differs from data");
    }
    if x.is_empty() {
        return shape_err("empty data");
    }
    Ok((x - predicted).mapv(|d| d * d).mean().unwrap())
}

fn standardize(z: &Array2<f64>) -> (Array2<f64>, Vec<bool>) {
    let n = z.nrows() as f64;
    let mean = z.mean_axis(Axis(0)).unwrap();
    let mut out = z - &mean;
    let sds: Vec<f64> = out
        .columns()
        .into_iter()
        .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / n).sqrt())
        .collect();
    let mut live = Vec::with_capacity(z.ncols());
    for (mut col, sd) in out.columns_mut().into_iter().zip(sds) {
        if sd > 1e-12 {
            col /= sd;
            live.push(true);
        } else {
            col.fill(0.0);
            live.push(false);
        }
    }
    (out, live)
}

/// Importance matrix `R` (`K_true x K_est`): absolute ridge coefficients of each
/// standardized true factor regressed on the standardized estimated factors.
///
/// Constant estimated factors are left out of the regression and get an
/// all-zero column.
pub fn importance_matrix(z_true: &Array2<f64>, z_est: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, kt) = z_true.dim();
    let ke = z_est.ncols();
    if z_est.nrows() != n {
        return shape_err("true and estimated factors have different row counts");
    }
    if kt == 0 || ke == 0 {
        return shape_err("no factors");
    }
    if n < 10 * kt.max(ke) {
        return Err(Error::Config(format!(
            "{n} rows is too few for {kt} true and {ke} estimated factors"
        )));
    }
    let (xs, live) = standardize(z_est);
    if !live.iter().any(|l| *l) {
        return Err(Error::Degenerate("estimated factors have no variance".into()));
    }
    let (ys, _) = standardize(z_true);
    let nf = n as f64;
    let cols: Vec<usize> = (0..ke).filter(|e| live[*e]).collect();
    let xs = xs.select(Axis(1), &cols);
    let mut gram = xs.t().dot(&xs) / nf;
    for d in 0..cols.len() {
        gram[[d, d]] += DCI_RIDGE;
    }
    let chol = cholesky(&gram)?;
    let rhs = xs.t().dot(&ys) / nf;
    let mut r = Array2::zeros((kt, ke));
    for t in 0..kt {
        let y = solve_lower(&chol, &rhs.column(t).to_vec());
        let coef = solve_upper_t(&chol, y.as_slice().unwrap());
        for (c, e) in cols.iter().enumerate() {
            r[[t, *e]] = coef[c].abs();
        }
    }
    Ok(r)
}

/// Disentanglement score from an importance matrix `R` (`K_true x K_est`).
pub fn disentanglement_from_importance(r: &Array2<f64>) -> Result<f64> {
    let kt = r.nrows();
    if kt == 0 || r.ncols() == 0 {
        return shape_err("empty importance matrix");
    }
    if r.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Domain("importances must be finite and nonnegative".into()));
    }
    let sums = r.sum_axis(Axis(0));
    let total: f64 = sums.iter().filter(|s| **s >= 1e-12).sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("every estimated factor has zero importance".into()));
    }
    let mut score = 0.0;
    for (col, s) in r.columns().into_iter().zip(&sums) {
        if *s < 1e-12 {
            continue;
        }
        let d = if kt == 1 {
            1.0
        } else {
            let h: f64 = col
                .iter()
                .map(|v| v / s)
                .filter(|p| *p > 0.0)
                .map(|p| -p * p.ln())
                .sum::<f64>()
                / (kt as f64).ln();
            1.0 - h
        };
        score += s / total * d;
    }
    Ok(score)
}

pub fn dci_disentanglement(z_true: &Array2<f64>, z_est: &Array2<f64>) -> Result<f64> {
    disentanglement_from_importance(&importance_matrix(z_true, z_est)?)
}

fn ranked(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).filter(|i| scores[*i].is_finite()).collect();
    idx.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    idx.truncate(k);
    Ok(idx)
}

fn heldout_set(heldout: &[usize], items: usize) -> Result<HashSet<usize>> {
    let set: HashSet<usize> = heldout.iter().copied().collect();
    if set.is_empty() {
        return Err(Error::Config("heldout set is empty".into()));
    }
    if let Some(bad) = set.iter().find(|i| **i >= items) {
        return shape_err(format!("heldout item {bad} out of range for {items} items"));
    }
    Ok(set)
}

/// Fraction of heldout items among the `k` highest scores, normalized by
/// `min(k, |heldout|)`. Items whose score is not finite (for example training
/// items set to `-inf`) are left out of the ranking.
pub fn recall_at_k(scores: &[f64], heldout: &[usize], k: usize) -> Result<f64> {
    let top = ranked(scores, k)?;
    let set = heldout_set(heldout, scores.len())?;
    let hits = top.iter().filter(|i| set.contains(i)).count();
    Ok(hits as f64 / k.min(set.len()) as f64)
}

/// Binary-relevance NDCG over the top `k`, ranked as in [`recall_at_k`].
pub fn ndcg_at_k(scores: &[f64], heldout: &[usize], k: usize) -> Result<f64> {
    let top = ranked(scores, k)?;
    let set = heldout_set(heldout, scores.len())?;
    let gain = |r: usize| 1.0 / ((r + 2) as f64).log2();
    let dcg: f64 = top
        .iter()
        .enumerate()
        .filter(|(_, i)| set.contains(i))
        .map(|(r, _)| gain(r))
        .sum();
    let ideal: f64 = (0..k.min(set.len())).map(gain).sum();
    Ok(dcg / ideal)
}

/// Entries of `W` whose magnitude exceeds `tau` times the largest magnitude.
pub fn estimated_support(w: &Array2<f64>, tau: f64) -> Result<Vec<(usize, usize)>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("threshold must be positive, got {tau}")));
    }
    let max = w.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    Ok(w.indexed_iter()
        .filter(|(_, v)| max > 0.0 && v.abs() > tau * max)
        .map(|(ij, _)| ij)
        .collect())
}

/// F-score of the estimated support of `W` against `truth`, under the
/// assignment of estimated columns to true columns that maximizes matches.
pub fn support_fscore(w_est: &Array2<f64>, truth: &[(usize, usize)], tau: f64) -> Result<f64> {
    let est = estimated_support(w_est, tau)?;
    let truth: HashSet<(usize, usize)> = truth.iter().copied().collect();
    if truth.is_empty() {
        return Err(Error::Config("true support is empty".into()));
    }
    let g = w_est.nrows();
    if let Some(bad) = truth.iter().find(|(j, _)| *j >= g) {
        return shape_err(format!("true support row {} out of range for {g} features", bad.0));
    }
    if est.is_empty() {
        return Ok(0.0);
    }
    let ke = w_est.ncols();
    let kt = truth.iter().map(|(_, k)| k + 1).max().unwrap();
    // overlap[t][e]: true entries in column t recovered by estimated column e.
    let mut overlap = vec![vec![0i64; ke]; kt];
    for (j, e) in &est {
        for (t, row) in overlap.iter_mut().enumerate() {
            if truth.contains(&(*j, t)) {
                row[*e] += 1;
            }
        }
    }
    let tp = if kt <= ke {
        max_assignment(&overlap)
    } else {
        let transposed: Vec<Vec<i64>> = (0..ke).map(|e| (0..kt).map(|t| overlap[t][e]).collect()).collect();
        max_assignment(&transposed)
    };
    Ok(2.0 * tp as f64 / (est.len() + truth.len()) as f64)
}

/// Largest total weight of a matching that assigns every row of `w` to a
/// distinct column (`rows <= cols`), by the Hungarian method.
fn max_assignment(w: &[Vec<i64>]) -> i64 {
    let n = w.len();
    let m = w[0].len();
    debug_assert!(n <= m);
    let max = w.iter().flatten().copied().max().unwrap_or(0);
    // Minimize cost = max - weight; potentials u (rows) and v (columns), 1-based.
    let cost = |i: usize, j: usize| max - w[i - 1][j - 1];
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|j| owner[*j] != 0).map(|j| w[owner[j] - 1][j - 1]).sum()
}

/// Metrics of one evaluated run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub heldout_nll: Option<Estimate>,
    pub mse: Option<f64>,
    pub dci: Option<f64>,
    pub support_fscore: Option<f64>,
    pub recall_at_5: Option<f64>,
    pub ndcg_at_10: Option<f64>,
    /// Number of columns of `W` above the support threshold.
    pub active_factors: Option<usize>,
}

/// Columns whose norm is at least `tau` times the largest column norm.
pub fn active_columns(w: &Array2<f64>, tau: f64) -> Vec<usize> {
    let norms: Array1<f64> = w.map_axis(Axis(0), |c| c.dot(&c).sqrt());
    let max = norms.iter().cloned().fold(0.0, f64::max);
    (0..norms.len()).filter(|k| max > 0.0 && norms[*k] >= tau * max).collect()
}
