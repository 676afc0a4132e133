//! The sparse deep generative model.
//!
//! Feature `j` of a sample is decoded as `f(w_j ⊙ z)_j`: the shared decoder
//! network sees a different masked latent vector for every output feature.
//! A batch of `B` latent vectors is therefore pushed through the decoder as
//! `B * G` masked rows, of which only the matching output coordinate is kept.

use log::warn;
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::dataset::{DatasetMatrix, Likelihood};
use crate::error::{shape_err, Error, Result};
use crate::nd::{Activation, BatchCache, DiagCache, Mlp, MlpGrads};
use crate::ssl::{SslHyper, SslState};

/// Encoder log-variance outputs are clamped to this range.
pub const LOGVAR_CLAMP: f64 = 10.0;

/// Network widths shared by the decoder and both encoders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub num_features: usize,
    pub latent_dim: usize,
    pub hidden_layers: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
}

impl Architecture {
    fn widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(self.hidden_dim, self.hidden_layers));
        dims.push(output);
        dims
    }
}

/// `sigma_j^2 ~ Inverse-Gamma(nu / 2, nu * xi / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePrior {
    pub nu: f64,
    pub xi: f64,
}

impl NoisePrior {
    pub fn shape(&self) -> f64 {
        0.5 * self.nu
    }

    pub fn scale(&self) -> f64 {
        0.5 * self.nu * self.xi
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.xi > 0.0 && self.nu.is_finite() && self.xi.is_finite()) {
            return Err(Error::Config(format!("invalid noise prior {self:?}")));
        }
        Ok(())
    }
}

/// CDF of Inverse-Gamma(shape, scale) at `s`.
pub fn inv_gamma_cdf(s: f64, shape: f64, scale: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    gamma_ur(shape, scale / s)
}

/// Linear-interpolation sample quantile of unsorted data.
pub fn sample_quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Picks `xi` so the 5% quantile of the column sample variances equals the
/// 90% quantile of the Inverse-Gamma prior.
pub fn calibrate_noise_prior(data: &DatasetMatrix, nu: f64) -> Result<NoisePrior> {
    if data.likelihood != Likelihood::Gaussian {
        return Err(Error::Config("noise prior applies to gaussian data only".into()));
    }
    if !(nu > 0.0) {
        return Err(Error::Config(format!("nu must be positive, got {nu}")));
    }
    let variances = data.column_variances()?;
    let positive: Vec<f64> = variances.iter().copied().filter(|v| *v > 1e-300).collect();
    if positive.len() < variances.len() {
        warn!(
            "{} zero-variance column(s) excluded from noise prior calibration",
            variances.len() - positive.len()
        );
    }
    if positive.is_empty() {
        return Err(Error::Degenerate("no column has positive variance".into()));
    }
    let target = sample_quantile(&positive, 0.05);
    let shape = 0.5 * nu;
    // P(sigma^2 <= q) = Q(shape, scale / q); find x = scale / q with Q(shape, x) = 0.9.
    let upper = |x: f64| gamma_ur(shape, x);
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while upper(hi) > 0.9 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if upper(mid) > 0.9 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    let x = 0.5 * (lo + hi);
    // scale = nu * xi / 2 = x * q
    let xi = 2.0 * x * target / nu;
    Ok(NoisePrior { nu, xi })
}

/// Inverse-Gamma log density of `exp(log_var)` plus the log-Jacobian `log_var`.
pub fn noise_log_prior(log_noise_var: &[f64], prior: &NoisePrior) -> f64 {
    let (alpha, beta) = (prior.shape(), prior.scale());
    let constant = alpha * beta.ln() - ln_gamma(alpha);
    log_noise_var
        .iter()
        .map(|&l| constant - alpha * l - beta * (-l).exp())
        .sum()
}

/// Derivative of [`noise_log_prior`] for each entry.
pub fn noise_log_prior_grad(log_noise_var: &[f64], prior: &NoisePrior) -> Vec<f64> {
    let (alpha, beta) = (prior.shape(), prior.scale());
    log_noise_var
        .iter()
        .map(|&l| -alpha + beta * (-l).exp())
        .collect()
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `sum_j -0.5 log(2 pi sigma2_j) - (x_j - mean_j)^2 / (2 sigma2_j)`
pub fn gaussian_loglik(x: &[f64], mean: &[f64], sigma2: &[f64]) -> Result<f64> {
    if x.len() != mean.len() || x.len() != sigma2.len() {
        return shape_err("gaussian log-likelihood needs equal lengths");
    }
    let mut total = 0.0;
    for ((&xv, &m), &s2) in x.iter().zip(mean).zip(sigma2) {
        if !(s2 > 0.0) {
            return Err(Error::Domain(format!("noise variance must be positive, got {s2}")));
        }
        let r = xv - m;
        total += -0.5 * (LN_2PI + s2.ln()) - r * r / (2.0 * s2);
    }
    Ok(total)
}

/// Numerically stable `log softmax(logits)`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let (argmax, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, l)| if l > best.1 { (i, l) } else { best });
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != argmax)
        .map(|(_, l)| (l - max).exp())
        .sum();
    let log_norm = rest.ln_1p();
    logits.iter().map(|l| (l - max) - log_norm).collect()
}

/// `sum_j x_j log softmax(logits)_j`; zero for an all-zero count vector.
pub fn multinomial_loglik(x: &[f64], logits: &[f64]) -> Result<f64> {
    if x.len() != logits.len() {
        return shape_err("multinomial log-likelihood needs equal lengths");
    }
    if let Some(c) = x.iter().find(|c| !(**c >= 0.0)) {
        return Err(Error::Domain(format!("negative count {c}")));
    }
    if x.iter().all(|c| *c == 0.0) {
        return Ok(0.0);
    }
    Ok(x.iter()
        .zip(log_softmax(logits))
        .filter(|(c, _)| **c > 0.0)
        .map(|(c, l)| c * l)
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseDgmModel {
    pub decoder: Mlp,
    pub encoder_mu: Mlp,
    pub encoder_logvar: Mlp,
    /// Selector matrix `W`, `G x K`.
    #[serde(with = "crate::nd::serde_arrays::matrix")]
    pub selector: Array2<f64>,
    /// `log sigma_j^2`; unused for multinomial data.
    #[serde(with = "crate::nd::serde_arrays::vector")]
    pub log_noise_var: Array1<f64>,
    pub ssl: SslState,
    pub hyper: SslHyper,
    pub likelihood: Likelihood,
    /// Prior covariance of the factors.
    #[serde(with = "crate::nd::serde_arrays::matrix")]
    pub sigma_z: Array2<f64>,
    pub noise_prior: Option<NoisePrior>,
    /// When set, `W` stays at all-ones and the model is a plain VAE.
    pub selector_frozen: bool,
}

/// Encoder outputs for a batch together with what backprop needs.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
    /// 1 where the log-variance was inside the clamp, 0 where it was cut.
    pub logvar_pass: Array2<f64>,
    mu_cache: BatchCache,
    logvar_cache: BatchCache,
}

impl EncodeCache {
    pub fn sigma2(&self) -> Array2<f64> {
        self.logvar.mapv(f64::exp)
    }
}

#[derive(Debug, Clone)]
enum DecodePath {
    Masked(DiagCache),
    Dense(BatchCache),
}

/// Decoder outputs (`B x G`) for a batch of latent vectors.
#[derive(Debug, Clone)]
pub struct DecodeCache {
    pub output: Array2<f64>,
    z: Array2<f64>,
    path: DecodePath,
}

impl SparseDgmModel {
    /// Fresh model: random networks, `W` all ones, `sigma_j^2 = 1`, `eta = 1/2`.
    pub fn new<R: Rng + ?Sized>(
        arch: &Architecture,
        likelihood: Likelihood,
        hyper: SslHyper,
        sigma_z: Option<Array2<f64>>,
        selector_frozen: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (g, k) = (arch.num_features, arch.latent_dim);
        if g == 0 || k == 0 {
            return Err(Error::Config("feature and latent dimensions must be positive".into()));
        }
        let decoder = Mlp::init(&arch.widths(k, g), arch.activation, rng)?;
        let encoder_mu = Mlp::init(&arch.widths(g, k), arch.activation, rng)?;
        let encoder_logvar = Mlp::init(&arch.widths(g, k), arch.activation, rng)?;
        let sigma_z = sigma_z.unwrap_or_else(|| Array2::eye(k));
        if sigma_z.dim() != (k, k) {
            return shape_err(format!("factor covariance must be {k}x{k}"));
        }
        crate::nd::cholesky(&sigma_z)?;
        Ok(Self {
            decoder,
            encoder_mu,
            encoder_logvar,
            selector: Array2::ones((g, k)),
            log_noise_var: Array1::zeros(g),
            ssl: SslState::new(g, k, 0.5),
            hyper,
            likelihood,
            sigma_z,
            noise_prior: None,
            selector_frozen,
        })
    }

    pub fn num_features(&self) -> usize {
        self.selector.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.selector.ncols()
    }

    pub fn noise_var(&self) -> Array1<f64> {
        self.log_noise_var.mapv(f64::exp)
    }

    fn uses_dense_decoder(&self) -> bool {
        self.selector_frozen && self.selector.iter().all(|w| *w == 1.0)
    }

    /// `(f(w_j ⊙ z))_j` for every feature `j`.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let zm = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("one row");
        Ok(self.decode_batch(&zm)?.output.row(0).to_vec())
    }

    pub fn decode_batch(&self, z: &Array2<f64>) -> Result<DecodeCache> {
        let (b, k) = z.dim();
        let g = self.num_features();
        if k != self.latent_dim() {
            return shape_err(format!("latent vectors have {k} entries, model uses {}", self.latent_dim()));
        }
        if self.uses_dense_decoder() {
            let cache = self.decoder.forward_batch(z)?;
            return Ok(DecodeCache {
                output: cache.output().clone(),
                z: z.to_owned(),
                path: DecodePath::Dense(cache),
            });
        }
        let mut masked = Array2::<f64>::zeros((b * g, k));
        for (r, mut row) in masked.rows_mut().into_iter().enumerate() {
            let (i, j) = (r / g, r % g);
            for c in 0..k {
                row[c] = self.selector[[j, c]] * z[[i, c]];
            }
        }
        let index = (0..b * g).map(|r| r % g).collect();
        let cache = self.decoder.forward_diag(&masked, index)?;
        let output = Array2::from_shape_vec((b, g), cache.output.clone()).expect("b*g outputs");
        Ok(DecodeCache {
            output,
            z: z.to_owned(),
            path: DecodePath::Masked(cache),
        })
    }

    /// Backpropagates `upstream` (`B x G`, gradient w.r.t. the decoder output).
    ///
    /// Accumulates decoder gradients into `grads`, selector gradients into
    /// `selector_grad`, and returns the gradient w.r.t. the latent batch.
    pub fn decode_backward(
        &self,
        cache: &DecodeCache,
        upstream: &Array2<f64>,
        grads: &mut MlpGrads,
        selector_grad: &mut Array2<f64>,
    ) -> Array2<f64> {
        let (b, k) = cache.z.dim();
        let g = self.num_features();
        match &cache.path {
            DecodePath::Dense(c) => self.decoder.backward_batch(c, upstream, grads),
            DecodePath::Masked(c) => {
                let up = upstream.as_standard_layout();
                let d_masked = self.decoder.backward_diag(c, up.as_slice().unwrap(), grads);
                let mut dz = Array2::<f64>::zeros((b, k));
                for (r, row) in d_masked.rows().into_iter().enumerate() {
                    let (i, j) = (r / g, r % g);
                    for c in 0..k {
                        selector_grad[[j, c]] += row[c] * cache.z[[i, c]];
                        dz[[i, c]] += row[c] * self.selector[[j, c]];
                    }
                }
                dz
            }
        }
    }

    /// Posterior mean and variance of the factors for one observation.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let xm = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("one row");
        let c = self.encode_batch(&xm)?;
        Ok((c.mu.row(0).to_vec(), c.sigma2().row(0).to_vec()))
    }

    pub fn encode_batch(&self, x: &Array2<f64>) -> Result<EncodeCache> {
        if x.ncols() != self.num_features() {
            return shape_err(format!(
                "observations have {} features, model uses {}",
                x.ncols(),
                self.num_features()
            ));
        }
        let mu_cache = self.encoder_mu.forward_batch(x)?;
        let logvar_cache = self.encoder_logvar.forward_batch(x)?;
        let raw = logvar_cache.output();
        let logvar = raw.mapv(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
        let logvar_pass = raw.mapv(|v| if v.abs() <= LOGVAR_CLAMP { 1.0 } else { 0.0 });
        Ok(EncodeCache {
            mu: mu_cache.output().clone(),
            logvar,
            logvar_pass,
            mu_cache,
            logvar_cache,
        })
    }

    /// Backpropagates gradients w.r.t. `mu` and the (clamped) log-variance into the encoders.
    pub fn encode_backward(
        &self,
        cache: &EncodeCache,
        d_mu: &Array2<f64>,
        d_logvar: &Array2<f64>,
        mu_grads: &mut MlpGrads,
        logvar_grads: &mut MlpGrads,
    ) {
        self.encoder_mu.backward_batch(&cache.mu_cache, d_mu, mu_grads);
        let d_raw = d_logvar * &cache.logvar_pass;
        self.encoder_logvar
            .backward_batch(&cache.logvar_cache, &d_raw, logvar_grads);
    }

    /// Mean log-likelihood of one observation given decoder output.
    pub fn loglik(&self, x: &[f64], output: &[f64]) -> Result<f64> {
        match self.likelihood {
            Likelihood::Gaussian => {
                let s2 = self.noise_var();
                gaussian_loglik(x, output, s2.as_slice().unwrap())
            }
            Likelihood::Multinomial => multinomial_loglik(x, output),
        }
    }
}
