//! Fitting: reparameterized ELBO with closed-form KL, alternated with the
//! spike-and-slab E-step once per epoch.
//!
//! The VAE and beta-VAE baselines are the same model with the selector frozen
//! at all-ones, no selector prior, and the KL term scaled by `beta`.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetMatrix, Likelihood};
use crate::error::{shape_err, Error, Result};
use crate::model::{
    calibrate_noise_prior, log_softmax, noise_log_prior, noise_log_prior_grad, Architecture,
    SparseDgmModel,
};
use crate::nd::rng::normal_matrix;
use crate::nd::{stream, Activation, Adam, MlpGrads, SpdFactor, Stream};
use crate::ssl::{penalty_grad, ssl_log_prior_term, SslHyper};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sparse,
    Vae,
    BetaVae,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sparse" => Ok(Mode::Sparse),
            "vae" => Ok(Mode::Vae),
            "beta_vae" => Ok(Mode::BetaVae),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

fn default_nu() -> f64 {
    3.0
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    /// KL multiplier; ignored (treated as 1) in `vae` mode.
    pub beta: f64,
    pub latent_dim: usize,
    pub hidden_layers: usize,
    pub hidden_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Required in sparse mode.
    pub ssl: Option<SslHyper>,
    pub likelihood: Likelihood,
    pub seed: u64,
    /// Prior factor covariance; `None` means identity.
    #[serde(default)]
    pub sigma_z: Option<Vec<Vec<f64>>>,
    /// Degrees of freedom of the noise-variance prior (gaussian data).
    #[serde(default = "default_nu")]
    pub noise_nu: f64,
    #[serde(default)]
    pub prior_scaling: PriorScaling,
}

/// How much of the prior each minibatch objective carries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorScaling {
    /// Every minibatch carries the whole prior.
    #[default]
    PerBatch,
    /// Each minibatch carries `batch_rows / N` of the prior, so one epoch sums to
    /// the full-data objective.
    PerEpoch,
}

impl std::str::FromStr for PriorScaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_batch" | "per-batch" => Ok(Self::PerBatch),
            "per_epoch" | "per-epoch" => Ok(Self::PerEpoch),
            other => Err(Error::Config(format!("unknown prior scaling {other:?}"))),
        }
    }
}

impl TrainConfig {
    /// Settings for the 7-feature synthetic benchmark.
    pub fn synthetic(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            beta: 1.0,
            latent_dim: 5,
            hidden_layers: 3,
            hidden_dim: 50,
            activation: Activation::Relu,
            lr: 0.01,
            epochs: 200,
            batch_size: 100,
            ssl: match mode {
                Mode::Sparse => Some(SslHyper::defaults_for(7)),
                _ => None,
            },
            likelihood: Likelihood::Gaussian,
            seed,
            sigma_z: None,
            noise_nu: 3.0,
            prior_scaling: PriorScaling::PerBatch,
        }
    }

    pub fn effective_beta(&self) -> f64 {
        match self.mode {
            Mode::Vae => 1.0,
            _ => self.beta,
        }
    }

    pub fn architecture(&self, num_features: usize) -> Architecture {
        Architecture {
            num_features,
            latent_dim: self.latent_dim,
            hidden_layers: self.hidden_layers,
            hidden_dim: self.hidden_dim,
            activation: self.activation,
        }
    }

    pub fn sigma_z_matrix(&self) -> Result<Option<Array2<f64>>> {
        let Some(rows) = &self.sigma_z else {
            return Ok(None);
        };
        let k = self.latent_dim;
        if rows.len() != k || rows.iter().any(|r| r.len() != k) {
            return shape_err(format!("sigma_z must be {k}x{k}"));
        }
        let flat = rows.iter().flatten().copied().collect();
        Ok(Some(Array2::from_shape_vec((k, k), flat).expect("checked shape")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.latent_dim == 0 || self.hidden_dim == 0 {
            return bad("latent_dim and hidden_dim must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be nonnegative");
        }
        match (self.mode, &self.ssl) {
            (Mode::Sparse, None) => return bad("sparse mode requires spike-and-slab hyperparameters"),
            (Mode::Sparse, Some(h)) => h.validate()?,
            _ => {}
        }
        if let Some(s) = self.sigma_z_matrix()? {
            SpdFactor::new(&s)?;
        }
        if !(self.noise_nu > 0.0) {
            return bad("noise_nu must be positive");
        }
        Ok(())
    }
}

/// `KL(N(mu, diag sigma2) || N(0, I))`.
pub fn kl_standard(mu: &[f64], sigma2: &[f64]) -> Result<f64> {
    check_kl_args(mu, sigma2)?;
    Ok(-0.5
        * mu
            .iter()
            .zip(sigma2)
            .map(|(m, s)| 1.0 + s.ln() - m * m - s)
            .sum::<f64>())
}

/// `KL(N(mu, diag sigma2) || N(0, sigma_z))`.
pub fn kl_general(mu: &[f64], sigma2: &[f64], sigma_z: &Array2<f64>) -> Result<f64> {
    let factor = SpdFactor::new(sigma_z)?;
    kl_general_factored(mu, sigma2, &factor)
}

pub fn kl_general_factored(mu: &[f64], sigma2: &[f64], factor: &SpdFactor) -> Result<f64> {
    check_kl_args(mu, sigma2)?;
    if factor.dim() != mu.len() {
        return shape_err("factor covariance does not match latent dimension");
    }
    let log_term: f64 = sigma2.iter().map(|s| 1.0 + s.ln()).sum();
    let trace: f64 = sigma2
        .iter()
        .enumerate()
        .map(|(k, s)| factor.inverse[[k, k]] * s)
        .sum();
    let quad = factor.quad_inv(mu);
    Ok(-0.5 * (log_term - trace - quad - factor.log_det))
}

fn check_kl_args(mu: &[f64], sigma2: &[f64]) -> Result<()> {
    if mu.len() != sigma2.len() {
        return shape_err("mu and sigma2 lengths differ");
    }
    if let Some(s) = sigma2.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Domain(format!("posterior variance must be positive, got {s}")));
    }
    Ok(())
}

/// How one minibatch contributes to the full-data objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub mode: Mode,
    pub beta: f64,
    /// Weight on the selector and noise priors.
    pub prior_weight: f64,
}

impl ObjectiveSpec {
    pub fn new(config: &TrainConfig, batch_rows: usize, total_rows: usize) -> Self {
        Self {
            mode: config.mode,
            beta: config.effective_beta(),
            prior_weight: match config.prior_scaling {
                PriorScaling::PerBatch => 1.0,
                PriorScaling::PerEpoch => batch_rows as f64 / total_rows as f64,
            },
        }
    }
}

/// Terms of a minibatch objective.
///
/// `objective` is what the gradients differentiate. The inclusion part of the
/// selector prior does not depend on any trained parameter and is reported
/// separately; [`ElboValue::total`] adds it back.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboValue {
    pub objective: f64,
    pub recon: f64,
    pub kl: f64,
    pub ssl_penalty: f64,
    pub ssl_inclusion: f64,
    pub noise_prior: f64,
}

impl ElboValue {
    pub fn total(&self) -> f64 {
        self.objective + self.ssl_inclusion
    }

    fn accumulate(&mut self, other: &ElboValue) {
        self.objective += other.objective;
        self.recon += other.recon;
        self.kl += other.kl;
        self.ssl_penalty += other.ssl_penalty;
        self.ssl_inclusion += other.ssl_inclusion;
        self.noise_prior += other.noise_prior;
    }
}

/// Gradients of [`ElboValue::objective`] for every parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub decoder: MlpGrads,
    pub encoder_mu: MlpGrads,
    pub encoder_logvar: MlpGrads,
    pub selector: Array2<f64>,
    pub log_noise_var: Array1<f64>,
}

impl ModelGrads {
    pub fn zeros(model: &SparseDgmModel) -> Self {
        Self {
            decoder: model.decoder.zero_grads(),
            encoder_mu: model.encoder_mu.zero_grads(),
            encoder_logvar: model.encoder_logvar.zero_grads(),
            selector: Array2::zeros(model.selector.raw_dim()),
            log_noise_var: Array1::zeros(model.num_features()),
        }
    }

    /// Views in the same order as [`param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.decoder.slices();
        out.extend(self.encoder_mu.slices());
        out.extend(self.encoder_logvar.slices());
        out.push(self.selector.as_slice().unwrap());
        out.push(self.log_noise_var.as_slice().unwrap());
        out
    }

    fn negate(&mut self) {
        self.decoder.scale(-1.0);
        self.encoder_mu.scale(-1.0);
        self.encoder_logvar.scale(-1.0);
        self.selector.mapv_inplace(|v| -v);
        self.log_noise_var.mapv_inplace(|v| -v);
    }
}

/// Mutable views of every trainable tensor: decoder, encoders, selector, noise.
pub fn param_slices_mut(model: &mut SparseDgmModel) -> Vec<&mut [f64]> {
    let mut out = model.decoder.param_slices_mut();
    out.extend(model.encoder_mu.param_slices_mut());
    out.extend(model.encoder_logvar.param_slices_mut());
    out.push(model.selector.as_slice_mut().unwrap());
    out.push(model.log_noise_var.as_slice_mut().unwrap());
    out
}

/// Single-sample reparameterized objective of a minibatch and its gradients.
pub fn elbo_minibatch<R: Rng + ?Sized>(
    model: &SparseDgmModel,
    batch: &Array2<f64>,
    rng: &mut R,
    spec: &ObjectiveSpec,
) -> Result<(ElboValue, ModelGrads)> {
    let eps = normal_matrix(rng, batch.nrows(), model.latent_dim());
    elbo_with_noise(model, batch, &eps, spec)
}

/// [`elbo_minibatch`] with the standard-normal draws supplied (`B x K`).
pub fn elbo_with_noise(
    model: &SparseDgmModel,
    batch: &Array2<f64>,
    eps: &Array2<f64>,
    spec: &ObjectiveSpec,
) -> Result<(ElboValue, ModelGrads)> {
    let (b, k) = (batch.nrows(), model.latent_dim());
    if eps.dim() != (b, k) {
        return shape_err(format!("noise must be {b}x{k}"));
    }
    let sparse = spec.mode == Mode::Sparse && !model.selector_frozen;
    let mut grads = ModelGrads::zeros(model);

    let enc = model.encode_batch(batch)?;
    let sigma = enc.logvar.mapv(|l| (0.5 * l).exp());
    let z = &enc.mu + &(&sigma * eps);
    let dec = model.decode_batch(&z)?;

    let mut value = ElboValue::default();
    let mut d_out = Array2::<f64>::zeros(dec.output.raw_dim());
    match model.likelihood {
        Likelihood::Gaussian => {
            let s2 = model.noise_var();
            let mut d_lnv = Array1::<f64>::zeros(model.num_features());
            for ((x_row, out_row), mut d_row) in batch
                .rows()
                .into_iter()
                .zip(dec.output.rows())
                .zip(d_out.rows_mut())
            {
                for j in 0..x_row.len() {
                    let r = x_row[j] - out_row[j];
                    let s = s2[j];
                    value.recon += -0.5 * (LN_2PI + model.log_noise_var[j]) - r * r / (2.0 * s);
                    d_row[j] = r / s;
                    d_lnv[j] += -0.5 + r * r / (2.0 * s);
                }
            }
            grads.log_noise_var = d_lnv;
        }
        Likelihood::Multinomial => {
            for ((x_row, out_row), mut d_row) in batch
                .rows()
                .into_iter()
                .zip(dec.output.rows())
                .zip(d_out.rows_mut())
            {
                let x = x_row.to_vec();
                let ls = log_softmax(out_row.as_slice().unwrap());
                let n: f64 = x.iter().sum();
                for j in 0..x.len() {
                    if x[j] > 0.0 {
                        value.recon += x[j] * ls[j];
                    }
                    d_row[j] = x[j] - n * ls[j].exp();
                }
            }
        }
    }

    let d_z = model.decode_backward(&dec, &d_out, &mut grads.decoder, &mut grads.selector);

    // KL and its derivatives w.r.t. mu and log-variance.
    let sigma2 = enc.sigma2();
    let factor = if is_identity(&model.sigma_z) {
        None
    } else {
        Some(SpdFactor::new(&model.sigma_z)?)
    };
    let mut kl_dmu = Array2::<f64>::zeros((b, k));
    let mut kl_dlv = Array2::<f64>::zeros((b, k));
    for i in 0..b {
        let mu_i = enc.mu.row(i);
        let s2_i = sigma2.row(i);
        match &factor {
            None => {
                value.kl += kl_standard(mu_i.as_slice().unwrap(), s2_i.as_slice().unwrap())?;
                for c in 0..k {
                    kl_dmu[[i, c]] = mu_i[c];
                    kl_dlv[[i, c]] = 0.5 * (s2_i[c] - 1.0);
                }
            }
            Some(f) => {
                value.kl +=
                    kl_general_factored(mu_i.as_slice().unwrap(), s2_i.as_slice().unwrap(), f)?;
                let inv_mu = f.inverse.dot(&mu_i);
                for c in 0..k {
                    kl_dmu[[i, c]] = inv_mu[c];
                    kl_dlv[[i, c]] = 0.5 * (f.inverse[[c, c]] * s2_i[c] - 1.0);
                }
            }
        }
    }
    let d_mu = &d_z - &(&kl_dmu * spec.beta);
    let d_lv = &(&d_z * eps) * &(&sigma * 0.5) - &(&kl_dlv * spec.beta);
    model.encode_backward(&enc, &d_mu, &d_lv, &mut grads.encoder_mu, &mut grads.encoder_logvar);

    if sparse {
        let term = ssl_log_prior_term(&model.selector, &model.ssl, &model.hyper)?;
        value.ssl_penalty = spec.prior_weight * term.penalty;
        value.ssl_inclusion = spec.prior_weight * term.inclusion;
        grads
            .selector
            .scaled_add(spec.prior_weight, &penalty_grad(&model.selector, &model.ssl, &model.hyper));
    }
    if model.selector_frozen {
        grads.selector.fill(0.0);
    }

    match (model.likelihood, &model.noise_prior) {
        (Likelihood::Gaussian, Some(prior)) => {
            let lnv = model.log_noise_var.as_slice().unwrap();
            value.noise_prior = spec.prior_weight * noise_log_prior(lnv, prior);
            let g = noise_log_prior_grad(lnv, prior);
            for (d, gv) in grads.log_noise_var.iter_mut().zip(g) {
                *d += spec.prior_weight * gv;
            }
        }
        (Likelihood::Multinomial, _) => grads.log_noise_var.fill(0.0),
        _ => {}
    }

    value.objective = value.recon - spec.beta * value.kl + value.ssl_penalty + value.noise_prior;
    Ok((value, grads))
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn is_identity(m: &Array2<f64>) -> bool {
    m.indexed_iter()
        .all(|((i, j), v)| *v == if i == j { 1.0 } else { 0.0 })
}

/// One epoch of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Full-data objective over the epoch: likelihood and KL summed over the
    /// minibatches, prior terms counted once, inclusion term included.
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub ssl_penalty: f64,
    pub ssl_inclusion: f64,
    pub noise_prior: f64,
    pub eta: Vec<f64>,
    pub selector_col_norms: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

/// Euclidean norm of each selector column.
pub fn column_norms(w: &Array2<f64>) -> Vec<f64> {
    w.axis_iter(Axis(1))
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Builds an untrained model for `data` under `config`.
pub fn init_model(data: &DatasetMatrix, config: &TrainConfig) -> Result<SparseDgmModel> {
    config.validate()?;
    if data.likelihood != config.likelihood {
        return Err(Error::Config(format!(
            "data is {:?} but config asks for {:?}",
            data.likelihood, config.likelihood
        )));
    }
    let g = data.num_features();
    let hyper = config.ssl.unwrap_or_else(|| SslHyper::defaults_for(g));
    let frozen = config.mode != Mode::Sparse;
    let mut rng = stream(config.seed, Stream::Init);
    let mut model = SparseDgmModel::new(
        &config.architecture(g),
        config.likelihood,
        hyper,
        config.sigma_z_matrix()?,
        frozen,
        &mut rng,
    )?;
    if config.likelihood == Likelihood::Gaussian {
        model.noise_prior = Some(calibrate_noise_prior(data, config.noise_nu)?);
    }
    Ok(model)
}

/// Fits the model. Deterministic given `config.seed`.
pub fn train(data: &DatasetMatrix, config: &TrainConfig) -> Result<(SparseDgmModel, TrainTrace)> {
    let n = data.num_rows();
    if n == 0 {
        return Err(Error::Config("empty dataset".into()));
    }
    let mut model = init_model(data, config)?;
    let mut batch_rng = stream(config.seed, Stream::Minibatch);
    let mut noise_rng = stream(config.seed, Stream::Noise);
    let mut adam = Adam::for_shapes(param_slices_mut(&mut model).iter().map(|s| s.len()));
    let mut trace = TrainTrace::default();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        if config.mode == Mode::Sparse {
            let w = model.selector.clone();
            model.ssl.e_step(&w, &model.hyper)?;
        }
        order.shuffle(&mut batch_rng);
        let mut epoch_value = ElboValue::default();
        for (batch_idx, rows) in order.chunks(config.batch_size).enumerate() {
            let batch = data.values.select(Axis(0), rows);
            let spec = ObjectiveSpec::new(config, rows.len(), n);
            let (value, mut grads) =
                elbo_minibatch(&model, &batch, &mut noise_rng, &spec).map_err(|e| Error::Training {
                    epoch,
                    batch: batch_idx,
                    what: e.to_string(),
                })?;
            if !value.total().is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    trace: Box::new(trace),
                });
            }
            // Record the prior once per epoch whatever its weight per minibatch.
            let share = rows.len() as f64 / n as f64 / spec.prior_weight;
            epoch_value.accumulate(&ElboValue {
                ssl_penalty: value.ssl_penalty * share,
                ssl_inclusion: value.ssl_inclusion * share,
                noise_prior: value.noise_prior * share,
                ..value
            });
            grads.negate();
            adam.step(param_slices_mut(&mut model), grads.slices(), config.lr);
        }
        let beta = config.effective_beta();
        trace.records.push(EpochRecord {
            epoch,
            elbo: epoch_value.recon - beta * epoch_value.kl
                + epoch_value.ssl_penalty
                + epoch_value.ssl_inclusion
                + epoch_value.noise_prior,
            recon: epoch_value.recon,
            kl: epoch_value.kl,
            ssl_penalty: epoch_value.ssl_penalty,
            ssl_inclusion: epoch_value.ssl_inclusion,
            noise_prior: epoch_value.noise_prior,
            eta: model.ssl.eta.to_vec(),
            selector_col_norms: column_norms(&model.selector),
        });
    }
    Ok((model, trace))
}
