//! Spike-and-slab lasso prior on the selector matrix.
//!
//! Each `w_jk` is drawn from a Laplace spike (rate `lambda0`) or a Laplace
//! slab (rate `lambda1`) according to `gamma_jk ~ Bernoulli(eta_k)`, with
//! `eta_k ~ Beta(a, b)`. The E-step computes `E[gamma_jk | w_jk, eta_k]` in
//! closed form and then maximizes over `eta`.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Smallest distance `eta` is kept from 0 and 1 between E-steps.
pub const ETA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SslHyper {
    pub lambda0: f64,
    pub lambda1: f64,
    pub a: f64,
    pub b: f64,
}

impl SslHyper {
    /// `lambda1 = 1`, `lambda0 = 10`, `a = 1`, `b = G`.
    pub fn defaults_for(num_features: usize) -> Self {
        Self {
            lambda0: 10.0,
            lambda1: 1.0,
            a: 1.0,
            b: num_features as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_pos = [self.lambda0, self.lambda1, self.a, self.b]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !all_pos {
            return Err(Error::Config(format!(
                "spike-and-slab hyperparameters must be positive and finite: {self:?}"
            )));
        }
        if self.lambda0 < self.lambda1 {
            return Err(Error::Config(format!(
                "spike rate lambda0={} must be at least slab rate lambda1={}",
                self.lambda0, self.lambda1
            )));
        }
        Ok(())
    }
}

/// `(lambda / 2) exp(-lambda |w|)`
pub fn laplace_density(w: f64, lambda: f64) -> f64 {
    0.5 * lambda * (-lambda * w.abs()).exp()
}

/// `E[gamma | w, eta]`, the posterior probability that `w` came from the slab.
///
/// Evaluated as a logistic function of the log odds so large `|w|` cannot
/// underflow the spike density.
pub fn gamma_posterior(w: f64, eta: f64, hyper: &SslHyper) -> f64 {
    if eta <= 0.0 {
        return 0.0;
    }
    if eta >= 1.0 {
        return 1.0;
    }
    if hyper.lambda0 == hyper.lambda1 {
        return eta;
    }
    // log[(1-eta)/eta * psi0(w)/psi1(w)]
    let log_ratio = (1.0 - eta).ln() - eta.ln() + (hyper.lambda0 / hyper.lambda1).ln()
        - (hyper.lambda0 - hyper.lambda1) * w.abs();
    if log_ratio > 0.0 {
        let e = (-log_ratio).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + log_ratio.exp())
    }
}

/// Beta-posterior mode update `(sum + a - 1) / (a + b + G - 2)`, clamped to `[0, 1]`.
pub fn eta_update(gamma_col_sum: f64, a: f64, b: f64, num_features: usize) -> Result<f64> {
    let denom = a + b + num_features as f64 - 2.0;
    if !(denom > 0.0) {
        return Err(Error::Config(format!(
            "a + b + G - 2 = {denom} must be positive"
        )));
    }
    Ok(((gamma_col_sum + a - 1.0) / denom).clamp(0.0, 1.0))
}

/// Effective lasso rate `lambda1 E[gamma] + lambda0 (1 - E[gamma])`.
pub fn lambda_star(gamma_expect: f64, hyper: &SslHyper) -> f64 {
    hyper.lambda1 * gamma_expect + hyper.lambda0 * (1.0 - gamma_expect)
}

fn clamp_eta(eta: f64) -> f64 {
    eta.clamp(ETA_FLOOR, 1.0 - ETA_FLOOR)
}

/// Inclusion posteriors and per-factor inclusion rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslState {
    /// `G x K`, entries `E[gamma_jk | w_jk, eta_k]`.
    #[serde(with = "crate::nd::serde_arrays::matrix")]
    pub gamma_expect: Array2<f64>,
    /// Length `K`.
    #[serde(with = "crate::nd::serde_arrays::vector")]
    pub eta: Array1<f64>,
}

impl SslState {
    pub fn new(num_features: usize, num_factors: usize, eta: f64) -> Self {
        let eta = clamp_eta(eta);
        Self {
            gamma_expect: Array2::from_elem((num_features, num_factors), eta),
            eta: Array1::from_elem(num_factors, eta),
        }
    }

    /// Recomputes every `E[gamma_jk]` from the current `eta`, then updates `eta`.
    pub fn e_step(&mut self, w: &Array2<f64>, hyper: &SslHyper) -> Result<()> {
        if w.dim() != self.gamma_expect.dim() {
            return shape_err(format!(
                "selector is {:?} but prior state is {:?}",
                w.dim(),
                self.gamma_expect.dim()
            ));
        }
        let g = w.nrows();
        for ((j, k), e) in self.gamma_expect.indexed_iter_mut() {
            *e = gamma_posterior(w[[j, k]], self.eta[k], hyper);
        }
        for (k, col) in self.gamma_expect.axis_iter(Axis(1)).enumerate() {
            self.eta[k] = clamp_eta(eta_update(col.sum(), hyper.a, hyper.b, g)?);
        }
        Ok(())
    }

    pub fn lambda_star(&self, hyper: &SslHyper) -> Array2<f64> {
        self.gamma_expect.mapv(|e| lambda_star(e, hyper))
    }
}

/// The two parts of `E_{Gamma|W,eta}[log p(W|Gamma) p(Gamma|eta) p(eta)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslTerm {
    /// `-sum_jk lambda*_jk |w_jk|`; the only part that depends on `W`.
    pub penalty: f64,
    /// `sum_k (S_k + a - 1) log eta_k + (G - S_k + b - 1) log(1 - eta_k)`.
    pub inclusion: f64,
}

impl SslTerm {
    pub fn total(&self) -> f64 {
        self.penalty + self.inclusion
    }
}

/// The prior term of the ELBO, with `E[gamma]` and `eta` taken from `state`.
pub fn ssl_log_prior_term(w: &Array2<f64>, state: &SslState, hyper: &SslHyper) -> Result<SslTerm> {
    if w.dim() != state.gamma_expect.dim() {
        return shape_err("selector and prior state disagree in shape");
    }
    let g = w.nrows() as f64;
    let penalty = -w
        .iter()
        .zip(state.gamma_expect.iter())
        .map(|(wv, &e)| lambda_star(e, hyper) * wv.abs())
        .sum::<f64>();
    let inclusion = state
        .gamma_expect
        .axis_iter(Axis(1))
        .zip(state.eta.iter())
        .map(|(col, &eta)| {
            let s = col.sum();
            let eta = clamp_eta(eta);
            (s + hyper.a - 1.0) * eta.ln() + (g - s + hyper.b - 1.0) * (1.0 - eta).ln()
        })
        .sum();
    Ok(SslTerm { penalty, inclusion })
}

/// Gradient of [`SslTerm::penalty`] w.r.t. `W` with `lambda*` held fixed; zero at `w = 0`.
pub fn penalty_grad(w: &Array2<f64>, state: &SslState, hyper: &SslHyper) -> Array2<f64> {
    let mut out = Array2::zeros(w.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(w)
        .and(&state.gamma_expect)
        .for_each(|o, &wv, &e| {
            let sign = if wv > 0.0 {
                1.0
            } else if wv < 0.0 {
                -1.0
            } else {
                0.0
            };
            *o = -lambda_star(e, hyper) * sign;
        });
    out
}
