use ndarray::{array, concatenate, Array1, Array2, Axis};
use sparse_dgm::datagen::gen_synthetic;
use sparse_dgm::dataset::{DatasetMatrix, Likelihood};
use sparse_dgm::io::{load_checkpoint, save_checkpoint};
use sparse_dgm::metrics::{heldout_nll, mse_from_predictions};
use sparse_dgm::model::{calibrate_noise_prior, SparseDgmModel};
use sparse_dgm::nd::rng::normal_matrix;
use sparse_dgm::nd::{stream, Activation, Dense, Mlp, Stream};
use sparse_dgm::train::{init_model, train, Mode, TrainConfig};
use sparse_dgm::Error;

fn small_config(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        hidden_layers: 2,
        hidden_dim: 16,
        ..TrainConfig::synthetic(mode, seed)
    }
}

fn synthetic(n: usize, seed: u64) -> DatasetMatrix {
    gen_synthetic(n, 0.0, 0.5, &mut stream(seed, Stream::Data)).unwrap().0
}

fn linear(weights: Array2<f64>, bias: Array1<f64>) -> Mlp {
    Mlp::new(vec![Dense {
        weights,
        bias,
        activation: Activation::Identity,
    }])
    .unwrap()
}

/// One factor, three features, linear decoder `x = a z + b + noise`.
struct LinearGaussian {
    a: [f64; 3],
    b: [f64; 3],
    s: [f64; 3],
}

impl LinearGaussian {
    const DEFAULT: Self = Self {
        a: [1.2, -0.7, 0.4],
        b: [0.3, 0.0, -1.0],
        s: [0.5, 0.8, 1.3],
    };

    fn precision(&self) -> f64 {
        1.0 + (0..3).map(|j| self.a[j] * self.a[j] / self.s[j]).sum::<f64>()
    }

    /// Marginal `log N(x; b, a a' + diag s)` via the matrix determinant lemma
    /// and Sherman-Morrison.
    fn log_marginal(&self, x: &[f64]) -> f64 {
        let p = self.precision();
        let r: Vec<f64> = (0..3).map(|j| x[j] - self.b[j]).collect();
        let quad_d: f64 = (0..3).map(|j| r[j] * r[j] / self.s[j]).sum();
        let ar: f64 = (0..3).map(|j| self.a[j] * r[j] / self.s[j]).sum();
        let logdet = self.s.iter().map(|v| v.ln()).sum::<f64>() + p.ln();
        -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + logdet + quad_d - ar * ar / p)
    }

    /// A vae-mode model whose encoder is the exact posterior.
    fn model(&self) -> SparseDgmModel {
        let data = DatasetMatrix::unnamed(array![[0.0, 1.0, 2.0], [1.0, 0.0, 0.5]], Likelihood::Gaussian).unwrap();
        let cfg = TrainConfig {
            latent_dim: 1,
            hidden_layers: 0,
            ..TrainConfig::synthetic(Mode::Vae, 0)
        };
        let mut m = init_model(&data, &cfg).unwrap();
        let p = self.precision();
        m.decoder = linear(Array2::from_shape_vec((1, 3), self.a.to_vec()).unwrap(), Array1::from(self.b.to_vec()));
        let enc_w: Vec<f64> = (0..3).map(|j| self.a[j] / self.s[j] / p).collect();
        let enc_b = -(0..3).map(|j| self.a[j] * self.b[j] / self.s[j]).sum::<f64>() / p;
        m.encoder_mu = linear(Array2::from_shape_vec((3, 1), enc_w).unwrap(), array![enc_b]);
        m.encoder_logvar = linear(Array2::zeros((3, 1)), array![-p.ln()]);
        m.log_noise_var = self.s.iter().map(|v| v.ln()).collect();
        m
    }
}

#[test]
fn elbo_matches_log_marginal_at_the_exact_posterior_and_bounds_it_elsewhere() {
    let lg = LinearGaussian::DEFAULT;
    let x = normal_matrix(&mut stream(1, Stream::Data), 40, 3) * 1.5;
    let log_p = x.rows().into_iter().map(|r| lg.log_marginal(&r.to_vec())).sum::<f64>() / 40.0;
    let exact = lg.model();
    let nll = heldout_nll(&exact, &x, 4000, &mut stream(1, Stream::Eval)).unwrap();
    assert!((nll.mean + log_p).abs() < 3.0 * nll.std_error, "{nll:?} vs {}", -log_p);

    for (shift, logvar) in [(0.3, 0.0), (0.0, 0.7), (-0.5, -0.4)] {
        let mut m = exact.clone();
        let mut mu_layers: Vec<Dense> = m.encoder_mu.layers().to_vec();
        mu_layers[0].bias[0] += shift;
        m.encoder_mu = Mlp::new(mu_layers).unwrap();
        let mut lv_layers: Vec<Dense> = m.encoder_logvar.layers().to_vec();
        lv_layers[0].bias[0] += logvar;
        m.encoder_logvar = Mlp::new(lv_layers).unwrap();
        let nll = heldout_nll(&m, &x, 2000, &mut stream(2, Stream::Eval)).unwrap();
        assert!(nll.mean - 3.0 * nll.std_error > -log_p, "{nll:?} vs {}", -log_p);
    }
}

/// `P(sigma^2 <= q)` under Inverse-Gamma(alpha, beta), by Simpson's rule on the
/// Gamma(alpha, 1) density of `u = beta / sigma^2` over `[beta / q, beta / q + 80]`.
fn inv_gamma_cdf_by_quadrature(q: f64, alpha: f64, beta: f64, gamma_alpha: f64) -> f64 {
    let lo = beta / q;
    let n = 400_000;
    let h = 80.0 / n as f64;
    let f = |u: f64| u.powf(alpha - 1.0) * (-u).exp() / gamma_alpha;
    let mut acc = f(lo) + f(lo + 80.0);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

#[test]
fn noise_prior_calibration_matches_quadrature() {
    let sqrt_pi = std::f64::consts::PI.sqrt();
    for (nu, gamma_half_nu) in [(3.0, sqrt_pi / 2.0), (5.0, 0.75 * sqrt_pi), (4.0, 1.0)] {
        for seed in 0..3 {
            let data = synthetic(500, seed);
            let prior = calibrate_noise_prior(&data, nu).unwrap();
            let mut var: Vec<f64> = data.values.axis_iter(Axis(1)).map(|c| c.var(1.0)).collect();
            var.sort_by(f64::total_cmp);
            let h = 0.05 * (var.len() - 1) as f64;
            let q05 = var[0] + h * (var[1] - var[0]);
            let p = inv_gamma_cdf_by_quadrature(q05, nu / 2.0, nu * prior.xi / 2.0, gamma_half_nu);
            assert!((p - 0.9).abs() < 1e-6, "nu {nu} seed {seed}: P = {p}");
        }
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = synthetic(200, 3);
    for mode in [Mode::Sparse, Mode::Vae] {
        let (m1, t1) = train(&data, &small_config(mode, 9)).unwrap();
        let (m2, t2) = train(&data, &small_config(mode, 9)).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(t1, t2);
        let (m3, _) = train(&data, &small_config(mode, 10)).unwrap();
        assert_ne!(m1, m3);
    }
}

#[test]
fn vae_selector_stays_exactly_one() {
    let data = synthetic(200, 4);
    let (m, trace) = train(&data, &small_config(Mode::Vae, 1)).unwrap();
    assert!(m.selector_frozen);
    assert!(m.selector.iter().all(|v| *v == 1.0));
    assert!(trace.records.iter().all(|r| r.ssl_penalty == 0.0));
}

#[test]
fn epoch_records_add_up() {
    let data = synthetic(250, 5);
    let (_, trace) = train(&data, &small_config(Mode::Sparse, 2)).unwrap();
    assert_eq!(trace.records.len(), 4);
    for r in &trace.records {
        let sum = r.recon - r.kl + r.ssl_penalty + r.ssl_inclusion + r.noise_prior;
        assert!((r.elbo - sum).abs() < 1e-9 * r.elbo.abs().max(1.0));
        assert_eq!(r.eta.len(), 5);
        assert!(r.eta.iter().all(|e| *e > 0.0 && *e < 1.0));
    }
}

#[test]
fn checkpoint_round_trip_scores_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(200, 6);
    let test = synthetic(100, 7);
    for mode in [Mode::Sparse, Mode::Vae, Mode::BetaVae] {
        let cfg = TrainConfig {
            beta: 2.0,
            ..small_config(mode, 3)
        };
        let (model, _) = train(&data, &cfg).unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &model, &cfg).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.config, cfg);
        let a = heldout_nll(&model, &test.values, 20, &mut stream(1, Stream::Eval)).unwrap();
        let b = heldout_nll(&back.model, &test.values, 20, &mut stream(1, Stream::Eval)).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        if mode == Mode::Vae {
            assert!(back.model.selector_frozen && back.model.selector.iter().all(|v| *v == 1.0));
        }

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
        let bumped = text.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
        std::fs::write(&path, bumped).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Schema { found: 2, expected: 1 })));
    }
}

#[test]
fn true_means_reach_the_noise_floor() {
    let (x, truth) = gen_synthetic(10_000, 0.0, 0.5, &mut stream(8, Stream::Data)).unwrap();
    let m = mse_from_predictions(&x.values, &truth.means()).unwrap();
    assert!((m - 0.5).abs() < 0.05, "{m}");
}

#[test]
fn heldout_nll_single_sample_by_hand() {
    let lg = LinearGaussian::DEFAULT;
    let mut m = lg.model();
    let mut lv: Vec<Dense> = m.encoder_logvar.layers().to_vec();
    lv[0].weights = array![[0.1], [-0.2], [0.05]];
    m.encoder_logvar = Mlp::new(lv).unwrap();
    let x = array![[0.5, -1.0, 2.0], [1.5, 0.2, -0.3]];
    let eps = normal_matrix(&mut stream(4, Stream::Eval), 1, 1)[[0, 0]];
    let got = heldout_nll(&m, &x, 1, &mut stream(4, Stream::Eval)).unwrap().mean;

    let mut total = 0.0;
    for r in x.rows() {
        let p = lg.precision();
        let mu = (0..3).map(|j| lg.a[j] * (r[j] - lg.b[j]) / lg.s[j]).sum::<f64>() / p;
        let logvar = -p.ln() + 0.1 * r[0] - 0.2 * r[1] + 0.05 * r[2];
        let z = mu + (0.5 * logvar).exp() * eps;
        let recon: f64 = (0..3)
            .map(|j| {
                let d = r[j] - (lg.a[j] * z + lg.b[j]);
                -0.5 * ((2.0 * std::f64::consts::PI * lg.s[j]).ln() + d * d / lg.s[j])
            })
            .sum();
        let kl = 0.5 * (logvar.exp() + mu * mu - 1.0 - logvar);
        total += -(recon - kl);
    }
    assert!((got - total / 2.0).abs() < 1e-12, "{got} vs {}", total / 2.0);
}

#[test]
fn heldout_nll_ignores_row_duplication() {
    let data = synthetic(200, 9);
    let (model, _) = train(&data, &small_config(Mode::Sparse, 1)).unwrap();
    let x = synthetic(60, 10).values;
    let doubled = concatenate![Axis(0), x, x];
    let a = heldout_nll(&model, &x, 20, &mut stream(3, Stream::Eval)).unwrap();
    let b = heldout_nll(&model, &doubled, 20, &mut stream(3, Stream::Eval)).unwrap();
    assert!((a.mean - b.mean).abs() < 1e-12 * a.mean.abs());
}

#[test]
fn heldout_nll_sample_counts_agree() {
    let data = synthetic(300, 11);
    let (model, _) = train(&data, &small_config(Mode::Sparse, 2)).unwrap();
    let x = synthetic(200, 12).values;
    let a = heldout_nll(&model, &x, 20, &mut stream(5, Stream::Eval)).unwrap();
    let b = heldout_nll(&model, &x, 200, &mut stream(6, Stream::Eval)).unwrap();
    let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    assert!((a.mean - b.mean).abs() < 3.0 * se, "{a:?} vs {b:?}");
}
