//! Experiment orchestration: data generation, training and evaluation over
//! seeds, aggregate reports, manifests, topic tables, and gradient checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{dirichlet_rows, gen_shifted_split, gen_synthetic, SyntheticTruth};
use crate::dataset::{DatasetMatrix, Likelihood};
use crate::error::{Error, Result};
use crate::io::{load_dataset, save_checkpoint, save_dataset, write_json, write_trace, CODE_VERSION};
use crate::metrics::{
    active_columns, dci_disentanglement, heldout_nll, mse, ndcg_at_k, recall_at_k, support_fscore, MetricsReport,
    NLL_SAMPLES, SUPPORT_TAU,
};
use crate::model::SparseDgmModel;
use crate::nd::rng::{normal_matrix, standard_normal};
use crate::nd::{stream, Stream};
use crate::ssl::SslHyper;
use crate::train::{
    elbo_with_noise, init_model, param_slices_mut, train, Mode, ObjectiveSpec, TrainConfig, TrainTrace,
};

/// Where the data of an experiment comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// The 7-feature, 2-factor benchmark; train and test are independent draws.
    Synthetic {
        n_train: usize,
        n_test: usize,
        rho: f64,
        noise_var: f64,
    },
    /// Count data from Dirichlet factors and loadings, with the training
    /// factors shifted in logit space.
    Shifted {
        n_docs: usize,
        factors: usize,
        vocab: usize,
        theta_alpha: f64,
        loading_alpha: f64,
        sigma_shift: f64,
        doc_len: usize,
    },
    /// Pre-tabulated CSV files.
    Csv {
        train: PathBuf,
        test: PathBuf,
        likelihood: Option<Likelihood>,
    },
}

impl DataSpec {
    pub fn synthetic(rho: f64) -> Self {
        DataSpec::Synthetic {
            n_train: 1000,
            n_test: 1000,
            rho,
            noise_var: 0.5,
        }
    }

    pub fn likelihood(&self) -> Option<Likelihood> {
        match self {
            DataSpec::Synthetic { .. } => Some(Likelihood::Gaussian),
            DataSpec::Shifted { .. } => Some(Likelihood::Multinomial),
            DataSpec::Csv { likelihood, .. } => *likelihood,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub train: DatasetMatrix,
    pub test: DatasetMatrix,
    /// Ground truth behind the test split, for the synthetic benchmark.
    pub test_truth: Option<SyntheticTruth>,
}

pub fn generate(spec: &DataSpec, seed: u64) -> Result<GeneratedData> {
    match spec {
        DataSpec::Synthetic {
            n_train,
            n_test,
            rho,
            noise_var,
        } => {
            let (train, _) = gen_synthetic(*n_train, *rho, *noise_var, &mut stream(seed, Stream::Data))?;
            let (test, truth) = gen_synthetic(*n_test, *rho, *noise_var, &mut stream(seed, Stream::Split))?;
            Ok(GeneratedData {
                train,
                test,
                test_truth: Some(truth),
            })
        }
        DataSpec::Shifted {
            n_docs,
            factors,
            vocab,
            theta_alpha,
            loading_alpha,
            sigma_shift,
            doc_len,
        } => {
            let mut rng = stream(seed, Stream::Data);
            let theta = dirichlet_rows(*n_docs, *factors, *theta_alpha, &mut rng)?;
            let loadings = dirichlet_rows(*factors, *vocab, *loading_alpha, &mut rng)?;
            let split = gen_shifted_split(&theta, &loadings, *sigma_shift, *doc_len, &mut rng)?;
            Ok(GeneratedData {
                train: split.train,
                test: split.test,
                test_truth: None,
            })
        }
        DataSpec::Csv {
            train,
            test,
            likelihood,
        } => Ok(GeneratedData {
            train: load_dataset(train, *likelihood)?,
            test: load_dataset(test, *likelihood)?,
            test_truth: None,
        }),
    }
}

fn default_nll_samples() -> usize {
    NLL_SAMPLES
}

fn default_tau() -> f64 {
    SUPPORT_TAU
}

/// A multi-seed train-and-evaluate experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub data: DataSpec,
    /// The seed inside is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// For `beta_vae`: candidate KL weights, chosen by validation NLL.
    #[serde(default)]
    pub beta_grid: Vec<f64>,
    #[serde(default = "default_nll_samples")]
    pub nll_samples: usize,
    #[serde(default = "default_tau")]
    pub support_tau: f64,
}

impl ExperimentSpec {
    pub fn new(data: DataSpec, train: TrainConfig, seeds: Vec<u64>) -> Self {
        Self {
            data,
            train,
            seeds,
            beta_grid: Vec::new(),
            nll_samples: NLL_SAMPLES,
            support_tau: SUPPORT_TAU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds".into()));
        }
        if let Some(l) = self.data.likelihood() {
            if l != self.train.likelihood {
                return Err(Error::Config(format!(
                    "data is {l:?} but the training config asks for {:?}",
                    self.train.likelihood
                )));
            }
        }
        if !self.beta_grid.is_empty() && self.train.mode != Mode::BetaVae {
            return Err(Error::Config("a beta grid needs beta_vae mode".into()));
        }
        self.train.validate()
    }
}

/// Everything one seed of an experiment produced.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub data: GeneratedData,
    pub config: TrainConfig,
    pub model: SparseDgmModel,
    pub trace: TrainTrace,
    pub metrics: MetricsReport,
}

/// Fraction of training rows held out for choosing beta.
const VALIDATION_FRACTION: f64 = 0.1;

/// Trains one beta per grid entry on 90% of the rows and keeps the one with the
/// lowest NLL on the rest.
pub fn select_beta(data: &DatasetMatrix, config: &TrainConfig, grid: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = data.num_rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(config.seed, Stream::Split));
    let n_val = ((n as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, n - 1);
    let (val_rows, fit_rows) = order.split_at(n_val);
    let fit = data.select_rows(fit_rows);
    let val = data.select_rows(val_rows);
    let mut scores = Vec::with_capacity(grid.len());
    for &beta in grid {
        let cfg = TrainConfig { beta, ..config.clone() };
        let (model, _) = train(&fit, &cfg)?;
        scores.push(heldout_nll(&model, &val.values, NLL_SAMPLES, &mut stream(config.seed, Stream::Eval))?.mean);
    }
    let best = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| grid[i])
        .ok_or_else(|| Error::Config("empty beta grid".into()))?;
    Ok((best, scores))
}

/// Generates data, trains and evaluates one seed without touching the disk.
pub fn run_seed(spec: &ExperimentSpec, seed: u64) -> Result<SeedOutcome> {
    let data = generate(&spec.data, seed)?;
    let mut config = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    if config.ssl.is_none() && config.mode == Mode::Sparse {
        config.ssl = Some(SslHyper::defaults_for(data.train.num_features()));
    }
    if !spec.beta_grid.is_empty() {
        config.beta = select_beta(&data.train, &config, &spec.beta_grid)?.0;
    }
    let (model, trace) = train(&data.train, &config)?;
    let metrics = evaluate(&model, &data.test, data.test_truth.as_ref(), seed, spec)?;
    Ok(SeedOutcome {
        seed,
        data,
        config,
        model,
        trace,
        metrics,
    })
}

/// Metrics of a trained model on test data.
pub fn evaluate(
    model: &SparseDgmModel,
    test: &DatasetMatrix,
    truth: Option<&SyntheticTruth>,
    seed: u64,
    spec: &ExperimentSpec,
) -> Result<MetricsReport> {
    let mut eval_rng = stream(seed, Stream::Eval);
    let mut report = MetricsReport {
        heldout_nll: Some(heldout_nll(model, &test.values, spec.nll_samples, &mut eval_rng)?),
        ..MetricsReport::default()
    };
    if !model.selector_frozen {
        report.active_factors = Some(active_columns(&model.selector, spec.support_tau).len());
    }
    match model.likelihood {
        Likelihood::Gaussian => report.mse = Some(mse(model, &test.values)?),
        Likelihood::Multinomial => {
            let (recall, ndcg) = ranking_metrics(model, &test.values, &mut eval_rng)?;
            report.recall_at_5 = Some(recall);
            report.ndcg_at_10 = Some(ndcg);
        }
    }
    if let Some(truth) = truth {
        let z_est = model.encode_batch(&test.values)?.mu;
        report.dci = Some(dci_disentanglement(&truth.z, &z_est)?);
        if !model.selector_frozen {
            report.support_fscore = Some(support_fscore(&model.selector, &truth.support, spec.support_tau)?);
        }
    }
    Ok(report)
}

/// Fraction of each row's observed items hidden for the ranking metrics.
pub const RANKING_HOLDOUT: f64 = 0.2;

/// Mean Recall@5 and NDCG@10 over rows with at least two observed items.
///
/// For each row a random fifth of its observed items is hidden, the rest is
/// encoded, and all items not in the rest are ranked by decoder output at the
/// posterior mean.
pub fn ranking_metrics<R: Rng + ?Sized>(model: &SparseDgmModel, x: &Array2<f64>, rng: &mut R) -> Result<(f64, f64)> {
    let mut fold_in = x.clone();
    let mut held: Vec<Vec<usize>> = Vec::with_capacity(x.nrows());
    for mut row in fold_in.rows_mut() {
        let mut items: Vec<usize> = (0..row.len()).filter(|j| row[*j] > 0.0).collect();
        if items.len() < 2 {
            held.push(Vec::new());
            continue;
        }
        items.shuffle(rng);
        let h = ((items.len() as f64 * RANKING_HOLDOUT).ceil() as usize).min(items.len() - 1);
        for j in &items[..h] {
            row[*j] = 0.0;
        }
        held.push(items[..h].to_vec());
    }
    let mu = model.encode_batch(&fold_in)?.mu;
    let scores = model.decode_batch(&mu)?.output;
    let (mut recall, mut ndcg, mut rows) = (0.0, 0.0, 0usize);
    for ((s, seen), h) in scores.rows().into_iter().zip(fold_in.rows()).zip(&held) {
        if h.is_empty() {
            continue;
        }
        let ranked: Vec<f64> = s
            .iter()
            .zip(seen.iter())
            .map(|(v, c)| if *c > 0.0 { f64::NEG_INFINITY } else { *v })
            .collect();
        recall += recall_at_k(&ranked, h, 5)?;
        ndcg += ndcg_at_k(&ranked, h, 10)?;
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Degenerate("no row has two observed items".into()));
    }
    Ok((recall / rows as f64, ndcg / rows as f64))
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

/// Per-metric summaries over the seeds that report the metric.
pub fn aggregate(reports: &[MetricsReport]) -> BTreeMap<String, Summary> {
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        let mut push = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                columns.entry(name.to_owned()).or_default().push(v);
            }
        };
        push("heldout_nll", r.heldout_nll.map(|e| e.mean));
        push("mse", r.mse);
        push("dci", r.dci);
        push("support_fscore", r.support_fscore);
        push("recall_at_5", r.recall_at_5);
        push("ndcg_at_10", r.ndcg_at_10);
        push("active_factors", r.active_factors.map(|a| a as f64));
    }
    columns
        .into_iter()
        .filter_map(|(k, v)| Summary::of(&v).map(|s| (k, s)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed { error: String },
}

/// Written next to every command's artifacts; enough to re-run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub code_version: String,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    #[serde(flatten)]
    pub status: RunStatus,
}

impl Manifest {
    pub fn new<T: Serialize>(command: &str, seeds: &[u64], config: &T) -> Result<Self> {
        Ok(Self {
            command: command.to_owned(),
            code_version: CODE_VERSION.to_owned(),
            seeds: seeds.to_vec(),
            config: serde_json::to_value(config)?,
            status: RunStatus::Running,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    /// Selected KL weight for beta_vae runs.
    pub beta: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub seeds: Vec<SeedRecord>,
    pub summary: BTreeMap<String, Summary>,
}

/// Runs every seed, writing per-seed artifacts under `out/seed-<s>/` and the
/// aggregate report at `out/aggregate.json`.
///
/// On failure the manifest records the error and the artifacts written so far stay.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<AggregateReport> {
    std::fs::create_dir_all(out)?;
    let mut manifest = Manifest::new("sweep", &spec.seeds, spec)?;
    manifest.write(out)?;
    let result = spec.validate().and_then(|_| run_seeds(spec, out));
    match &result {
        Ok(_) => manifest.status = RunStatus::Succeeded,
        Err(e) => {
            manifest.status = RunStatus::Failed { error: e.to_string() }
        }
    }
    manifest.write(out)?;
    result
}

fn run_seeds(spec: &ExperimentSpec, out: &Path) -> Result<AggregateReport> {
    let mut seeds = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let dir = out.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir)?;
        let o = run_seed(spec, seed)?;
        write_seed_artifacts(&dir, &o)?;
        seeds.push(SeedRecord {
            seed,
            beta: o.config.effective_beta(),
            metrics: o.metrics,
        });
    }
    let summary = aggregate(&seeds.iter().map(|s| s.metrics.clone()).collect::<Vec<_>>());
    let report = AggregateReport { seeds, summary };
    write_json(&out.join(AGGREGATE_FILE), &report)?;
    Ok(report)
}

pub fn write_seed_artifacts(dir: &Path, o: &SeedOutcome) -> Result<()> {
    save_dataset(&dir.join("train.csv"), &o.data.train)?;
    save_dataset(&dir.join("test.csv"), &o.data.test)?;
    if let Some(t) = &o.data.test_truth {
        write_json(&dir.join("test_truth.json"), t)?;
    }
    save_checkpoint(&dir.join("checkpoint.json"), &o.model, &o.config)?;
    write_trace(&dir.join("trace.jsonl"), &o.trace)?;
    write_json(&dir.join("metrics.json"), &o.metrics)
}

/// Features with the largest selector weights for one factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub factor: usize,
    pub features: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicTable {
    pub topics: Vec<Topic>,
}

pub const DEFAULT_TOP_M: usize = 4;

/// Top-`m` features by `|w_jk|` for every factor whose largest weight exceeds
/// `tau` times the largest weight in `W`.
pub fn topic_table(w: &Array2<f64>, names: &[String], m: usize, tau: f64) -> Result<TopicTable> {
    if names.len() != w.nrows() {
        return Err(Error::Shape(format!("{} names for {} features", names.len(), w.nrows())));
    }
    let max = w.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut topics = Vec::new();
    for (k, col) in w.axis_iter(Axis(1)).enumerate() {
        let peak = col.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if max == 0.0 || peak <= tau * max {
            continue;
        }
        let mut idx: Vec<usize> = (0..col.len()).collect();
        idx.sort_by(|a, b| col[*b].abs().total_cmp(&col[*a].abs()).then(a.cmp(b)));
        idx.truncate(m);
        topics.push(Topic {
            factor: k,
            features: idx.iter().map(|j| names[*j].clone()).collect(),
            weights: idx.iter().map(|j| col[*j]).collect(),
        });
    }
    Ok(TopicTable { topics })
}

/// Finite-difference step and tolerance of [`gradcheck`].
pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub case: String,
    pub seed: u64,
    pub worst_rel_err: f64,
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub passed: bool,
}

/// Variants exercised by [`gradcheck`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCase {
    Sparse,
    Vae,
    BetaVae,
    Multinomial,
    CorrelatedPrior,
}

impl GradCase {
    pub const ALL: [GradCase; 5] = [
        GradCase::Sparse,
        GradCase::Vae,
        GradCase::BetaVae,
        GradCase::Multinomial,
        GradCase::CorrelatedPrior,
    ];

    fn name(self) -> &'static str {
        match self {
            GradCase::Sparse => "sparse",
            GradCase::Vae => "vae",
            GradCase::BetaVae => "beta_vae",
            GradCase::Multinomial => "sparse_multinomial",
            GradCase::CorrelatedPrior => "sparse_correlated_prior",
        }
    }
}

/// A 4-row, 3-feature, 2-factor problem with one hidden layer and every
/// parameter moved away from its initial value.
pub fn tiny_instance(case: GradCase, seed: u64) -> Result<(SparseDgmModel, Array2<f64>, Array2<f64>, ObjectiveSpec)> {
    let mode = match case {
        GradCase::Vae => Mode::Vae,
        GradCase::BetaVae => Mode::BetaVae,
        _ => Mode::Sparse,
    };
    let likelihood = if case == GradCase::Multinomial {
        Likelihood::Multinomial
    } else {
        Likelihood::Gaussian
    };
    let mut rng = stream(seed, Stream::Data);
    let mut values = normal_matrix(&mut rng, 4, 3);
    if likelihood == Likelihood::Multinomial {
        values.mapv_inplace(|v| (v.abs() * 3.0).round());
    }
    let data = DatasetMatrix::unnamed(values.clone(), likelihood)?;
    let mut config = TrainConfig::synthetic(mode, seed);
    config.latent_dim = 2;
    config.hidden_layers = 1;
    config.hidden_dim = 6;
    config.likelihood = likelihood;
    config.ssl = Some(SslHyper::defaults_for(3));
    config.beta = 3.0;
    if case == GradCase::CorrelatedPrior {
        config.sigma_z = Some(vec![vec![1.5, 0.4], vec![0.4, 0.8]]);
    }
    let mut model = init_model(&data, &config)?;
    let mut prng = stream(seed, Stream::Eval);
    for s in param_slices_mut(&mut model) {
        for v in s.iter_mut() {
            *v += 0.3 * standard_normal(&mut prng);
        }
    }
    if model.selector_frozen {
        model.selector.fill(1.0);
    }
    let w = model.selector.clone();
    let hyper = model.hyper;
    model.ssl.e_step(&w, &hyper)?;
    let eps = normal_matrix(&mut prng, 4, 2);
    let spec = ObjectiveSpec {
        mode,
        beta: config.effective_beta(),
        prior_weight: 0.4,
    };
    Ok((model, values, eps, spec))
}

/// Central finite differences of the minibatch objective against its analytic
/// gradient, over every parameter the case trains.
pub fn gradcheck_case(case: GradCase, seed: u64) -> Result<GradcheckEntry> {
    let (mut model, batch, eps, spec) = tiny_instance(case, seed)?;
    let (_, grads) = elbo_with_noise(&model, &batch, &eps, &spec)?;
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let selector_tensor = analytic.len() - 2;
    let mut worst = 0.0_f64;
    let mut coordinates = 0;
    for (t, g) in analytic.iter().enumerate() {
        if model.selector_frozen && t == selector_tensor {
            if g.iter().any(|v| *v != 0.0) {
                worst = f64::INFINITY;
            }
            continue;
        }
        for (i, &a) in g.iter().enumerate() {
            let orig = param_slices_mut(&mut model)[t][i];
            param_slices_mut(&mut model)[t][i] = orig + FD_STEP;
            let up = elbo_with_noise(&model, &batch, &eps, &spec)?.0.objective;
            param_slices_mut(&mut model)[t][i] = orig - FD_STEP;
            let down = elbo_with_noise(&model, &batch, &eps, &spec)?.0.objective;
            param_slices_mut(&mut model)[t][i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(FD_FLOOR));
            coordinates += 1;
        }
    }
    Ok(GradcheckEntry {
        case: case.name().to_owned(),
        seed,
        worst_rel_err: worst,
        coordinates,
        passed: worst < FD_REL_TOL,
    })
}

pub fn gradcheck(seeds: &[u64]) -> Result<GradcheckReport> {
    let mut entries = Vec::new();
    for &seed in seeds {
        for case in GradCase::ALL {
            entries.push(gradcheck_case(case, seed)?);
        }
    }
    let passed = entries.iter().all(|e| e.passed);
    Ok(GradcheckReport { entries, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn summary_stats() {
        let s = Summary::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.sd, s.n), (2.0, 1.0, 3));
        assert_eq!(Summary::of(&[4.0]).unwrap().sd, 0.0);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn aggregate_skips_missing_metrics() {
        let a = MetricsReport {
            mse: Some(1.0),
            ..Default::default()
        };
        let b = MetricsReport {
            mse: Some(3.0),
            dci: Some(0.5),
            ..Default::default()
        };
        let agg = aggregate(&[a, b]);
        assert_eq!(agg["mse"].mean, 2.0);
        assert_eq!(agg["dci"].n, 1);
        assert!(!agg.contains_key("recall_at_5"));
    }

    #[test]
    fn topics_of_the_true_selector() {
        let w = array![
            [1.0, 0.0, 0.001],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
            [0.0, 4.0, 0.0],
            [0.0, 5.0, 0.0],
            [0.0, 6.0, 0.0],
            [7.0, 7.0, 0.0]
        ];
        let names: Vec<String> = (1..=7).map(|j| format!("x{j}")).collect();
        let t = topic_table(&w, &names, DEFAULT_TOP_M, SUPPORT_TAU).unwrap();
        assert_eq!(t.topics.len(), 2);
        let mut a = t.topics[0].features.clone();
        a.sort();
        assert_eq!(a, vec!["x1", "x2", "x3", "x7"]);
        let mut b = t.topics[1].features.clone();
        b.sort();
        assert_eq!(b, vec!["x4", "x5", "x6", "x7"]);
        assert_eq!(t.topics[1].weights[0], 7.0);
    }

    #[test]
    fn gradcheck_passes_on_one_seed() {
        let r = gradcheck(&[11]).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.entries.len(), GradCase::ALL.len());
    }

    #[test]
    fn spec_validation() {
        let mut s = ExperimentSpec::new(DataSpec::synthetic(0.0), TrainConfig::synthetic(Mode::Sparse, 0), vec![1]);
        assert!(s.validate().is_ok());
        s.train.likelihood = Likelihood::Multinomial;
        assert!(s.validate().is_err());
        let mut s = ExperimentSpec::new(DataSpec::synthetic(0.0), TrainConfig::synthetic(Mode::Vae, 0), vec![]);
        assert!(s.validate().is_err());
        s.seeds = vec![1];
        s.beta_grid = vec![2.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let s = ExperimentSpec::new(
            DataSpec::Shifted {
                n_docs: 10,
                factors: 4,
                vocab: 20,
                theta_alpha: 0.3,
                loading_alpha: 0.1,
                sigma_shift: 1.0,
                doc_len: 50,
            },
            TrainConfig::synthetic(Mode::Sparse, 0),
            vec![1, 2],
        );
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"kind\":\"shifted\""));
        assert_eq!(serde_json::from_str::<ExperimentSpec>(&text).unwrap(), s);
    }
}
