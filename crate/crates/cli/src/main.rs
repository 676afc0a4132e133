use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sparse_dgm::anchors::{detect_anchors_scaled, empirical_cov, PairScale, DEFAULT_DELTA};
use sparse_dgm::dataset::{DatasetMatrix, Likelihood};
use sparse_dgm::experiment::{
    aggregate, evaluate, generate, gradcheck, run_experiment, topic_table, DataSpec, ExperimentSpec, Manifest,
    RunStatus, DEFAULT_TOP_M,
};
use sparse_dgm::io::{load_checkpoint, load_dataset, read_json, save_checkpoint, save_dataset, write_json, write_trace};
use sparse_dgm::metrics::{NLL_SAMPLES, SUPPORT_TAU};
use sparse_dgm::ssl::SslHyper;
use sparse_dgm::train::{train, Mode, TrainConfig};

#[derive(Parser)]
#[command(name = "sdgm", version, about = "Sparse deep generative models")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "SDGM_OUT", default_value = "sdgm-out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file with the command's configuration; flags given explicitly win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic or shifted-count dataset.
    Datagen(DatagenArgs),
    /// Fit a model to a CSV dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a CSV dataset.
    Eval(EvalArgs),
    /// Detect anchor-feature groups in a CSV dataset.
    Anchors(AnchorArgs),
    /// List the top features of every active factor.
    Topics(TopicArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run a multi-seed generate-train-evaluate experiment.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct DatagenArgs {
    /// `synthetic` or `shifted`.
    #[arg(long, default_value = "synthetic")]
    kind: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    #[arg(long, default_value_t = 0.5)]
    noise_var: f64,
    #[arg(long, default_value_t = 10)]
    factors: usize,
    #[arg(long, default_value_t = 100)]
    vocab: usize,
    #[arg(long, default_value_t = 0.3)]
    theta_alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    loading_alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_shift: f64,
    #[arg(long, default_value_t = 100)]
    doc_len: usize,
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    /// `sparse`, `vae` or `beta_vae`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    hidden_layers: Option<usize>,
    #[arg(long)]
    layer_dim: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `gaussian` or `multinomial`.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    /// `per_batch` or `per_epoch`.
    #[arg(long)]
    prior_scaling: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Truth sidecar written by `datagen`, for DCI and support recovery.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = NLL_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = SUPPORT_TAU)]
    tau: f64,
}

#[derive(Args)]
struct AnchorArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// Compare correlations instead of covariances.
    #[arg(long)]
    correlation: bool,
}

#[derive(Args)]
struct TopicArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV whose header supplies feature names.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOP_M)]
    top: usize,
    #[arg(long, default_value_t = SUPPORT_TAU)]
    tau: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated seeds; defaults to five seeds starting at `--seed`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Correlation of the synthetic factors, when no config is given.
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    /// Comma-separated KL weights to choose from (beta_vae).
    #[arg(long, value_delimiter = ',')]
    beta_grid: Vec<f64>,
    #[command(flatten)]
    model: ModelFlags,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match &cli.command {
        Command::Datagen(a) => datagen(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Anchors(a) => anchors_cmd(cli, a),
        Command::Topics(a) => topics_cmd(cli, a),
        Command::Gradcheck(a) => gradcheck_cmd(cli, a),
        Command::Sweep(a) => sweep_cmd(cli, a),
    }
}

/// Writes a running manifest, runs `body`, then records how it ended.
fn with_manifest<C: Serialize, T>(
    cli: &Cli,
    command: &str,
    seeds: &[u64],
    config: &C,
    body: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let mut manifest = Manifest::new(command, seeds, config)?;
    manifest.write(&cli.out)?;
    let result = body();
    manifest.status = match &result {
        Ok(_) => RunStatus::Succeeded,
        Err(e) => RunStatus::Failed { error: format!("{e:#}") },
    };
    manifest.write(&cli.out)?;
    result
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn datagen(cli: &Cli, a: &DatagenArgs) -> Result<ExitCode> {
    let spec: DataSpec = match &cli.config {
        Some(p) => read_json(p)?,
        None => match a.kind.as_str() {
            "synthetic" => DataSpec::Synthetic {
                n_train: a.n,
                n_test: a.n_test,
                rho: a.rho,
                noise_var: a.noise_var,
            },
            "shifted" => DataSpec::Shifted {
                n_docs: a.n,
                factors: a.factors,
                vocab: a.vocab,
                theta_alpha: a.theta_alpha,
                loading_alpha: a.loading_alpha,
                sigma_shift: a.sigma_shift,
                doc_len: a.doc_len,
            },
            other => bail!("unknown dataset kind {other:?}"),
        },
    };
    with_manifest(cli, "datagen", &[cli.seed], &spec, || {
        let data = generate(&spec, cli.seed)?;
        save_dataset(&cli.out.join("train.csv"), &data.train)?;
        save_dataset(&cli.out.join("test.csv"), &data.test)?;
        if let Some(t) = &data.test_truth {
            write_json(&cli.out.join("test_truth.json"), t)?;
        }
        Ok(ExitCode::SUCCESS)
    })
}

fn parse_likelihood(s: &str) -> Result<Likelihood> {
    match s {
        "gaussian" => Ok(Likelihood::Gaussian),
        "multinomial" => Ok(Likelihood::Multinomial),
        other => bail!("unknown loss {other:?}"),
    }
}

/// Defaults, then the config file, then explicit flags.
fn resolve_config(cli: &Cli, flags: &ModelFlags, data: Option<&DatasetMatrix>) -> Result<TrainConfig> {
    let mode: Option<Mode> = flags.mode.as_deref().map(str::parse).transpose()?;
    let mut cfg = match &cli.config {
        Some(p) => read_json::<TrainConfig>(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let mut c = TrainConfig::synthetic(mode.unwrap_or(Mode::Sparse), cli.seed);
            if let Some(d) = data {
                c.likelihood = d.likelihood;
                c.ssl = c.ssl.map(|_| SslHyper::defaults_for(d.num_features()));
            }
            c
        }
    };
    cfg.seed = cli.seed;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    if cfg.mode == Mode::Sparse && cfg.ssl.is_none() {
        let g = data.map_or(7, DatasetMatrix::num_features);
        cfg.ssl = Some(SslHyper::defaults_for(g));
    }
    if cfg.mode != Mode::Sparse {
        cfg.ssl = None;
    }
    macro_rules! set {
        ($flag:ident => $field:ident) => {
            if let Some(v) = flags.$flag {
                cfg.$field = v;
            }
        };
    }
    set!(beta => beta);
    set!(hidden_layers => hidden_layers);
    set!(layer_dim => hidden_dim);
    set!(latent_dim => latent_dim);
    set!(lr => lr);
    set!(epochs => epochs);
    set!(batch_size => batch_size);
    if let Some(l) = &flags.loss {
        cfg.likelihood = parse_likelihood(l)?;
    }
    if let Some(p) = &flags.prior_scaling {
        cfg.prior_scaling = p.parse()?;
    }
    if let Some(ssl) = cfg.ssl.as_mut() {
        if let Some(v) = flags.lambda0 {
            ssl.lambda0 = v;
        }
        if let Some(v) = flags.lambda1 {
            ssl.lambda1 = v;
        }
    } else if flags.lambda0.is_some() || flags.lambda1.is_some() {
        bail!("lambda0/lambda1 only apply to sparse mode");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<ExitCode> {
    let loss = a.model.loss.as_deref().map(parse_likelihood).transpose()?;
    let data = load_dataset(&a.data, loss).with_context(|| format!("reading {}", a.data.display()))?;
    let cfg = resolve_config(cli, &a.model, Some(&data))?;
    with_manifest(cli, "train", &[cli.seed], &cfg, || {
        let (model, trace) = train(&data, &cfg)?;
        save_checkpoint(&cli.out.join("checkpoint.json"), &model, &cfg)?;
        write_trace(&cli.out.join("trace.jsonl"), &trace)?;
        if let Some(last) = trace.records.last() {
            eprintln!("epoch {} elbo {:.6}", last.epoch, last.elbo);
        }
        Ok(ExitCode::SUCCESS)
    })
}

#[derive(Serialize)]
struct EvalConfig<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    truth: Option<&'a Path>,
    samples: usize,
    tau: f64,
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<ExitCode> {
    let echo = EvalConfig {
        checkpoint: &a.checkpoint,
        data: &a.data,
        truth: a.truth.as_deref(),
        samples: a.samples,
        tau: a.tau,
    };
    with_manifest(cli, "eval", &[cli.seed], &echo, || {
        let ckpt = load_checkpoint(&a.checkpoint)?;
        let data = load_dataset(&a.data, Some(ckpt.model.likelihood))?;
        let truth = a.truth.as_deref().map(read_json).transpose()?;
        let mut spec = ExperimentSpec::new(DataSpec::synthetic(0.0), ckpt.config.clone(), vec![cli.seed]);
        spec.nll_samples = a.samples;
        spec.support_tau = a.tau;
        let report = evaluate(&ckpt.model, &data, truth.as_ref(), cli.seed, &spec)?;
        write_json(&cli.out.join("metrics.json"), &report)?;
        print_json(&report)?;
        Ok(ExitCode::SUCCESS)
    })
}

#[derive(Serialize)]
struct AnchorConfig<'a> {
    data: &'a Path,
    delta: f64,
    scale: PairScale,
}

fn anchors_cmd(cli: &Cli, a: &AnchorArgs) -> Result<ExitCode> {
    let echo = AnchorConfig {
        data: &a.data,
        delta: a.delta,
        scale: if a.correlation {
            PairScale::Correlation
        } else {
            PairScale::Covariance
        },
    };
    with_manifest(cli, "anchors", &[cli.seed], &echo, || {
        let data = load_dataset(&a.data, None)?;
        let cov = empirical_cov(&data.values)?;
        let report = detect_anchors_scaled(&cov, a.delta, echo.scale)?;
        write_json(&cli.out.join("anchors.json"), &report)?;
        for (group, amb) in report.groups.iter().zip(&report.ambiguous) {
            let names: Vec<&str> = group.iter().map(|j| data.feature_names[*j].as_str()).collect();
            println!("{}{}", names.join(","), if *amb { "  (ambiguous)" } else { "" });
        }
        Ok(ExitCode::SUCCESS)
    })
}

#[derive(Serialize)]
struct TopicConfig<'a> {
    checkpoint: &'a Path,
    data: Option<&'a Path>,
    top: usize,
    tau: f64,
}

fn topics_cmd(cli: &Cli, a: &TopicArgs) -> Result<ExitCode> {
    let echo = TopicConfig {
        checkpoint: &a.checkpoint,
        data: a.data.as_deref(),
        top: a.top,
        tau: a.tau,
    };
    with_manifest(cli, "topics", &[cli.seed], &echo, || {
        let ckpt = load_checkpoint(&a.checkpoint)?;
        let names = match &a.data {
            Some(p) => load_dataset(p, Some(ckpt.model.likelihood))?.feature_names,
            None => (1..=ckpt.model.num_features()).map(|j| format!("x{j}")).collect(),
        };
        let table = topic_table(&ckpt.model.selector, &names, a.top, a.tau)?;
        write_json(&cli.out.join("topics.json"), &table)?;
        for t in &table.topics {
            println!("factor {}: {}", t.factor, t.features.join(", "));
        }
        Ok(ExitCode::SUCCESS)
    })
}

fn gradcheck_cmd(cli: &Cli, a: &GradcheckArgs) -> Result<ExitCode> {
    let seeds: Vec<u64> = (cli.seed..cli.seed + a.seeds).collect();
    let passed = with_manifest(cli, "gradcheck", &seeds, &seeds, || {
        let report = gradcheck(&seeds)?;
        write_json(&cli.out.join("gradcheck.json"), &report)?;
        for e in &report.entries {
            println!(
                "{} {} seed {} worst relative error {:.3e} over {} coordinates",
                if e.passed { "PASS" } else { "FAIL" },
                e.case,
                e.seed,
                e.worst_rel_err,
                e.coordinates
            );
        }
        Ok(report.passed)
    })?;
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn sweep_cmd(cli: &Cli, a: &SweepArgs) -> Result<ExitCode> {
    let mut spec: ExperimentSpec = match &cli.config {
        Some(p) => read_json(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let train = resolve_config(cli, &a.model, None)?;
            ExperimentSpec::new(DataSpec::synthetic(a.rho), train, Vec::new())
        }
    };
    if !a.seeds.is_empty() {
        spec.seeds = a.seeds.clone();
    } else if spec.seeds.is_empty() {
        spec.seeds = (cli.seed..cli.seed + 5).collect();
    }
    if !a.beta_grid.is_empty() {
        spec.beta_grid = a.beta_grid.clone();
    }
    let report = run_experiment(&spec, &cli.out)?;
    debug_assert_eq!(aggregate(&report.seeds.iter().map(|s| s.metrics.clone()).collect::<Vec<_>>()), report.summary);
    print_json(&report.summary)?;
    Ok(ExitCode::SUCCESS)
}
