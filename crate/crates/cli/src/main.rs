//! Experiment runner: synthetic data generation, label corruption,
//! self-paced / baseline training, retrieval evaluation, and hyperparameter
//! sweeps. Every subcommand is deterministic given its flags and seeds.
//!
//! Exit status: 0 success, 1 runtime or I/O error, 2 usage error.

mod config;
mod report;

use bspml_core::data::{
    generate_synthetic, inject_label_noise, load_dataset, save_dataset, Dataset, NoiseMask,
    SyntheticSpec,
};
use bspml_core::driver::{
    bspml_train, ms_baseline_train_traced, AgeSchedule, ConvergenceTrace, TrainConfig,
    DEFAULT_W_STEPS_PER_SAMPLE,
};
use bspml_core::embed::{Activation, EmbeddingModel};
use bspml_core::msloss::MsHyperParams;
use bspml_core::{derive_seed, Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use config::{resolve, FileConfig};
use report::{Metrics, RunReport};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "bspml",
    version,
    about = "Balanced self-paced metric learning experiment runner"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic Gaussian-cluster dataset CSV.
    Generate(GenerateArgs),
    /// Inject per-class label noise into a dataset CSV.
    Corrupt(CorruptArgs),
    /// Train an embedding (self-paced or plain baseline) and write a run
    /// directory with report, traces, and checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset: Recall@K and NMI.
    Eval(EvalArgs),
    /// Sweep mu or lambda-max and emit a plot-ready CSV of weight stats.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long = "per-class", default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 8.0)]
    sep: f64,
    #[arg(long, default_value_t = 1.0)]
    sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mask: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Bspml,
    Ms,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Bspml => write!(f, "bspml"),
            Mode::Ms => write!(f, "ms"),
        }
    }
}

/// Training flags; unset values fall back to the config file (`--config`),
/// then to built-in defaults.
#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Mode::Bspml)]
    mode: Mode,

    /// Dataset CSV; mutually exclusive with the synthetic flags.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Noise mask CSV for the weight-separation metric.
    #[arg(long)]
    mask: Option<PathBuf>,

    /// Synthetic-data mode: class count (presence selects this mode).
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long = "per-class")]
    per_class: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    sep: Option<f64>,
    #[arg(long)]
    sd: Option<f64>,
    /// Label-noise ratio applied to synthetic data.
    #[arg(long)]
    noise: Option<f64>,

    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value config file; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    mult: Option<f64>,
    #[arg(long = "lambda-max")]
    lambda_max: Option<f64>,
    /// Balance coefficient; defaults to lambda-max.
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    outer: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "w-steps")]
    w_steps: Option<usize>,
    #[arg(long = "hidden-dim")]
    hidden_dim: Option<usize>,
    #[arg(long = "embed-dim")]
    embed_dim: Option<usize>,
    #[arg(long)]
    activation: Option<String>,
    /// Ks for the report's Recall@K (comma separated).
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Weight-solver trace stride (rows in weights.csv).
    #[arg(long = "trace-stride")]
    trace_stride: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    Mu,
    LambdaMax,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Grid values (comma separated).
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::Corrupt(args) => cmd_corrupt(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                // invalid settings are usage errors; everything else is a
                // runtime failure
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let spec = SyntheticSpec {
        classes: args.classes,
        per_class: args.per_class,
        dim: args.dim,
        separation: args.sep,
        std_dev: args.sd,
    };
    let ds = generate_synthetic(&spec, args.seed)?;
    save_dataset(&ds, &args.out)?;
    println!(
        "wrote {} samples x {} features to {}",
        ds.len(),
        ds.dim(),
        args.out.display()
    );
    Ok(())
}

fn cmd_corrupt(args: CorruptArgs) -> Result<()> {
    let (ds, _) = load_dataset(&args.input)?;
    let (noisy, mask) = inject_label_noise(&ds, args.ratio, args.seed)?;
    save_dataset(&noisy, &args.out)?;
    mask.save(&args.mask)?;
    println!(
        "flipped {} of {} labels; dataset -> {}, mask -> {}",
        mask.len(),
        noisy.len(),
        args.out.display(),
        args.mask.display()
    );
    Ok(())
}

/// Everything a training run needs, resolved from flags + config file.
struct ResolvedRun {
    mode: Mode,
    cfg: TrainConfig,
    dataset: Dataset,
    mask: Option<NoiseMask>,
    source: serde_json::Value,
    eval_ks: Vec<usize>,
}

fn resolve_run(args: &TrainArgs) -> Result<ResolvedRun> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };

    let seed = resolve(args.seed, &file, "seed", 0)?;
    let defaults = TrainConfig::default();
    let ms = MsHyperParams {
        alpha: resolve(args.alpha, &file, "alpha", defaults.ms.alpha)?,
        beta: resolve(args.beta, &file, "beta", defaults.ms.beta)?,
        rho: resolve(args.rho, &file, "rho", defaults.ms.rho)?,
        eps: resolve(args.eps, &file, "eps", defaults.ms.eps)?,
    };
    let age = AgeSchedule {
        lambda0: resolve(args.lambda0, &file, "lambda0", defaults.age.lambda0)?,
        multiplier: resolve(args.mult, &file, "mult", defaults.age.multiplier)?,
        lambda_max: resolve(
            args.lambda_max,
            &file,
            "lambda-max",
            defaults.age.lambda_max,
        )?,
    };
    let mu = resolve(args.mu, &file, "mu", age.lambda_max)?;
    let activation: Activation = resolve(
        args.activation.clone(),
        &file,
        "activation",
        defaults.activation.to_string(),
    )?
    .parse()?;
    let cfg = TrainConfig {
        outer_iters: resolve(args.outer, &file, "outer", defaults.outer_iters)?,
        theta_epochs: resolve(args.epochs, &file, "epochs", defaults.theta_epochs)?,
        w_steps: resolve(args.w_steps, &file, "w-steps", defaults.w_steps)?,
        batch_classes: resolve(args.p, &file, "p", defaults.batch_classes)?,
        batch_samples: resolve(args.k, &file, "k", defaults.batch_samples)?,
        learning_rate: resolve(args.lr, &file, "lr", defaults.learning_rate)?,
        hidden_dim: resolve(args.hidden_dim, &file, "hidden-dim", defaults.hidden_dim)?,
        embed_dim: resolve(args.embed_dim, &file, "embed-dim", defaults.embed_dim)?,
        activation,
        ms,
        mu,
        age,
        w_plan: defaults.w_plan,
        w_horizon: 0.0,
        trace_stride: 0,
        seed,
    };
    // usage errors fire before any data loading or computation
    cfg.validate()?;
    let trace_stride: Option<usize> = match args.trace_stride {
        Some(s) => Some(s),
        None => file.get("trace-stride")?,
    };

    let data_path: Option<PathBuf> = match &args.data {
        Some(p) => Some(p.clone()),
        None => file.get::<PathBuf>("data")?,
    };
    let synthetic_classes: Option<usize> = match args.classes {
        Some(c) => Some(c),
        None => file.get("classes")?,
    };
    let (dataset, mask, source) = match (&data_path, synthetic_classes) {
        (Some(_), Some(_)) => {
            return Err(Error::config(
                "--data and synthetic --classes are mutually exclusive",
            ));
        }
        (None, None) => {
            return Err(Error::config(
                "provide exactly one data source: --data FILE or synthetic --classes N",
            ));
        }
        (Some(path), None) => {
            let (ds, label_map) = load_dataset(path)?;
            let mask = match &args.mask {
                Some(mpath) => Some(NoiseMask::load(mpath)?),
                None => None,
            };
            let source = serde_json::json!({
                "data": path.display().to_string(),
                "mask": args.mask.as_ref().map(|m| m.display().to_string()),
                "label_map": label_map.original,
            });
            (ds, mask, source)
        }
        (None, Some(classes)) => {
            let spec = SyntheticSpec {
                classes,
                per_class: resolve(args.per_class, &file, "per-class", 50)?,
                dim: resolve(args.dim, &file, "dim", 2)?,
                separation: resolve(args.sep, &file, "sep", 8.0)?,
                std_dev: resolve(args.sd, &file, "sd", 1.0)?,
            };
            let noise = resolve(args.noise, &file, "noise", 0.0)?;
            let clean = generate_synthetic(&spec, derive_seed(seed, 10))?;
            let (ds, mask) = if noise > 0.0 {
                let (noisy, mask) = inject_label_noise(&clean, noise, derive_seed(seed, 11))?;
                (noisy, Some(mask))
            } else {
                (clean, None)
            };
            let source = serde_json::json!({
                "synthetic": spec,
                "noise_ratio": noise,
            });
            (ds, mask, source)
        }
    };

    let eval_ks = match &args.ks {
        Some(ks) => ks.clone(),
        None => match file.get::<String>("ks")? {
            Some(raw) => raw
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::config(format!("bad K value `{t}`")))
                })
                .collect::<Result<_>>()?,
            None => vec![1, 2, 4, 8],
        },
    };

    // default: one weight-trace row per alternation
    let mut cfg = cfg;
    cfg.trace_stride = trace_stride.unwrap_or_else(|| {
        if cfg.w_steps > 0 {
            cfg.w_steps
        } else {
            DEFAULT_W_STEPS_PER_SAMPLE * dataset.len()
        }
    });

    Ok(ResolvedRun {
        mode: args.mode,
        cfg,
        dataset,
        mask,
        source,
        eval_ks,
    })
}

struct RunArtifacts {
    model: EmbeddingModel,
    trace: ConvergenceTrace,
    metrics: Metrics,
    null_reasons: BTreeMap<String, String>,
    weight_trace_csv: Option<String>,
    aborted: Option<String>,
}

fn execute_run(run: &ResolvedRun) -> Result<RunArtifacts> {
    let mut null_reasons = BTreeMap::new();
    let (model, trace, weights, weight_trace_csv, aborted) = match run.mode {
        Mode::Bspml => {
            let out = bspml_train(&run.dataset, &run.cfg)?;
            (
                out.model,
                out.trace,
                Some(out.weights),
                Some(out.weight_trace.to_csv()),
                out.aborted,
            )
        }
        Mode::Ms => {
            let (model, trace) = ms_baseline_train_traced(&run.dataset, &run.cfg)?;
            (model, trace, None, None, None)
        }
    };

    let embeddings = model.forward_batch(run.dataset.features())?;
    let mut recall = BTreeMap::new();
    let n = run.dataset.len();
    let valid_ks: Vec<usize> = run
        .eval_ks
        .iter()
        .copied()
        .filter(|&k| k > 0 && k < n)
        .collect();
    for &skipped in run.eval_ks.iter().filter(|&&k| k == 0 || k >= n) {
        null_reasons.insert(
            format!("recall.{skipped}"),
            format!("K={skipped} outside the valid range [1, {n})"),
        );
    }
    let values = bspml_core::eval::recall_at_k(embeddings.view(), run.dataset.labels(), &valid_ks)?;
    for (k, v) in valid_ks.iter().zip(values) {
        recall.insert(k.to_string(), v);
    }
    let nmi = bspml_core::eval::nmi(
        embeddings.view(),
        run.dataset.labels(),
        run.dataset.n_classes(),
        derive_seed(run.cfg.seed, 3),
    )?;

    let (maw, sdaw, weight_gap) = match &weights {
        Some(state) => {
            let stats = bspml_core::eval::weight_stats(state);
            let gap = match &run.mask {
                Some(mask) if !mask.is_empty() => {
                    Some(bspml_core::eval::weight_separation(state, mask)?.gap)
                }
                Some(_) => {
                    null_reasons.insert(
                        "weight_gap".into(),
                        "noise mask is empty (no flipped samples)".into(),
                    );
                    None
                }
                None => {
                    null_reasons.insert(
                        "weight_gap".into(),
                        "no noise mask available for this run".into(),
                    );
                    None
                }
            };
            (Some(stats.maw), Some(stats.sdaw), gap)
        }
        None => {
            for key in ["maw", "sdaw", "weight_gap"] {
                null_reasons.insert(
                    key.into(),
                    "mode=ms trains with unit weights and keeps no weight state".into(),
                );
            }
            (None, None, None)
        }
    };

    Ok(RunArtifacts {
        model,
        trace,
        metrics: Metrics {
            recall,
            nmi: Some(nmi),
            maw,
            sdaw,
            weight_gap,
        },
        null_reasons,
        weight_trace_csv,
        aborted,
    })
}

fn config_echo(run: &ResolvedRun) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "mode": run.mode.to_string(),
        "source": run.source,
        "eval_ks": run.eval_ks,
        "train": serde_json::to_value(&run.cfg)
            .map_err(|e| Error::config(format!("config echo: {e}")))?,
    }))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let started = std::time::Instant::now();
    let run = resolve_run(&args)?;
    std::fs::create_dir_all(&args.out)?;
    let artifacts = execute_run(&run)?;

    std::fs::write(args.out.join("trace.csv"), artifacts.trace.to_csv())?;
    if let Some(csv) = &artifacts.weight_trace_csv {
        std::fs::write(args.out.join("weights.csv"), csv)?;
    }
    artifacts.model.save(&args.out.join("model.ckpt"))?;

    let report = RunReport {
        config: config_echo(&run)?,
        metrics: artifacts.metrics,
        null_reasons: artifacts.null_reasons,
        trace_file: "trace.csv".into(),
        runtime_sec: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::config(format!("report serialization: {e}")))?;
    std::fs::write(args.out.join("report.json"), json)?;

    if let Some(reason) = artifacts.aborted {
        return Err(Error::numeric(format!(
            "training aborted early ({reason}); partial artifacts written to {}",
            args.out.display()
        )));
    }
    println!("run artifacts written to {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = EmbeddingModel::load(&args.model)?;
    let (dataset, _) = load_dataset(&args.data)?;
    let embeddings = model.forward_batch(dataset.features())?;
    let recall = bspml_core::eval::recall_at_k(embeddings.view(), dataset.labels(), &args.ks)?;
    let k_clusters = dataset.n_classes();
    let nmi = bspml_core::eval::nmi(embeddings.view(), dataset.labels(), k_clusters, args.seed)?;

    let mut report = serde_json::Map::new();
    for (k, v) in args.ks.iter().zip(recall) {
        report.insert(format!("R@{k}"), serde_json::json!(v));
    }
    report.insert("NMI".into(), serde_json::json!(nmi));
    let json = serde_json::to_string_pretty(&serde_json::Value::Object(report))
        .map_err(|e| Error::config(format!("report serialization: {e}")))?;
    println!("{json}");
    if let Some(out) = &args.out {
        std::fs::write(out, json)?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if args.grid.is_empty() {
        return Err(Error::config("sweep grid must contain at least one value"));
    }
    let run = resolve_run(&args.train)?;
    if run.mode != Mode::Bspml {
        return Err(Error::config("sweeps require --mode bspml"));
    }
    let param_name = match args.param {
        SweepParam::Mu => "mu",
        SweepParam::LambdaMax => "lambda_max",
    };
    let mut csv = format!("{param_name},maw,sdaw\n");
    for &value in &args.grid {
        let mut cfg = run.cfg.clone();
        match args.param {
            SweepParam::Mu => cfg.mu = value,
            SweepParam::LambdaMax => {
                cfg.age.lambda_max = value;
                cfg.age.lambda0 = cfg.age.lambda0.min(value);
            }
        }
        cfg.validate()?;
        let out = bspml_train(&run.dataset, &cfg)?;
        if let Some(reason) = out.aborted {
            return Err(Error::numeric(format!(
                "sweep point {param_name}={value} aborted: {reason}"
            )));
        }
        let stats = bspml_core::eval::weight_stats(&out.weights);
        csv.push_str(&format!("{value},{},{}\n", stats.maw, stats.sdaw));
        log::info!(
            "{param_name}={value}: maw {:.4} sdaw {:.6}",
            stats.maw,
            stats.sdaw
        );
    }
    std::fs::write(&args.train.out, csv)?;
    println!("sweep written to {}", args.train.out.display());
    Ok(())
}
