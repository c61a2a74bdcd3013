mod config;
mod plots;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hfvae::data::{DatasetSpec, FactorDataset};
use hfvae::experiments::{prune_retrain, summarize, sweep, PruneTarget, SweepParam};
use hfvae::metrics::{
    data_mi_per_dim, eastwood_disentanglement, kim_metric, mig, tc_estimate, write_importance_csv, CodeTable,
    ForestConfig, KimConfig, MetricRecord,
};
use hfvae::objective::{TcScope, TermWeights};
use hfvae::training::{train, traverse, write_image_grid, Checkpoint, TrainConfig};
use serde::Serialize;
use serde_json::json;

/// A bad flag, config or input; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "hfvae", version, about = "Train and analyze hierarchically factorized VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Compute metrics for a checkpoint.
    Report(ReportArgs),
    /// Train over a grid of one objective hyperparameter and seeds.
    Sweep(SweepArgs),
    /// Hold out part of the data, retrain, and test generalization to it.
    PruneRetrain(PruneArgs),
    /// Decode sweeps along one latent dimension.
    Traverse(TraverseArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config with dataset/model/objective/optimizer/run sections.
    #[arg(long)]
    config: PathBuf,
    /// Override a config leaf, e.g. `--set run.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Objective preset (vae, beta-vae, info-vae, dip-vae, beta-tcvae, achille, hfvae).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("run.seed={s}"));
        }
        if let Some(p) = &self.preset {
            overrides.push(format!("objective.preset={}", serde_json::to_string(p)?));
            overrides.push("objective.weights=null".into());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if let Some(v) = v {
                overrides.push(format!("objective.{name}={v:?}"));
            }
        }
        Ok(config::load(&self.config, &overrides)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Skip figure generation.
    #[arg(long)]
    no_plots: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON dataset description; defaults to the dataset recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated subset of data-mi, mig, kim, eastwood, tc.
    #[arg(long, default_value = "data-mi,mig,tc")]
    metrics: String,
    #[arg(long)]
    out: PathBuf,
    /// Evaluation batch size; defaults to the training batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    no_plots: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// alpha, beta, gamma or beta-gamma.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long, allow_hyphen_values = true)]
    values: String,
    /// Number of seeds per value, 0..K.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_plots: bool,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Factor predicate selecting the held-out rows, e.g. `shape=cross&scale=large`.
    #[arg(long)]
    factor_predicate: Option<String>,
    /// Factor whose inferred feature is compared (with --factor-predicate).
    #[arg(long)]
    feature: Option<String>,
    /// Full-data checkpoint defining the pruned feature (with --class).
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    class: Option<usize>,
    /// Latent dimension of the reference model used as the feature.
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Rows of the class above this quantile of the feature are held out.
    #[arg(long, default_value_t = 0.8)]
    quantile: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_plots: bool,
}

#[derive(Args)]
struct TraverseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Rows anchoring the traversal, one grid row each. Repeatable.
    #[arg(long = "image-index", default_values_t = [0usize])]
    image_index: Vec<usize>,
    /// Latent dimension to sweep.
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
    lo: f64,
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    hi: f64,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

/// Manifest of everything a command wrote.
#[derive(Debug, Serialize)]
struct RunRecord {
    run_id: String,
    command: String,
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<TermWeights>,
    config: Option<PathBuf>,
    checkpoints: Vec<PathBuf>,
    reports: Vec<PathBuf>,
    plots: Vec<PathBuf>,
}

pub const MANIFEST: &str = "manifest.json";

impl RunRecord {
    fn new(command: &str, cfg: &TrainConfig) -> Self {
        let hash = cfg.hash();
        Self {
            run_id: format!("{command}-{}", &hash[..12]),
            command: command.into(),
            config_hash: hash,
            weights: cfg.objective.resolve().ok(),
            config: None,
            checkpoints: Vec::new(),
            reports: Vec::new(),
            plots: Vec::new(),
        }
    }

    fn write(&self, dir: &Path) -> Result<PathBuf> {
        let all = self.config.iter().chain(&self.checkpoints).chain(&self.reports).chain(&self.plots);
        for p in all {
            if !p.exists() {
                bail!("manifest lists missing artifact {}", p.display());
            }
        }
        let path = dir.join(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(spec: Option<&DatasetSpec>, data: Option<&Path>) -> Result<FactorDataset> {
    let root = config::data_root();
    let spec = match data {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<DatasetSpec>(&text).map_err(|e| usage(format!("dataset {}: {e}", p.display())))?
        }
        None => spec.cloned().ok_or_else(|| usage("no dataset: the config has no dataset section and --data was not given"))?,
    };
    Ok(spec.load(root.as_deref())?)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let ds = load_dataset(cfg.dataset.as_ref(), None)?;
    std::fs::create_dir_all(&args.out)?;
    let outcome = train(cfg.clone(), &ds, Some(&args.out))?;
    let mut record = RunRecord::new("train", &cfg);
    record.config = outcome.config_path.clone();
    record.checkpoints.extend(outcome.last_checkpoint.iter().cloned());
    record.checkpoints.extend(outcome.best_checkpoint.iter().cloned());
    record.reports.extend(outcome.log_path.iter().cloned());
    let summary = summarize(&outcome.model, &ds, cfg.batch_size, cfg.seed)?;
    let summary_path = args.out.join("summary.json");
    write_json(&summary_path, &summary)?;
    record.reports.push(summary_path);
    if !args.no_plots {
        let p = args.out.join("elbo.svg");
        plots::elbo_curve(&outcome.epoch_elbo, &p)?;
        record.plots.push(p);
    }
    let manifest = record.write(&args.out)?;
    println!(
        "trained {} epochs: final ELBO {:.4}; pruned Normal dims {:?}; manifest {}",
        cfg.epochs,
        outcome.epoch_elbo.last().copied().unwrap_or(f64::NAN),
        summary.pruned_normal,
        manifest.display()
    );
    Ok(())
}

const METRICS: [&str; 5] = ["data-mi", "mig", "kim", "eastwood", "tc"];

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let metrics: Vec<&str> = args.metrics.split(',').map(str::trim).filter(|m| !m.is_empty()).collect();
    if metrics.is_empty() {
        return Err(usage("no metrics requested"));
    }
    if let Some(m) = metrics.iter().find(|m| !METRICS.contains(m)) {
        return Err(usage(format!("unknown metric `{m}`; valid metrics: {}", METRICS.join(", "))));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.model()?;
    let ds = load_dataset(ckpt.config.dataset.as_ref(), args.data.as_deref())?;
    let batch = args.batch_size.unwrap_or(ckpt.config.batch_size).min(ds.len());
    let seed = ckpt.config.seed;
    std::fs::create_dir_all(&args.out)?;
    let code = CodeTable::from_model(&model, &ds, batch)?;
    let mut record = RunRecord::new("report", &ckpt.config);
    record.checkpoints.push(args.checkpoint.clone());
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let base = |metric: &str, value: serde_json::Value, config: serde_json::Value| MetricRecord {
        metric: metric.into(),
        value,
        config,
        seed,
        n: ds.len(),
    };
    for &metric in &metrics {
        let result: Result<MetricRecord> = (|| match metric {
            "data-mi" => {
                let mi = data_mi_per_dim(&model, &ds, batch, seed)?;
                if !args.no_plots {
                    let names = model.layout().slot_names();
                    let concrete: Vec<usize> = code.concrete_slots.clone();
                    let entry = |e: usize| (names[e].clone(), mi.mean[e]);
                    let normal: Vec<_> = (0..mi.mean.len()).filter(|e| !concrete.contains(e)).map(entry).collect();
                    let conc: Vec<_> = concrete.iter().map(|&e| entry(e)).collect();
                    let p = args.out.join("data_mi.svg");
                    plots::mi_bars(&normal, &conc, &p)?;
                    record.plots.push(p);
                }
                Ok(base("data-mi", json!({"mean": mi.mean, "stderr": mi.stderr}), json!({"batch_size": batch, "batches": mi.batches})))
            }
            "mig" => {
                let labels = ds.labels.as_ref().ok_or_else(|| usage("mig needs labels"))?;
                Ok(base("mig", json!(mig(&code, labels)?), json!({"bins": hfvae::metrics::DEFAULT_BINS})))
            }
            "kim" => {
                let factors = ds.factors.as_ref().ok_or_else(|| usage("kim needs ground-truth factors"))?;
                let cfg = KimConfig { seed, ..KimConfig::default() };
                let r = kim_metric(&code.normal_means, factors, &cfg)?;
                Ok(base("kim", serde_json::to_value(&r)?, serde_json::to_value(cfg)?))
            }
            "eastwood" => {
                let factors = ds.factors.as_ref().ok_or_else(|| usage("eastwood needs ground-truth factors"))?;
                let cfg = ForestConfig { seed, ..ForestConfig::default() };
                let r = eastwood_disentanglement(&code.features(), factors, &cfg)?;
                let p = args.out.join("eastwood_importance.csv");
                write_importance_csv(&r.importance, &ds.factor_names, &p)?;
                record.reports.push(p);
                Ok(base(
                    "eastwood",
                    json!({"score": r.score, "per_dim": r.per_dim, "dropped_dims": r.dropped_dims, "single_factor": r.single_factor}),
                    json!({"trees": cfg.trees, "max_depth": cfg.max_depth}),
                ))
            }
            "tc" => Ok(base("tc", json!(tc_estimate(&model, &ds, batch, seed, TcScope::Slots)?), json!({"scope": "slots", "batch_size": batch}))),
            _ => unreachable!(),
        })();
        match result {
            Ok(r) => {
                println!("{}: {}", r.metric, r.value);
                records.push(r);
            }
            Err(e) => {
                eprintln!("{metric}: {e:#}");
                failures.push(json!({"metric": metric, "error": format!("{e:#}")}));
            }
        }
    }
    let path = args.out.join("metrics.json");
    write_json(&path, &json!({"records": records, "failures": failures}))?;
    record.reports.push(path);
    record.write(&args.out)?;
    Ok(())
}

fn parse_values(list: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| usage(format!("`{s}` is not a number"))))
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(usage("--values is empty"));
    }
    Ok(values)
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let param: SweepParam = args.param.parse()?;
    let values = parse_values(&args.values)?;
    if args.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let cfg = args.config.load()?;
    let ds = load_dataset(cfg.dataset.as_ref(), None)?;
    std::fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("sweep.csv");
    let mut writer = csv::Writer::from_path(&csv_path)?;
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let rows = sweep(&cfg, &ds, param, &values, &seeds, |row| {
        println!("{}={} seed {}: tc {:.4} mi {:.4} mig {:.4} ({})", row.param, row.value, row.seed, row.tc, row.mi, row.mig, row.status);
    })?;
    for row in &rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    let mut record = RunRecord::new("sweep", &cfg);
    record.reports.push(csv_path);
    if !args.no_plots {
        let ok: Vec<_> = rows.iter().filter(|r| r.status == "ok").collect();
        let p = args.out.join("tc_vs_mi.svg");
        plots::scatter(&ok.iter().map(|r| (r.mi, r.tc)).collect::<Vec<_>>(), "TC against I(x; z)", "I(x; z) (nats)", "TC (nats)", &p)?;
        record.plots.push(p);
        let p = args.out.join("mig_vs_param.svg");
        plots::scatter(&ok.iter().map(|r| (r.value, r.mig)).collect::<Vec<_>>(), "MIG", &param.to_string(), "MIG (nats)", &p)?;
        record.plots.push(p);
    }
    record.write(&args.out)?;
    Ok(())
}

fn cmd_prune_retrain(args: &PruneArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let spec = cfg.dataset.as_ref().ok_or_else(|| usage("the config has no dataset section"))?;
    let ds = spec.load_full(config::data_root().as_deref())?;
    let target = match (&args.factor_predicate, &args.reference) {
        (Some(expr), None) => PruneTarget::Predicate {
            expr: expr.clone(),
            feature_factor: args.feature.clone().ok_or_else(|| usage("--factor-predicate needs --feature"))?,
        },
        (None, Some(reference)) => PruneTarget::ClassFeature {
            reference: Box::new(Checkpoint::load(reference)?.model()?),
            class: args.class.ok_or_else(|| usage("--reference needs --class"))?,
            feature_slot: args.feature_dim.ok_or_else(|| usage("--reference needs --feature-dim"))?,
            quantile: args.quantile,
        },
        _ => return Err(usage("give exactly one of --factor-predicate or --reference")),
    };
    std::fs::create_dir_all(&args.out)?;
    let train_dir = args.out.join("train");
    let report = prune_retrain(&cfg, &ds, &target, Some(&train_dir))?;
    let mut record = RunRecord::new("prune-retrain", &cfg);
    record.config = Some(train_dir.join(hfvae::training::CONFIG_FILE));
    record.checkpoints.push(train_dir.join(hfvae::training::LAST_CHECKPOINT));
    let path = args.out.join("prune_report.json");
    write_json(&path, &report)?;
    record.reports.push(path);
    if !args.no_plots {
        let p = args.out.join("feature_histogram.svg");
        plots::feature_histograms(&report.train_feature, &report.heldout_feature, report.threshold, &p)?;
        record.plots.push(p);
    }
    record.write(&args.out)?;
    println!(
        "train {} rows rec {:.3}; heldout {} rows rec {:.3} (gap {:.1}%); {:.0}% of heldout feature beyond threshold",
        report.train_size,
        report.train_rec,
        report.heldout_size,
        report.heldout_rec,
        100.0 * report.relative_gap,
        100.0 * report.heldout_beyond_fraction
    );
    Ok(())
}

fn cmd_traverse(args: &TraverseArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.model()?;
    let n_slots = model.layout().n_slots();
    if args.dim >= n_slots {
        return Err(usage(format!("--dim {} out of range: the layout has {n_slots} latent dimensions", args.dim)));
    }
    let ds = load_dataset(ckpt.config.dataset.as_ref(), args.data.as_deref())?;
    let mut rows = Vec::new();
    for &i in &args.image_index {
        if i >= ds.len() {
            return Err(usage(format!("--image-index {i} out of range ({} rows)", ds.len())));
        }
        let t = traverse(&model, &ds.observations.row(i), args.dim, args.lo, args.hi, args.steps)?;
        rows.push(t.frames);
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_image_grid(&rows, &ds.item_shape, &args.out)?;
    println!("wrote {} frames per row to {}", rows[0].len(), args.out.display());
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() || cause.is::<clap::Error>() {
            return 2;
        }
        if let Some(lib) = cause.downcast_ref::<hfvae::Error>() {
            return match lib {
                hfvae::Error::NonFinite { .. } => 3,
                hfvae::Error::Io(_) => 1,
                _ => 2,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Report(a) => cmd_report(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::PruneRetrain(a) => cmd_prune_retrain(a),
        Command::Traverse(a) => cmd_traverse(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
