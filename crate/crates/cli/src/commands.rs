use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use cnnsig_core::conv::{divisors, feature_count_nf, gamma_select, regularized_count};
use cnnsig_core::datagen::{ChainTask, GarchTask, LabeledDataset, MaxCallTask, SplitData};
use cnnsig_core::metrics::{qq_points, write_qq_csv, MetricsReport};
use cnnsig_core::nn::AdamConfig;
use cnnsig_core::pipeline::{
    cnnsig_train, Checkpoint, CnnSigModel, EpochRecord, LogisticConfig, SignatureLogistic, SignatureMlp, Task,
    TrainConfig,
};
use cnnsig_core::signature::{read_path_csv, signature, time_augment};
use cnnsig_core::tensor::sig_feature_count;

use crate::manifest::{write_atomic, write_json, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "cnnsig", version, about = "Path signatures, CNN-Sig models and synthetic experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Truncated signature of a path CSV (`t,x1,...,xd`).
    Sig(SigArgs),
    /// Feature counts for plain and convolved signatures.
    Features(FeaturesArgs),
    /// Generate a synthetic dataset (train.jsonl, test.jsonl, manifest.json).
    Datagen(DatagenArgs),
    /// Train a model on a generated dataset directory.
    Train(TrainArgs),
    /// Recompute metrics of a checkpoint on one split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SigArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(short = 'm', long, default_value_t = 2)]
    depth: usize,
    /// Prepend normalized time as channel 0.
    #[arg(long)]
    time_augment: bool,
    /// Write the tensor JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    d: usize,
    #[arg(short = 'm', long, default_value_t = 4)]
    depth: usize,
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataTask {
    Garch,
    Chain,
    Maxcall,
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    task: DataTask,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Basket dimension (maxcall).
    #[arg(long, default_value_t = 6)]
    d: usize,
    /// Paths per class (garch).
    #[arg(long)]
    per_class: Option<usize>,
    /// Training paths (per class for chain).
    #[arg(long)]
    n_train: Option<usize>,
    /// Test paths (per class for chain).
    #[arg(long)]
    n_test: Option<usize>,
    /// Series length (garch) or number of steps (chain, maxcall).
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    SigLogistic,
    SigMlp,
    Cnnsig,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    model: ModelKind,
    /// Dataset directory holding train.jsonl and test.jsonl.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short = 'm', long, default_value_t = 4)]
    depth: usize,
    /// Number of channel blocks (cnnsig); chosen from the feature budget if absent.
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Standardize CNN-Sig features with training-split statistics.
    #[arg(long)]
    standardize: bool,
    /// Keep the convolution kernel at its initial value.
    #[arg(long)]
    freeze_kernel: bool,
    /// L2 penalty (sig-logistic).
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
    /// Gradient-descent iterations (sig-logistic).
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sig(a) => cmd_sig(a),
        Command::Features(a) => cmd_features(a),
        Command::Datagen(a) => cmd_datagen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn cmd_sig(a: SigArgs) -> Result<()> {
    let file = fs::File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let path = read_path_csv(BufReader::new(file)).with_context(|| format!("reading {}", a.input.display()))?;
    let path = if a.time_augment { time_augment(&path, true) } else { path };
    let sig = signature(&path, a.depth);
    let count = sig_feature_count(path.dim(), a.depth, true);
    let json = serde_json::to_string(&sig)?;
    match a.out {
        Some(out) => {
            write_atomic(&out, format!("{json}\n").as_bytes())?;
            println!("feature count: {count}");
        }
        None => {
            println!("{json}");
            eprintln!("feature count: {count}");
        }
    }
    Ok(())
}

fn cmd_features(a: FeaturesArgs) -> Result<()> {
    if a.d == 0 {
        bail!("d must be at least 1");
    }
    println!("d = {}, m = {}", a.d, a.depth);
    println!("signature terms (no constant): {}", sig_feature_count(a.d, a.depth, false));
    println!("{:>6} {:>6} {:>12} {:>14}", "gamma", "c", "N_f", "N_alpha");
    for g in divisors(a.d) {
        let c = a.d / g;
        println!(
            "{:>6} {:>6} {:>12} {:>14}",
            g,
            c,
            feature_count_nf(a.d, c, a.depth)?,
            regularized_count(g, a.d, a.depth, a.alpha)?
        );
    }
    if let Some(g) = a.gamma {
        if g == 0 || a.d % g != 0 {
            bail!(cnnsig_core::Error::Divisibility { value: a.d, divisor: g });
        }
        println!("N_f(gamma={g}) = {}", feature_count_nf(a.d, a.d / g, a.depth)?);
    }
    println!("selected gamma (alpha = {}): {}", a.alpha, gamma_select(a.d, a.depth, a.alpha));
    Ok(())
}

fn cmd_datagen(a: DatagenArgs) -> Result<()> {
    let start = Instant::now();
    let (config, data): (Value, SplitData) = match a.task {
        DataTask::Garch => {
            let mut task = GarchTask::default();
            if let Some(n) = a.per_class {
                task.per_class = n;
            }
            for p in task.classes.iter_mut() {
                if let Some(l) = a.length {
                    p.length = l;
                }
                if let Some(b) = a.burn_in {
                    p.burn_in = b;
                }
            }
            task.validate()?;
            (serde_json::to_value(&task)?, task.generate(a.seed)?)
        }
        DataTask::Chain => {
            let mut task = ChainTask::default();
            if let Some(n) = a.n_train {
                task.train_per_class = n;
            }
            if let Some(n) = a.n_test {
                task.test_per_class = n;
            }
            if let Some(l) = a.length {
                task.steps = l;
            }
            task.validate()?;
            (serde_json::to_value(&task)?, task.generate(a.seed)?)
        }
        DataTask::Maxcall => {
            let mut task = MaxCallTask::new(a.d);
            if let Some(n) = a.n_train {
                task.n_train = n;
            }
            if let Some(n) = a.n_test {
                task.n_test = n;
            }
            if let Some(l) = a.length {
                task.market.steps = l;
            }
            task.validate()?;
            (serde_json::to_value(&task)?, task.generate(a.seed)?)
        }
    };
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for split in [&data.train, &data.test] {
        let mut buf = Vec::new();
        split.write_jsonl(&mut buf)?;
        write_atomic(&a.out_dir.join(format!("{}.jsonl", split.split)), &buf)?;
    }
    let task_name = format!("{:?}", a.task).to_lowercase();
    RunManifest {
        command: format!("datagen {task_name}"),
        config,
        seed: a.seed,
        artifacts: vec!["train.jsonl".into(), "test.jsonl".into()],
        duration_secs: start.elapsed().as_secs_f64(),
        metrics: json!({"train_paths": data.train.len(), "test_paths": data.test.len()}),
    }
    .write(&a.out_dir)?;
    println!(
        "wrote {} train and {} test paths to {}",
        data.train.len(),
        data.test.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn read_split(dir: &Path, split: &str) -> Result<LabeledDataset> {
    let path = dir.join(format!("{split}.jsonl"));
    let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let data = LabeledDataset::read_jsonl(split, BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    if data.is_empty() {
        bail!(cnnsig_core::Error::Empty(format!("{} has no samples", path.display())));
    }
    Ok(data)
}

fn infer_task(data: &LabeledDataset) -> Task {
    match data.classes() {
        Ok(labels) => Task::Classification {
            classes: labels.iter().copied().max().unwrap_or(0).max(1) + 1,
        },
        Err(_) => Task::Regression,
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let start = Instant::now();
    let train = read_split(&a.input, "train")?;
    let test = read_split(&a.input, "test")?;
    let task = infer_task(&train);
    let dim = train.dim()?;
    let mut config = TrainConfig::new(Vec::new(), a.seed);
    config.epochs = a.epochs;
    config.batch_size = a.batch;
    config.adam = AdamConfig {
        learning_rate: a.lr,
        ..AdamConfig::default()
    };
    config.train_kernel = !a.freeze_kernel;

    let mut history: Option<Vec<EpochRecord>> = None;
    let mut resolved = json!({});
    let checkpoint = match a.model {
        ModelKind::SigLogistic => {
            if task != (Task::Classification { classes: 2 }) {
                bail!(cnnsig_core::Error::Label("sig-logistic needs labels 0 and 1".into()));
            }
            let cfg = LogisticConfig {
                l2: a.l2,
                max_iter: a.max_iter,
                ..LogisticConfig::default()
            };
            let (model, fit) = SignatureLogistic::train(&train, a.depth, &cfg)?;
            resolved = json!({"logistic": cfg, "iterations": fit.iterations, "converged": fit.converged, "grad_norm": fit.grad_norm});
            Checkpoint::SigLogistic(model)
        }
        ModelKind::SigMlp => {
            config.hidden = a.hidden.clone().unwrap_or_else(|| vec![256, 256, 128]);
            let (model, h) = SignatureMlp::train(&train, Some(&test), a.depth, task, &config)?;
            history = Some(h);
            Checkpoint::SigMlp(model)
        }
        ModelKind::Cnnsig => {
            config.hidden = a.hidden.clone().unwrap_or_else(|| vec![256, 128]);
            let gamma = a.gamma.unwrap_or_else(|| gamma_select(dim, a.depth, a.alpha));
            let mut model = CnnSigModel::new(dim, gamma, a.depth, task, &config.hidden, a.seed)?;
            if a.standardize {
                model.fit_standardizer(&train)?;
            }
            history = Some(cnnsig_train(&mut model, &train, Some(&test), &config)?);
            resolved = json!({"gamma": gamma, "c": model.kernel.c(), "features": model.feature_count()});
            Checkpoint::Cnnsig(model)
        }
    };

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut artifacts = vec!["checkpoint.json".to_string()];
    write_json(&a.out_dir.join("checkpoint.json"), &checkpoint)?;
    let mut summary = serde_json::Map::new();
    for split in [&train, &test] {
        let (report, outputs) = checkpoint.evaluate(split)?;
        let name = format!("metrics_{}.json", split.split);
        write_json(&a.out_dir.join(&name), &report)?;
        artifacts.push(name);
        if task == Task::Regression {
            let points = qq_points(&split.targets(), &outputs.column(0).to_vec())?;
            let mut buf = Vec::new();
            write_qq_csv(&points, &mut buf)?;
            let name = format!("qq_{}.csv", split.split);
            write_atomic(&a.out_dir.join(&name), &buf)?;
            artifacts.push(name);
        }
        summary.insert(split.split.clone(), serde_json::to_value(&report)?);
    }
    if let Some(h) = &history {
        write_json(&a.out_dir.join("history.json"), h)?;
        artifacts.push("history.json".into());
    }
    let test_report: MetricsReport = serde_json::from_value(summary["test"].clone())?;
    RunManifest {
        command: format!("train {}", serde_json::to_value(a.model)?.as_str().unwrap_or_default()),
        config: json!({"args": &a, "train": &config, "task": task, "resolved": resolved}),
        seed: a.seed,
        artifacts,
        duration_secs: start.elapsed().as_secs_f64(),
        metrics: Value::Object(summary),
    }
    .write(&a.out_dir)?;
    print_report("test", &test_report);
    Ok(())
}

fn print_report(split: &str, r: &MetricsReport) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    match (&r.accuracy, &r.mae) {
        (Some(_), _) => println!("{split}: accuracy {}", fmt(r.accuracy)),
        _ => println!("{split}: mae {} r2 {}", fmt(r.mae), fmt(r.r2)),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)
        .map_err(cnnsig_core::Error::from)
        .with_context(|| format!("parsing {}", a.checkpoint.display()))?;
    let data = read_split(&a.input, &a.split)?;
    let (report, _) = checkpoint.evaluate(&data)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        write_atomic(out, format!("{json}\n").as_bytes())?;
    }
    println!("{json}");
    Ok(())
}
