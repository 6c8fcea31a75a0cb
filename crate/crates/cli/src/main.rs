//! `alf`: train, compress, analyze, evaluate and export ALF models.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alf_core::{
    deploy, evaluate, AlfError, Architecture, Checkpoint, CostReport, DatasetConfig, DatasetKind, DeployedModel,
    InputSpec, LayerSpec, RunConfig, Trainer, TrainingConfig,
};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Deserialize;

const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

const METRICS_FILE: &str = "metrics.csv";
const COST_FILE: &str = "cost.csv";
const MODEL_FILE: &str = "model.alf1";
const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Parser)]
#[command(name = "alf", version, about = "Autoencoder-based low-rank filter sharing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a run config; writes metrics.csv and checkpoint.json.
    Train(TrainArgs),
    /// Compact a checkpoint; writes model.alf1 and cost.csv.
    Compress(CheckpointArgs),
    /// Cost report of an architecture description; writes cost.csv.
    Analyze(AnalyzeArgs),
    /// Accuracy of an ALF1 container on a dataset.
    Eval(EvalArgs),
    /// Compact a checkpoint; writes model.alf1.
    Export(CheckpointArgs),
}

#[derive(Debug, Args)]
struct Overrides {
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["cifar10", "synthetic"])]
    dataset: Option<String>,
    /// CIFAR-10 binary directory or file.
    #[arg(long)]
    data_path: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Pruning rate of the code channels.
    #[arg(long)]
    pr: Option<f64>,
    /// Mask update period in steps.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    lambda_rec: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Architecture description (the `input` and `layers` tables of a run config).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Pruning rate applied to every ALF layer; defaults to `training.pr`.
    #[arg(long)]
    pr: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// ALF1 container.
    #[arg(long)]
    model: PathBuf,
    /// Run config whose `dataset` table selects the evaluation data.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also writes eval.csv here when given.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_parser = ["cifar10", "synthetic"])]
    dataset: Option<String>,
    #[arg(long)]
    data_path: Option<PathBuf>,
    /// Teacher seed of the synthetic dataset.
    #[arg(long)]
    seed: Option<u64>,
}

/// Fields of a run config that `analyze` reads; everything else is ignored.
#[derive(Debug, Deserialize)]
struct Description {
    input: InputSpec,
    layers: Vec<LayerSpec>,
    #[serde(default)]
    training: TrainingConfig,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(AlfError),
}

impl From<AlfError> for CliError {
    fn from(e: AlfError) -> Self {
        match e {
            AlfError::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ALF_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("alf: config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("alf: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train(args) => train(args),
        Command::Compress(args) => compress(args, true),
        Command::Export(args) => compress(args, false),
        Command::Analyze(args) => analyze(args),
        Command::Eval(args) => eval(args),
    }
}

fn apply_dataset(ds: &mut DatasetConfig, kind: Option<&str>, path: Option<PathBuf>) -> CliResult<()> {
    if let Some(kind) = kind {
        ds.kind = kind.parse::<DatasetKind>()?;
    }
    if path.is_some() {
        ds.path = path;
    }
    Ok(())
}

fn load_run_config(path: &Path, o: Overrides) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    let t = &mut cfg.training;
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.pr {
        t.pr = v;
    }
    if let Some(v) = o.m {
        t.m = v;
    }
    if let Some(v) = o.lambda_rec {
        t.lambda_rec = v;
    }
    apply_dataset(&mut cfg.dataset, o.dataset.as_deref(), o.data_path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_cost(report: &CostReport, dir: &Path) -> CliResult<PathBuf> {
    let path = dir.join(COST_FILE);
    report.write_csv(BufWriter::new(File::create(&path)?))?;
    Ok(path)
}

fn train(args: TrainArgs) -> CliResult<()> {
    let cfg = load_run_config(&args.config, args.overrides)?;
    let out_dir = args
        .out_dir
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let (train_set, test_set) = cfg.dataset.load()?;
    info!("loaded {} training and {} test samples", train_set.len(), test_set.len());
    let arch = cfg.architecture();
    let mut trainer = Trainer::from_architecture(&arch, cfg.training.clone())?;
    let metrics = trainer.train_loop(&train_set, &test_set)?;
    ensure_dir(&out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    metrics.write_csv(BufWriter::new(File::create(&metrics_path)?))?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    Checkpoint::from_trainer(arch, &trainer).save(&ck_path)?;
    println!("metrics: {}", metrics_path.display());
    println!("checkpoint: {}", ck_path.display());
    if let Some(last) = metrics.last() {
        println!("accuracy: {:.9}", last.accuracy);
    }
    Ok(())
}

fn compress(args: CheckpointArgs, with_cost: bool) -> CliResult<()> {
    let ck = Checkpoint::load(&args.checkpoint).map_err(CliError::Runtime)?;
    let deployed = deploy(&ck.model)?;
    ensure_dir(&args.out_dir)?;
    let model_path = args.out_dir.join(MODEL_FILE);
    deployed.export(&model_path)?;
    println!("model: {}", model_path.display());
    if with_cost {
        let cost_path = write_cost(&deployed.cost_report()?, &args.out_dir)?;
        println!("cost: {}", cost_path.display());
    }
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let desc: Description = toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let pr = args.pr.unwrap_or(desc.training.pr);
    if !(0.0..1.0).contains(&pr) {
        return Err(CliError::Config(format!("pr must lie in [0, 1), got {pr}")));
    }
    let arch = Architecture {
        input: desc.input,
        layers: desc.layers,
    };
    let report = arch.cost_report(pr)?;
    ensure_dir(&args.out_dir)?;
    let path = write_cost(&report, &args.out_dir)?;
    println!("cost: {}", path.display());
    Ok(())
}

fn eval(args: EvalArgs) -> CliResult<()> {
    let mut ds = match &args.config {
        Some(path) => RunConfig::load(path)?.dataset,
        None => DatasetConfig::default(),
    };
    if let Some(seed) = args.seed {
        ds.seed = seed;
    }
    apply_dataset(&mut ds, args.dataset.as_deref(), args.data_path)?;
    let model = DeployedModel::import(&args.model)?;
    let (_, test_set) = ds.load()?;
    let accuracy = evaluate(&model, &test_set)?;
    println!("accuracy: {accuracy:.9}");
    if let Some(dir) = args.out_dir {
        ensure_dir(&dir)?;
        std::fs::write(dir.join("eval.csv"), format!("samples,accuracy\n{},{accuracy:.9}\n", test_set.len()))?;
    }
    Ok(())
}
