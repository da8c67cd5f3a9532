use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use one_core::analysis::{self, PerturbationSpec};
use one_core::checkpoint::{self, Checkpoint};
use one_core::config::{TrainConfig, TrainFlags};
use one_core::metrics::{self, MetricsRecord, MetricsWriter};
use one_core::model::{Layout, SingleNet};
use one_core::train::{self, RunHooks, TrainData};
use one_core::Error;

#[derive(Parser)]
#[command(name = "one", version, about = "Train and analyse gated multi-branch networks with online distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write manifest, checkpoints and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Random-direction perturbation probe of a trained model.
    Perturb(PerturbArgs),
    /// Mean pairwise distance between prediction heads.
    Variance(VarianceArgs),
    /// Print a metrics CSV as CSV or newline-delimited JSON.
    Export(ExportArgs),
    /// Mean and sample std of final test errors across metrics files.
    Aggregate(AggregateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    One,
    Vanilla,
    Kd,
    Ensemble,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::One => "one",
            Method::Vanilla => "vanilla",
            Method::Kd => "kd",
            Method::Ensemble => "ensemble",
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root; falls back to ONE_DATA_ROOT, then ./data.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    method: Method,
    /// Bundled preset: desk-mnist or desk-cifar10.
    #[arg(long)]
    preset: Option<String>,
    /// Config file of `key = value` lines, applied after the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Comma-separated ablation flags: no_distill, no_sharing, no_gating, kl_backprop_teacher.
    #[arg(long)]
    flags: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Continue from a `*-state.ckpt` written by an earlier one/vanilla run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum EvalMode {
    /// Stripped deployment network (branch 0).
    Single,
    /// Gated branch ensemble, or averaged softmax over several checkpoints.
    Ensemble,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint(s); several single-network checkpoints form an ensemble.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "single")]
    mode: EvalMode,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Largest perturbation magnitude.
    #[arg(long, default_value_t = 5.0)]
    dmax: f64,
    /// Directions per magnitude.
    #[arg(long, default_value_t = 5)]
    dirs: usize,
    /// Magnitudes evenly spaced over [0, dmax].
    #[arg(long, default_value_t = 11)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report CSV path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct VarianceArgs {
    /// One multi-branch checkpoint, or several single-network checkpoints.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct ExportArgs {
    /// Metrics CSV written by `train`.
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct AggregateArgs {
    /// Metrics CSV files, typically one per seed.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    method: String,
    seed: u64,
    config: TrainConfig,
    config_text: String,
    data_root: PathBuf,
    artifacts: Vec<PathBuf>,
    code_version: String,
    started_unix: u64,
    finished_unix: Option<u64>,
    epoch_seconds: Vec<f64>,
    train_flops: Option<u64>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn code_version() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("ONE_GIT_REV"))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Domain(_) => 2,
        Error::Parse { .. } | Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn resolve_config(a: &TrainArgs) -> one_core::Result<TrainConfig> {
    let mut cfg = match &a.preset {
        Some(p) => TrainConfig::preset(p)?,
        None => TrainConfig::default(),
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(f) = &a.flags {
        let extra = TrainFlags::parse_list(f)?;
        cfg.flags.no_distill |= extra.no_distill;
        cfg.flags.no_sharing |= extra.no_sharing;
        cfg.flags.no_gating |= extra.no_gating;
        cfg.flags.kl_backprop_teacher |= extra.kl_backprop_teacher;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = &a.data.data_root {
        cfg.data_root = Some(r.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_manifest(dir: &Path, m: &Manifest) -> one_core::Result<()> {
    let path = dir.join("manifest.json");
    fs::write(path, serde_json::to_string_pretty(m).expect("manifest serialises") + "\n")?;
    Ok(())
}

fn planned_artifacts(method: Method, cfg: &TrainConfig, out: &Path) -> Vec<PathBuf> {
    let mut names = vec!["metrics.csv".to_string(), "metrics.ndjson".to_string()];
    let tag = method.name();
    match method {
        Method::One | Method::Vanilla => {
            names.push(format!("{tag}.ckpt"));
            names.push(format!("{tag}-state.ckpt"));
        }
        Method::Kd => {
            for t in [tag.to_string(), format!("{tag}-teacher")] {
                names.push(format!("{t}.ckpt"));
                names.push(format!("{t}-state.ckpt"));
            }
        }
        Method::Ensemble => {
            for i in 0..cfg.ensemble_size {
                names.push(format!("{tag}-net{i}.ckpt"));
                names.push(format!("{tag}-net{i}-state.ckpt"));
            }
        }
    }
    names.into_iter().map(|n| out.join(n)).collect()
}

fn cmd_train(a: TrainArgs) -> one_core::Result<()> {
    let cfg = resolve_config(&a)?;
    fs::create_dir_all(&a.out)?;
    let mut manifest = Manifest {
        command: std::env::args().collect::<Vec<_>>().join(" "),
        method: a.method.name().into(),
        seed: cfg.seed,
        config_text: cfg.to_text(),
        config: cfg.clone(),
        data_root: train::data_root(cfg.data_root.as_deref()),
        artifacts: planned_artifacts(a.method, &cfg, &a.out),
        code_version: code_version(),
        started_unix: now(),
        finished_unix: None,
        epoch_seconds: Vec::new(),
        train_flops: None,
    };
    write_manifest(&a.out, &manifest)?;

    let data = train::prepare_data(&cfg)?;
    eprintln!("train {} samples, test {} samples", data.train.len(), data.test.len());
    if a.resume.is_none() {
        for stem in ["metrics.csv", "metrics.ndjson"] {
            let _ = fs::remove_file(a.out.join(stem));
        }
    }
    let mut writer = MetricsWriter::open(&a.out, "metrics")?;
    let mut sink = |r: &MetricsRecord| -> one_core::Result<()> {
        if r.phase == metrics::Phase::Test {
            eprintln!("epoch {:>3} {:<12} top1 {:>6.2}%  ce {:.4}", r.epoch, r.head, r.top1_err, r.ce);
        }
        writer.write(r)
    };
    let mut hooks = RunHooks {
        checkpoint_dir: Some(a.out.clone()),
        tag: a.method.name().into(),
        on_record: Some(&mut sink),
        stop_after: None,
    };
    let (flops, seconds) = match (a.method, &a.resume) {
        (Method::One | Method::Vanilla, Some(path)) => {
            let ck = checkpoint::load(path)?;
            let out = train::resume(&cfg, &data, ck, &mut hooks)?;
            (out.train_flops, out.epoch_seconds)
        }
        (_, Some(_)) => return Err(Error::Config("--resume supports --method one or vanilla".into())),
        (Method::One, None) => {
            let out = train::train_one(&cfg, &data, &mut hooks)?;
            (out.train_flops, out.epoch_seconds)
        }
        (Method::Vanilla, None) => {
            let out = train::train_vanilla(&cfg, &data, &mut hooks)?;
            (out.train_flops, out.epoch_seconds)
        }
        (Method::Kd, None) => {
            let (out, _) = train::train_kd_offline(&cfg, &data, &mut hooks)?;
            (out.train_flops, out.epoch_seconds)
        }
        (Method::Ensemble, None) => {
            let out = train::train_indep_ensemble(&cfg, cfg.ensemble_size, &data, &mut hooks)?;
            (out.train_flops, out.epoch_seconds)
        }
    };
    manifest.finished_unix = Some(now());
    manifest.epoch_seconds = seconds;
    manifest.train_flops = Some(flops);
    manifest.artifacts.retain(|p| p.exists());
    write_manifest(&a.out, &manifest)?;
    println!("{}", a.out.join("manifest.json").display());
    Ok(())
}

/// Training config recorded in a checkpoint, with the data root override.
fn checkpoint_config(ck: &Checkpoint, root: &DataArgs) -> one_core::Result<TrainConfig> {
    let meta: serde_json::Value =
        serde_json::from_str(&ck.meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut cfg: TrainConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("metadata config: {e}")))?;
    if let Some(r) = &root.data_root {
        cfg.data_root = Some(r.clone());
    }
    Ok(cfg)
}

fn load_with_data(path: &Path, root: &DataArgs) -> one_core::Result<(Checkpoint, TrainConfig, TrainData)> {
    let ck = checkpoint::load(path)?;
    let cfg = checkpoint_config(&ck, root)?;
    let data = train::prepare_data(&cfg)?;
    Ok((ck, cfg, data))
}

fn print_eval(h: &train::HeadEval) {
    println!(
        "{}",
        serde_json::json!({ "head": h.head, "top1_err": h.top1_err, "top5_err": h.top5_err, "ce": h.ce })
    );
}

fn cmd_eval(a: EvalArgs) -> one_core::Result<()> {
    let (first, cfg, data) = load_with_data(&a.checkpoints[0], &a.data)?;
    if a.checkpoints.len() > 1 {
        if a.mode != EvalMode::Ensemble {
            return Err(Error::Config("several checkpoints need --mode ensemble".into()));
        }
        let mut nets = vec![SingleNet::from_model(first.model)?];
        for p in &a.checkpoints[1..] {
            nets.push(SingleNet::from_model(checkpoint::load(p)?.model)?);
        }
        print_eval(&train::evaluate_ensemble(&nets, &data.test, cfg.eval_batch_size)?);
        return Ok(());
    }
    let model = first.model;
    match a.mode {
        EvalMode::Single => {
            let net = model.strip()?;
            print_eval(&train::evaluate_single(&net, &data.test, cfg.eval_batch_size, "branch0")?);
        }
        EvalMode::Ensemble => {
            if model.layout() == Layout::single() {
                return Err(Error::Config("ensemble mode needs a multi-branch checkpoint or several checkpoints".into()));
            }
            let evals = train::evaluate(&model, &data.test, cfg.eval_batch_size)?;
            print_eval(evals.iter().find(|h| h.head == "teacher").expect("multi-branch has a teacher"));
        }
    }
    Ok(())
}

fn cmd_perturb(a: PerturbArgs) -> one_core::Result<()> {
    let (ck, cfg, data) = load_with_data(&a.checkpoint, &a.data)?;
    let mut net = ck.model.strip()?;
    let spec = PerturbationSpec { d_max: a.dmax, points: a.points, directions: a.dirs, seed: a.seed };
    let report = analysis::perturb_and_eval(&mut net, &spec, &data.train, &data.test, cfg.eval_batch_size)?;
    match &a.out {
        Some(p) => {
            fs::write(p, report.to_csv())?;
            println!("{}", p.display());
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn cmd_variance(a: VarianceArgs) -> one_core::Result<()> {
    let (first, cfg, data) = load_with_data(&a.checkpoints[0], &a.data)?;
    let sample = analysis::variance_sample(&data.train)?;
    let heads = if a.checkpoints.len() == 1 {
        analysis::branch_posteriors(&first.model, &sample, cfg.eval_batch_size)?
    } else {
        let mut nets = vec![first.model.strip()?];
        for p in &a.checkpoints[1..] {
            nets.push(checkpoint::load(p)?.model.strip()?);
        }
        analysis::net_posteriors(&nets, &sample, cfg.eval_batch_size)?
    };
    let v = analysis::branch_variance(&heads)?;
    println!("{}", serde_json::json!({ "heads": heads.len(), "samples": sample.len(), "variance": v }));
    Ok(())
}

fn cmd_export(a: ExportArgs) -> one_core::Result<()> {
    let records = metrics::read_csv(&a.metrics)?;
    match a.format {
        Format::Csv => {
            println!("{}", metrics::CSV_HEADER);
            for r in &records {
                println!("{}", r.to_csv());
            }
        }
        Format::Json => {
            for r in &records {
                println!("{}", serde_json::to_string(r).expect("record serialises"));
            }
        }
    }
    Ok(())
}

fn cmd_aggregate(a: AggregateArgs) -> one_core::Result<()> {
    let files: Vec<&Path> = a.files.iter().map(PathBuf::as_path).collect();
    let csv = analysis::summary_csv(&analysis::aggregate(&files)?);
    match &a.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Perturb(a) => cmd_perturb(a),
        Command::Variance(a) => cmd_variance(a),
        Command::Export(a) => cmd_export(a),
        Command::Aggregate(a) => cmd_aggregate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
