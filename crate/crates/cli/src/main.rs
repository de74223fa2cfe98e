//! `ltosr`: splits, synthetic data, training, evaluation and ETF diagnostics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::json;

use ltosr_core::checkpoint::Checkpoint;
use ltosr_core::config::{Precision, RunConfig, CONFIG_KEYS};
use ltosr_core::data::{save_npz, Dataset, SplitManifest};
use ltosr_core::etf::{make_simplex_etf, verify_etf};
use ltosr_core::evaluation::{report, threshold_sweep, MetricsReport, ScoreSource};
use ltosr_core::experiments::{build_split, load_dataset, Variant, DATA_ROOT_ENV};
use ltosr_core::model::ModelHeads;
use ltosr_core::training::{fit_with, FitOptions, RunRecord, TrainState};
use ltosr_core::{Error, Scalar};

#[derive(Parser, Debug)]
#[command(name = "ltosr", version, about = "Open-set semi-supervised training on long-tailed data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Partition a dataset into labelled/unlabelled/val/test ids and write manifest.json
    MakeSplit(ConfigArgs),
    /// Generate the synthetic long-tail dataset and export it as synthetic.npz
    SynthData(ConfigArgs),
    /// Train a model; writes manifest, metrics.csv, run_record.json, checkpoints and a report
    Train(TrainArgs),
    /// Evaluate a checkpoint against a split manifest
    Eval(EvalArgs),
    /// Build a simplex ETF and print its deviations from the ideal geometry
    EtfCheck(EtfArgs),
    /// Summarize the reports of one or more training runs into a table
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML run configuration (see the key list below); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; nothing is written outside it
    #[arg(long)]
    out: PathBuf,
    /// Override the training seed (`seed`)
    #[arg(long)]
    seed: Option<u64>,
    /// Override `dataset` ("synthetic" or a MedMNIST .npz path)
    #[arg(long)]
    dataset: Option<String>,
    /// Override `label_fraction`
    #[arg(long)]
    label_fraction: Option<f64>,
    /// Override `seen_classes`, comma separated
    #[arg(long, value_delimiter = ',')]
    seen_classes: Option<Vec<usize>>,
    /// Directory relative dataset paths resolve against
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Use this manifest instead of building a split from the config
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Ablation row: baseline_ce, weight_decay, feature_reg or full
    #[arg(long, default_value = "full")]
    variant: String,
    /// Continue from a training checkpoint written by an earlier run
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation (resume later with --resume)
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint (.npz) to evaluate; the best-model file of a run works too
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split manifest; defaults to manifest.json beside the checkpoint
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run configuration for locating the dataset; defaults to the one stored in the checkpoint
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EtfArgs {
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Output directories of `train` runs
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn config_keys_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (TOML):\n");
    for (k, d) in CONFIG_KEYS {
        s.push_str(&format!("  {k:width$}  {d}\n"));
    }
    s
}

fn parse_cli() -> Cli {
    let keys = config_keys_help();
    let mut cmd = Cli::command();
    for name in ["make-split", "synth-data", "train", "eval"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(keys.clone()));
    }
    let matches = cmd.get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(f) = self.label_fraction {
            cfg.label_fraction = f;
        }
        if let Some(c) = &self.seen_classes {
            cfg.seen_classes = c.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Seed and config hash carried by every artifact.
fn stamp(cfg: &RunConfig) -> serde_json::Value {
    json!({ "seed": cfg.seed, "config_hash": cfg.hash(), "config": cfg.to_json_value() })
}

fn csv_stamp(cfg: &RunConfig) -> String {
    format!("# seed={} config_hash={}\n", cfg.seed, cfg.hash())
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, body).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    Ok(())
}

fn write_run_meta(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    write(&dir.join("run.json"), serde_json::to_string_pretty(&stamp(cfg))? + "\n")?;
    write(&dir.join("config.toml"), cfg.to_toml_string())
}

fn save_report(dir: &Path, rep: &MetricsReport, cfg: &RunConfig) -> anyhow::Result<()> {
    out_dir(dir)?;
    write(&dir.join("report.json"), rep.to_json()?)?;
    write(&dir.join("confusion.csv"), csv_stamp(cfg) + &rep.confusion_csv())?;
    let svg = rep.per_class_svg();
    let comment = format!("<!-- seed={} config_hash={} -->\n", cfg.seed, cfg.hash());
    let svg = match svg.find('\n') {
        Some(i) => format!("{}{comment}{}", &svg[..=i], &svg[i + 1..]),
        None => svg,
    };
    write(&dir.join("per_class_acc.svg"), svg)
}

fn make_split_cmd(args: &ConfigArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let ds = load_dataset::<f64>(&cfg, args.data_root.as_deref())?;
    let manifest = build_split(&ds, &cfg)?;
    out_dir(&args.out)?;
    manifest.save(&args.out.join("manifest.json"))?;
    write_run_meta(&args.out, &cfg)?;
    println!(
        "{} labelled, {} unlabelled, {} val, {} test; seen {:?}, unseen {:?}",
        manifest.labelled_ids.len(),
        manifest.unlabelled_ids.len(),
        manifest.val_ids.len(),
        manifest.test_ids.len(),
        manifest.seen_classes,
        manifest.unseen_classes
    );
    Ok(())
}

fn synth_data_cmd(args: &ConfigArgs) -> anyhow::Result<()> {
    let mut cfg = args.resolve()?;
    if !cfg.is_synthetic() {
        bail!(Error::Config(vec!["dataset: synth-data needs dataset = \"synthetic\"".into()]));
    }
    cfg.dataset = "synthetic".into();
    let ds = load_dataset::<f64>(&cfg, None)?;
    out_dir(&args.out)?;
    let path = args.out.join("synthetic.npz");
    save_npz(&ds, &path)?;
    write_run_meta(&args.out, &cfg)?;
    println!("wrote {} ({} samples, {} classes)", path.display(), ds.len(), ds.num_classes);
    Ok(())
}

fn parse_variant(name: &str) -> anyhow::Result<Variant> {
    Variant::LADDER.into_iter().find(|v| v.name() == name).ok_or_else(|| {
        let names: Vec<_> = Variant::LADDER.iter().map(|v| v.name()).collect();
        Error::Config(vec![format!("variant: unknown `{name}`, expected one of {}", names.join(", "))]).into()
    })
}

fn train_cmd(args: &TrainArgs) -> anyhow::Result<()> {
    let base = args.common.resolve()?;
    let cfg = parse_variant(&args.variant)?.apply(&base);
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(args, &cfg),
        Precision::F64 => train_typed::<f64>(args, &cfg),
    }
}

fn load_manifest<T: Scalar>(path: &Path, ds: &Dataset<T>) -> anyhow::Result<SplitManifest> {
    let m = SplitManifest::load(path)?;
    m.check_matches(ds)?;
    Ok(m)
}

fn train_typed<T: Scalar>(args: &TrainArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let out = &args.common.out;
    let ds = load_dataset::<T>(cfg, args.common.data_root.as_deref())?;
    let manifest = match &args.manifest {
        Some(p) => load_manifest(p, &ds)?,
        None => build_split(&ds, cfg)?,
    };
    let state = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::<T>::load(p)?;
            if ck.meta.seen_classes != manifest.seen_classes {
                bail!(Error::Mismatch(format!(
                    "checkpoint was trained on seen classes {:?}, manifest lists {:?}",
                    ck.meta.seen_classes, manifest.seen_classes
                )));
            }
            ck.into_state()?
        }
        None => {
            let spec = cfg.model_spec(ds.kind, manifest.num_seen())?;
            TrainState::fresh(ModelHeads::<T>::new(spec)?, cfg.train_config())?
        }
    };
    out_dir(out)?;
    manifest.save(&out.join("manifest.json"))?;
    write_run_meta(out, cfg)?;

    let run = stamp(cfg);
    let ck_path = out.join("checkpoint.npz");
    let seen = manifest.seen_classes.clone();
    let mut on_epoch = |s: &TrainState<T>| -> ltosr_core::Result<()> {
        Checkpoint::of_state(s, seen.clone(), run.clone()).save(&ck_path)
    };
    let options = FitOptions {
        on_epoch: Some(&mut on_epoch),
        max_epochs: args.max_epochs,
        ..Default::default()
    };
    let outcome = fit_with(&ds, &manifest, state, cfg.to_json_value(), options)?;

    write(&out.join("metrics.csv"), csv_stamp(cfg) + &outcome.record.metrics_csv())?;
    let mut record = serde_json::to_value(&outcome.record)?;
    record["seed"] = json!(cfg.seed);
    record["config_hash"] = json!(cfg.hash());
    write(&out.join("run_record.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    Checkpoint::of_model(&outcome.best_model, manifest.seen_classes.clone(), stamp(cfg)).save(&out.join("best.npz"))?;

    let rep = report(&outcome.best_model, &ds, &manifest, Some(stamp(cfg)))?;
    save_report(&out.join("report"), &rep, cfg)?;
    let thresholds = json!({
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "closed_softmax": threshold_sweep(&outcome.best_model, &ds, &manifest, ScoreSource::ClosedSoftmax)?,
        "multi_binary": threshold_sweep(&outcome.best_model, &ds, &manifest, ScoreSource::MultiBinary)?,
    });
    write(&out.join("report").join("thresholds.json"), serde_json::to_string_pretty(&thresholds)? + "\n")?;

    println!(
        "best epoch {} (val {:.2}); closed-set {:.2}, open-set {}",
        outcome.record.best_epoch,
        outcome.record.best_val_acc,
        rep.closed_set_acc,
        rep.open_set_acc.map_or("n/a".into(), |v| format!("{v:.2}"))
    );
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> anyhow::Result<()> {
    // peek at the scalar type before committing to one
    let probe = Checkpoint::<f64>::load(&args.checkpoint)?;
    match probe.meta.scalar.as_str() {
        "f32" => eval_typed::<f32>(args),
        _ => eval_typed::<f64>(args),
    }
}

fn eval_typed<T: Scalar>(args: &EvalArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::<T>::load(&args.checkpoint)?;
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let stored = ck.meta.run.get("config").cloned().ok_or_else(|| {
                Error::Config(vec!["config: checkpoint stores no run config; pass --config".into()])
            })?;
            serde_json::from_value(stored).context("stored run config")?
        }
    };
    let ds = load_dataset::<T>(&cfg, args.data_root.as_deref())?;
    let manifest_path = match &args.manifest {
        Some(p) => p.clone(),
        None => args.checkpoint.with_file_name("manifest.json"),
    };
    let manifest = load_manifest(&manifest_path, &ds)?;
    let model = ck.best.unwrap_or(ck.model);
    let rep = report(&model, &ds, &manifest, Some(stamp(&cfg)))?;
    out_dir(&args.out)?;
    save_report(&args.out, &rep, &cfg)?;
    println!(
        "closed-set {:.2}, open-set {}",
        rep.closed_set_acc,
        rep.open_set_acc.map_or("n/a".into(), |v| format!("{v:.2}"))
    );
    Ok(())
}

fn etf_check_cmd(args: &EtfArgs) -> anyhow::Result<ExitCode> {
    let frame = make_simplex_etf::<f64>(args.dim, args.classes, args.seed)?;
    let r = verify_etf(&frame, args.tol);
    println!("max_norm_deviation {:e}", r.max_norm_deviation);
    println!("max_angle_deviation {:e}", r.max_angle_deviation);
    println!("{}", if r.passed { "PASS" } else { "FAIL" });
    Ok(if r.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn report_cmd(args: &ReportArgs) -> anyhow::Result<()> {
    let mut csv = String::from("run,seed,config_hash,best_epoch,closed_set_acc,open_set_acc,joint_open_head_acc\n");
    let mut md = String::from("| run | seed | closed-set | open-set | joint |\n|---|---|---|---|---|\n");
    for dir in &args.runs {
        let read = |p: PathBuf| fs::read_to_string(&p).map_err(|e| Error::Io { path: p, source: e });
        let rep = MetricsReport::from_json(&read(dir.join("report").join("report.json"))?)?;
        let rec: serde_json::Value = serde_json::from_str(&read(dir.join("run_record.json"))?)?;
        let record: RunRecord = serde_json::from_value(rec.clone())?;
        let seed = rec["seed"].as_u64().unwrap_or_default();
        let hash = rec["config_hash"].as_str().unwrap_or_default();
        let open = rep.open_set_acc.map_or(String::new(), |v| format!("{v:.2}"));
        let name = dir.display();
        csv.push_str(&format!(
            "{name},{seed},{hash},{},{:.2},{open},{:.2}\n",
            record.best_epoch, rep.closed_set_acc, rep.joint_open_head_acc
        ));
        md.push_str(&format!(
            "| {name} | {seed} | {:.2} | {open} | {:.2} |\n",
            rep.closed_set_acc, rep.joint_open_head_acc
        ));
    }
    out_dir(&args.out)?;
    write(&args.out.join("summary.csv"), &csv)?;
    write(&args.out.join("summary.md"), &md)?;
    print!("{md}");
    Ok(())
}

/// Exit code and label for an error chain.
fn categorize(err: &anyhow::Error) -> (u8, &'static str) {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => (3, "config"),
        Some(Error::Io { .. }) => (4, "io"),
        Some(Error::Dataset(_) | Error::Checksum { .. } | Error::EmptyClass { .. } | Error::LabelOutOfRange { .. }) => {
            (5, "dataset")
        }
        Some(Error::Mismatch(_)) => (6, "mismatch"),
        Some(Error::NonFinite { .. }) => (7, "numeric"),
        Some(Error::Serde(_)) => (8, "format"),
        _ => (1, "other"),
    }
}

fn main() -> ExitCode {
    let cli = parse_cli();
    let result = match &cli.command {
        Command::MakeSplit(a) => make_split_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::SynthData(a) => synth_data_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => train_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => eval_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::EtfCheck(a) => etf_check_cmd(a),
        Command::Report(a) => report_cmd(a).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let (code, label) = categorize(&e);
            eprintln!("error[{label}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
