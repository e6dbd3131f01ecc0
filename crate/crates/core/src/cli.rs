//! The `medoe` command line.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{Distribution, ExperimentConfig, Split};
use crate::error::{Error, Result};
use crate::formats::{self, DatasetFile};
use crate::inference::{self, Combiner};
use crate::metrics::{self, ConfusionMatrix, MetricsReport};
use crate::synthgen::{self, CategoryGrouping, Group, SceneSample};
use crate::training::{self, TrainedModel};

#[derive(Debug, Parser)]
#[command(name = "medoe", version, about = "Multi-expert segmentation experiments on synthetic long-tailed scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset split and print its frequency profile.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the frequency profile and grouping of a dataset file.
    Freq {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Stage 1: train the experts (or a baseline) on a dataset file.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss-trace CSV; defaults to `<out>.trace.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Stage 2: fit the output calibration of a trained checkpoint.
    TrainMoe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to overwriting the input checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out scenes.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// moe, uniform-avg, oracle, softmax[:t], argmax, group-avg or single:<k>.
        #[arg(long)]
        combiner: Option<String>,
        /// longtail or uniform.
        #[arg(long)]
        distribution: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also write every expert's probabilities as a MEDP file.
        #[arg(long)]
        dump_probs: Option<PathBuf>,
    },
    /// Replica bias of a combiner, from checkpoints or by training replicas.
    Bias {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Held-out scenes.
        #[arg(long)]
        data: PathBuf,
        /// Replica checkpoints; repeat at least twice.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Train replicas on this dataset instead of loading checkpoints.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        replicas: usize,
        #[arg(long)]
        combiner: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predicted vs actual false-positive change between two reports.
    Diag {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        improved: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline: gen, train, train-moe and eval under every combiner.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Exclusive ownership of an experiment directory for the life of the value.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE: &'static str = ".medoe.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::io(
                    &path,
                    std::io::Error::new(e.kind(), "directory is in use by another medoe process (remove the lock if stale)"),
                )
            } else {
                Error::io(&path, e)
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env()?;
    for pair in &args.set {
        cfg.set_pair(pair)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    formats::write_file(path, text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { cfg, split, out } => {
            let cfg = load_config(&cfg)?;
            let _lock = DirLock::acquire(&parent_dir(&out))?;
            let data = cmd_gen(&cfg, split.parse()?, &out)?;
            print!("{}", frequency_table(&data.scenes, &cfg)?);
            Ok(())
        }
        Command::Freq { cfg, data } => {
            let cfg = load_config(&cfg)?;
            let data = formats::read_dataset(&data)?;
            print!("{}", frequency_table(&data.scenes, &ExperimentConfig { generator: synthgen::GeneratorConfig { classes: data.classes, ..cfg.generator.clone() }, ..cfg })?);
            Ok(())
        }
        Command::Train { cfg, data, out, trace } => {
            let cfg = load_config(&cfg)?;
            let _lock = DirLock::acquire(&parent_dir(&out))?;
            let trace = trace.unwrap_or_else(|| with_suffix(&out, ".trace.csv"));
            let model = cmd_train(&cfg, &data, &out, &trace)?;
            let flagged = training::non_monotone_experts(&model);
            println!("wrote {} ({} expert(s), mode {})", out.display(), model.experts.len(), model.mode);
            if !flagged.is_empty() {
                let ids: Vec<String> = flagged.iter().map(|i| (i + 1).to_string()).collect();
                println!("note: smoothed loss of expert(s) {} is not monotone after step 100; consider a lower lr", ids.join(", "));
            }
            Ok(())
        }
        Command::TrainMoe { cfg, data, checkpoint, out } => {
            let cfg = load_config(&cfg)?;
            let out = out.unwrap_or_else(|| checkpoint.clone());
            let _lock = DirLock::acquire(&parent_dir(&out))?;
            let model = cmd_train_moe(&cfg, &data, &checkpoint, &out)?;
            let last = model.provenance.moe_trace.last().copied().unwrap_or(f64::NAN);
            println!("wrote {} (selection loss {last:.4})", out.display());
            Ok(())
        }
        Command::Eval { cfg, data, checkpoint, combiner, distribution, out_dir, dump_probs } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(c) = combiner {
                cfg.combiner = c.parse()?;
            }
            if let Some(d) = distribution {
                cfg.distribution = d.parse()?;
            }
            let out_dir = out_dir.unwrap_or_else(|| cfg.out_dir.clone());
            let _lock = DirLock::acquire(&out_dir)?;
            let model = formats::read_checkpoint(&checkpoint)?;
            let test = formats::read_dataset(&data)?;
            if let Some(p) = dump_probs {
                let probs = test
                    .scenes
                    .iter()
                    .map(|s| inference::expert_probabilities(&model, s))
                    .collect::<Result<Vec<_>>>()?;
                formats::write_file(&p, &formats::encode_probabilities(&probs)?)?;
            }
            let report = cmd_eval(&cfg, &model, &test.scenes, &out_dir)?;
            print!("{}", summary_line(&cfg.combiner.to_string(), &report));
            Ok(())
        }
        Command::Bias { cfg, data, checkpoint, train, replicas, combiner, out } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(c) = combiner {
                cfg.combiner = c.parse()?;
            }
            let test = formats::read_dataset(&data)?;
            let models = match train {
                Some(train) => {
                    let train = formats::read_dataset(&train)?;
                    let grouping = grouping_of(&train.scenes, &cfg)?;
                    training::train_replicas(&train.scenes, &grouping, &cfg.train, replicas)?
                }
                None => checkpoint.iter().map(|p| formats::read_checkpoint(p)).collect::<Result<Vec<_>>>()?,
            };
            let bias = inference::bias_estimate(&models, &test.scenes, cfg.combiner)?;
            match out {
                Some(p) => write_json(&p, &bias)?,
                None => println!("{}", serde_json::to_string_pretty(&bias)?),
            }
            Ok(())
        }
        Command::Diag { baseline, improved, out } => {
            let diag = cmd_diag(&baseline, &improved)?;
            match out {
                Some(p) => write_json(&p, &diag)?,
                None => println!("{}", serde_json::to_string_pretty(&diag)?),
            }
            Ok(())
        }
        Command::Report { cfg, out_dir } => {
            let cfg = load_config(&cfg)?;
            let out_dir = out_dir.unwrap_or_else(|| cfg.out_dir.clone());
            let _lock = DirLock::acquire(&out_dir)?;
            for (name, report) in cmd_report(&cfg, &out_dir)? {
                print!("{}", summary_line(&name, &report));
            }
            Ok(())
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn grouping_of(scenes: &[SceneSample], cfg: &ExperimentConfig) -> Result<CategoryGrouping> {
    let profile = synthgen::compute_frequency(scenes, cfg.generator.classes)?;
    synthgen::make_grouping(&profile, cfg.grouping_mode())
}

/// Generates one split and writes it as a MEDS file.
pub fn cmd_gen(cfg: &ExperimentConfig, split: Split, out: &Path) -> Result<DatasetFile> {
    let gen = cfg.generator_for(split);
    let data = DatasetFile { classes: gen.classes, seed: gen.seed, scenes: synthgen::generate_dataset(&gen)? };
    formats::write_dataset(out, &data)?;
    Ok(data)
}

/// Rank, category, group, pixel count and frequency, one row per category.
pub fn frequency_table(scenes: &[SceneSample], cfg: &ExperimentConfig) -> Result<String> {
    let profile = synthgen::compute_frequency(scenes, cfg.generator.classes)?;
    let grouping = synthgen::make_grouping(&profile, cfg.grouping_mode())?;
    let mut out = format!("{:>4} {:>8} {:>5} {:>10} {:>9}\n", "rank", "category", "group", "pixels", "freq");
    for (rank, &k) in grouping.order.iter().enumerate() {
        out.push_str(&format!(
            "{:>4} {:>8} {:>5} {:>10} {:>9.5}\n",
            rank + 1,
            k,
            grouping.group_of[k].name(),
            profile.counts[k],
            profile.freqs[k]
        ));
    }
    for g in Group::ALL {
        let share: f64 = grouping.members(g).iter().map(|&k| profile.freqs[k]).sum();
        out.push_str(&format!("{} share {:.3}\n", g.name(), share));
    }
    Ok(out)
}

/// Stage 1 on a dataset file; writes the checkpoint and the loss trace.
pub fn cmd_train(cfg: &ExperimentConfig, data: &Path, out: &Path, trace: &Path) -> Result<TrainedModel> {
    let train = formats::read_dataset(data)?;
    check_classes(&train, cfg, data)?;
    let grouping = grouping_of(&train.scenes, cfg)?;
    let mut model = training::train_stage1(&train.scenes, &grouping, &cfg.train)?;
    model.provenance.config = cfg.echo();
    formats::write_checkpoint(out, &model)?;
    write_text(trace, &model.provenance.trace_csv())?;
    Ok(model)
}

fn check_classes(data: &DatasetFile, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    if data.classes != cfg.generator.classes {
        return Err(Error::invalid(format!(
            "{} has {} categories but the config says {}",
            path.display(),
            data.classes,
            cfg.generator.classes
        )));
    }
    Ok(())
}

pub fn cmd_train_moe(cfg: &ExperimentConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<TrainedModel> {
    let train = formats::read_dataset(data)?;
    let mut model = formats::read_checkpoint(checkpoint)?;
    if train.classes != model.dims.classes || train.dim() != model.dims.input_dim {
        return Err(Error::invalid(format!("{} does not match the checkpoint dimensions", data.display())));
    }
    let (calib, trace) = training::fit_moe(&model, &train.scenes, &cfg.train)?;
    model.calibration = Some(calib);
    model.provenance.moe_trace = trace;
    formats::write_checkpoint(out, &model)?;
    Ok(model)
}

/// Scores `model` on `scenes` and writes `report.json`, `confusion.csv` and
/// `plot.csv` into `out_dir`.
pub fn cmd_eval(cfg: &ExperimentConfig, model: &TrainedModel, scenes: &[SceneSample], out_dir: &Path) -> Result<MetricsReport> {
    let first = scenes.first().ok_or_else(|| Error::invalid("no test scenes"))?;
    if first.dim != model.dims.input_dim {
        return Err(Error::invalid("test features do not match the checkpoint"));
    }
    for s in scenes {
        s.check_labels(model.dims.classes)?;
    }
    inference::check_combiner(model, cfg.combiner)?;
    let resampled;
    let scenes = match cfg.distribution {
        Distribution::LongTail => scenes,
        Distribution::Uniform => {
            resampled = synthgen::uniform_resample(scenes, model.dims.classes, cfg.uniform_quota, cfg.generator.seed)?;
            &resampled[..]
        }
    };
    let mut report = inference::evaluate_report(model, scenes, cfg.combiner)?;
    report.config = cfg.echo();
    report.config.insert("checkpoint.mode".into(), model.mode.to_string());
    report.config.insert("checkpoint.seed".into(), model.provenance.seed.to_string());
    write_json(&out_dir.join("report.json"), &report)?;
    write_text(&out_dir.join("confusion.csv"), &report.confusion.to_csv())?;
    write_text(&out_dir.join("plot.csv"), &report.plot_csv())?;
    Ok(report)
}

fn embedded_confusion(path: &Path) -> Result<ConfusionMatrix> {
    let bytes = formats::read_file(path)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let cm = value.get("confusion").ok_or_else(|| Error::format(path, "report has no embedded confusion matrix"))?;
    let cm: ConfusionMatrix =
        serde_json::from_value(cm.clone()).map_err(|e| Error::format(path, format!("bad confusion matrix: {e}")))?;
    if cm.counts.len() != cm.classes * cm.classes {
        return Err(Error::format(path, "confusion matrix is not square"));
    }
    Ok(cm)
}

pub fn cmd_diag(baseline: &Path, improved: &Path) -> Result<metrics::DeltaFpDiagnostic> {
    metrics::delta_fp_diagnostic(&embedded_confusion(baseline)?, &embedded_confusion(improved)?)
}

/// Combiners scored by the `report` pipeline for a model with `k` experts.
pub fn pipeline_combiners(k: usize) -> Vec<Combiner> {
    let mut out = vec![Combiner::Moe, Combiner::Oracle];
    if k > 1 {
        out.extend([Combiner::UniformAverage, Combiner::SoftmaxThreshold(crate::ensemble::SOFTMAX_THRESHOLD), Combiner::Argmax, Combiner::GroupAverage]);
    }
    out.extend((0..k).map(Combiner::Single));
    out
}

/// gen → train → train-moe → eval with every combiner, all under `out_dir`.
pub fn cmd_report(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<(String, MetricsReport)>> {
    write_text(&out_dir.join("config.txt"), &cfg.to_text())?;
    let train_path = out_dir.join("train.meds");
    let test_path = out_dir.join("test.meds");
    let ckpt = out_dir.join("model.medc");
    cmd_gen(cfg, Split::Train, &train_path)?;
    let test = cmd_gen(cfg, Split::Test, &test_path)?;
    cmd_train(cfg, &train_path, &ckpt, &out_dir.join("model.trace.csv"))?;
    let model = cmd_train_moe(cfg, &train_path, &ckpt, &ckpt)?;
    let mut out = Vec::new();
    for combiner in pipeline_combiners(model.experts.len()) {
        let name = combiner.to_string();
        let dir = out_dir.join(format!("eval-{}", name.replace(':', "")));
        let report = cmd_eval(&ExperimentConfig { combiner, ..cfg.clone() }, &model, &test.scenes, &dir)?;
        out.push((name, report));
    }
    Ok(out)
}

fn summary_line(name: &str, r: &MetricsReport) -> String {
    let f = |v: Option<f64>| v.map_or("   -  ".to_string(), |x| format!("{:6.2}", 100.0 * x));
    format!(
        "{name:<12} mIoU {:6.2}  mAcc {:6.2}  head {}  body {}  tail {}\n",
        100.0 * r.overall.miou,
        100.0 * r.overall.macc,
        f(r.group(Group::Head).macc),
        f(r.group(Group::Body).macc),
        f(r.group(Group::Tail).macc)
    )
}
