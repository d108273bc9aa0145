//! `landmoe` command line.
//!
//! Configuration precedence is defaults, then `--config` (key=value text),
//! then flags. Failures print one `error: kind=<kind> <message>` line to
//! stderr and exit with 1; usage errors exit with 2.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::adapter::InsertionPlan;
use crate::checkpoint::{load_records, model_from_records, Payload, Record};
use crate::data::{save_scene, Experiment, SceneMeta};
use crate::error::{Error, Result};
use crate::train::{evaluate, grad_check, train_run, worker_count, GradCheckOptions, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "landmoe", version, about = "Frequency-aware low-rank token expert adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train adapters and head on the source domain.
    Train(CommonArgs),
    /// Evaluate a checkpoint on the target domains.
    Eval(CommonArgs),
    /// Train Freeze, FAF-only, MoLTE-only and Full variants.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Seeds to average over; defaults to `--seed`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Sampled coordinates per parameter group.
        #[arg(long, default_value_t = 64)]
        coords: usize,
        /// Balancing weight used for the check.
        #[arg(long = "check-lambda", default_value_t = 0.1)]
        check_lambda: f64,
    },
    /// Write the experiment's scenes in the checkpoint container.
    GenData(CommonArgs),
    /// Print the trainable parameter breakdown.
    Params(CommonArgs),
    /// Per-class accuracy tables for every target domain of a checkpoint.
    ExportPlotData(CommonArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// Plain-text key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long = "weight-decay")]
    pub weight_decay: Option<f64>,
    /// Comma-separated expert ranks.
    #[arg(long)]
    pub ranks: Option<String>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long = "tokens-per-expert")]
    pub tokens_per_expert: Option<usize>,
    #[arg(long)]
    pub topk: Option<usize>,
    /// full, shallow[:q], deep[:q], specific:<list> or freeze.
    #[arg(long)]
    pub plan: Option<String>,
    #[arg(long = "scale-by-gate")]
    pub scale_by_gate: bool,
    #[arg(long)]
    pub dtype: Option<String>,
    #[arg(long = "train-scenes")]
    pub train_scenes: Option<usize>,
    #[arg(long = "test-scenes")]
    pub test_scenes: Option<usize>,
    /// Any further `key=value` setting.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl CommonArgs {
    fn settings(&self) -> Result<Vec<(String, String)>> {
        let mut s: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                s.push((k.to_string(), v));
            }
        };
        put("profile", self.profile.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("learning_rate", self.lr.map(|v| v.to_string()));
        put("batch_size", self.batch.map(|v| v.to_string()));
        put("lambda", self.lambda.map(|v| v.to_string()));
        put("weight_decay", self.weight_decay.map(|v| v.to_string()));
        put("experts", self.experts.map(|v| v.to_string()));
        put("ranks", self.ranks.clone());
        put("tokens_per_expert", self.tokens_per_expert.map(|v| v.to_string()));
        put("top_k", self.topk.map(|v| v.to_string()));
        put("plan", self.plan.clone());
        put("scale_by_gate", self.scale_by_gate.then(|| "true".to_string()));
        put("dtype", self.dtype.clone());
        put("train_scenes", self.train_scenes.map(|v| v.to_string()));
        put("test_scenes", self.test_scenes.map(|v| v.to_string()));
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")));
            };
            s.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(s)
    }

    /// Defaults, then `base` (a stored configuration), then the config
    /// file, then flags.
    fn resolve(&self, base: Option<&str>) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(text) = base {
            cfg.apply_kv(text)?;
        }
        if let Some(path) = &self.config {
            cfg.apply_kv(&fs::read_to_string(path)?)?;
        }
        for (k, v) in self.settings()? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_config(out: &mut dyn Write, cfg: &TrainConfig) -> Result<()> {
    writeln!(out, "# resolved configuration (seed {})", cfg.seed)?;
    for line in cfg.to_kv().lines() {
        writeln!(out, "  {line}")?;
    }
    Ok(())
}

fn list_files(out: &mut dyn Write, files: &[PathBuf]) -> Result<()> {
    writeln!(out, "wrote:")?;
    for f in files {
        writeln!(out, "  {}", f.display())?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>, files: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    files.push(path.to_path_buf());
    Ok(())
}

/// The stored training configuration of a checkpoint, if any.
fn checkpoint_config(records: &[Record]) -> Result<Option<String>> {
    match records.iter().find(|r| r.name == "meta.train") {
        Some(Record {
            payload: Payload::Bytes(b),
            ..
        }) => String::from_utf8(b.clone())
            .map(Some)
            .map_err(|_| Error::Format("training configuration is not UTF-8".into())),
        Some(_) => Err(Error::Format("`meta.train` is not a bytes record".into())),
        None => Ok(None),
    }
}

fn load_checkpoint(args: &CommonArgs) -> Result<(TrainConfig, crate::adapter::LandMoeModel)> {
    let path = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let records = load_records(path)?;
    let model = model_from_records(&records)?;
    let stored = checkpoint_config(&records)?;
    let mut cfg = args.resolve(stored.as_deref())?;
    cfg.model = model.cfg.clone();
    Ok((cfg, model))
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    checkpoint: String,
    split: &'a str,
    macc: f64,
    miou: f64,
    per_class_acc: Vec<Option<f64>>,
    per_class_iou: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct AblationRow {
    variant: &'static str,
    plan: String,
    trainable_params: usize,
    seeds: String,
    mean_best_miou: f64,
    mean_final_miou: f64,
    mean_final_macc: f64,
    final_miou_per_seed: String,
}

/// The four ablation variants applied to `base`.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let variant = |plan: Option<InsertionPlan>, molte: bool, faf: bool| {
        let mut c = base.clone();
        if let Some(p) = plan {
            c.model.plan = p;
        }
        c.model.use_molte = molte;
        c.model.use_faf = faf;
        c
    };
    vec![
        ("Freeze", variant(Some(InsertionPlan::Freeze), true, true)),
        ("FAF-only", variant(None, false, true)),
        ("MoLTE-only", variant(None, true, false)),
        ("Full", variant(None, true, true)),
    ]
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn run_command(cmd: Command, out: &mut dyn Write) -> Result<bool> {
    let threads = worker_count();
    match cmd {
        Command::Train(args) => {
            let cfg = args.resolve(None)?;
            print_config(out, &cfg)?;
            let report = train_run(&cfg, Some(&args.out), threads)?;
            for r in &report.history {
                writeln!(out, "epoch {:>3}  loss {:.6}  mAcc {:.2}  mIoU {:.2}", r.epoch, r.loss, r.macc, r.miou)?;
            }
            writeln!(out, "best epoch {} mIoU {:.4}", report.best_epoch, report.best_miou)?;
            list_files(out, &report.files)?;
        }
        Command::Eval(args) => {
            let (cfg, model) = load_checkpoint(&args)?;
            print_config(out, &cfg)?;
            let exp = Experiment::new(cfg.profile, cfg.seed, cfg.model.num_classes, cfg.model.channels);
            let targets = exp.target_scenes(&cfg.sizes())?;
            let m = evaluate(&model, &targets, threads)?.metrics()?;
            writeln!(out, "target mAcc {:.4} mIoU {:.4}", m.macc, m.miou)?;
            let summary = EvalSummary {
                checkpoint: args.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                split: "target",
                macc: m.macc,
                miou: m.miou,
                per_class_acc: m.per_class_acc,
                per_class_iou: m.per_class_iou,
            };
            let mut files = Vec::new();
            write_file(&args.out.join("eval.json"), serde_json::to_string_pretty(&summary)? + "\n", &mut files)?;
            list_files(out, &files)?;
        }
        Command::Ablate { common, seeds } => {
            let base = common.resolve(None)?;
            print_config(out, &base)?;
            let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds };
            let mut files = Vec::new();
            let mut rows = Vec::new();
            for (name, cfg) in ablation_variants(&base) {
                let mut best = Vec::new();
                let mut fin = Vec::new();
                let mut fin_acc = Vec::new();
                let mut params = 0;
                for &seed in &seeds {
                    let cfg = TrainConfig { seed, ..cfg.clone() };
                    let dir = common.out.join(name).join(format!("seed{seed}"));
                    let r = train_run(&cfg, Some(&dir), threads)?;
                    let last = r.history.last().expect("epoch 0 is always recorded");
                    writeln!(out, "{name:<10} seed {seed:<4} final mIoU {:.4}  best mIoU {:.4}", last.miou, r.best_miou)?;
                    params = last.trainable_params;
                    best.push(r.best_miou);
                    fin.push(last.miou);
                    fin_acc.push(last.macc);
                    files.extend(r.files);
                }
                rows.push(AblationRow {
                    variant: name,
                    plan: if cfg.model.plan == InsertionPlan::Freeze { "freeze".into() } else { cfg.model.plan.to_string() },
                    trainable_params: params,
                    seeds: seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
                    mean_best_miou: mean(&best),
                    mean_final_miou: mean(&fin),
                    mean_final_macc: mean(&fin_acc),
                    final_miou_per_seed: fin.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
                });
            }
            let path = common.out.join("ablation.csv");
            fs::create_dir_all(&common.out)?;
            let mut w = csv::Writer::from_path(&path)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            files.push(path);
            list_files(out, &files)?;
        }
        Command::Gradcheck {
            common,
            tol,
            coords,
            check_lambda,
        } => {
            let cfg = common.resolve(None)?;
            print_config(out, &cfg)?;
            let opts = GradCheckOptions {
                tol,
                lambda: check_lambda,
                coords_per_group: coords,
                seed: cfg.seed,
                threads,
                ..GradCheckOptions::default()
            };
            let report = grad_check(&cfg.model, &opts)?;
            writeln!(out, "{report}")?;
            let mut files = Vec::new();
            write_file(&common.out.join("gradcheck.txt"), format!("{report}\n"), &mut files)?;
            list_files(out, &files)?;
            return Ok(report.passed());
        }
        Command::GenData(args) => {
            let cfg = args.resolve(None)?;
            print_config(out, &cfg)?;
            let exp = Experiment::new(cfg.profile, cfg.seed, cfg.model.num_classes, cfg.model.channels);
            let sizes = cfg.sizes();
            let mut files = Vec::new();
            let sets = [
                ("source", exp.source_scenes(&sizes)?),
                ("source_eval", exp.source_eval_scenes(&sizes)?),
                ("target", exp.target_scenes(&sizes)?),
            ];
            for (split, scenes) in sets {
                for (i, scene) in scenes.iter().enumerate() {
                    let path = args.out.join(split).join(format!("{}_{i:04}.lmoe", scene.domain_tag));
                    fs::create_dir_all(path.parent().expect("joined path"))?;
                    let meta = SceneMeta {
                        domain_tag: scene.domain_tag.clone(),
                        seed: cfg.seed,
                        generator: exp.generator.clone(),
                        geo: exp
                            .targets
                            .iter()
                            .chain(std::iter::once(&exp.source))
                            .find(|d| d.name == scene.domain_tag)
                            .map_or_else(|| exp.source.geo.clone(), |d| d.geo.clone()),
                        sensor: exp
                            .targets
                            .iter()
                            .find(|d| d.name == scene.domain_tag)
                            .map(|d| d.sensor.clone()),
                    };
                    files.extend(save_scene(&path, scene, &meta)?);
                }
            }
            list_files(out, &files)?;
        }
        Command::Params(args) => {
            let cfg = args.resolve(None)?;
            print_config(out, &cfg)?;
            let model = crate::adapter::LandMoeModel::new(cfg.model.clone(), cfg.seed)?;
            let c = model.count_trainable_params();
            writeln!(out, "{c}")?;
            let json = serde_json::json!({
                "router": c.router,
                "experts": c.experts,
                "shared_mlp": c.shared_mlp,
                "filter": c.filter,
                "head": c.head,
                "adapter_total": c.adapter_total(),
                "total": c.total(),
            });
            let mut files = Vec::new();
            write_file(&args.out.join("params.json"), serde_json::to_string_pretty(&json)? + "\n", &mut files)?;
            list_files(out, &files)?;
        }
        Command::ExportPlotData(args) => {
            let (cfg, model) = load_checkpoint(&args)?;
            print_config(out, &cfg)?;
            let exp = Experiment::new(cfg.profile, cfg.seed, cfg.model.num_classes, cfg.model.channels);
            let targets = exp.target_scenes(&cfg.sizes())?;
            let k = cfg.model.num_classes;
            let path = args.out.join("per_class_acc.csv");
            fs::create_dir_all(&args.out)?;
            let mut w = csv::Writer::from_path(&path)?;
            let mut header = vec!["domain".to_string()];
            header.extend((1..=k).map(|c| format!("C{c}")));
            header.extend(["mAcc".to_string(), "mIoU".to_string()]);
            w.write_record(&header)?;
            let fmt = |v: Option<f64>| v.map_or_else(|| "--".to_string(), |x| format!("{x:.2}"));
            let mut all = crate::data::ConfusionMatrix::new(k);
            for d in &exp.targets {
                let scenes: Vec<_> = targets.iter().filter(|s| s.domain_tag == d.name).cloned().collect();
                let cm = evaluate(&model, &scenes, threads)?;
                all.merge(&cm)?;
                let m = cm.metrics()?;
                let mut row = vec![d.name.clone()];
                row.extend(m.per_class_acc.iter().map(|&v| fmt(v)));
                row.extend([format!("{:.2}", m.macc), format!("{:.2}", m.miou)]);
                w.write_record(&row)?;
            }
            let m = all.metrics()?;
            let mut row = vec!["all".to_string()];
            row.extend(m.per_class_acc.iter().map(|&v| fmt(v)));
            row.extend([format!("{:.2}", m.macc), format!("{:.2}", m.miou)]);
            w.write_record(&row)?;
            w.flush()?;
            list_files(out, &[path])?;
        }
    }
    Ok(true)
}

/// Runs the CLI on `argv` (including the program name), writing normal
/// output to `out`. Returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command, out) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} {msg}", e.kind());
            1
        }
    }
}

pub fn main_from_env() -> i32 {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    run(std::env::args_os(), &mut lock)
}
