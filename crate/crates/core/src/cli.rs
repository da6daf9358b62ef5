//! Command-line front end: `synth`, `train`, `eval` and `infer`.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! failures at run time (divergence, I/O).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{generate, read_png, Dataset, Split};
use crate::error::{Error, Result};
use crate::infer::{evaluate, points_from_maps, ImageEvaluation, MetricsReport};
use crate::model::{load_checkpoint, read_checkpoint, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{EpochSummary, Regime, RegimeKind, Trainer};

#[derive(Debug, Parser)]
#[command(name = "sfcn", version, about = "Nucleus detection and classification with a sibling FCN")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the parallel kernels.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated dataset.
    Synth(SynthArgs),
    /// Train a model under one regime.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Detect and classify nuclei in one image.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (defaults to `paths.dataset`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of images.
    #[arg(long)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub regime: RegimeKind,
    /// Dataset directory (defaults to `paths.dataset`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Report directory (defaults to `paths.reports`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-image match records as JSON lines.
    #[arg(long)]
    pub per_image: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// RGB PNG at the model's input size.
    #[arg(long)]
    pub image: PathBuf,
    /// Write records here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write `det.npy` `[2,H,W]` and `cls.npy` `[K+1,H,W]` into this directory.
    #[arg(long)]
    pub dump_maps: Option<PathBuf>,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::ShapeMismatch { .. } => 1,
        _ => 2,
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::Config(format!("config file {} not found", path.display())));
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // Fails only if a pool already exists (e.g. a second call in-process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Infer(a) => cmd_infer(&cfg, a),
    }
}

fn require_dataset(dir: &Path) -> Result<()> {
    if dir.join("manifest.json").is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("no dataset at {} (manifest.json missing)", dir.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} not found", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(cfg: &RunConfig, a: &SynthArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
    let images = generate(&cfg.synth, cfg.seed, a.n)?;
    let names = cfg.synth.categories.iter().map(|c| c.name.clone()).collect();
    let ds = Dataset::new(images, names, cfg.seed, cfg.split_ratio)?;
    ds.save(&out)?;
    let counts: Vec<String> = Split::ALL.iter().map(|&s| format!("{s} {}", ds.split(s).len())).collect();
    eprintln!("wrote {} images to {} ({})", a.n, out.display(), counts.join(", "));
    Ok(())
}

/// Checks that a dataset matches the model's input size and category count.
fn check_dataset(ds: &Dataset, model: &ModelConfig) -> Result<()> {
    if let Some((h, w)) = ds.image_size() {
        if (h, w) != (model.image_height, model.image_width) {
            return Err(Error::Config(format!(
                "dataset images are {h}x{w}, model expects {}x{}",
                model.image_height, model.image_width
            )));
        }
    }
    if ds.categories.len() != model.num_categories {
        return Err(Error::Config(format!(
            "dataset has {} categories, model expects {}",
            ds.categories.len(),
            model.num_categories
        )));
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let data_dir = a.dataset.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
    require_dataset(&data_dir)?;
    let ds = Dataset::load(&data_dir)?;
    check_dataset(&ds, &cfg.model)?;
    let regime = Regime::new(a.regime, &cfg.train.budgets);
    let ckpt_dir = cfg.paths.checkpoints.join(a.regime.name());
    let report_dir = cfg.paths.reports.join(a.regime.name());
    create_dir(&report_dir)?;

    let quiet = a.quiet;
    let mut trainer = Trainer::new(&ds, cfg.train.clone(), cfg.objective.clone(), cfg.infer.clone(), cfg.seed)?
        .with_checkpoints(&ckpt_dir)
        .with_observer(move |s: &EpochSummary| {
            if !quiet {
                let val = s.val_score.map(|v| format!(" val {v:.4}")).unwrap_or_default();
                eprintln!(
                    "{} epoch {}/{} lr {} loss {:.5}{val}",
                    s.stage.name(),
                    s.epoch + 1,
                    s.epochs,
                    s.lr,
                    s.mean_loss
                );
            }
        });
    let result = trainer.run_regime(&cfg.model, &regime);

    // The log is written even when training diverges.
    let mut w = csv::Writer::from_path(report_dir.join("train_log.csv"))?;
    for row in &trainer.log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(report_dir.join("train_log.csv"), e))?;
    let mut w = csv::Writer::from_path(report_dir.join("validation.csv"))?;
    for row in &trainer.validation {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(report_dir.join("validation.csv"), e))?;
    let model = result?;

    let val = ds.split(Split::Val);
    let (report, _) = evaluate(&model, &val, &cfg.infer)?;
    write_reports(&report_dir, Split::Val, &report, &ds.categories)?;
    for p in &trainer.checkpoints {
        eprintln!("checkpoint {}", p.display());
    }
    eprint!("{}", summary(Split::Val, &report, &ds.categories));
    Ok(())
}

/// Loads a checkpoint against the run config, keeping the head layout the
/// checkpoint was trained with.
pub fn load_for_config(path: &Path, model: &ModelConfig) -> Result<Model> {
    require_file(path, "checkpoint")?;
    let stored = read_checkpoint(path)?;
    let expected = ModelConfig {
        heads: stored.config.heads,
        ..model.clone()
    };
    load_checkpoint(path, &expected)
}

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let data_dir = a.dataset.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
    require_dataset(&data_dir)?;
    let model = load_for_config(&a.checkpoint, &cfg.model)?;
    let ds = Dataset::load(&data_dir)?;
    check_dataset(&ds, &cfg.model)?;
    let images = ds.split(a.split);
    let (report, per_image) = evaluate(&model, &images, &cfg.infer)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.reports.clone());
    create_dir(&out)?;
    write_reports(&out, a.split, &report, &ds.categories)?;
    if a.per_image {
        write_per_image(&out.join(format!("eval_{}_images.jsonl", a.split)), &per_image)?;
    }
    if report.empty {
        eprintln!("warning: {} split has nothing to score; all metrics are zero", a.split);
    }
    print!("{}", summary(a.split, &report, &ds.categories));
    Ok(())
}

fn write_per_image(path: &Path, evals: &[ImageEvaluation]) -> Result<()> {
    let mut body = String::new();
    for e in evals {
        let rec = serde_json::json!({
            "id": e.id,
            "tp": e.matches.tp,
            "fp": e.matches.fp,
            "fn": e.matches.fn_,
            "pairs": e.matches.pairs,
            "points": e.points,
        });
        body.push_str(&rec.to_string());
        body.push('\n');
    }
    write_file(path, body)
}

/// One CSV row with detection, weighted classification and per-category F1.
pub fn write_reports(dir: &Path, split: Split, r: &MetricsReport, categories: &[String]) -> Result<()> {
    let path = dir.join(format!("eval_{split}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    let mut header: Vec<String> = [
        "split", "images", "tp", "fp", "fn", "det_precision", "det_recall", "det_f1", "cls_precision", "cls_recall",
        "cls_f1", "background_assigned", "empty",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(categories.iter().map(|c| format!("f1_{c}")));
    w.write_record(&header)?;
    let mut row = vec![
        split.to_string(),
        r.images.to_string(),
        r.tp.to_string(),
        r.fp.to_string(),
        r.fn_.to_string(),
        r.detection.precision.to_string(),
        r.detection.recall.to_string(),
        r.detection.f1.to_string(),
        r.weighted.precision.to_string(),
        r.weighted.recall.to_string(),
        r.weighted.f1.to_string(),
        r.background_assigned.to_string(),
        r.empty.to_string(),
    ];
    row.extend(r.per_category.iter().map(|c| c.prf.f1.to_string()));
    w.write_record(&row)?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_file(&dir.join(format!("eval_{split}_summary.txt")), summary(split, r, categories))
}

pub fn summary(split: Split, r: &MetricsReport, categories: &[String]) -> String {
    let mut s = String::new();
    if r.empty {
        s.push_str("WARNING: nothing to score, metrics are zero\n");
    }
    s.push_str(&format!("split {split}: {} images, TP {} FP {} FN {}\n", r.images, r.tp, r.fp, r.fn_));
    let line = |name: &str, p: &crate::infer::Prf| format!("{name:<16} P {:.4}  R {:.4}  F1 {:.4}\n", p.precision, p.recall, p.f1);
    s.push_str(&line("detection", &r.detection));
    s.push_str(&line("classification", &r.weighted));
    for c in &r.per_category {
        let name = categories.get(c.category as usize - 1).map_or("?", String::as_str);
        s.push_str(&format!("  {}", line(name, &c.prf)));
    }
    if r.background_assigned > 0 {
        s.push_str(&format!("matched detections assigned to background: {}\n", r.background_assigned));
    }
    s
}

pub fn cmd_infer(cfg: &RunConfig, a: &InferArgs) -> Result<()> {
    require_file(&a.image, "image")?;
    let model = load_for_config(&a.checkpoint, &cfg.model)?;
    let image = read_png(&a.image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if (h, w) != (model.config.image_height, model.config.image_width) {
        return Err(Error::Config(format!(
            "image is {h}x{w}, model expects {}x{}",
            model.config.image_height, model.config.image_width
        )));
    }
    let maps = model.predict(&image)?;
    let points = points_from_maps(&maps.det_probs, &maps.cls_cond_probs, &cfg.infer)?;
    let mut body = String::new();
    for p in &points {
        body.push_str(&serde_json::to_string(p)?);
        body.push('\n');
    }
    match &a.out {
        Some(path) => write_file(path, body)?,
        None => std::io::stdout()
            .write_all(body.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))?,
    }
    if let Some(dir) = &a.dump_maps {
        create_dir(dir)?;
        write_npy(&dir.join("det.npy"), &drop_batch(maps.det_probs)?)?;
        write_npy(&dir.join("cls.npy"), &drop_batch(maps.cls_cond_probs)?)?;
    }
    Ok(())
}

fn drop_batch(t: Tensor) -> Result<Tensor> {
    let s = t.shape()[1..].to_vec();
    t.reshape(&s)
}

/// Little-endian f64 array in NumPy `.npy` version 1.0 format.
pub fn write_npy(path: &Path, t: &Tensor) -> Result<()> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let shape = if dims.len() == 1 { format!("({},)", dims[0]) } else { format!("({})", dims.join(", ")) };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
    // Magic (6) + version (2) + length (2) + header + newline, padded to 64.
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + 8 * t.len());
    bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, bytes)
}
