//! The `gen-data`, `train` and `eval` commands.

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use mtl_core::data::{build_dataset, load_dataset, save_dataset, Dataset, Split, CHANNELS};
use mtl_core::metrics::{build_masked_report, MetricsReport};
use mtl_core::multitask::{
    evaluate, load_checkpoint, save_checkpoint, task_mask, EpochLog, ExperimentMode, ModelSpec, Trainer,
    TwinModel,
};
use serde_json::{json, Map, Value};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOSS_FILE: &str = "losses.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RESULTS_FILE: &str = "results.jsonl";

/// UTC, millisecond resolution, filesystem-safe.
pub fn timestamp() -> String {
    chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ").to_string()
}

fn is_nonempty_dir(path: &Path) -> Result<bool> {
    match fs::read_dir(path) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) if e.kind() == std::io::ErrorKind::NotADirectory => Ok(true),
        Err(e) => Err(CliError::io(path, e)),
    }
}

/// Refuses to write into a non-empty directory unless `force` is set.
pub fn ensure_writable_dir(path: &Path, force: bool) -> Result<()> {
    if !force && is_nonempty_dir(path)? {
        return Err(CliError::OutputExists(path.to_path_buf()));
    }
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct GenSummary {
    pub dir: PathBuf,
    pub train: usize,
    pub test: usize,
    pub n_classes: usize,
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<GenSummary> {
    let g = &cfg.data.generator;
    if g.n_classes < 2 {
        return Err(CliError::Usage(format!(
            "data.generator.n_classes must be at least 2, got {}",
            g.n_classes
        )));
    }
    if g.per_class == 0 || g.image_size == 0 {
        return Err(CliError::Usage("data.generator.per_class and image_size must be positive".into()));
    }
    ensure_writable_dir(out, force)?;
    let ds = build_dataset(g)?;
    save_dataset(&ds, out)?;
    Ok(GenSummary {
        dir: out.to_path_buf(),
        train: ds.subset(Split::Train).len(),
        test: ds.subset(Split::Test).len(),
        n_classes: ds.n_classes(),
    })
}

fn describe_spec(spec: &ModelSpec) -> String {
    format!(
        "model {} with {} classes, {}-channel {}x{} input",
        spec.mode,
        spec.n_classes,
        spec.backbone.in_channels,
        spec.backbone.input_size,
        spec.backbone.input_size
    )
}

fn describe_dataset(data: &Dataset, path: &Path) -> String {
    let size = match data.image_size() {
        Some(s) => format!("{s}x{s}"),
        None => "mixed-size".to_string(),
    };
    format!(
        "dataset {} with {} classes, {CHANNELS}-channel {size} images",
        path.display(),
        data.n_classes()
    )
}

/// The model must match the dataset's class count and image geometry.
pub fn check_compatible(spec: &ModelSpec, data: &Dataset, path: &Path) -> Result<()> {
    let ok = spec.n_classes == data.n_classes()
        && spec.backbone.in_channels == CHANNELS
        && data.image_size() == Some(spec.backbone.input_size);
    if ok {
        Ok(())
    } else {
        Err(mtl_core::Error::ArchitectureMismatch {
            expected: describe_spec(spec),
            found: describe_dataset(data, path),
        }
        .into())
    }
}

pub fn load_data(path: &Path) -> Result<Dataset> {
    if !path.join("manifest.json").exists() {
        return Err(CliError::Usage(format!(
            "no dataset at {} (run `mtl gen-data` first or set data.path)",
            path.display()
        )));
    }
    Ok(load_dataset(path)?)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub model: TwinModel,
    pub logs: Vec<EpochLog>,
}

/// Trains `cfg.mode` on the train split of `data` and writes the config
/// snapshot, the streamed loss trace and the checkpoint into `run_dir`.
/// On divergence the epochs completed so far stay in the loss trace.
pub fn train_into(cfg: &ExperimentConfig, data: &Dataset, data_path: &Path, run_dir: &Path) -> Result<TrainOutcome> {
    let spec = cfg.model_spec(cfg.mode, data.n_classes());
    check_compatible(&spec, data, data_path)?;
    let train = data.subset(Split::Train);
    if train.is_empty() {
        return Err(mtl_core::Error::EmptyInput("training split").into());
    }
    fs::create_dir_all(run_dir).map_err(|e| CliError::io(run_dir, e))?;
    let cfg_path = run_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| CliError::io(&cfg_path, e))?;

    let log_path = run_dir.join(LOSS_FILE);
    let file = File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut write_err = None;
    let mut trainer = Trainer::new(TwinModel::new(spec)?, cfg.train.clone())?;
    let fitted = trainer.fit_with(&train, |entry| {
        if write_err.is_some() {
            return;
        }
        let line = serde_json::to_string(entry).expect("epoch log serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_err = Some(e);
        }
    });
    if let Some(e) = write_err {
        return Err(CliError::io(&log_path, e));
    }
    let logs = fitted?;
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&trainer.model, &ckpt)?;
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        model: trainer.model,
        logs,
    })
}

/// `{mode}-s{seed}-{timestamp}` under the configured output directory.
pub fn new_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg
        .output_dir
        .join(format!("{}-s{}-{}", cfg.mode.name(), cfg.seed, timestamp()));
    if dir.exists() {
        return Err(CliError::OutputExists(dir));
    }
    Ok(dir)
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = load_data(&cfg.data.path)?;
    let run_dir = new_run_dir(cfg)?;
    train_into(cfg, &data, &cfg.data.path, &run_dir)
}

/// Which part of a dataset to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    Train,
    Test,
    All,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Test => "test",
            EvalSplit::All => "all",
        }
    }

    pub fn select(self, data: &Dataset) -> Dataset {
        match self {
            EvalSplit::Train => data.subset(Split::Train),
            EvalSplit::Test => data.subset(Split::Test),
            EvalSplit::All => data.clone(),
        }
    }
}

/// Result-file column names, in table order.
pub const ACCURACY: &str = "Accuracy";
pub const MAE: &str = "MAE";
pub const MAE_CORRECT: &str = "MAE-Correct";
pub const MCCR: &str = "MCCR";
pub const EP: &str = "EP";

/// The report's metrics under their table column names, accuracy in
/// percent. Metrics the model cannot produce are left out.
pub fn metric_columns(report: &MetricsReport) -> Vec<(&'static str, f64)> {
    [
        (ACCURACY, report.accuracy.map(|a| a * 100.0)),
        (MAE, report.mae),
        (MAE_CORRECT, report.mae_correct),
        (MCCR, report.mccr),
        (EP, report.ep),
    ]
    .into_iter()
    .filter_map(|(k, v)| v.map(|v| (k, v)))
    .collect()
}

fn round_to(v: f64, digits: i32) -> f64 {
    let p = 10f64.powi(digits);
    (v * p).round() / p
}

/// One line of `results.jsonl`.
pub fn result_record(mode: ExperimentMode, split: &str, source: &str, report: &MetricsReport) -> Value {
    let mut rec = Map::new();
    rec.insert("mode".into(), json!(mode.name()));
    rec.insert("method".into(), json!(mode.label()));
    rec.insert("split".into(), json!(split));
    rec.insert("checkpoint".into(), json!(source));
    let mut rounded = Map::new();
    for (k, v) in metric_columns(report) {
        rec.insert(k.into(), json!(v));
        rounded.insert(k.into(), json!(round_to(v, if k == MCCR { 4 } else { 2 })));
    }
    rec.insert("n_total".into(), json!(report.n_total));
    rec.insert("n_correct".into(), json!(report.n_correct));
    rec.insert("mccr_constant".into(), json!(report.mccr_constant));
    if !report.absent.is_empty() {
        rec.insert("absent".into(), json!(report.absent));
    }
    rec.insert("rounded".into(), Value::Object(rounded));
    Value::Object(rec)
}

pub fn append_jsonl(path: &Path, value: &Value) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    writeln!(f, "{value}").map_err(|e| CliError::io(path, e))
}

/// Evaluates an in-memory model on one split.
pub fn evaluate_model(
    model: &TwinModel,
    data: &Dataset,
    data_path: &Path,
    split: EvalSplit,
    cfg: &ExperimentConfig,
) -> Result<MetricsReport> {
    check_compatible(model.spec(), data, data_path)?;
    let subset = split.select(data);
    let records = evaluate(model, &subset, cfg.eval.batch_size)?;
    Ok(build_masked_report(&records, cfg.eval.mccr_constant, task_mask(model))?)
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub results_path: PathBuf,
    pub record: Value,
    pub report: MetricsReport,
}

/// Accepts a checkpoint file or a run directory containing one.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Appends the report to `results.jsonl` in `out`, or next to the
/// checkpoint when `out` is `None`.
pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, split: EvalSplit, out: Option<&Path>) -> Result<EvalOutcome> {
    let ckpt = resolve_checkpoint(checkpoint);
    if !ckpt.exists() {
        return Err(CliError::Usage(format!("no checkpoint at {}", ckpt.display())));
    }
    let model = load_checkpoint(&ckpt)?;
    let data = load_data(&cfg.data.path)?;
    let report = evaluate_model(&model, &data, &cfg.data.path, split, cfg)?;
    let record = result_record(model.mode(), split.name(), &ckpt.display().to_string(), &report);
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let results_path = dir.join(RESULTS_FILE);
    append_jsonl(&results_path, &record)?;
    Ok(EvalOutcome {
        results_path,
        record,
        report,
    })
}
