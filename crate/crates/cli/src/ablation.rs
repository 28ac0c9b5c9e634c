//! Every configured mode × seed, aggregated into one table.

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::run::{
    append_jsonl, evaluate_model, load_data, metric_columns, result_record, timestamp, train_into, EvalSplit,
    ACCURACY, MAE, MAE_CORRECT, MCCR, RESULTS_FILE,
};
use mtl_core::data::Dataset;
use mtl_core::multitask::ExperimentMode;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const TABLE_COLUMNS: [&str; 4] = [ACCURACY, MAE, MAE_CORRECT, MCCR];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Failed,
}

/// Seed-mean metrics of one mode. Accuracy is in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub mode: ExperimentMode,
    pub status: RowStatus,
    pub runs: usize,
    #[serde(rename = "Accuracy", skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(rename = "MAE", skip_serializing_if = "Option::is_none", default)]
    pub mae: Option<f64>,
    #[serde(rename = "MAE-Correct", skip_serializing_if = "Option::is_none", default)]
    pub mae_correct: Option<f64>,
    #[serde(rename = "MCCR", skip_serializing_if = "Option::is_none", default)]
    pub mccr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl AblationRow {
    pub fn column(&self, name: &str) -> Option<f64> {
        match name {
            ACCURACY => self.accuracy,
            MAE => self.mae,
            MAE_CORRECT => self.mae_correct,
            MCCR => self.mccr,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub columns: Vec<String>,
    pub seeds: Vec<u64>,
    pub split: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, mode: ExperimentMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn failed(&self) -> Vec<&AblationRow> {
        self.rows.iter().filter(|r| r.status == RowStatus::Failed).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("Method,mode,status,{}\n", self.columns.join(","));
        for r in &self.rows {
            let status = if r.status == RowStatus::Ok { "ok" } else { "failed" };
            let _ = write!(out, "{},{},{status}", r.method, r.mode);
            for c in &self.columns {
                match r.column(c) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Fixed-width rendering; `-` marks a metric the mode does not produce.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}", "Method");
        for c in &self.columns {
            let _ = write!(out, "  {c:>12}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<width$}", r.method);
            if r.status == RowStatus::Failed {
                let _ = write!(out, "  FAILED: {}", r.error.as_deref().unwrap_or("unknown error"));
            } else {
                for c in &self.columns {
                    let cell = match r.column(c) {
                        Some(v) if c == MCCR => format!("{v:.4}"),
                        Some(v) => format!("{v:.2}"),
                        None => "-".into(),
                    };
                    let _ = write!(out, "  {cell:>12}");
                }
            }
            out.push('\n');
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "\nmeans over seeds {} on the {} split; accuracy in %, MAE in kcal",
            seeds.join(", "),
            self.split
        );
        out
    }
}

/// Where one sub-run landed; kept out of the table so the table stays
/// identical across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEntry {
    pub mode: ExperimentMode,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct AblationOutcome {
    pub dir: PathBuf,
    pub table: AblationTable,
    pub runs: Vec<RunEntry>,
    pub any_diverged: bool,
}

impl AblationOutcome {
    /// `Err` when any row failed, for the exit code.
    pub fn into_result(self) -> Result<Self> {
        let failed: Vec<String> = self.table.failed().iter().map(|r| r.mode.to_string()).collect();
        if failed.is_empty() {
            Ok(self)
        } else {
            Err(CliError::Ablation {
                failed,
                diverged: self.any_diverged,
            })
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn aggregate(mode: ExperimentMode, runs: &[&RunEntry]) -> AblationRow {
    let failures: Vec<String> = runs
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("seed {}: {e}", r.seed)))
        .collect();
    let mut row = AblationRow {
        method: mode.label().to_string(),
        mode,
        status: RowStatus::Ok,
        runs: runs.len(),
        accuracy: None,
        mae: None,
        mae_correct: None,
        mccr: None,
        error: None,
    };
    if !failures.is_empty() {
        row.status = RowStatus::Failed;
        row.error = Some(failures.join("; "));
        return row;
    }
    let col = |name: &str| -> Option<f64> {
        let vals: Option<Vec<f64>> = runs.iter().map(|r| r.metrics.get(name).copied()).collect();
        vals.filter(|v| !v.is_empty()).map(|v| mean(&v))
    };
    row.accuracy = col(ACCURACY);
    row.mae = col(MAE);
    // The joint metrics are reported for the feature-adaptation rows only.
    if mode.cdfa() {
        row.mae_correct = col(MAE_CORRECT);
        row.mccr = col(MCCR);
    }
    row
}

/// Trains and evaluates every configured mode for every seed on `data`,
/// writing per-run artifacts under `dir`. Sub-run failures are recorded in
/// the table rather than returned.
pub fn run_ablation_on(
    cfg: &ExperimentConfig,
    data: &Dataset,
    data_path: &Path,
    dir: &Path,
    mut progress: impl FnMut(&RunEntry),
) -> Result<AblationOutcome> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut runs = Vec::new();
    let mut any_diverged = false;
    for &mode in &cfg.ablation.modes {
        for &seed in &cfg.ablation.seeds {
            let mut sub = cfg.clone();
            sub.mode = mode;
            sub.seed = seed;
            sub.train.seed = seed;
            let run_dir = dir.join(format!("{}-s{seed}", mode.name()));
            let result = train_into(&sub, data, data_path, &run_dir).and_then(|out| {
                let report = evaluate_model(&out.model, data, data_path, EvalSplit::Test, &sub)?;
                let ckpt = run_dir.join(crate::run::CHECKPOINT_FILE);
                let record = result_record(mode, EvalSplit::Test.name(), &ckpt.display().to_string(), &report);
                append_jsonl(&run_dir.join(RESULTS_FILE), &record)?;
                Ok(report)
            });
            let entry = match result {
                Ok(report) => RunEntry {
                    mode,
                    seed,
                    run_dir,
                    metrics: metric_columns(&report).into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
                    error: None,
                },
                Err(e) => {
                    any_diverged |= matches!(
                        e,
                        CliError::Core(mtl_core::Error::Diverged { .. } | mtl_core::Error::NonFinite { .. })
                    );
                    RunEntry {
                        mode,
                        seed,
                        run_dir,
                        metrics: BTreeMap::new(),
                        error: Some(e.to_string()),
                    }
                }
            };
            progress(&entry);
            runs.push(entry);
        }
    }
    let rows = cfg
        .ablation
        .modes
        .iter()
        .map(|&m| {
            let mine: Vec<&RunEntry> = runs.iter().filter(|r| r.mode == m).collect();
            aggregate(m, &mine)
        })
        .collect();
    let table = AblationTable {
        columns: TABLE_COLUMNS.iter().map(|c| c.to_string()).collect(),
        seeds: cfg.ablation.seeds.clone(),
        split: EvalSplit::Test.name().to_string(),
        rows,
    };
    write_table(dir, &table, &runs)?;
    Ok(AblationOutcome {
        dir: dir.to_path_buf(),
        table,
        runs,
        any_diverged,
    })
}

fn write_table(dir: &Path, table: &AblationTable, runs: &[RunEntry]) -> Result<()> {
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    };
    let json = serde_json::to_string_pretty(table).map_err(mtl_core::Error::from)?;
    write("table.json", json + "\n")?;
    write("table.csv", table.to_csv())?;
    write("table.txt", table.to_text())?;
    let manifest = serde_json::to_string_pretty(runs).map_err(mtl_core::Error::from)?;
    write("runs.json", manifest + "\n")
}

/// Loads the configured dataset and runs the ablation into
/// `{output_dir}/ablation-{timestamp}`.
pub fn ablation(cfg: &ExperimentConfig, progress: impl FnMut(&RunEntry)) -> Result<AblationOutcome> {
    let data = load_data(&cfg.data.path)?;
    let dir = cfg.output_dir.join(format!("ablation-{}", timestamp()));
    if dir.exists() {
        return Err(CliError::OutputExists(dir));
    }
    run_ablation_on(cfg, &data, &cfg.data.path, &dir, progress)
}
