//! Run outputs: per-epoch metrics CSV and a TOML run summary.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{AblationRun, EpochMetrics, RunResult};
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const METRICS_SCHEMA: &str = "# sfuda.metrics/1";
pub const SUMMARY_SCHEMA: &str = "sfuda.summary/1";
pub const ABLATION_SCHEMA: &str = "# sfuda.ablation/1";

pub const METRICS_COLUMNS: [&str; 8] = [
    "epoch",
    "target_acc",
    "pl_acc",
    "mean_weight",
    "kept_negative_fraction",
    "loss_cls",
    "loss_ctr",
    "loss_div",
];

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{METRICS_SCHEMA}")?;
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    writer.write_record(METRICS_COLUMNS)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path)?;
    let body = text
        .strip_prefix(METRICS_SCHEMA)
        .and_then(|rest| rest.strip_prefix('\n'))
        .ok_or_else(|| Error::Checkpoint(format!("{} lacks the metrics schema line", path.display())))?;
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let rows = reader.deserialize().collect::<std::result::Result<Vec<EpochMetrics>, _>>()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub source_accuracy: f64,
    pub source_only_target_accuracy: f64,
    pub initial_pseudo_label_accuracy: f64,
    pub final_target_accuracy: f64,
    pub final_pseudo_label_accuracy: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub seed: u64,
    pub wall_time_seconds: f64,
    pub results: RunOutcome,
    pub config: RunConfig,
}

impl RunSummary {
    pub fn new(result: &RunResult, config: &RunConfig) -> Self {
        Self {
            schema: SUMMARY_SCHEMA.to_string(),
            seed: result.seed,
            wall_time_seconds: result.wall_time.as_secs_f64(),
            results: RunOutcome {
                source_accuracy: result.source_accuracy,
                source_only_target_accuracy: result.source_only_target_accuracy,
                initial_pseudo_label_accuracy: result.initial_pseudo_label_accuracy,
                final_target_accuracy: result.final_target_accuracy(),
                final_pseudo_label_accuracy: result.final_pseudo_label_accuracy(),
                epochs: result.metrics.len(),
            },
            config: config.effective(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Serialize)]
struct AblationRow<'a> {
    cell: &'a str,
    seed: u64,
    source_only_target_acc: f64,
    final_target_acc: f64,
    final_pl_acc: f64,
    wall_time_seconds: f64,
}

/// One row per (cell, seed).
pub fn write_ablation_summary(path: &Path, runs: &[AblationRun]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{ABLATION_SCHEMA}")?;
    let mut writer = csv::Writer::from_writer(file);
    for run in runs {
        writer.serialize(AblationRow {
            cell: &run.cell,
            seed: run.result.seed,
            source_only_target_acc: run.result.source_only_target_accuracy,
            final_target_acc: run.result.final_target_accuracy(),
            final_pl_acc: run.result.final_pseudo_label_accuracy(),
            wall_time_seconds: run.result.wall_time.as_secs_f64(),
        })?;
    }
    writer.flush()?;
    Ok(())
}
