//! Run reports and their on-disk form.
//!
//! `report.jsonl` holds one `{"record":"epoch",..}` line per completed epoch
//! followed by one `{"record":"summary",..}` line. Every line carries
//! `schema_version`. Wall-clock timings live in `timings.json` next to it,
//! so the report itself is byte-identical across reruns of the same seed.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.jsonl";
pub const TIMINGS_FILE: &str = "timings.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_seconds: f64,
    pub inference_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset_fingerprint: u64,
    pub param_count: usize,
    /// Loss over the whole training split before the first update.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored (0 means the initial ones).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Loss over the whole training split with the restored parameters.
    pub final_train_loss: f64,
    pub test_loss: f64,
    pub test_metric: Metric,
    pub stopped_early: bool,
    /// Set when training was aborted by a non-finite value.
    pub diverged: Option<String>,
    #[serde(skip)]
    pub timings: Timings,
}

impl RunReport {
    pub fn is_diverged(&self) -> bool {
        self.diverged.is_some()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Epoch {
        schema_version: u32,
        #[serde(flatten)]
        epoch: EpochRecord,
    },
    Summary {
        schema_version: u32,
        #[serde(flatten)]
        report: Box<RunReport>,
    },
}

/// Writes `report.jsonl` and `timings.json` into `dir` (created if needed).
pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in &report.epochs {
        let line = Line::Epoch {
            schema_version: REPORT_SCHEMA_VERSION,
            epoch: e.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    let mut summary = report.clone();
    summary.epochs.clear();
    serde_json::to_writer(
        &mut out,
        &Line::Summary {
            schema_version: REPORT_SCHEMA_VERSION,
            report: Box::new(summary),
        },
    )?;
    out.push(b'\n');
    let path = dir.join(REPORT_FILE);
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;

    let path = dir.join(TIMINGS_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &report.timings)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads a report back. Timings are restored from `timings.json` when
/// present.
pub fn read_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut epochs = Vec::new();
    let mut summary = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parsed: Line = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        let (Line::Epoch { schema_version, .. } | Line::Summary { schema_version, .. }) = &parsed;
        if *schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Data(format!("unsupported report schema {schema_version}")));
        }
        match parsed {
            Line::Epoch { epoch, .. } => epochs.push(epoch),
            Line::Summary { report, .. } => summary = Some(*report),
        }
    }
    let mut report = summary.ok_or_else(|| Error::Data(format!("{} has no summary record", path.display())))?;
    report.epochs = epochs;
    let tpath = dir.join(TIMINGS_FILE);
    if let Ok(t) = fs::read_to_string(&tpath) {
        report.timings = serde_json::from_str(&t)?;
    }
    Ok(report)
}
