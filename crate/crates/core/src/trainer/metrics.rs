use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalMode, TrainError};
use crate::synthdata::Split;

/// One evaluation of a model on one split.
///
/// `wall_clock_seconds` is kept out of the serialised form so metric files
/// are reproducible byte for byte; timings are written separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub eval_mode: EvalMode,
    pub m: usize,
    pub mse: f64,
    /// Fraction of ground-truth signal pixels inside the applied mask.
    /// Absent when no mask is applied.
    pub mask_overlap: Option<f64>,
    /// Mean gate score over the selected features.
    pub mean_selected_score: Option<f64>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl MetricsRecord {
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.mse.is_nan() || self.mse < 0.0 {
            return Err(format!("mse {} is negative or NaN", self.mse));
        }
        if let Some(o) = self.mask_overlap {
            if !(0.0..=1.0).contains(&o) {
                return Err(format!("overlap {o} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// One JSON object per line.
pub fn jsonl_string(records: &[MetricsRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("metrics serialise") + "\n")
        .collect()
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<(), TrainError> {
    let path = path.as_ref();
    std::fs::write(path, jsonl_string(records)).map_err(|e| io_err(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>, TrainError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| TrainError::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

pub const RECORD_CSV_HEADER: &str = "epoch,split,eval_mode,m,mse,mask_overlap,mean_selected_score";

pub fn records_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(RECORD_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:.9},{},{}\n",
            r.epoch,
            r.split.as_str(),
            r.eval_mode,
            r.m,
            r.mse,
            opt(r.mask_overlap),
            opt(r.mean_selected_score)
        ));
    }
    out
}

/// Elapsed time per record, in the same order as the metrics file.
pub fn write_timings(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<(), TrainError> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    writeln!(f, "epoch,split,eval_mode,m,wall_clock_seconds").map_err(|e| io_err(path, e))?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{:.3}",
            r.epoch,
            r.split.as_str(),
            r.eval_mode,
            r.m,
            r.wall_clock_seconds
        )
        .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: EvalMode,
    pub m: usize,
    /// Epochs of the naive-AE arm.
    pub matched_epochs: usize,
    pub matched_mse: f64,
    /// Epochs this arm was trained for in total.
    pub final_epochs: usize,
    pub final_mse: f64,
    pub final_overlap: Option<f64>,
    pub final_score: Option<f64>,
}

/// Consolidated results keyed by `(mode, m)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, mode: EvalMode, m: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode && r.m == m)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "mode,m,matched_epochs,matched_mse,final_epochs,final_mse,final_overlap,final_score\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.9},{},{:.9},{},{}\n",
                r.mode,
                r.m,
                r.matched_epochs,
                r.matched_mse,
                r.final_epochs,
                r.final_mse,
                opt(r.final_overlap),
                opt(r.final_score)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| io_err(path, e))
    }
}
