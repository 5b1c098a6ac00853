//! Evaluation report files: full JSON with per-attack records and a CSV
//! summary with one row per evaluated configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{attack_success_rates, AttackRates, EvalRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub rates: AttackRates,
    /// `(IoU threshold, host recall)` after the attack.
    pub recall: Vec<(f64, f64)>,
    /// Clean AP at 0.5 and 0.7 IoU where computed.
    pub ap: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<SummaryRow>,
    pub records: Vec<(String, Vec<EvalRecord>)>,
}

impl EvalReport {
    /// Checks that stored flags agree with the stored detections.
    pub fn verify(&self) -> Result<()> {
        for (label, records) in &self.records {
            for r in records {
                let mut again = r.clone();
                again.rederive();
                if &again != r {
                    return Err(Error::invalid(format!("{label}: record {}/{} flags are stale", r.scene, r.host)));
                }
            }
            if let Some(row) = self.rows.iter().find(|row| &row.label == label) {
                if row.rates != attack_success_rates(records) {
                    return Err(Error::invalid(format!("{label}: summary rates disagree with records")));
                }
            }
        }
        Ok(())
    }
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(path, e))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

/// Columns: `label,fn_asr,fp_asr,asr`, in percent.
pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut out = String::from("label,fn_asr,fp_asr,asr\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.label, cell(r.rates.fn_asr), cell(r.rates.fp_asr), cell(r.rates.asr)));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
