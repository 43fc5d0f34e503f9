//! MAE report aggregation and text-table rendering.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Per-target MAE aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub target: String,
    pub mae: f64,
    pub count: usize,
    /// Unit string, e.g. mmHg, BPM, BRPM, %, MEQ/L, MMOL/L.
    pub unit: String,
    /// Short config identifier for traceability.
    pub fingerprint: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.mae < 0.0 || !self.mae.is_finite() {
            return Err(Error::Numeric(format!("MAE must be finite and >= 0, got {}", self.mae)));
        }
        if self.count == 0 {
            return Err(Error::Data("report over zero samples".into()));
        }
        Ok(())
    }
}

/// Display name + unit for the known targets; unknown targets fall back to
/// the raw name with no unit annotation.
pub fn target_display(target: &str) -> (String, String) {
    let (name, unit) = match target {
        "sbp" => ("Systolic BP", "mmHg"),
        "dbp" => ("Diastolic BP", "mmHg"),
        "hr" => ("Heart rate", "BPM"),
        "rr" => ("Resp. rate", "BRPM"),
        "spo2" => ("SpO2", "%"),
        "sodium" => ("Sodium", "MEQ/L"),
        "potassium" => ("Potassium", "MEQ/L"),
        "lactate" => ("Lactate", "MMOL/L"),
        other => (other, ""),
    };
    (name.to_string(), unit.to_string())
}

/// One labelled row of a rendered table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub reports: Vec<EvalReport>,
}

/// Table layouts mirroring the two reporting conventions: DBP/SBP slash
/// cells, and one task per row with its unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportLayout {
    BpSlash,
    TaskRows,
}

impl ReportLayout {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bp_slash" => Ok(ReportLayout::BpSlash),
            "task_rows" => Ok(ReportLayout::TaskRows),
            other => Err(Error::InvalidConfig(format!("unknown report layout '{other}'"))),
        }
    }
}

/// Format one DBP/SBP slash cell with two decimal places.
pub fn bp_slash_cell(dbp_mae: f64, sbp_mae: f64) -> String {
    format!("{dbp_mae:.2}/{sbp_mae:.2}")
}

/// Render reports as a UTF-8 text table.
///
/// `bp_slash` requires every row to carry both a `dbp` and an `sbp` report.
pub fn render_report(rows: &[ReportRow], layout: ReportLayout) -> Result<String> {
    for row in rows {
        for r in &row.reports {
            r.validate()?;
        }
    }
    let mut out = String::new();
    match layout {
        ReportLayout::BpSlash => {
            let label_w = rows
                .iter()
                .map(|r| r.label.len())
                .fold("Dataset".len(), usize::max);
            out.push_str(&format!("{:<label_w$}  MAE (DBP/SBP, mmHg)\n", "Dataset"));
            for row in rows {
                let find = |t: &str| row.reports.iter().find(|r| r.target == t);
                let (dbp, sbp) = match (find("dbp"), find("sbp")) {
                    (Some(d), Some(s)) => (d, s),
                    _ => {
                        return Err(Error::Data(format!(
                            "row '{}' needs both dbp and sbp reports",
                            row.label
                        )))
                    }
                };
                out.push_str(&format!(
                    "{:<label_w$}  {}\n",
                    row.label,
                    bp_slash_cell(dbp.mae, sbp.mae)
                ));
            }
        }
        ReportLayout::TaskRows => {
            for row in rows {
                for r in &row.reports {
                    let (name, unit) = target_display(&r.target);
                    let annotated = if unit.is_empty() { name } else { format!("{name} ({unit})") };
                    out.push_str(&format!("{annotated:<22}  {:.2}  [n={}]\n", r.mae, r.count));
                }
            }
        }
    }
    Ok(out)
}
