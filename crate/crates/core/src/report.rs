//! Flat tables for experiment results, with JSON and CSV forms, and the
//! plot-ready series derived from training histories and sweeps.

use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::trainer::{AblationAxis, AblationReport, CvReport, EpochRecord};

/// One table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Number(f64),
    Text(String),
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Number(x)
    }
}

impl From<usize> for Value {
    fn from(x: usize) -> Self {
        Value::Number(x as f64)
    }
}

impl From<Option<f64>> for Value {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Value::Null, Value::Number)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl Value {
    fn render(&self) -> String {
        match self {
            Value::Null => String::new(),
            Value::Number(x) => x.to_string(),
            Value::Text(s) => s.clone(),
        }
    }

    /// Empty is null; anything that parses as a number is a number.
    fn parse(s: &str) -> Self {
        if s.is_empty() {
            Value::Null
        } else if let Ok(x) = s.parse::<f64>() {
            Value::Number(x)
        } else {
            Value::Text(s.to_string())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl ReportTable {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(shape(format!("row of {} cells for {} columns", row.len(), self.columns.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Value::render))?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let columns: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(Value::parse).collect());
        }
        Ok(Self { columns, rows })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Epoch against training loss and validation MAE.
pub fn history_table(history: &[EpochRecord]) -> ReportTable {
    let mut t = ReportTable::new(&["epoch", "train_loss", "val_mae", "train_mask_rate"]);
    for h in history {
        t.rows.push(vec![h.epoch.into(), h.train_loss.into(), h.val_mae.into(), h.train_mask_rate.into()]);
    }
    t
}

/// One row per fold.
pub fn cv_table(report: &CvReport) -> ReportTable {
    let mut t = ReportTable::new(&[
        "fold", "mae", "mre", "auc", "mean_mae", "locf_mae", "linear_mae", "best_epoch", "train_mask_rate",
        "test_mask_rate",
    ]);
    for f in &report.folds {
        let r = &f.result;
        t.rows.push(vec![
            f.fold.into(),
            r.test.mae.into(),
            r.test.mre.into(),
            r.test.auc.into(),
            r.baselines.mean.mae.into(),
            r.baselines.locf.mae.into(),
            r.baselines.linear.mae.into(),
            r.best_epoch.into(),
            r.train_mask_rate.into(),
            r.test_mask_rate.into(),
        ]);
    }
    t
}

fn axis_value(axis: &AblationAxis, label: &str) -> Value {
    match axis {
        AblationAxis::Factor(_) => label.parse::<f64>().map_or_else(|_| label.into(), Value::Number),
        _ => label.into(),
    }
}

/// One row per arm and fold.
pub fn ablation_fold_table(report: &AblationReport) -> ReportTable {
    let mut t = ReportTable::new(&[
        report.axis.name(),
        "fold",
        "mae",
        "mre",
        "auc",
        "best_epoch",
        "train_mask_rate",
        "test_mask_rate",
    ]);
    for row in &report.rows {
        for f in &row.folds {
            t.rows.push(vec![
                axis_value(&report.axis, &row.value),
                f.fold.into(),
                f.mae.into(),
                f.mre.into(),
                f.auc.into(),
                f.best_epoch.into(),
                f.train_mask_rate.into(),
                f.test_mask_rate.into(),
            ]);
        }
    }
    t
}

/// One row per arm with fold means and standard deviations.
pub fn ablation_summary_table(report: &AblationReport) -> ReportTable {
    let mut t = ReportTable::new(&[
        report.axis.name(),
        "mae_mean",
        "mae_std",
        "mre_mean",
        "mre_std",
        "auc_mean",
        "auc_std",
        "best_epoch_mean",
        "train_mask_rate_mean",
        "test_mask_rate_mean",
    ]);
    for row in &report.rows {
        let s = &row.summary;
        t.rows.push(vec![
            axis_value(&report.axis, &row.value),
            s.mae.mean.into(),
            s.mae.std.into(),
            s.mre.map(|m| m.mean).into(),
            s.mre.map(|m| m.std).into(),
            s.auc.map(|m| m.mean).into(),
            s.auc.map(|m| m.std).into(),
            s.best_epoch.mean.into(),
            s.train_mask_rate.map(|m| m.mean).into(),
            s.test_mask_rate.mean.into(),
        ]);
    }
    t
}

/// Axis value against mean MAE and AUC, one point per arm.
pub fn sweep_series(report: &AblationReport) -> ReportTable {
    let mut t = ReportTable::new(&[report.axis.name(), "mae", "auc"]);
    for row in &report.rows {
        t.rows.push(vec![
            axis_value(&report.axis, &row.value),
            row.summary.mae.mean.into(),
            row.summary.auc.map(|m| m.mean).into(),
        ]);
    }
    t
}
