//! Experiment report: per-cell metrics, seed aggregates and renderers.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::data::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::metrics::CalibrationReport;

pub const SCHEMA_VERSION: u32 = 1;

/// Metric names in CSV and aggregate order.
pub const METRICS: [&str; 8] = [
    "accuracy",
    "nll",
    "ece",
    "brier",
    "entropy",
    "avg_entropy",
    "auroc_entropy",
    "auroc_avg_entropy",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Train,
    Validation,
    Test,
    Covariate,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub role: DatasetRole,
    pub rows: usize,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl DatasetInfo {
    pub fn of(name: &str, role: DatasetRole, d: &Dataset) -> Self {
        Self {
            name: name.to_string(),
            role,
            rows: d.len(),
            num_classes: d.num_classes(),
            provenance: d.provenance().clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

impl CellStatus {
    fn as_str(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Failed => "failed",
        }
    }
}

/// Calibration is absent for semantic OOD sets (labels outside the ID
/// label space); AUROC is absent on the ID test split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub calibration: Option<CalibrationReport>,
    pub entropy: Option<f64>,
    pub avg_entropy: Option<f64>,
    pub auroc_entropy: Option<f64>,
    pub auroc_avg_entropy: Option<f64>,
}

impl CellMetrics {
    pub fn get(&self, metric: &str) -> Option<f64> {
        let c = self.calibration.as_ref();
        match metric {
            "accuracy" => c.map(|c| c.accuracy),
            "nll" => c.map(|c| c.nll),
            "ece" => c.map(|c| c.ece),
            "brier" => c.map(|c| c.brier),
            "entropy" => self.entropy,
            "avg_entropy" => self.avg_entropy,
            "auroc_entropy" => self.auroc_entropy,
            "auroc_avg_entropy" => self.auroc_avg_entropy,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    pub metrics: CellMetrics,
}

/// Mean and standard error of one metric over the successful seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub dataset: String,
    pub metric: String,
    pub n: usize,
    pub mean: Option<f64>,
    /// Only with at least two values.
    pub std_err: Option<f64>,
}

pub fn aggregate(cells: &[Cell]) -> Vec<Aggregate> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for c in cells {
        let k = (c.method.as_str(), c.dataset.as_str());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = Vec::new();
    for (method, dataset) in keys {
        for metric in METRICS {
            let xs: Vec<f64> = cells
                .iter()
                .filter(|c| c.method == method && c.dataset == dataset && c.status == CellStatus::Ok)
                .filter_map(|c| c.metrics.get(metric))
                .collect();
            let n = xs.len();
            let mean = (n > 0).then(|| xs.iter().sum::<f64>() / n as f64);
            let std_err = match mean {
                Some(m) if n >= 2 => {
                    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                    Some((var / n as f64).sqrt())
                }
                _ => None,
            };
            out.push(Aggregate {
                method: method.to_string(),
                dataset: dataset.to_string(),
                metric: metric.to_string(),
                n,
                mean,
                std_err,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    pub config: ExperimentConfig,
    pub datasets: Vec<DatasetInfo>,
    /// Ordered by method, then dataset, then seed.
    pub cells: Vec<Cell>,
    pub aggregates: Vec<Aggregate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "table" => Ok(ReportFormat::Table),
            other => Err(Error::Argument(format!("unknown report format {other:?}"))),
        }
    }
}

/// Table columns: metric, header, higher is better, shown in percent.
const TABLE_COLUMNS: [(&str, &str, bool, bool); 6] = [
    ("accuracy", "ACC", true, false),
    ("nll", "NLL", false, false),
    ("ece", "ECE(%)", false, true),
    ("brier", "Brier", false, false),
    ("auroc_entropy", "AUROC(H)", true, false),
    ("auroc_avg_entropy", "AUROC(avgH)", true, false),
];

/// Precision used by the table for `metric`, after percent scaling.
pub fn table_decimals(metric: &str) -> usize {
    if metric == "ece" {
        2
    } else {
        4
    }
}

impl Report {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.status == CellStatus::Failed).count()
    }

    pub fn aggregate_for(&self, method: &str, dataset: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.dataset == dataset && a.metric == metric)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// JSON with the timestamp removed; equal across identical runs.
    pub fn body_json(&self) -> Result<String> {
        Self {
            timestamp: None,
            ..self.clone()
        }
        .to_json()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "dataset", "seed", "metric", "value", "status"])?;
        for c in &self.cells {
            for metric in METRICS {
                let value = c.metrics.get(metric).map(|v| v.to_string()).unwrap_or_default();
                w.write_record([
                    c.method.as_str(),
                    c.dataset.as_str(),
                    &c.seed.to_string(),
                    metric,
                    &value,
                    c.status.as_str(),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// One block per evaluation set; the best mean in each column is
    /// marked with `*` (earlier methods win ties).
    pub fn to_table(&self) -> String {
        let mut methods: Vec<&str> = Vec::new();
        let mut datasets: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !methods.contains(&c.method.as_str()) {
                methods.push(&c.method);
            }
            if !datasets.contains(&c.dataset.as_str()) {
                datasets.push(&c.dataset);
            }
        }
        let name_w = methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        for dataset in datasets {
            let _ = writeln!(out, "== {dataset} ==");
            let columns: Vec<_> = TABLE_COLUMNS
                .iter()
                .filter(|(metric, ..)| {
                    methods.iter().any(|m| {
                        self.aggregate_for(m, dataset, metric)
                            .is_some_and(|a| a.mean.is_some())
                    })
                })
                .collect();
            let best: Vec<Option<usize>> = columns
                .iter()
                .map(|&&(metric, _, higher, _)| {
                    let mut best: Option<(usize, f64)> = None;
                    for (i, m) in methods.iter().enumerate() {
                        if let Some(v) = self.aggregate_for(m, dataset, metric).and_then(|a| a.mean) {
                            let better = match best {
                                None => true,
                                Some((_, b)) => (higher && v > b) || (!higher && v < b),
                            };
                            if better {
                                best = Some((i, v));
                            }
                        }
                    }
                    best.map(|(i, _)| i)
                })
                .collect();
            let _ = write!(out, "{:<name_w$}", "Method");
            for (_, header, _, _) in &columns {
                let _ = write!(out, "  {header:>18}");
            }
            out.push('\n');
            for (i, m) in methods.iter().enumerate() {
                let _ = write!(out, "{m:<name_w$}");
                for (col, &&(metric, _, _, percent)) in columns.iter().enumerate() {
                    let field = match self.aggregate_for(m, dataset, metric).and_then(|a| a.mean.map(|v| (v, a.std_err))) {
                        None => "-".to_string(),
                        Some((mean, se)) => {
                            let k = if percent { 100.0 } else { 1.0 };
                            let p = table_decimals(metric);
                            let mut s = format!("{:.p$}", mean * k);
                            if let Some(se) = se {
                                let _ = write!(s, "±{:.p$}", se * k);
                            }
                            if best[col] == Some(i) {
                                s.push('*');
                            }
                            s
                        }
                    };
                    let _ = write!(out, "  {field:>18}");
                }
                out.push('\n');
            }
            out.push('\n');
        }
        let failed = self.failed_cells();
        if failed > 0 {
            let _ = writeln!(out, "{failed} cell(s) failed:");
            for c in self.cells.iter().filter(|c| c.status == CellStatus::Failed) {
                let _ = writeln!(
                    out,
                    "  {} / {} / seed {}: {}",
                    c.method,
                    c.dataset,
                    c.seed,
                    c.diagnostic.as_deref().unwrap_or("")
                );
            }
        }
        out
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Table => Ok(self.to_table()),
        }
    }
}

/// Writes the rendered report to `path`, or to stdout when `path` is `None`.
pub fn emit_report(report: &Report, format: ReportFormat, path: Option<&Path>) -> Result<()> {
    let text = report.render(format)?;
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}
