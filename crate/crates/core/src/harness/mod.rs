//! Experiment orchestration: configuration, the method × dataset × seed
//! grid, and report rendering.

pub mod config;
pub mod report;
pub mod run;

pub use config::{apply_override, DataConfig, DataSource, ExperimentConfig, MethodConfig, MethodKind, ModelSpec, NamedShift};
pub use report::{emit_report, Aggregate, Cell, CellMetrics, CellStatus, Report, ReportFormat, METRICS};
pub use run::{run_experiment, PreparedData};
