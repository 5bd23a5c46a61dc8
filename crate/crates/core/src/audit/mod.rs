//! Config-driven audits, report emission, and factor comparisons.

mod compare;
mod config;
mod controls;
mod report;
mod run;

pub use compare::{compare_runs, write_deltas_csv, DeltaRow, Factor, Pairing};
pub use config::{AuditConfig, ControlsConfig, DebiasConfig, NeutralConfig, RunConfig};
pub use controls::{emit_controls, run_controls, slug, ControlsReport, CurveEntry, NeutralEntry, RobustnessEntry};
pub use report::{
    emit_report, format_percent, format_skew, write_metrics_csv, write_table_csv, AuditReport,
    DirectionalSummary, ReportFormat, ReportRow, RunKey, Skipped, HARM_EVENTS, TABLE_HEADER, TASKS,
};
pub use run::{load_prompts, run_audit, PromptBank};
