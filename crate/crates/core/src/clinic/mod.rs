// SPDX-License-Identifier: MIT OR Apache-2.0

//! Clinical layer: robustness sweeps, base-versus-variant comparison, the
//! functional test battery, severity grading and report generation.

mod battery;
mod compare;
mod report;
mod severity;
mod sweep;

pub use battery::{
    run_battery, BatteryCase, BatteryCategory, BatteryDocument, BatteryResult, BatteryTest, Expectation, Observed,
    Outcome, BATTERY_SCHEMA_VERSION,
};
pub use compare::{
    compare_tuning, detect_irreducible, ComparisonRules, IrreducibleSite, TuningComparison, TuningPattern,
};
pub use report::{
    generate_report, lint_findings, render_text, DiagnosticReport, Identity, ReportBundle, SEVERITY_WORDS,
};
pub use severity::{
    classify_severity, metrics_from_bundle, Basis, Metric, MetricSeverity, Modality, ModalitySeverity,
    NormalRange, NormalRangeDocument, Severity, SeverityAssessment, DEAD_REGION_LIMIT, REFERENCE_SCHEMA_VERSION,
};
pub use sweep::{
    identity_probe, robustness_sweep, IdentityProbe, MaxDelta, RobustnessProfile, SweepEntry, SweepPlan,
    CASE_AMPLIFY_FACTOR, SWEEP_COMPONENTS,
};
