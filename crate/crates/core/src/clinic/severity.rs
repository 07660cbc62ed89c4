// SPDX-License-Identifier: MIT OR Apache-2.0

//! Band-based severity grading against a normal-range reference.
//!
//! Inside the reference range is Normal, within one band width outside it is
//! Mild and anything further is Moderate. Severe is reserved for the hard
//! failure rules. Metrics with no reference entry are graded Mild and marked
//! as such.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use super::report::ReportBundle;
use crate::scan_flair::FlairMetric;
use crate::{Error, Result};

pub const REFERENCE_SCHEMA_VERSION: u32 = 1;

/// Fraction of dead tensors above which T2 is Severe.
pub const DEAD_REGION_LIMIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    Normal,
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Normal => "Normal",
            Self::Mild => "Mild",
            Self::Moderate => "Moderate",
            Self::Severe => "Severe",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    T1,
    T2,
    Fmri,
    Dti,
    Flair,
    /// Perturbation sweeps and the identity probe.
    Robustness,
}

impl Modality {
    pub const ALL: [Modality; 6] = [Self::T1, Self::T2, Self::Fmri, Self::Dti, Self::Flair, Self::Robustness];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::T1 => "t1",
            Self::T2 => "t2",
            Self::Fmri => "fmri",
            Self::Dti => "dti",
            Self::Flair => "flair",
            Self::Robustness => "robustness",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Self::T1 => "T1",
            Self::T2 => "T2",
            Self::Fmri => "fMRI",
            Self::Dti => "DTI",
            Self::Flair => "FLAIR",
            Self::Robustness => "Robustness",
        }
    }

    /// Screening modalities never grade above Moderate.
    fn ceiling(self) -> Severity {
        match self {
            Self::Flair => Severity::Moderate,
            _ => Severity::Severe,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub modality: Modality,
    /// Key into the reference document, e.g. `t2.dead_region_fraction`.
    pub name: String,
    /// Non-finite values serialize as `null`.
    pub value: f64,
}

impl Metric {
    pub fn new(modality: Modality, name: &str, value: f64) -> Self {
        Self {
            modality,
            name: name.into(),
            value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalRange {
    pub min: f64,
    pub max: f64,
    /// Width of the Mild band on either side of the range.
    pub band: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalRangeDocument {
    pub schema_version: u32,
    pub architecture: String,
    /// How the ranges were obtained.
    #[serde(default)]
    pub provenance: String,
    #[serde(default)]
    pub ranges: BTreeMap<String, NormalRange>,
}

impl NormalRangeDocument {
    pub fn empty(architecture: &str) -> Self {
        Self {
            schema_version: REFERENCE_SCHEMA_VERSION,
            architecture: architecture.into(),
            provenance: String::new(),
            ranges: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REFERENCE_SCHEMA_VERSION {
            return Err(Error::Reference(format!(
                "schema_version {} is not supported (expected {REFERENCE_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for (name, r) in &self.ranges {
            let ok = r.min.is_finite() && r.max.is_finite() && r.band.is_finite() && r.min <= r.max && r.band >= 0.0;
            if !ok {
                return Err(Error::Reference(format!(
                    "range `{name}` must have finite min ≤ max and band ≥ 0"
                )));
            }
        }
        Ok(())
    }
}

/// Why a metric received its grade.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "basis", rename_all = "snake_case")]
pub enum Basis {
    InRange,
    WithinBand,
    BeyondBand,
    NoReference,
    HardFailure { rule: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeverity {
    pub metric: Metric,
    pub severity: Severity,
    #[serde(flatten)]
    pub basis: Basis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySeverity {
    pub severity: Severity,
    pub metrics: Vec<MetricSeverity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityAssessment {
    pub reference_architecture: String,
    pub modalities: BTreeMap<Modality, ModalitySeverity>,
}

impl SeverityAssessment {
    pub fn of(&self, modality: Modality) -> Option<Severity> {
        self.modalities.get(&modality).map(|m| m.severity)
    }

    pub fn worst(&self) -> Severity {
        self.modalities.values().map(|m| m.severity).max().unwrap_or(Severity::Normal)
    }
}

fn hard_failure(m: &Metric) -> Option<String> {
    if !m.value.is_finite() {
        return Some(format!("{} is not finite", m.name));
    }
    match m.name.as_str() {
        "t2.dead_region_fraction" if m.value > DEAD_REGION_LIMIT => {
            Some(format!("dead regions in more than {DEAD_REGION_LIMIT} of tensors"))
        }
        "robustness.identity_prediction_changes" if m.value > 0.0 => {
            Some("prediction changed under an identity perturbation".into())
        }
        _ => None,
    }
}

fn grade(m: &Metric, reference: &NormalRangeDocument) -> (Severity, Basis) {
    if let Some(rule) = hard_failure(m) {
        return (Severity::Severe, Basis::HardFailure { rule });
    }
    let Some(r) = reference.ranges.get(&m.name) else {
        return (Severity::Mild, Basis::NoReference);
    };
    let outside = (r.min - m.value).max(m.value - r.max);
    if outside <= 0.0 {
        (Severity::Normal, Basis::InRange)
    } else if outside <= r.band {
        (Severity::Mild, Basis::WithinBand)
    } else {
        (Severity::Moderate, Basis::BeyondBand)
    }
}

/// Grades every metric, then takes the worst grade per modality.
pub fn classify_severity(metrics: &[Metric], reference: &NormalRangeDocument) -> Result<SeverityAssessment> {
    reference.validate()?;
    let mut modalities: BTreeMap<Modality, ModalitySeverity> = BTreeMap::new();
    for m in metrics {
        let (mut severity, basis) = grade(m, reference);
        severity = severity.min(m.modality.ceiling());
        let entry = modalities.entry(m.modality).or_insert(ModalitySeverity {
            severity: Severity::Normal,
            metrics: Vec::new(),
        });
        entry.severity = entry.severity.max(severity);
        entry.metrics.push(MetricSeverity {
            metric: m.clone(),
            severity,
            basis,
        });
    }
    Ok(SeverityAssessment {
        reference_architecture: reference.architecture.clone(),
        modalities,
    })
}

fn max_of(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(f64::NEG_INFINITY, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
}

/// Extracts the graded metrics from whatever scans a bundle holds.
pub fn metrics_from_bundle(b: &ReportBundle) -> Vec<Metric> {
    use Modality::*;
    let mut out = Vec::new();
    if let Some(t1) = &b.t1 {
        out.push(Metric::new(T1, "t1.total_parameters", t1.total_parameters as f64));
        out.push(Metric::new(T1, "t1.n_layers", t1.spec.n_layers as f64));
        out.push(Metric::new(T1, "t1.n_heads", t1.spec.n_heads as f64));
        out.push(Metric::new(T1, "t1.d_model", t1.spec.d_model as f64));
        out.push(Metric::new(T1, "t1.vocab_size", t1.spec.vocab_size as f64));
    }
    if let Some(t2) = &b.t2 {
        out.push(Metric::new(T2, "t2.dead_region_fraction", t2.dead_region_fraction()));
        let kurt = t2.records.iter().filter_map(|r| r.excess_kurtosis).map(f64::abs);
        out.push(Metric::new(T2, "t2.max_abs_excess_kurtosis", kurt.fold(0.0, f64::max)));
        let ratios: Vec<f64> = t2.norm_ratios.iter().filter_map(|r| r.ratio).collect();
        if !ratios.is_empty() {
            out.push(Metric::new(T2, "t2.max_norm_ratio", ratios.iter().copied().fold(f64::MIN, f64::max)));
            out.push(Metric::new(T2, "t2.min_norm_ratio", ratios.iter().copied().fold(f64::MAX, f64::min)));
        }
        out.push(Metric::new(T2, "t2.flag_count", t2.flags.len() as f64));
    }
    if let Some(f) = &b.fmri {
        let resid = f.resid_norms.iter().flatten().copied();
        let n = f.resid_norms.iter().map(Vec::len).sum::<usize>().max(1) as f64;
        out.push(Metric::new(Fmri, "fmri.max_resid_norm", max_of(resid.clone())));
        out.push(Metric::new(Fmri, "fmri.mean_resid_norm", resid.sum::<f64>() / n));
        out.push(Metric::new(Fmri, "fmri.max_attn_out_norm", max_of(f.attn_summary.iter().map(|s| s.max))));
        out.push(Metric::new(Fmri, "fmri.max_mlp_out_norm", max_of(f.mlp_summary.iter().map(|s| s.max))));
    }
    if let Some(g) = &b.dti {
        out.push(Metric::new(Dti, "dti.p_clean", g.p_clean()));
        out.push(Metric::new(Dti, "dti.max_importance", max_of((0..g.sites.len()).map(|i| g.site_max(i)))));
        if let Ok(cp) = crate::scan_func::critical_path(g, b.theta) {
            out.push(Metric::new(Dti, "dti.critical_path_fraction", cp.fraction));
        }
    }
    if let Some(t) = &b.trace {
        out.push(Metric::new(Dti, "dti.max_recovery", max_of(t.recovery.iter().flatten().copied())));
    }
    if let Some(fl) = &b.flair {
        let count = |m: FlairMetric| fl.flags_of(m).count() as f64;
        out.push(Metric::new(Flair, "flair.concentrated_heads", count(FlairMetric::ConcentratedAttention)));
        out.push(Metric::new(Flair, "flair.diffuse_heads", count(FlairMetric::DiffuseAttention)));
        out.push(Metric::new(Flair, "flair.magnitude_outliers", count(FlairMetric::MagnitudeOutlier)));
        out.push(Metric::new(Flair, "flair.collapsed_pairs", count(FlairMetric::RepresentationCollapse)));
        out.push(Metric::new(Flair, "flair.confidence_dips", count(FlairMetric::ConfidenceDip)));
        if let Some(z) = &fl.magnitude.z_scores {
            out.push(Metric::new(Flair, "flair.max_abs_z", max_of(z.iter().map(|v| v.abs()))));
        }
        let sims: Vec<f64> = fl.collapse.similarity.iter().flatten().copied().collect();
        if !sims.is_empty() {
            out.push(Metric::new(Flair, "flair.max_adjacent_similarity", max_of(sims.into_iter())));
        }
    }
    if let Some(p) = &b.robustness {
        out.push(Metric::new(Robustness, "robustness.failure_fraction", p.failures as f64 / p.entries.len().max(1) as f64));
        if let Some(m) = &p.max_abs_delta {
            out.push(Metric::new(Robustness, "robustness.max_abs_delta_l", m.delta_l.abs()));
        }
    }
    if let Some(probe) = &b.identity {
        out.push(Metric::new(Robustness, "robustness.identity_prediction_changes", probe.prediction_changes as f64));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn reference(ranges: &[(&str, f64, f64, f64)]) -> NormalRangeDocument {
        let mut d = NormalRangeDocument::empty("test");
        for &(n, min, max, band) in ranges {
            d.ranges.insert(n.into(), NormalRange { min, max, band });
        }
        d
    }

    #[test]
    fn grading_rules() {
        let r = reference(&[("t2.max_norm_ratio", 0.5, 2.0, 0.5), ("fmri.max_resid_norm", 0.0, 100.0, 50.0)]);
        let a = classify_severity(
            &[Metric::new(Modality::T2, "t2.max_norm_ratio", 1.0), Metric::new(Modality::Fmri, "fmri.max_resid_norm", 20.0)],
            &r,
        )
        .unwrap();
        assert_eq!(a.of(Modality::T2), Some(Severity::Normal));
        assert_eq!(a.of(Modality::Fmri), Some(Severity::Normal));

        let grade_of = |v: f64| classify_severity(&[Metric::new(Modality::T2, "t2.max_norm_ratio", v)], &r).unwrap().worst();
        assert_eq!(grade_of(2.4), Severity::Mild);
        assert_eq!(grade_of(2.6), Severity::Moderate);
        assert_eq!(grade_of(0.1), Severity::Mild);

        let missing = classify_severity(&[Metric::new(Modality::T2, "t2.flag_count", 99.0)], &r).unwrap();
        assert_eq!(missing.worst(), Severity::Mild);
        assert_eq!(missing.modalities[&Modality::T2].metrics[0].basis, Basis::NoReference);

        let nan = classify_severity(&[Metric::new(Modality::Fmri, "fmri.max_resid_norm", f64::NAN)], &r).unwrap();
        assert_eq!(nan.worst(), Severity::Severe);
        let dead = classify_severity(&[Metric::new(Modality::T2, "t2.dead_region_fraction", 0.2)], &r).unwrap();
        assert_eq!(dead.worst(), Severity::Severe);
        let ident = classify_severity(
            &[Metric::new(Modality::Robustness, "robustness.identity_prediction_changes", 1.0)],
            &r,
        )
        .unwrap();
        assert_eq!(ident.worst(), Severity::Severe);
        let flair = classify_severity(&[Metric::new(Modality::Flair, "flair.max_abs_z", f64::INFINITY)], &r).unwrap();
        assert_eq!(flair.worst(), Severity::Moderate);
        assert_eq!(classify_severity(&[], &r).unwrap().worst(), Severity::Normal);
    }

    #[test]
    fn malformed_reference_is_rejected() {
        assert!(matches!(
            classify_severity(&[], &reference(&[("x", 2.0, 1.0, 0.0)])),
            Err(Error::Reference(_))
        ));
        let mut r = reference(&[]);
        r.schema_version = 9;
        assert!(classify_severity(&[], &r).is_err());
    }

    const NAMES: [&str; 4] = [
        "t2.dead_region_fraction",
        "t2.max_norm_ratio",
        "robustness.identity_prediction_changes",
        "flair.max_abs_z",
    ];

    proptest! {
        #[test]
        fn worsening_a_metric_never_lowers_severity(
            values in proptest::collection::vec(-10.0f64..10.0, 4),
            which in 0usize..4,
            step in 0.0f64..20.0,
            min in -5.0f64..5.0, width in 0.0f64..5.0, band in 0.0f64..3.0,
            with_range in proptest::collection::vec(any::<bool>(), 4),
            to_nan in any::<bool>(),
        ) {
            let mut r = reference(&[]);
            for (n, on) in NAMES.iter().zip(&with_range) {
                if *on {
                    r.ranges.insert((*n).into(), NormalRange { min, max: min + width, band });
                }
            }
            let modality = |n: &str| match n.split('.').next().unwrap() {
                "t2" => Modality::T2,
                "flair" => Modality::Flair,
                _ => Modality::Robustness,
            };
            let metrics: Vec<Metric> = NAMES.iter().zip(&values).map(|(n, &v)| Metric::new(modality(n), n, v)).collect();
            let mut metrics = metrics;
            // Away from the range: upward above its centre, downward below it.
            // Hard-failure metrics only fail upward; they start at or above
            // the range floor and always move up.
            let hard = which == 0 || which == 2;
            if hard {
                metrics[which].value = metrics[which].value.max(min);
            }
            let mut worse = metrics.clone();
            let v = worse[which].value;
            let up = hard || !with_range[which] || v >= min + width / 2.0;
            worse[which].value = if to_nan { f64::NAN } else if up { v + step } else { v - step };
            let a = classify_severity(&metrics, &r).unwrap();
            let b = classify_severity(&worse, &r).unwrap();
            for m in Modality::ALL {
                prop_assert!(b.of(m) >= a.of(m), "{m:?}: {:?} -> {:?}", a.of(m), b.of(m));
            }
        }
    }

    #[test]
    fn severity_order() {
        let mut v = vec![Severity::Severe, Severity::Normal, Severity::Moderate, Severity::Mild];
        v.sort();
        assert_eq!(v, vec![Severity::Normal, Severity::Mild, Severity::Moderate, Severity::Severe]);
    }
}
