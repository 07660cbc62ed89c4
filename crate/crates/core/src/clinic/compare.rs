// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::sweep::RobustnessProfile;
use crate::engine::HookSite;
use crate::perturb::ModeSpec;
use crate::scan_func::CausalTraceResult;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRules {
    /// Failure-count change that counts as degradation or improvement.
    pub failure_margin: i64,
    /// Largest failure-count change still compatible with immutability.
    pub immutability_margin: i64,
    /// Largest recovery-score change still compatible with immutability.
    pub recovery_drift: f64,
    /// `|ΔL|` at or above which a site is catastrophic.
    pub catastrophe_threshold: f64,
}

impl Default for ComparisonRules {
    fn default() -> Self {
        Self {
            failure_margin: 2,
            immutability_margin: 1,
            recovery_drift: 0.1,
            catastrophe_threshold: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningPattern {
    Degradation,
    Improvement,
    Immutability,
    Mixed,
}

impl TuningPattern {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Degradation => "degradation",
            Self::Improvement => "improvement",
            Self::Immutability => "immutability",
            Self::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningComparison {
    pub rules: ComparisonRules,
    pub base: RobustnessProfile,
    pub variant: RobustnessProfile,
    pub base_trace: CausalTraceResult,
    pub variant_trace: CausalTraceResult,
    /// Variant failures minus base failures.
    pub failure_difference: i64,
    pub max_recovery_drift: f64,
    pub base_catastrophic: Vec<HookSite>,
    pub variant_catastrophic: Vec<HookSite>,
    /// A catastrophic site is shared by both models.
    pub persistent: bool,
    pub pattern: TuningPattern,
}

fn catastrophic(p: &RobustnessProfile, threshold: f64) -> BTreeSet<HookSite> {
    p.entries
        .iter()
        .filter(|e| e.delta.delta_l.abs() >= threshold)
        .map(|e| e.site.clone())
        .collect()
}

fn check_shared_plan(base: &RobustnessProfile, variant: &RobustnessProfile) -> Result<()> {
    if base.plan != variant.plan {
        return Err(Error::PlanMismatch("base and variant were swept with different plans".into()));
    }
    if base.tokens != variant.tokens {
        return Err(Error::PlanMismatch("base and variant were swept on different prompts".into()));
    }
    if base.entries.len() != variant.entries.len()
        || base.entries.iter().zip(&variant.entries).any(|(a, b)| a.site != b.site || a.mode != b.mode)
    {
        return Err(Error::PlanMismatch("sweep entries do not line up".into()));
    }
    Ok(())
}

fn recovery_drift(a: &CausalTraceResult, b: &CausalTraceResult) -> Result<f64> {
    let same_shape = a.sites == b.sites
        && a.recovery.len() == b.recovery.len()
        && a.recovery.iter().zip(&b.recovery).all(|(x, y)| x.len() == y.len());
    if !same_shape || a.clean_tokens != b.clean_tokens || a.corrupt_tokens != b.corrupt_tokens {
        return Err(Error::PlanMismatch("causal traces cover different prompts or sites".into()));
    }
    Ok(a.recovery
        .iter()
        .flatten()
        .zip(b.recovery.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

/// Labels how a tuned variant's robustness differs from its base.
pub fn compare_tuning(
    base: (&RobustnessProfile, &CausalTraceResult),
    variant: (&RobustnessProfile, &CausalTraceResult),
    rules: &ComparisonRules,
) -> Result<TuningComparison> {
    check_shared_plan(base.0, variant.0)?;
    let drift = recovery_drift(base.1, variant.1)?;
    let diff = variant.0.failures as i64 - base.0.failures as i64;
    let bc = catastrophic(base.0, rules.catastrophe_threshold);
    let vc = catastrophic(variant.0, rules.catastrophe_threshold);
    let pattern = if diff >= rules.failure_margin {
        TuningPattern::Degradation
    } else if diff <= -rules.failure_margin {
        TuningPattern::Improvement
    } else if diff.abs() <= rules.immutability_margin && bc == vc && drift < rules.recovery_drift {
        TuningPattern::Immutability
    } else {
        TuningPattern::Mixed
    };
    Ok(TuningComparison {
        rules: *rules,
        base: base.0.clone(),
        variant: variant.0.clone(),
        base_trace: base.1.clone(),
        variant_trace: variant.1.clone(),
        failure_difference: diff,
        max_recovery_drift: drift,
        persistent: bc.intersection(&vc).next().is_some(),
        base_catastrophic: bc.into_iter().collect(),
        variant_catastrophic: vc.into_iter().collect(),
        pattern,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrreducibleSite {
    pub site: HookSite,
    pub mode: ModeSpec,
    pub base_delta_l: f64,
    pub variant_delta_l: f64,
}

/// Plan cells catastrophic in both profiles.
pub fn detect_irreducible(
    base: &RobustnessProfile,
    variant: &RobustnessProfile,
    catastrophe_threshold: f64,
) -> Result<Vec<IrreducibleSite>> {
    if !(catastrophe_threshold.is_finite() && catastrophe_threshold >= 0.0) {
        return Err(Error::Argument(format!(
            "catastrophe threshold must be a non-negative real, got {catastrophe_threshold}"
        )));
    }
    check_shared_plan(base, variant)?;
    Ok(base
        .entries
        .iter()
        .zip(&variant.entries)
        .filter(|(a, b)| a.delta.delta_l.abs() >= catastrophe_threshold && b.delta.delta_l.abs() >= catastrophe_threshold)
        .map(|(a, b)| IrreducibleSite {
            site: a.site.clone(),
            mode: a.mode,
            base_delta_l: a.delta.delta_l,
            variant_delta_l: b.delta.delta_l,
        })
        .collect())
}
