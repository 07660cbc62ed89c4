// SPDX-License-Identifier: MIT OR Apache-2.0

//! Findings / Impression / Recommendation reports.
//!
//! Findings state measurements only. Grades and interpretation live in the
//! impression, and [`lint_findings`] checks the split.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::severity::{classify_severity, metrics_from_bundle, Basis, Modality, ModalitySeverity, NormalRangeDocument, Severity};
use super::sweep::{IdentityProbe, RobustnessProfile};
use crate::scan_flair::{describe_flag, FlagLocation, FlairMetric, FlairReport};
use crate::scan_func::{column_label, critical_path, dominance_profile, FmriMap, Granularity, ImportanceGrid, CausalTraceResult};
use crate::scan_struct::{ParamGroup, T1Report, T2Report};
use crate::{Error, Result};

/// Words reserved for the impression.
pub const SEVERITY_WORDS: &[&str] = &[
    "normal",
    "mild",
    "moderate",
    "severe",
    "pathological",
    "healthy",
    "abnormal",
    "concerning",
];

/// Scan results to report on. Only `t1` is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub t1: Option<T1Report>,
    #[serde(default)]
    pub t2: Option<T2Report>,
    #[serde(default)]
    pub fmri: Option<FmriMap>,
    #[serde(default)]
    pub dti: Option<ImportanceGrid>,
    /// Critical-path threshold applied to `dti`.
    pub theta: f64,
    #[serde(default)]
    pub trace: Option<CausalTraceResult>,
    #[serde(default)]
    pub flair: Option<FlairReport>,
    #[serde(default)]
    pub robustness: Option<RobustnessProfile>,
    #[serde(default)]
    pub identity: Option<IdentityProbe>,
    /// Grades from [`classify_severity`]; when absent, every metric is
    /// graded against an empty reference.
    #[serde(default)]
    pub severities: Option<super::severity::SeverityAssessment>,
    /// Extra request parameters (prompt, seeds, ...) echoed into the report.
    #[serde(default)]
    pub parameters: BTreeMap<String, String>,
}

impl ReportBundle {
    pub fn new(t1: T1Report) -> Self {
        Self {
            t1: Some(t1),
            t2: None,
            fmri: None,
            dti: None,
            theta: crate::scan_func::DEFAULT_THETA,
            trace: None,
            flair: None,
            robustness: None,
            identity: None,
            severities: None,
            parameters: BTreeMap::new(),
        }
    }

    fn performed(&self) -> BTreeSet<Modality> {
        let mut s = BTreeSet::new();
        let mut add = |on: bool, m| {
            if on {
                s.insert(m);
            }
        };
        add(self.t1.is_some(), Modality::T1);
        add(self.t2.is_some(), Modality::T2);
        add(self.fmri.is_some(), Modality::Fmri);
        add(self.dti.is_some() || self.trace.is_some(), Modality::Dti);
        add(self.flair.is_some(), Modality::Flair);
        add(self.robustness.is_some() || self.identity.is_some(), Modality::Robustness);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub digest: String,
    pub architecture: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub total_parameters: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub schema_version: u32,
    pub identity: Identity,
    /// Observations per modality, keyed by modality name.
    pub findings: BTreeMap<String, Vec<String>>,
    pub impression: Vec<String>,
    pub recommendation: Vec<String>,
    pub severity: BTreeMap<String, ModalitySeverity>,
    pub parameters: BTreeMap<String, String>,
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn t1_findings(t1: &T1Report) -> Vec<String> {
    let s = &t1.spec;
    let mut out = Vec::new();
    out.push(format!(
        "{} layers, {} attention heads per layer (d_head {}), d_model {}, d_mlp {}, vocabulary {}, context {}.",
        s.n_layers, s.n_heads, t1.d_head, s.d_model, s.d_mlp, s.vocab_size, s.max_seq_len
    ));
    let share = |g: ParamGroup| t1.groups.iter().find(|c| c.group == g).map_or(0.0, |c| c.fraction);
    out.push(format!(
        "{} parameters: embedding {}, attention {}, MLP {}, norm {}, unembedding {}{}.",
        t1.total_parameters,
        pct(share(ParamGroup::Embedding)),
        pct(share(ParamGroup::Attention)),
        pct(share(ParamGroup::Mlp)),
        pct(share(ParamGroup::Norm)),
        pct(share(ParamGroup::Unembedding)),
        if t1.tied_unembed { " (tied to the embedding)" } else { "" }
    ));
    out.push(format!(
        "Normalization {:?} (epsilon {:e}), activation {:?}, positional encoding {:?}.",
        s.norm_kind, s.norm_epsilon, s.activation_kind, s.positional_kind
    ));
    out
}

fn t2_findings(t2: &T2Report) -> Vec<String> {
    let mut out = Vec::new();
    out.push(format!(
        "{} tensors screened; dead-region fraction {:.4}.",
        t2.records.len(),
        t2.dead_region_fraction()
    ));
    if let Some(r) = t2
        .records
        .iter()
        .filter(|r| r.excess_kurtosis.is_some())
        .max_by(|a, b| a.excess_kurtosis.unwrap().abs().total_cmp(&b.excess_kurtosis.unwrap().abs()))
    {
        out.push(format!(
            "Largest |excess kurtosis| {:.4} in {}.",
            r.excess_kurtosis.unwrap().abs(),
            r.tensor
        ));
    }
    let ratios: Vec<f64> = t2.norm_ratios.iter().filter_map(|r| r.ratio).collect();
    if !ratios.is_empty() {
        out.push(format!(
            "Attention/MLP weight-norm ratio spans {:.4} to {:.4} across layers.",
            ratios.iter().copied().fold(f64::MAX, f64::min),
            ratios.iter().copied().fold(f64::MIN, f64::max)
        ));
    }
    out.push(format!(
        "Largest Frobenius-norm share: {} ({}).",
        t2.dominant_tensor,
        pct(t2.dominant_norm_share)
    ));
    for f in &t2.flags {
        out.push(match f.value {
            Some(v) => format!("{} at {}: {:.6} (threshold {}).", f.kind.as_str(), f.subject, v, f.threshold),
            None => format!("{} at {} (threshold {}).", f.kind.as_str(), f.subject, f.threshold),
        });
    }
    if t2.flags.is_empty() {
        out.push("No T2 flags at the recorded thresholds.".into());
    }
    out
}

fn fmri_findings(f: &FmriMap) -> Vec<String> {
    let per_layer: Vec<String> = f
        .resid_norms
        .iter()
        .enumerate()
        .map(|(l, row)| format!("blocks.{l} {:.4}", row.iter().sum::<f64>() / row.len() as f64))
        .collect();
    let argmax = |v: &[super::super::scan_func::MagnitudeSummary]| {
        v.iter().max_by(|a, b| a.max.total_cmp(&b.max).then(b.layer.cmp(&a.layer))).map(|s| (s.layer, s.max))
    };
    let mut out = Vec::new();
    out.push(format!(
        "{} positions; mean residual L2 norm per layer: {}.",
        f.tokens.len(),
        per_layer.join(", ")
    ));
    if let (Some((la, a)), Some((lm, m))) = (argmax(&f.attn_summary), argmax(&f.mlp_summary)) {
        out.push(format!(
            "Largest attention output at blocks.{la} ({a:.4}); largest MLP output at blocks.{lm} ({m:.4})."
        ));
    }
    if !f.tokens.is_empty() {
        out.push(format!("Most active layer at the final position: blocks.{}.", f.most_active_layer()));
    }
    out
}

fn dti_findings(g: &ImportanceGrid, theta: f64) -> Vec<String> {
    let mut out = Vec::new();
    out.push(format!(
        "Clean top token {} with probability {:.6}; noise sigma {} ({}), seed {}, {} granularity.",
        g.clean_top.id,
        g.p_clean(),
        g.sigma,
        if g.sigma_calibrated { "calibrated" } else { "given" },
        g.seed,
        match g.granularity {
            Granularity::PerPosition => "per-position",
            Granularity::WholeSite => "whole-site",
        }
    ));
    if let Some(i) = (0..g.sites.len()).max_by(|&a, &b| g.site_max(a).total_cmp(&g.site_max(b)).then(b.cmp(&a))) {
        let col = (0..g.columns.len())
            .max_by(|&a, &b| g.importance[i][a].total_cmp(&g.importance[i][b]).then(b.cmp(&a)))
            .unwrap_or(0);
        out.push(format!(
            "Highest importance {:.6} at {} position {}.",
            g.site_max(i),
            g.sites[i],
            column_label(&g.columns[col])
        ));
    }
    if let Ok(cp) = critical_path(g, theta) {
        let names: Vec<String> = cp.sites.iter().map(ToString::to_string).collect();
        out.push(format!(
            "Critical path at theta {}: {} of {} sites ({}){}{}.",
            theta,
            cp.sites.len(),
            g.sites.len(),
            pct(cp.fraction),
            if names.is_empty() { "" } else { ": " },
            names.join(", ")
        ));
    }
    if let Ok(d) = dominance_profile(g) {
        out.push(format!(
            "Component dominance: MLP max {:.6}, attention max {:.6}, ratio {}, label {}.",
            d.mlp_max,
            d.attn_max,
            d.ratio.map_or("undefined".into(), |r| format!("{r:.4}")),
            match d.label {
                crate::scan_func::DominanceLabel::MlpDominant => "mlp_dominant",
                crate::scan_func::DominanceLabel::AttentionDominant => "attention_dominant",
                crate::scan_func::DominanceLabel::Balanced => "balanced",
            }
        ));
    }
    out
}

fn trace_findings(t: &CausalTraceResult) -> Vec<String> {
    let mut out = Vec::new();
    out.push(format!(
        "Causal trace on target token {}: p_clean {:.6}, p_corrupt {:.6}.",
        t.target, t.p_clean, t.p_corrupt
    ));
    if let Some(i) = (0..t.sites.len()).max_by(|&a, &b| t.site_max(a).total_cmp(&t.site_max(b)).then(b.cmp(&a))) {
        let pos = (0..t.recovery[i].len())
            .max_by(|&a, &b| t.recovery[i][a].total_cmp(&t.recovery[i][b]).then(b.cmp(&a)))
            .unwrap_or(0);
        out.push(format!(
            "Highest recovery {:.6} at {} position {}.",
            t.site_max(i),
            t.sites[i],
            pos
        ));
    }
    out
}

fn flair_findings(f: &FlairReport) -> Vec<String> {
    let mut out = Vec::new();
    match &f.entropy.per_head {
        Some(grid) => {
            let all: Vec<f64> = grid.iter().flatten().copied().collect();
            out.push(format!(
                "Normalized attention entropy spans {:.4} to {:.4} over {} heads.",
                all.iter().copied().fold(f64::MAX, f64::min),
                all.iter().copied().fold(f64::MIN, f64::max),
                all.len()
            ));
        }
        None => out.push("Attention entropy not computable for a single-token prompt.".into()),
    }
    match &f.magnitude.z_scores {
        Some(z) => out.push(format!(
            "Largest layer magnitude |z| {:.4}.",
            z.iter().map(|v| v.abs()).fold(0.0, f64::max)
        )),
        None => out.push("Magnitude z-scores need at least three layers.".into()),
    }
    let sims: Vec<String> = f
        .collapse
        .similarity
        .iter()
        .enumerate()
        .map(|(i, s)| match s {
            Some(s) => format!("{i}/{} {s:.6}", i + 1),
            None => format!("{i}/{} undefined", i + 1),
        })
        .collect();
    if !sims.is_empty() {
        out.push(format!("Adjacent-layer cosine similarity: {}.", sims.join(", ")));
    }
    out.push(format!(
        "Median top-token confidence {:.6}, minimum {:.6}.",
        f.confidence.median,
        f.confidence.confidence.iter().copied().fold(f64::MAX, f64::min)
    ));
    for flag in &f.flags {
        out.push(format!("Flag: {}.", describe_flag(flag)));
    }
    if f.flags.is_empty() {
        out.push("No FLAIR flags at the recorded thresholds.".into());
    }
    out
}

fn robustness_findings(p: Option<&RobustnessProfile>, probe: Option<&IdentityProbe>) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(p) = p {
        out.push(format!(
            "{} of {} perturbations changed the top prediction (baseline token {}, probability {:.6}).",
            p.failures,
            p.entries.len(),
            p.baseline_top.id,
            p.baseline_top.prob
        ));
        if let Some(m) = &p.max_abs_delta {
            out.push(format!("Largest |ΔL| {:.4} at {} under {}.", m.delta_l.abs(), m.site, m.mode.label()));
        }
    }
    if let Some(i) = probe {
        out.push(format!(
            "Identity probe: {} runs, {} prediction changes, largest |ΔL| {}.",
            i.runs, i.prediction_changes, i.max_abs_delta
        ));
    }
    out
}

fn impression(performed: &BTreeSet<Modality>, severity: &BTreeMap<Modality, ModalitySeverity>) -> Vec<String> {
    let mut out = Vec::new();
    for (m, s) in severity {
        let unreferenced = s.metrics.iter().filter(|x| x.basis == Basis::NoReference).count();
        let mut line = format!("{}: {}", m.title(), s.severity);
        let hard: Vec<&str> = s
            .metrics
            .iter()
            .filter_map(|x| match &x.basis {
                Basis::HardFailure { rule } => Some(rule.as_str()),
                _ => None,
            })
            .collect();
        if !hard.is_empty() {
            line.push_str(&format!("; hard failure: {}", hard.join("; ")));
        }
        if unreferenced > 0 {
            line.push_str(&format!(
                "; {unreferenced} metric(s) lack a normal-range reference and are graded Mild by default"
            ));
        }
        if *m == Modality::Flair {
            line.push_str("; screening only, graded no higher than Moderate");
        }
        line.push('.');
        out.push(line);
    }
    let missing: Vec<&str> = missing_core(performed).iter().map(|m| m.title()).collect();
    if !missing.is_empty() {
        out.push(format!("Limited scan coverage: {} not performed.", missing.join(", ")));
    }
    let worst = severity.values().map(|s| s.severity).max().unwrap_or(Severity::Normal);
    out.push(match worst {
        Severity::Normal => "No abnormal findings in the performed scans.".into(),
        Severity::Mild => "Findings within or near reference limits; flagged items warrant review, not diagnosis.".into(),
        Severity::Moderate => "Findings outside reference limits; further examination advised.".into(),
        Severity::Severe => "Severe findings: at least one hard-failure criterion fired.".into(),
    });
    out
}

fn missing_core(performed: &BTreeSet<Modality>) -> Vec<Modality> {
    [Modality::T1, Modality::T2, Modality::Fmri, Modality::Dti, Modality::Flair]
        .into_iter()
        .filter(|m| !performed.contains(m))
        .collect()
}

fn recommendations(b: &ReportBundle, performed: &BTreeSet<Modality>, severity: &BTreeMap<Modality, ModalitySeverity>) -> Vec<String> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    if let Some(f) = &b.flair {
        for flag in &f.flags {
            let line = match (flag.metric, flag.location) {
                (FlairMetric::RepresentationCollapse, FlagLocation::LayerPair { first, second }) => format!(
                    "DTI causal trace of blocks.{first} and blocks.{second} to examine the representation collapse flagged between them."
                ),
                (metric, location) => format!("DTI deep trace of {location} flagged for {metric}."),
            };
            if seen.insert(line.clone()) {
                out.push(line);
            }
        }
    }
    for (m, s) in severity {
        if s.severity >= Severity::Moderate && *m != Modality::Flair {
            out.push(format!("Targeted robustness sweep of the layers implicated in the {} findings.", m.title()));
        }
    }
    let missing: Vec<&str> = missing_core(performed).iter().map(|m| m.title()).collect();
    if !missing.is_empty() {
        out.push(format!("Complete the examination with: {}.", missing.join(", ")));
    }
    if out.is_empty() {
        out.push("No further workup indicated by the current scans.".into());
    }
    out
}

fn parameters(b: &ReportBundle, reference_architecture: &str) -> BTreeMap<String, String> {
    let mut p = b.parameters.clone();
    let mut put = |k: &str, v: String| {
        p.insert(k.into(), v);
    };
    put("critical_path.theta", b.theta.to_string());
    put("severity.reference", reference_architecture.into());
    put(
        "severity.scheme",
        "band-based stand-in for functional tolerance: in range, within one band, beyond one band".into(),
    );
    put("severity.dead_region_limit", super::severity::DEAD_REGION_LIMIT.to_string());
    if let Some(t2) = &b.t2 {
        let t = &t2.thresholds;
        put("t2.dead_variance", t.dead_variance.to_string());
        put("t2.extreme_kurtosis", t.extreme_kurtosis.to_string());
        put("t2.norm_ratio_low", t.norm_ratio_low.to_string());
        put("t2.norm_ratio_high", t.norm_ratio_high.to_string());
    }
    if let Some(g) = &b.dti {
        put("dti.sigma", g.sigma.to_string());
        put("dti.sigma_calibrated", g.sigma_calibrated.to_string());
        put("dti.seed", g.seed.to_string());
        put(
            "dti.granularity",
            match g.granularity {
                Granularity::PerPosition => "per_position",
                Granularity::WholeSite => "whole_site",
            }
            .into(),
        );
        put("dti.prompt_tokens", format!("{:?}", g.tokens.ids()));
    }
    if let Some(t) = &b.trace {
        put("trace.target", t.target.to_string());
        put("trace.clean_tokens", format!("{:?}", t.clean_tokens.ids()));
        put("trace.corrupt_tokens", format!("{:?}", t.corrupt_tokens.ids()));
    }
    if let Some(f) = &b.flair {
        let t = &f.thresholds;
        put("flair.entropy_low", t.entropy_low.to_string());
        put("flair.entropy_high", t.entropy_high.to_string());
        put("flair.magnitude_z", t.magnitude_z.to_string());
        put("flair.collapse_similarity", t.collapse_similarity.to_string());
        put("flair.confidence_ratio", t.confidence_ratio.to_string());
    }
    if let Some(r) = &b.robustness {
        put("sweep.seed", r.plan.seed.to_string());
        put("sweep.layers", format!("{:?}", r.plan.layers));
        let modes: Vec<String> = r.plan.modes.iter().map(|m| m.label()).collect();
        put("sweep.modes", modes.join(","));
        put("sweep.calibrated_sigma", r.calibrated_sigma.to_string());
        put("sweep.prompt_tokens", format!("{:?}", r.tokens.ids()));
    }
    p
}

/// Builds the report. Pure and deterministic: equal bundles give equal
/// reports.
pub fn generate_report(bundle: &ReportBundle) -> Result<DiagnosticReport> {
    let t1 = bundle.t1.as_ref().ok_or(Error::EmptyBundle)?;
    let severities = match &bundle.severities {
        Some(s) => s.clone(),
        None => classify_severity(&metrics_from_bundle(bundle), &NormalRangeDocument::empty("none"))?,
    };
    let performed = bundle.performed();

    let mut findings = BTreeMap::new();
    findings.insert(Modality::T1.as_str().into(), t1_findings(t1));
    if let Some(t2) = &bundle.t2 {
        findings.insert(Modality::T2.as_str().into(), t2_findings(t2));
    }
    if let Some(f) = &bundle.fmri {
        findings.insert(Modality::Fmri.as_str().into(), fmri_findings(f));
    }
    let mut dti = Vec::new();
    if let Some(g) = &bundle.dti {
        dti.extend(dti_findings(g, bundle.theta));
    }
    if let Some(t) = &bundle.trace {
        dti.extend(trace_findings(t));
    }
    if !dti.is_empty() {
        findings.insert(Modality::Dti.as_str().into(), dti);
    }
    if let Some(f) = &bundle.flair {
        findings.insert(Modality::Flair.as_str().into(), flair_findings(f));
    }
    let rob = robustness_findings(bundle.robustness.as_ref(), bundle.identity.as_ref());
    if !rob.is_empty() {
        findings.insert(Modality::Robustness.as_str().into(), rob);
    }

    let s = &t1.spec;
    Ok(DiagnosticReport {
        schema_version: crate::SCHEMA_VERSION,
        identity: Identity {
            digest: t1.digest.to_hex(),
            architecture: format!("{}-layer decoder-only transformer", s.n_layers),
            n_layers: s.n_layers,
            n_heads: s.n_heads,
            d_model: s.d_model,
            d_mlp: s.d_mlp,
            vocab_size: s.vocab_size,
            max_seq_len: s.max_seq_len,
            total_parameters: t1.total_parameters,
        },
        findings,
        impression: impression(&performed, &severities.modalities),
        recommendation: recommendations(bundle, &performed, &severities.modalities),
        severity: severities
            .modalities
            .iter()
            .map(|(m, s)| (m.as_str().to_string(), s.clone()))
            .collect(),
        parameters: parameters(bundle, &severities.reference_architecture),
    })
}

/// `(modality, word, sentence)` for every severity word found in findings.
pub fn lint_findings(report: &DiagnosticReport) -> Vec<(String, String, String)> {
    let mut out = Vec::new();
    for (section, lines) in &report.findings {
        for line in lines {
            for word in line.split(|c: char| !c.is_alphanumeric()) {
                let lower = word.to_lowercase();
                if SEVERITY_WORDS.contains(&lower.as_str()) {
                    out.push((section.clone(), lower, line.clone()));
                }
            }
        }
    }
    out
}

/// Plain-text view of a report.
pub fn render_text(r: &DiagnosticReport) -> String {
    let mut s = String::new();
    let id = &r.identity;
    s.push_str("DIAGNOSTIC REPORT\n\n");
    s.push_str(&format!(
        "Model: {} ({} parameters)\nDigest: {}\n\n",
        id.architecture, id.total_parameters, id.digest
    ));
    s.push_str("FINDINGS\n");
    for m in Modality::ALL {
        if let Some(lines) = r.findings.get(m.as_str()) {
            s.push_str(&format!("  {}\n", m.title()));
            for l in lines {
                s.push_str(&format!("    - {l}\n"));
            }
        }
    }
    s.push_str("\nIMPRESSION\n");
    for l in &r.impression {
        s.push_str(&format!("  - {l}\n"));
    }
    s.push_str("\nRECOMMENDATION\n");
    for l in &r.recommendation {
        s.push_str(&format!("  - {l}\n"));
    }
    s.push_str("\nSEVERITY\n");
    for m in Modality::ALL {
        if let Some(v) = r.severity.get(m.as_str()) {
            s.push_str(&format!("  {:<11} {}\n", m.title(), v.severity));
        }
    }
    s.push_str("\nPARAMETERS\n");
    for (k, v) in &r.parameters {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}
