// SPDX-License-Identifier: MIT OR Apache-2.0

//! FLAIR anomaly screening over a single unperturbed trace.
//!
//! Four signals: attention entropy, layer magnitude outliers, adjacent-layer
//! collapse similarity and per-position prediction confidence. The screen
//! only raises flags; grading them is left to [`crate::clinic`].

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::{ActivationTrace, Model, TokenSequence};
use crate::probs::{next_token_distribution, top_prediction};
use crate::tensor::l2_norm;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlairThresholds {
    /// Head mean normalized entropy below this is flagged as concentrated.
    pub entropy_low: f64,
    /// Head mean normalized entropy above this is flagged as diffuse.
    pub entropy_high: f64,
    pub magnitude_z: f64,
    pub collapse_similarity: f64,
    /// Positions at or below this fraction of the median confidence are flagged.
    pub confidence_ratio: f64,
}

impl Default for FlairThresholds {
    fn default() -> Self {
        Self {
            entropy_low: 0.02,
            entropy_high: 0.98,
            magnitude_z: 3.0,
            collapse_similarity: 0.999,
            confidence_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlairMetric {
    ConcentratedAttention,
    DiffuseAttention,
    MagnitudeOutlier,
    RepresentationCollapse,
    ConfidenceDip,
}

impl FlairMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ConcentratedAttention => "concentrated_attention",
            Self::DiffuseAttention => "diffuse_attention",
            Self::MagnitudeOutlier => "magnitude_outlier",
            Self::RepresentationCollapse => "representation_collapse",
            Self::ConfidenceDip => "confidence_dip",
        }
    }
}

impl fmt::Display for FlairMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlagLocation {
    Head { layer: usize, head: usize },
    Layer { layer: usize },
    LayerPair { first: usize, second: usize },
    Position { position: usize },
}

impl fmt::Display for FlagLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Head { layer, head } => write!(f, "blocks.{layer} head {head}"),
            Self::Layer { layer } => write!(f, "blocks.{layer}"),
            Self::LayerPair { first, second } => write!(f, "blocks.{first}/blocks.{second}"),
            Self::Position { position } => write!(f, "position {position}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlairFlag {
    pub metric: FlairMetric,
    pub location: FlagLocation,
    pub value: f64,
    pub threshold: f64,
}

/// Per-head mean normalized attention entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyScan {
    /// `[layer][head]`; `None` for a single-token trace, where no row has
    /// more than one valid key.
    pub per_head: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeScan {
    /// Mean over positions of the resid_post L2 norm, per layer.
    pub layer_norms: Vec<f64>,
    /// `None` with fewer than three layers.
    pub z_scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseScan {
    /// Cosine similarity for layer pairs `(i, i + 1)`; `None` where either
    /// mean vector is zero.
    pub similarity: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScan {
    /// Top-token probability at every position.
    pub confidence: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlairReport {
    pub tokens: TokenSequence,
    pub thresholds: FlairThresholds,
    pub entropy: EntropyScan,
    pub magnitude: MagnitudeScan,
    pub collapse: CollapseScan,
    pub confidence: ConfidenceScan,
    pub flags: Vec<FlairFlag>,
}

impl FlairReport {
    pub fn flags_of(&self, metric: FlairMetric) -> impl Iterator<Item = &FlairFlag> {
        self.flags.iter().filter(move |f| f.metric == metric)
    }
}

/// Shannon entropy of `row[..valid]` divided by `ln(valid)`, clamped to [0, 1].
pub fn normalized_entropy(row: &[f32]) -> Option<f64> {
    if row.len() < 2 {
        return None;
    }
    let total: f64 = row.iter().map(|&p| p.max(0.0) as f64).sum();
    if total <= 0.0 {
        return None;
    }
    let h: f64 = row
        .iter()
        .map(|&p| p.max(0.0) as f64 / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * libm::log(p))
        .sum();
    Some((h / libm::log(row.len() as f64)).clamp(0.0, 1.0))
}

/// Row `r` of each head is normalized over its `r + 1` causally valid keys;
/// row 0 has a single key and is skipped.
pub fn attention_entropy(trace: &ActivationTrace, thresholds: &FlairThresholds) -> (EntropyScan, Vec<FlairFlag>) {
    let n = trace.n_positions();
    if n < 2 {
        return (EntropyScan { per_head: None }, Vec::new());
    }
    let mut flags = Vec::new();
    let mut grid = Vec::with_capacity(trace.n_layers());
    for (layer, lt) in trace.layers.iter().enumerate() {
        let p = &lt.attn_pattern;
        let mut heads = Vec::with_capacity(p.shape()[0]);
        for head in 0..p.shape()[0] {
            let mut sum = 0.0;
            let mut rows = 0usize;
            for q in 1..n {
                if let Some(e) = normalized_entropy(&p.row(head * n + q)[..=q]) {
                    sum += e;
                    rows += 1;
                }
            }
            let mean = if rows == 0 { 0.0 } else { sum / rows as f64 };
            let location = FlagLocation::Head { layer, head };
            if mean < thresholds.entropy_low {
                flags.push(FlairFlag {
                    metric: FlairMetric::ConcentratedAttention,
                    location,
                    value: mean,
                    threshold: thresholds.entropy_low,
                });
            } else if mean > thresholds.entropy_high {
                flags.push(FlairFlag {
                    metric: FlairMetric::DiffuseAttention,
                    location,
                    value: mean,
                    threshold: thresholds.entropy_high,
                });
            }
            heads.push(mean);
        }
        grid.push(heads);
    }
    (EntropyScan { per_head: Some(grid) }, flags)
}

/// Population z-scores of `values`; all zero when the spread is zero.
/// `None` with fewer than three values.
pub fn z_scores(values: &[f64]) -> Option<Vec<f64>> {
    if values.len() < 3 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = libm::sqrt(var);
    Some(
        values
            .iter()
            .map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 })
            .collect(),
    )
}

/// Flags layers whose norm z-score exceeds `z_threshold` in magnitude.
pub fn magnitude_outliers_from_norms(layer_norms: Vec<f64>, z_threshold: f64) -> (MagnitudeScan, Vec<FlairFlag>) {
    let z = z_scores(&layer_norms);
    let flags = z
        .iter()
        .flatten()
        .enumerate()
        .filter(|(_, z)| z.abs() > z_threshold)
        .map(|(layer, &z)| FlairFlag {
            metric: FlairMetric::MagnitudeOutlier,
            location: FlagLocation::Layer { layer },
            value: z,
            threshold: z_threshold,
        })
        .collect();
    (
        MagnitudeScan {
            layer_norms,
            z_scores: z,
        },
        flags,
    )
}

pub fn magnitude_outliers(trace: &ActivationTrace, z_threshold: f64) -> (MagnitudeScan, Vec<FlairFlag>) {
    let norms = trace
        .layers
        .iter()
        .map(|l| {
            let t = &l.resid_post;
            (0..t.n_rows()).map(|r| l2_norm(t.row(r))).sum::<f64>() / t.n_rows() as f64
        })
        .collect();
    magnitude_outliers_from_norms(norms, z_threshold)
}

fn position_mean(t: &Tensor) -> Vec<f64> {
    let mut m = alloc::vec![0.0f64; t.row_len()];
    for r in 0..t.n_rows() {
        for (a, &x) in m.iter_mut().zip(t.row(r)) {
            *a += x as f64;
        }
    }
    let n = t.n_rows() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Cosine similarity; `None` if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn collapse_similarity(trace: &ActivationTrace, sim_threshold: f64) -> (CollapseScan, Vec<FlairFlag>) {
    let means: Vec<Vec<f64>> = trace.layers.iter().map(|l| position_mean(&l.resid_post)).collect();
    let similarity: Vec<Option<f64>> = means.windows(2).map(|w| cosine(&w[0], &w[1])).collect();
    let flags = similarity
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.filter(|&s| s > sim_threshold).map(|s| (i, s)))
        .map(|(i, s)| FlairFlag {
            metric: FlairMetric::RepresentationCollapse,
            location: FlagLocation::LayerPair { first: i, second: i + 1 },
            value: s,
            threshold: sim_threshold,
        })
        .collect();
    (CollapseScan { similarity }, flags)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Confidence profile of a `[positions, vocab]` logits tensor.
pub fn confidence_from_logits(logits: &Tensor, ratio: f64) -> Result<(ConfidenceScan, Vec<FlairFlag>)> {
    if logits.n_rows() == 0 {
        return Err(Error::EmptyInput("no positions to profile".into()));
    }
    let confidence = (0..logits.n_rows())
        .map(|r| Ok(top_prediction(&next_token_distribution(logits.row(r))?)?.prob))
        .collect::<Result<Vec<f64>>>()?;
    let median = median(&confidence);
    let cut = ratio * median;
    let flags = confidence
        .iter()
        .enumerate()
        .filter(|(_, &c)| c <= cut)
        .map(|(position, &c)| FlairFlag {
            metric: FlairMetric::ConfidenceDip,
            location: FlagLocation::Position { position },
            value: c,
            threshold: cut,
        })
        .collect();
    Ok((ConfidenceScan { confidence, median }, flags))
}

pub fn confidence_profile(model: &Model, tokens: &TokenSequence, ratio: f64) -> Result<(ConfidenceScan, Vec<FlairFlag>)> {
    confidence_from_logits(&model.forward(tokens, &[])?.trace.logits, ratio)
}

/// All four signals from an existing unperturbed trace.
pub fn flair_from_trace(trace: &ActivationTrace, thresholds: &FlairThresholds) -> Result<FlairReport> {
    let (entropy, mut flags) = attention_entropy(trace, thresholds);
    let (magnitude, f) = magnitude_outliers(trace, thresholds.magnitude_z);
    flags.extend(f);
    let (collapse, f) = collapse_similarity(trace, thresholds.collapse_similarity);
    flags.extend(f);
    let (confidence, f) = confidence_from_logits(&trace.logits, thresholds.confidence_ratio)?;
    flags.extend(f);
    Ok(FlairReport {
        tokens: trace.tokens.clone(),
        thresholds: *thresholds,
        entropy,
        magnitude,
        collapse,
        confidence,
        flags,
    })
}

pub fn scan_flair(model: &Model, tokens: &TokenSequence, thresholds: &FlairThresholds) -> Result<FlairReport> {
    flair_from_trace(&model.forward(tokens, &[])?.trace, thresholds)
}

/// Renders a flag as one line of plain text.
pub fn describe_flag(flag: &FlairFlag) -> String {
    alloc::format!(
        "{} at {}: {:.6} (threshold {:.6})",
        flag.metric,
        flag.location,
        flag.value,
        flag.threshold
    )
}
