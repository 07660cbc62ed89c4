// SPDX-License-Identifier: MIT OR Apache-2.0

//! fMRI activation mapping and DTI causal tracing.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::engine::{ActivationTrace, Component, HookSite, Model, PositionRange, TokenSequence};
use crate::exec::try_map;
use crate::perturb::{calibrated_sigma, Baseline, Mode, PerturbationSpec};
use crate::probs::{next_token_distribution, token_probability, TokenProb};
use crate::rng::{derive_seed, Gaussian};
use crate::tensor::l2_norm;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// fMRI
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeSummary {
    pub layer: usize,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    /// Mean over queries of the largest attention weight in the row.
    pub mean_max_weight: f64,
    /// Mean attention paid to position 0.
    pub mean_first_token_weight: f64,
    /// Mean attention paid to the previous position (queries ≥ 1).
    pub mean_previous_token_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmriMap {
    pub tokens: TokenSequence,
    /// `[layer][position]` L2 norm of the residual stream after each block.
    pub resid_norms: Vec<Vec<f64>>,
    /// `[layer][position]` L2 norms of the attention and MLP outputs.
    pub attn_out_norms: Vec<Vec<f64>>,
    pub mlp_out_norms: Vec<Vec<f64>>,
    pub attn_summary: Vec<MagnitudeSummary>,
    pub mlp_summary: Vec<MagnitudeSummary>,
    pub heads: Vec<HeadStats>,
}

impl FmriMap {
    pub fn n_layers(&self) -> usize {
        self.resid_norms.len()
    }

    /// Layer whose attention + MLP output is largest at the final position.
    pub fn most_active_layer(&self) -> usize {
        let last = self.tokens.len() - 1;
        let mut best = (0, f64::NEG_INFINITY);
        for l in 0..self.n_layers() {
            let v = self.attn_out_norms[l][last] + self.mlp_out_norms[l][last];
            if v > best.1 {
                best = (l, v);
            }
        }
        best.0
    }
}

fn row_norms(t: &crate::Tensor) -> Vec<f64> {
    (0..t.n_rows()).map(|r| l2_norm(t.row(r))).collect()
}

fn summarize(layer: usize, norms: &[f64]) -> MagnitudeSummary {
    MagnitudeSummary {
        layer,
        mean: norms.iter().sum::<f64>() / norms.len() as f64,
        max: norms.iter().copied().fold(0.0, f64::max),
    }
}

/// Builds the map from a completed, unperturbed trace.
pub fn fmri_from_trace(trace: &ActivationTrace) -> FmriMap {
    let n = trace.n_positions();
    let mut map = FmriMap {
        tokens: trace.tokens.clone(),
        resid_norms: Vec::new(),
        attn_out_norms: Vec::new(),
        mlp_out_norms: Vec::new(),
        attn_summary: Vec::new(),
        mlp_summary: Vec::new(),
        heads: Vec::new(),
    };
    for (l, layer) in trace.layers.iter().enumerate() {
        let attn = row_norms(&layer.attn_out);
        let mlp = row_norms(&layer.mlp_out);
        map.attn_summary.push(summarize(l, &attn));
        map.mlp_summary.push(summarize(l, &mlp));
        map.resid_norms.push(row_norms(&layer.resid_post));
        map.attn_out_norms.push(attn);
        map.mlp_out_norms.push(mlp);
        let p = &layer.attn_pattern;
        for head in 0..p.shape()[0] {
            let (mut max_w, mut first, mut prev) = (0.0, 0.0, 0.0);
            for q in 0..n {
                let row = p.row(head * n + q);
                max_w += row.iter().copied().fold(0.0f32, f32::max) as f64;
                first += row[0] as f64;
                if q > 0 {
                    prev += row[q - 1] as f64;
                }
            }
            map.heads.push(HeadStats {
                layer: l,
                head,
                mean_max_weight: max_w / n as f64,
                mean_first_token_weight: first / n as f64,
                mean_previous_token_weight: if n > 1 { prev / (n - 1) as f64 } else { 0.0 },
            });
        }
    }
    map
}

pub fn scan_fmri(model: &Model, tokens: &TokenSequence) -> Result<FmriMap> {
    Ok(fmri_from_trace(&model.forward(tokens, &[])?.trace))
}

/// `[layer][head]` induction scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionScores {
    pub period: usize,
    pub seed: u64,
    pub tokens: TokenSequence,
    pub scores: Vec<Vec<f64>>,
}

/// Mean over second-half queries `t` of the attention weight on key
/// `t - period + 1`.
pub fn induction_from_trace(trace: &ActivationTrace, period: usize) -> Result<Vec<Vec<f64>>> {
    let n = trace.n_positions();
    if period < 2 || n != 2 * period {
        return Err(Error::Argument(format!(
            "induction scoring needs period ≥ 2 and length 2×period, got period {period}, length {n}"
        )));
    }
    Ok(trace
        .layers
        .iter()
        .map(|layer| {
            let p = &layer.attn_pattern;
            (0..p.shape()[0])
                .map(|head| {
                    let s: f64 = (period..n).map(|t| p.row(head * n + t)[t - period + 1] as f64).sum();
                    s / period as f64
                })
                .collect()
        })
        .collect())
}

/// Runs a random `period`-token sequence repeated twice and scores every head.
pub fn induction_scores(model: &Model, period: usize, total_len: usize, seed: u64) -> Result<InductionScores> {
    if period < 2 || total_len != 2 * period {
        return Err(Error::Argument(format!(
            "induction scoring needs period ≥ 2 and total_len = 2×period, got {period}/{total_len}"
        )));
    }
    let mut g = Gaussian::new(seed);
    let vocab = model.spec().vocab_size as u64;
    let half: Vec<u32> = (0..period).map(|_| g.below(vocab) as u32).collect();
    let mut ids = half.clone();
    ids.extend_from_slice(&half);
    let tokens = TokenSequence(ids);
    let trace = model.forward(&tokens, &[])?.trace;
    Ok(InductionScores {
        period,
        seed,
        scores: induction_from_trace(&trace, period)?,
        tokens,
    })
}

// ---------------------------------------------------------------------------
// DTI
// ---------------------------------------------------------------------------

/// `{attn_out, mlp_out}` for every layer, in layer order.
pub fn default_sites(n_layers: usize) -> Vec<HookSite> {
    (0..n_layers)
        .flat_map(|l| [HookSite::new(l, Component::AttnOut), HookSite::new(l, Component::MlpOut)])
        .collect()
}

/// Whether a grid resolves individual positions or perturbs whole sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerPosition,
    WholeSite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceGrid {
    pub tokens: TokenSequence,
    pub sites: Vec<HookSite>,
    pub granularity: Granularity,
    /// Column labels: the perturbed position range of each column.
    pub columns: Vec<PositionRange>,
    /// `[site][column]`: clean minus corrupted probability of the clean top token.
    pub importance: Vec<Vec<f64>>,
    pub clean_top: TokenProb,
    pub sigma: f32,
    pub sigma_calibrated: bool,
    pub seed: u64,
}

impl ImportanceGrid {
    pub fn p_clean(&self) -> f64 {
        self.clean_top.prob
    }

    pub fn site_max(&self, i: usize) -> f64 {
        self.importance[i].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtiConfig {
    /// Noise std; calibrated from the embedding activations when `None`.
    pub sigma: Option<f32>,
    pub seed: u64,
    pub granularity: Granularity,
}

impl Default for DtiConfig {
    fn default() -> Self {
        Self {
            sigma: None,
            seed: 0,
            granularity: Granularity::PerPosition,
        }
    }
}

/// Noise-corrupts each (site, position) in turn and measures the drop in the
/// clean top token's final-position probability.
pub fn dti_importance(model: &Model, tokens: &TokenSequence, sites: &[HookSite], config: &DtiConfig) -> Result<ImportanceGrid> {
    if sites.is_empty() {
        return Err(Error::EmptyInput("no sites to scan".into()));
    }
    let baseline = Baseline::new(model, tokens)?;
    let (sigma, sigma_calibrated) = match config.sigma {
        Some(s) if !(s.is_finite() && s >= 0.0) => {
            return Err(Error::InvalidPerturbation(format!("noise sigma must be non-negative, got {s}")))
        }
        Some(s) => (s, false),
        None => (calibrated_sigma(&baseline.trace), true),
    };
    let columns: Vec<PositionRange> = match config.granularity {
        Granularity::PerPosition => (0..tokens.len()).map(PositionRange::single).collect(),
        Granularity::WholeSite => alloc::vec![PositionRange::new(0, tokens.len())],
    };
    for site in sites {
        site.validate(model.spec(), Some(tokens.len()))?;
    }
    let cells: Vec<(usize, usize)> = (0..sites.len()).flat_map(|s| (0..columns.len()).map(move |c| (s, c))).collect();
    let clean = baseline.top;
    let values = try_map(&cells, |&(s, c)| {
        let site = sites[s].clone().at_positions(columns[c]);
        let seed = derive_seed(config.seed, (s * columns.len() + c) as u64);
        let spec = PerturbationSpec::new(site, Mode::Noise { sigma }).with_seed(seed);
        let run = baseline.run(model, core::slice::from_ref(&spec))?;
        let p = token_probability(run.trace.final_logits(), clean.id)?;
        Ok(clean.prob - p)
    })?;
    let importance = values.chunks(columns.len()).map(|c| c.to_vec()).collect();
    Ok(ImportanceGrid {
        tokens: tokens.clone(),
        sites: sites.to_vec(),
        granularity: config.granularity,
        columns,
        importance,
        clean_top: clean,
        sigma,
        sigma_calibrated,
        seed: config.seed,
    })
}

/// Smallest `|p_clean - p_corrupt|` a causal trace accepts.
pub const MIN_TRACE_GAP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalTraceResult {
    pub clean_tokens: TokenSequence,
    pub corrupt_tokens: TokenSequence,
    pub target: u32,
    pub p_clean: f64,
    pub p_corrupt: f64,
    pub sites: Vec<HookSite>,
    /// `[site][position]`: `(p_patched - p_corrupt) / (p_clean - p_corrupt)`.
    pub recovery: Vec<Vec<f64>>,
}

impl CausalTraceResult {
    pub fn site_max(&self, i: usize) -> f64 {
        self.recovery[i].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Site with the highest recovery anywhere in the grid.
    pub fn dominant_site(&self) -> Option<&HookSite> {
        (0..self.sites.len())
            .max_by(|&a, &b| self.site_max(a).total_cmp(&self.site_max(b)).then(b.cmp(&a)))
            .map(|i| &self.sites[i])
    }
}

/// Patches clean activations into the corrupt run one (site, position) at a
/// time and scores how much of the target-probability gap each restores.
pub fn causal_trace(
    model: &Model,
    clean: &TokenSequence,
    corrupt: &TokenSequence,
    target: u32,
    sites: &[HookSite],
) -> Result<CausalTraceResult> {
    let source = model.forward(clean, &[])?.trace;
    causal_trace_with_source(model, clean, corrupt, &Arc::new(source), target, sites)
}

/// As [`causal_trace`], patching from an arbitrary `source` run of the same
/// shape instead of the clean run.
pub fn causal_trace_with_source(
    model: &Model,
    clean: &TokenSequence,
    corrupt: &TokenSequence,
    source: &Arc<ActivationTrace>,
    target: u32,
    sites: &[HookSite],
) -> Result<CausalTraceResult> {
    if clean.len() != corrupt.len() {
        return Err(Error::Argument(format!(
            "clean and corrupt prompts differ in length ({} vs {})",
            clean.len(),
            corrupt.len()
        )));
    }
    if sites.is_empty() {
        return Err(Error::EmptyInput("no sites to trace".into()));
    }
    if target as usize >= model.spec().vocab_size {
        return Err(Error::TokenOutOfRange {
            id: target,
            vocab: model.spec().vocab_size,
        });
    }
    let p_clean = token_probability(model.forward(clean, &[])?.trace.final_logits(), target)?;
    let baseline = Baseline::new(model, corrupt)?;
    let p_corrupt = token_probability(baseline.trace.final_logits(), target)?;
    let gap = p_clean - p_corrupt;
    if gap.abs() < MIN_TRACE_GAP {
        return Err(Error::DegenerateTrace {
            gap: gap.abs(),
            min: MIN_TRACE_GAP,
        });
    }
    let n = corrupt.len();
    let cells: Vec<(usize, usize)> = (0..sites.len()).flat_map(|s| (0..n).map(move |p| (s, p))).collect();
    let values = try_map(&cells, |&(s, p)| {
        let site = sites[s].clone().at_positions(PositionRange::single(p));
        let spec = PerturbationSpec::new(site, Mode::Patch(source.clone()));
        let run = baseline.run(model, core::slice::from_ref(&spec))?;
        let probs = next_token_distribution(run.trace.final_logits())?;
        let r = (probs[target as usize] - p_corrupt) / gap;
        if r.is_finite() {
            Ok(r)
        } else {
            Err(Error::Numeric(format!("recovery at {} position {p} is not finite", sites[s])))
        }
    })?;
    Ok(CausalTraceResult {
        clean_tokens: clean.clone(),
        corrupt_tokens: corrupt.clone(),
        target,
        p_clean,
        p_corrupt,
        sites: sites.to_vec(),
        recovery: values.chunks(n).map(|c| c.to_vec()).collect(),
    })
}

/// Default critical-path threshold, as a fraction of `p_clean`.
pub const DEFAULT_THETA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPath {
    pub theta: f64,
    pub sites: Vec<HookSite>,
    /// `|sites| / |all scanned sites|`
    pub fraction: f64,
}

/// Sites whose max-over-positions importance reaches `theta × p_clean`.
pub fn critical_path(grid: &ImportanceGrid, theta: f64) -> Result<CriticalPath> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Argument(format!("theta must lie in (0, 1], got {theta}")));
    }
    if grid.sites.is_empty() || grid.columns.is_empty() {
        return Err(Error::EmptyInput("importance grid has no cells".into()));
    }
    let cut = theta * grid.p_clean();
    let sites: Vec<HookSite> = (0..grid.sites.len())
        .filter(|&i| grid.site_max(i) >= cut)
        .map(|i| grid.sites[i].clone())
        .collect();
    Ok(CriticalPath {
        theta,
        fraction: sites.len() as f64 / grid.sites.len() as f64,
        sites,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DominanceLabel {
    MlpDominant,
    AttentionDominant,
    Balanced,
}

/// Ratio cut-offs for [`DominanceLabel`].
pub const MLP_DOMINANT_RATIO: f64 = 2.0;
pub const ATTENTION_DOMINANT_RATIO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceProfile {
    pub mlp_max: f64,
    pub mlp_mean: f64,
    pub attn_max: f64,
    pub attn_mean: f64,
    /// `mlp_max / attn_max` with negative importances floored at zero;
    /// `None` when the attention maximum is zero.
    pub ratio: Option<f64>,
    pub label: DominanceLabel,
}

pub fn dominance_profile(grid: &ImportanceGrid) -> Result<DominanceProfile> {
    let per_kind = |c: Component| -> Vec<f64> {
        (0..grid.sites.len())
            .filter(|&i| grid.sites[i].component == c)
            .map(|i| grid.site_max(i))
            .collect()
    };
    let mlp = per_kind(Component::MlpOut);
    let attn = per_kind(Component::AttnOut);
    if mlp.is_empty() || attn.is_empty() {
        return Err(Error::InsufficientSites(
            "dominance needs both mlp_out and attn_out sites".into(),
        ));
    }
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mlp_max, attn_max) = (max(&mlp), max(&attn));
    let (m, a) = (mlp_max.max(0.0), attn_max.max(0.0));
    let ratio = (a > 0.0).then(|| m / a);
    let label = match ratio {
        Some(r) if r > MLP_DOMINANT_RATIO => DominanceLabel::MlpDominant,
        Some(r) if r < ATTENTION_DOMINANT_RATIO => DominanceLabel::AttentionDominant,
        Some(_) => DominanceLabel::Balanced,
        None if m > 0.0 => DominanceLabel::MlpDominant,
        None => DominanceLabel::Balanced,
    };
    Ok(DominanceProfile {
        mlp_max,
        mlp_mean: mean(&mlp),
        attn_max,
        attn_mean: mean(&attn),
        ratio,
        label,
    })
}

/// Column label helper for rendering.
pub fn column_label(r: &PositionRange) -> String {
    if r.end == r.start + 1 {
        format!("{}", r.start)
    } else {
        format!("{}..{}", r.start, r.end)
    }
}
