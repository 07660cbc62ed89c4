// SPDX-License-Identifier: MIT OR Apache-2.0

//! T1 topology and T2 weight-statistics scans. Neither runs the model.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::engine::{Model, ModelSpec, WeightDigest};
use crate::{Error, Result};

/// Parameter group a canonical tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Attention,
    Mlp,
    Norm,
    Unembedding,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name == "embed" || name == "pos_embed" {
            ParamGroup::Embedding
        } else if name == "unembed" {
            ParamGroup::Unembedding
        } else if name.contains(".attn.") {
            ParamGroup::Attention
        } else if name.contains(".mlp.") {
            ParamGroup::Mlp
        } else {
            ParamGroup::Norm
        }
    }
}

/// Layer index of a `blocks.{i}.…` tensor name.
pub fn block_of(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?.split('.').next()?.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCount {
    pub group: ParamGroup,
    pub count: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub layer: usize,
    pub attention: u64,
    pub mlp: u64,
    pub norm: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T1Report {
    pub spec: ModelSpec,
    pub d_head: usize,
    pub total_parameters: u64,
    /// Counted once when the unembedding is shared with the embedding.
    pub tied_unembed: bool,
    pub groups: Vec<GroupCount>,
    pub layers: Vec<LayerCount>,
    pub digest: WeightDigest,
}

pub fn scan_t1(model: &Model) -> T1Report {
    let weights = model.weights();
    let tied = weights.tied_unembed();
    let mut groups: BTreeMap<ParamGroup, u64> = BTreeMap::new();
    let n_layers = model.spec().n_layers;
    let mut layers: Vec<LayerCount> = (0..n_layers)
        .map(|layer| LayerCount {
            layer,
            attention: 0,
            mlp: 0,
            norm: 0,
            total: 0,
        })
        .collect();
    for (name, tensor) in weights.iter() {
        let group = ParamGroup::of(name);
        let count = if group == ParamGroup::Unembedding && tied { 0 } else { tensor.numel() as u64 };
        *groups.entry(group).or_default() += count;
        if let Some(l) = block_of(name) {
            let lc = &mut layers[l];
            match group {
                ParamGroup::Attention => lc.attention += count,
                ParamGroup::Mlp => lc.mlp += count,
                _ => lc.norm += count,
            }
            lc.total += count;
        }
    }
    let total: u64 = groups.values().sum();
    let groups = groups
        .into_iter()
        .map(|(group, count)| GroupCount {
            group,
            count,
            fraction: if total == 0 { 0.0 } else { count as f64 / total as f64 },
        })
        .collect();
    T1Report {
        spec: model.spec().clone(),
        d_head: model.spec().d_head(),
        total_parameters: total,
        tied_unembed: tied,
        groups,
        layers,
        digest: model.digest(),
    }
}

/// Variance below which excess kurtosis is reported as undefined.
pub const KURTOSIS_VARIANCE_EPSILON: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRecord {
    pub tensor: String,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    /// `E[(x-μ)⁴]/σ⁴ - 3`; `None` when the variance is below
    /// [`KURTOSIS_VARIANCE_EPSILON`].
    pub excess_kurtosis: Option<f64>,
    pub frobenius_norm: f64,
    pub count: usize,
}

/// Population moments of a tensor, two-pass in `f64`.
pub fn tensor_stats(name: &str, values: &[f32]) -> Result<StatRecord> {
    if values.is_empty() {
        return Err(Error::EmptyInput(format!("tensor `{name}` has no elements")));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("tensor `{name}` element {i} is not finite")));
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut m2, mut m4, mut sq) = (0.0f64, 0.0f64, 0.0f64);
    for &v in values {
        let v = v as f64;
        let c = v - mean;
        let c2 = c * c;
        m2 += c2;
        m4 += c2 * c2;
        sq += v * v;
    }
    let variance = m2 / n;
    let excess_kurtosis = (variance >= KURTOSIS_VARIANCE_EPSILON).then(|| (m4 / n) / (variance * variance) - 3.0);
    Ok(StatRecord {
        tensor: name.to_string(),
        mean,
        variance,
        excess_kurtosis,
        frobenius_norm: libm::sqrt(sq),
        count: values.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T2Thresholds {
    /// Flag tensors whose variance is below this.
    pub dead_variance: f64,
    /// Flag tensors whose excess kurtosis exceeds this.
    pub extreme_kurtosis: f64,
    /// Attention/MLP weight-norm ratio band per block.
    pub norm_ratio_low: f64,
    pub norm_ratio_high: f64,
}

impl Default for T2Thresholds {
    fn default() -> Self {
        Self {
            dead_variance: 1e-12,
            extreme_kurtosis: 20.0,
            norm_ratio_low: 0.05,
            norm_ratio_high: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum T2FlagKind {
    DeadRegion,
    ExtremeKurtosis,
    AnomalousNormRatio,
}

impl T2FlagKind {
    pub fn as_str(self) -> &'static str {
        match self {
            T2FlagKind::DeadRegion => "dead_region",
            T2FlagKind::ExtremeKurtosis => "extreme_kurtosis",
            T2FlagKind::AnomalousNormRatio => "anomalous_norm_ratio",
        }
    }
}

/// A raised flag with the value and threshold that triggered it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2Flag {
    pub kind: T2FlagKind,
    /// Tensor name, or `blocks.{i}` for norm-ratio flags.
    pub subject: String,
    /// `None` encodes an unbounded ratio (zero MLP norm).
    pub value: Option<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRatio {
    pub layer: usize,
    pub attention_norm: f64,
    pub mlp_norm: f64,
    /// `attention_norm / mlp_norm`; `None` when the MLP norm is zero.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2Report {
    pub thresholds: T2Thresholds,
    pub records: Vec<StatRecord>,
    pub norm_ratios: Vec<NormRatio>,
    /// Tensor with the largest Frobenius norm and its share of the summed
    /// norms. Reported, never flagged.
    pub dominant_tensor: String,
    pub dominant_norm_share: f64,
    pub flags: Vec<T2Flag>,
}

impl T2Report {
    pub fn flags_of(&self, kind: T2FlagKind) -> impl Iterator<Item = &T2Flag> {
        self.flags.iter().filter(move |f| f.kind == kind)
    }

    pub fn dead_region_fraction(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.flags_of(T2FlagKind::DeadRegion).count() as f64 / self.records.len() as f64
        }
    }
}

pub fn scan_t2(model: &Model, thresholds: &T2Thresholds) -> Result<T2Report> {
    let mut records = Vec::with_capacity(model.weights().len());
    for (name, tensor) in model.weights().iter() {
        records.push(tensor_stats(name, tensor.data())?);
    }
    Ok(t2_from_records(model.spec(), records, thresholds))
}

pub(crate) fn t2_from_records(spec: &ModelSpec, records: Vec<StatRecord>, thresholds: &T2Thresholds) -> T2Report {
    let mut flags = Vec::new();
    for r in &records {
        if r.variance < thresholds.dead_variance {
            flags.push(T2Flag {
                kind: T2FlagKind::DeadRegion,
                subject: r.tensor.clone(),
                value: Some(r.variance),
                threshold: thresholds.dead_variance,
            });
        }
        if let Some(k) = r.excess_kurtosis {
            if k > thresholds.extreme_kurtosis {
                flags.push(T2Flag {
                    kind: T2FlagKind::ExtremeKurtosis,
                    subject: r.tensor.clone(),
                    value: Some(k),
                    threshold: thresholds.extreme_kurtosis,
                });
            }
        }
    }

    let mut norm_ratios = Vec::with_capacity(spec.n_layers);
    for layer in 0..spec.n_layers {
        let sq = |suffixes: &[&str]| {
            let s: f64 = records
                .iter()
                .filter(|r| block_of(&r.tensor) == Some(layer) && suffixes.iter().any(|s| r.tensor.ends_with(s)))
                .map(|r| r.frobenius_norm * r.frobenius_norm)
                .sum();
            libm::sqrt(s)
        };
        let attention_norm = sq(&[".attn.W_Q", ".attn.W_K", ".attn.W_V", ".attn.W_O"]);
        let mlp_norm = sq(&[".mlp.W_in", ".mlp.W_out"]);
        let ratio = (mlp_norm > 0.0).then(|| attention_norm / mlp_norm);
        let outside = match ratio {
            Some(r) => r < thresholds.norm_ratio_low || r > thresholds.norm_ratio_high,
            None => true,
        };
        if outside {
            let below = ratio.is_some_and(|r| r < thresholds.norm_ratio_low);
            flags.push(T2Flag {
                kind: T2FlagKind::AnomalousNormRatio,
                subject: format!("blocks.{layer}"),
                value: ratio,
                threshold: if below { thresholds.norm_ratio_low } else { thresholds.norm_ratio_high },
            });
        }
        norm_ratios.push(NormRatio {
            layer,
            attention_norm,
            mlp_norm,
            ratio,
        });
    }

    let total_norm: f64 = records.iter().map(|r| r.frobenius_norm).sum();
    let dominant = records
        .iter()
        .fold(None::<&StatRecord>, |best, r| match best {
            Some(b) if b.frobenius_norm >= r.frobenius_norm => Some(b),
            _ => Some(r),
        });
    let (dominant_tensor, dominant_norm_share) = dominant
        .map(|r| (r.tensor.clone(), if total_norm > 0.0 { r.frobenius_norm / total_norm } else { 0.0 }))
        .unwrap_or_default();

    T2Report {
        thresholds: *thresholds,
        records,
        norm_ratios,
        dominant_tensor,
        dominant_norm_share,
        flags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::WeightStore;
    use crate::synth::{random_model, random_weights, InitScheme};

    #[test]
    fn constant_tensor() {
        let s = tensor_stats("c", &[5.0; 4]).unwrap();
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.variance, 0.0);
        assert_eq!(s.excess_kurtosis, None);
        assert_eq!(s.frobenius_norm, 10.0);
        assert_eq!(s.count, 4);
    }

    #[test]
    fn two_point_symmetric() {
        let s = tensor_stats("t", &[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(s.mean, 0.0);
        assert_eq!(s.variance, 1.0);
        assert_eq!(s.excess_kurtosis, Some(-2.0));
        assert_eq!(s.frobenius_norm, 2.0);
    }

    #[test]
    fn empty_and_non_finite() {
        assert!(matches!(tensor_stats("e", &[]), Err(Error::EmptyInput(_))));
        assert!(matches!(tensor_stats("n", &[1.0, f32::INFINITY]), Err(Error::Numeric(_))));
    }

    #[test]
    fn t1_is_non_inferential_and_repeatable() {
        let spec = ModelSpec::gpt2_like(2, 2, 16, 31, 10);
        let m = random_model(&spec, 1).unwrap();
        let a = scan_t1(&m);
        let b = scan_t1(&m);
        assert_eq!(a, b);
        assert_eq!(m.forward_calls(), 0);
        assert_eq!(a.total_parameters, spec.parameter_count(false));
        assert_eq!(a.groups.iter().map(|g| g.count).sum::<u64>(), a.total_parameters);
        assert!((a.groups.iter().map(|g| g.fraction).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tied_unembedding_is_counted_once() {
        let spec = ModelSpec::gpt2_like(1, 2, 8, 11, 4);
        let w = random_weights(&spec, 0, InitScheme::default()).unwrap().with_tied_unembed(true);
        let m = Model::new(spec.clone(), w).unwrap();
        assert_eq!(scan_t1(&m).total_parameters, spec.parameter_count(true));
    }

    #[test]
    fn healthy_random_model_raises_no_flags() {
        let spec = ModelSpec::gpt2_like(2, 2, 16, 31, 10);
        let m = random_model(&spec, 2).unwrap();
        let r = scan_t2(&m, &T2Thresholds::default()).unwrap();
        assert!(r.flags.is_empty(), "{:?}", r.flags);
        assert_eq!(r.records.len(), m.weights().len());
        assert_eq!(m.forward_calls(), 0);
    }

    #[test]
    fn zero_mlp_tensor_is_a_dead_region() {
        let spec = ModelSpec::gpt2_like(2, 2, 16, 31, 10);
        let mut t = random_weights(&spec, 3, InitScheme::default()).unwrap().into_tensors();
        t.get_mut("blocks.1.mlp.W_in").unwrap().data_mut().fill(0.0);
        let m = Model::new(spec.clone(), WeightStore::from_tensors(&spec, t).unwrap()).unwrap();
        let r = scan_t2(&m, &T2Thresholds::default()).unwrap();
        let dead: Vec<_> = r.flags_of(T2FlagKind::DeadRegion).map(|f| f.subject.as_str()).collect();
        assert_eq!(dead, ["blocks.1.mlp.W_in"]);
    }

    #[test]
    fn outlier_weight_raises_extreme_kurtosis() {
        let spec = ModelSpec::gpt2_like(2, 2, 16, 31, 10);
        let mut t = random_weights(&spec, 4, InitScheme::default()).unwrap().into_tensors();
        t.get_mut("blocks.0.attn.W_V").unwrap().data_mut()[17] = 1e6;
        let m = Model::new(spec.clone(), WeightStore::from_tensors(&spec, t).unwrap()).unwrap();
        let r = scan_t2(&m, &T2Thresholds::default()).unwrap();
        let k: Vec<_> = r.flags_of(T2FlagKind::ExtremeKurtosis).map(|f| f.subject.as_str()).collect();
        assert_eq!(k, ["blocks.0.attn.W_V"]);
    }
}
