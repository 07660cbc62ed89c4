// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::sync::Arc;

use nmri_core::engine::ModelSpec;
use nmri_core::perturb::{run_perturbed, Mode, PerturbationSpec};
use nmri_core::probs::token_probability;
use nmri_core::rng::derive_seed;
use nmri_core::scan_flair::{
    flair_from_trace, magnitude_outliers, scan_flair, FlagLocation, FlairMetric, FlairThresholds,
};
use nmri_core::scan_func::{
    causal_trace, causal_trace_with_source, critical_path, default_sites, dominance_profile, dti_importance,
    induction_from_trace, induction_scores, scan_fmri, DtiConfig, Granularity,
};
use nmri_core::synth::{collapsed_pair_weights, random_model, random_tokens, zero_weights};
use nmri_core::{Component, Error, HookSite, Model, PositionRange, Tensor, TokenSequence, WeightStore};
use proptest::prelude::*;

fn tiny(n_layers: usize) -> ModelSpec {
    ModelSpec::gpt2_like(n_layers, 2, 16, 32, 24)
}

fn l2(row: &[f32]) -> f64 {
    row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

#[test]
fn fmri_zero_model_is_silent() {
    let spec = tiny(2);
    let m = Model::new(spec.clone(), zero_weights(&spec).unwrap()).unwrap();
    let map = scan_fmri(&m, &TokenSequence(vec![1, 2, 3])).unwrap();
    for grid in [&map.resid_norms, &map.attn_out_norms, &map.mlp_out_norms] {
        assert!(grid.iter().flatten().all(|&v| v == 0.0));
    }
}

#[test]
fn fmri_matches_trace_norms() {
    let m = random_model(&tiny(2), 5).unwrap();
    let t = random_tokens(9, 32, 5);
    let map = scan_fmri(&m, &t).unwrap();
    let trace = m.forward(&t, &[]).unwrap().trace;
    assert_eq!(map.resid_norms.len(), 2);
    for (l, layer) in trace.layers.iter().enumerate() {
        assert_eq!(map.resid_norms[l].len(), 9);
        for p in 0..9 {
            assert!((map.resid_norms[l][p] - l2(layer.resid_post.row(p))).abs() < 1e-9);
            assert!((map.mlp_out_norms[l][p] - l2(layer.mlp_out.row(p))).abs() < 1e-9);
        }
    }
}

#[test]
fn fmri_respects_causality() {
    let m = random_model(&tiny(2), 6).unwrap();
    let a = random_tokens(8, 32, 1);
    let mut b = a.clone();
    b.0[5] = (b.0[5] + 1) % 32;
    let (ma, mb) = (scan_fmri(&m, &a).unwrap(), scan_fmri(&m, &b).unwrap());
    for l in 0..2 {
        assert_eq!(ma.resid_norms[l][..5], mb.resid_norms[l][..5]);
        assert_ne!(ma.resid_norms[l][5], mb.resid_norms[l][5]);
    }
}

#[test]
fn induction_scores_on_constructed_patterns() {
    let spec = tiny(2);
    let m = Model::new(spec.clone(), zero_weights(&spec).unwrap()).unwrap();
    let period = 5;
    let scores = induction_scores(&m, period, 2 * period, 9).unwrap();
    // Zero weights give uniform causal rows: mean over t of 1/(t+1).
    let expected: f64 = (period..2 * period).map(|t| 1.0 / (t + 1) as f64).sum::<f64>() / period as f64;
    for s in scores.scores.iter().flatten() {
        assert!((s - expected).abs() < 1e-6, "{s} vs {expected}");
    }

    let mut trace = m.forward(&scores.tokens, &[]).unwrap().trace;
    let n = 2 * period;
    for layer in &mut trace.layers {
        let mut p = Tensor::zeros(vec![2, n, n]);
        for h in 0..2 {
            for t in 0..n {
                let k = if t >= period { t - period + 1 } else { t };
                p.row_mut(h * n + t)[k] = 1.0;
            }
        }
        layer.attn_pattern = p;
    }
    for s in induction_from_trace(&trace, period).unwrap().iter().flatten() {
        assert_eq!(*s, 1.0);
    }

    assert!(matches!(induction_scores(&m, 5, 9, 0), Err(Error::Argument(_))));
    assert!(matches!(induction_scores(&m, 1, 2, 0), Err(Error::Argument(_))));
}

#[test]
fn induction_scores_match_brute_force() {
    let m = random_model(&tiny(2), 8).unwrap();
    let s = induction_scores(&m, 6, 12, 4).unwrap();
    assert_eq!(s.tokens.0[..6], s.tokens.0[6..]);
    let trace = m.forward(&s.tokens, &[]).unwrap().trace;
    for l in 0..2 {
        for h in 0..2 {
            let p = &trace.layers[l].attn_pattern;
            let mut acc = 0.0;
            for t in 6..12 {
                acc += p.data()[(h * 12 + t) * 12 + t - 5] as f64;
            }
            assert!((s.scores[l][h] - acc / 6.0).abs() < 1e-12);
        }
    }
}

#[test]
fn dti_sigma_zero_is_exactly_zero() {
    let m = random_model(&tiny(2), 2).unwrap();
    let t = random_tokens(6, 32, 2);
    let cfg = DtiConfig { sigma: Some(0.0), ..DtiConfig::default() };
    let grid = dti_importance(&m, &t, &default_sites(2), &cfg).unwrap();
    assert_eq!(grid.importance.len(), 4);
    assert!(grid.importance.iter().flatten().all(|&v| v == 0.0));
    let cp = critical_path(&grid, 0.2).unwrap();
    assert!(cp.sites.is_empty());
}

#[test]
fn dti_grid_matches_isolated_recomputation() {
    let m = random_model(&tiny(2), 3).unwrap();
    let t = random_tokens(5, 32, 3);
    let sites = default_sites(2);
    let cfg = DtiConfig { sigma: Some(0.7), seed: 77, granularity: Granularity::PerPosition };
    let grid = dti_importance(&m, &t, &sites, &cfg).unwrap();
    assert_eq!(grid, dti_importance(&m, &t, &sites, &cfg).unwrap());
    let clean = m.forward(&t, &[]).unwrap().trace;
    let top = grid.clean_top.id;
    let p_clean = token_probability(clean.final_logits(), top).unwrap();
    assert_eq!(p_clean, grid.p_clean());
    for (s, site) in sites.iter().enumerate() {
        for p in 0..5 {
            let spec = PerturbationSpec::new(site.clone().at_positions(PositionRange::single(p)), Mode::Noise { sigma: 0.7 })
                .with_seed(derive_seed(77, (s * 5 + p) as u64));
            let run = run_perturbed(&m, &t, &[spec]).unwrap();
            let expected = p_clean - token_probability(run.trace.final_logits(), top).unwrap();
            assert_eq!(grid.importance[s][p], expected);
            assert!(grid.importance[s][p] <= p_clean);
        }
    }
    let whole = dti_importance(&m, &t, &sites, &DtiConfig { granularity: Granularity::WholeSite, ..cfg }).unwrap();
    assert_eq!(whole.columns, vec![PositionRange::new(0, 5)]);
}

/// Layer-0 attention writes a fixed signal along `e_in`; layer-0 MLP turns it
/// into a strong `e_ans` component that the unembedding reads as token 1.
/// Nothing else in the model is non-zero.
fn single_path_model() -> Model {
    let spec = ModelSpec::gpt2_like(2, 2, 8, 16, 8);
    let mut t: BTreeMap<String, Tensor> = zero_weights(&spec).unwrap().into_tensors();
    let set = |t: &mut BTreeMap<String, Tensor>, name: &str, idx: usize, v: f32| {
        t.get_mut(name).unwrap().data_mut()[idx] = v;
    };
    for name in ["blocks.0.ln1.w", "blocks.0.ln2.w", "blocks.1.ln1.w", "blocks.1.ln2.w", "ln_f.w"] {
        t.get_mut(name).unwrap().data_mut().fill(1.0);
    }
    set(&mut t, "blocks.0.attn.b_O", 0, 1.0);
    set(&mut t, "blocks.0.mlp.W_in", 0, 1.0); // W_in[e_in, h0]
    set(&mut t, "blocks.0.mlp.b_in", 0, -2.0);
    set(&mut t, "blocks.0.mlp.W_out", 1, 50.0); // W_out[h0, e_ans]
    set(&mut t, "unembed", 16 + 1, 1.5); // unembed[e_ans, token 1]
    Model::new(spec.clone(), WeightStore::from_tensors(&spec, t).unwrap()).unwrap()
}

#[test]
fn dti_singles_out_the_answer_carrying_site() {
    let m = single_path_model();
    let t = TokenSequence(vec![3, 4, 5, 6]);
    let sites = default_sites(2);
    let carrier = sites.iter().position(|s| *s == HookSite::new(0, Component::AttnOut)).unwrap();
    for seed in 0..5 {
        let cfg = DtiConfig { sigma: Some(1.0), seed, granularity: Granularity::WholeSite };
        let grid = dti_importance(&m, &t, &sites, &cfg).unwrap();
        assert_eq!(grid.clean_top.id, 1);
        assert!(grid.p_clean() > 0.5);
        for i in (0..sites.len()).filter(|&i| i != carrier) {
            assert!(grid.site_max(carrier) > grid.site_max(i), "seed {seed}: {:?}", grid.importance);
        }
        let cp = critical_path(&grid, 0.2).unwrap();
        assert_eq!(cp.sites, vec![sites[carrier].clone()]);
        let d = dominance_profile(&grid).unwrap();
        assert_eq!(d.label, nmri_core::scan_func::DominanceLabel::AttentionDominant);
    }
}

fn trace_sites(n_layers: usize) -> Vec<HookSite> {
    let mut s = default_sites(n_layers);
    s.push(HookSite::new(n_layers - 1, Component::ResidPost));
    s
}

#[test]
fn recovery_endpoints_on_random_models() {
    let mut checked = 0;
    for seed in 0..10u64 {
        let m = random_model(&tiny(2), 100 + seed).unwrap();
        let clean = random_tokens(6, 32, seed);
        let mut corrupt = clean.clone();
        corrupt.0[1] = (corrupt.0[1] + 7) % 32;
        let trace = m.forward(&clean, &[]).unwrap().trace;
        let target = nmri_core::probs::top_prediction(
            &nmri_core::probs::next_token_distribution(trace.final_logits()).unwrap(),
        )
        .unwrap()
        .id;
        let sites = trace_sites(2);
        let r = match causal_trace(&m, &clean, &corrupt, target, &sites) {
            Ok(r) => r,
            Err(Error::DegenerateTrace { .. }) => continue,
            Err(e) => panic!("{e}"),
        };
        checked += 1;
        let last = sites.len() - 1;
        assert!((r.recovery[last][5] - 1.0).abs() < 1e-6, "{}", r.recovery[last][5]);
        let corrupt_run = Arc::new(m.forward(&corrupt, &[]).unwrap().trace);
        let own = causal_trace_with_source(&m, &clean, &corrupt, &corrupt_run, target, &sites).unwrap();
        assert!(own.recovery.iter().flatten().all(|&v| v == 0.0));
    }
    assert!(checked >= 8);
}

#[test]
fn causal_trace_errors() {
    let m = random_model(&tiny(2), 1).unwrap();
    let a = random_tokens(4, 32, 1);
    let sites = default_sites(2);
    assert!(matches!(
        causal_trace(&m, &a, &random_tokens(5, 32, 2), 0, &sites),
        Err(Error::Argument(_))
    ));
    assert!(matches!(causal_trace(&m, &a, &a, 0, &sites), Err(Error::DegenerateTrace { .. })));
}

#[test]
fn flair_healthy_random_model_raises_no_flags() {
    let m = random_model(&tiny(3), 40).unwrap();
    let r = scan_flair(&m, &random_tokens(12, 32, 0), &FlairThresholds::default()).unwrap();
    assert!(r.flags.is_empty(), "{:?}", r.flags);
}

#[test]
fn flair_flags_agree_with_direct_metrics() {
    let th = FlairThresholds::default();
    for seed in 0..8 {
        let m = random_model(&tiny(3), 40 + seed).unwrap();
        let t = random_tokens(12, 32, seed);
        let r = scan_flair(&m, &t, &th).unwrap();
        let trace = m.forward(&t, &[]).unwrap().trace;
        let conf: Vec<f64> = (0..12)
            .map(|p| {
                let row = trace.logits.row(p);
                let top = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut best = 0.0;
                for &x in row {
                    if x == top {
                        best = 1.0 / row.iter().map(|&y| (y as f64 - x as f64).exp()).sum::<f64>();
                    }
                }
                best
            })
            .collect();
        let mut sorted = conf.clone();
        sorted.sort_by(f64::total_cmp);
        let median = (sorted[5] + sorted[6]) / 2.0;
        let dips: Vec<FlagLocation> = (0..12)
            .filter(|&p| conf[p] <= 0.5 * median)
            .map(|position| FlagLocation::Position { position })
            .collect();
        assert_eq!(count(&r, FlairMetric::ConfidenceDip), dips);
        for (p, c) in conf.iter().enumerate() {
            assert!((r.confidence.confidence[p] - c).abs() < 1e-9);
        }
        for e in r.entropy.per_head.as_ref().unwrap().iter().flatten() {
            assert!((0.0..=1.0).contains(e));
            assert!(*e > th.entropy_low && *e < th.entropy_high);
        }
        assert_eq!(count(&r, FlairMetric::ConcentratedAttention).len() + count(&r, FlairMetric::DiffuseAttention).len(), 0);
    }
}

#[test]
fn flair_zero_model_is_maximally_diffuse() {
    let spec = tiny(2);
    let m = Model::new(spec.clone(), zero_weights(&spec).unwrap()).unwrap();
    let r = scan_flair(&m, &TokenSequence(vec![1, 2, 3, 4]), &FlairThresholds::default()).unwrap();
    for e in r.entropy.per_head.as_ref().unwrap().iter().flatten() {
        assert!((e - 1.0).abs() < 1e-6);
    }
    assert_eq!(r.flags_of(FlairMetric::DiffuseAttention).count(), 4);
    // Zero residual stream: similarity is undefined, never flagged.
    assert_eq!(r.collapse.similarity, vec![None]);
    assert_eq!(r.flags_of(FlairMetric::RepresentationCollapse).count(), 0);
}

#[test]
fn flair_single_token_entropy_is_not_computable() {
    let m = random_model(&tiny(2), 1).unwrap();
    let r = scan_flair(&m, &TokenSequence(vec![3]), &FlairThresholds::default()).unwrap();
    assert_eq!(r.entropy.per_head, None);
}

#[test]
fn flair_detects_duplicated_adjacent_blocks() {
    let spec = tiny(3);
    let m = Model::new(spec.clone(), collapsed_pair_weights(&spec, 9, 1, 1000.0).unwrap()).unwrap();
    let r = scan_flair(&m, &random_tokens(10, 32, 9), &FlairThresholds::default()).unwrap();
    let flags: Vec<_> = r.flags_of(FlairMetric::RepresentationCollapse).collect();
    assert_eq!(flags.len(), 1, "{:?}", r.collapse.similarity);
    assert_eq!(flags[0].location, FlagLocation::LayerPair { first: 1, second: 2 });
    assert!(flags[0].value > 0.999);
}

#[test]
fn magnitude_z_scores_match_recomputation() {
    let m = random_model(&tiny(4), 12).unwrap();
    let trace = m.forward(&random_tokens(7, 32, 12), &[]).unwrap().trace;
    let (scan, _) = magnitude_outliers(&trace, 3.0);
    let norms: Vec<f64> = trace
        .layers
        .iter()
        .map(|l| (0..7).map(|p| l2(l.resid_post.row(p))).sum::<f64>() / 7.0)
        .collect();
    let mean = norms.iter().sum::<f64>() / 4.0;
    let sd = (norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    for (z, n) in scan.z_scores.unwrap().iter().zip(&norms) {
        assert!((z - (n - mean) / sd).abs() < 1e-9);
    }
}

fn count(r: &nmri_core::scan_flair::FlairReport, metric: FlairMetric) -> Vec<FlagLocation> {
    r.flags_of(metric).map(|f| f.location).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tightening_thresholds_keeps_flags(
        seed in 0u64..1000,
        low in 0.0f64..0.5, dlow in 0.0f64..0.5,
        high in 0.5f64..1.0, dhigh in 0.0f64..0.5,
        z in 0.5f64..3.0, dz in 0.0f64..2.0,
        sim in 0.0f64..1.0, dsim in 0.0f64..1.0,
        ratio in 0.1f64..1.0, dratio in 0.0f64..0.5,
    ) {
        let m = random_model(&tiny(3), seed).unwrap();
        let trace = m.forward(&random_tokens(8, 32, seed), &[]).unwrap().trace;
        let loose = FlairThresholds { entropy_low: low, entropy_high: high, magnitude_z: z + dz, collapse_similarity: sim, confidence_ratio: ratio };
        let tight = FlairThresholds {
            entropy_low: low + dlow,
            entropy_high: high - dhigh,
            magnitude_z: z,
            collapse_similarity: sim - dsim,
            confidence_ratio: ratio + dratio,
        };
        let (a, b) = (flair_from_trace(&trace, &loose).unwrap(), flair_from_trace(&trace, &tight).unwrap());
        for metric in [FlairMetric::MagnitudeOutlier, FlairMetric::RepresentationCollapse, FlairMetric::ConfidenceDip] {
            let tight_locs = count(&b, metric);
            for loc in count(&a, metric) {
                prop_assert!(tight_locs.contains(&loc), "{metric} lost {loc:?}");
            }
        }
        for (metric, alt) in [
            (FlairMetric::ConcentratedAttention, FlairMetric::DiffuseAttention),
            (FlairMetric::DiffuseAttention, FlairMetric::ConcentratedAttention),
        ] {
            // A head moves between the two entropy flags only if both bands overlap.
            let tight_locs: Vec<_> = count(&b, metric).into_iter().chain(count(&b, alt)).collect();
            for loc in count(&a, metric) {
                prop_assert!(tight_locs.contains(&loc));
            }
        }
        for e in b.entropy.per_head.unwrap().iter().flatten() {
            prop_assert!((0.0..=1.0).contains(e));
        }
        for s in b.collapse.similarity.iter().flatten() {
            prop_assert!((-1.0..=1.0).contains(s));
        }
    }
}
