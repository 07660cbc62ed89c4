// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::engine::{Component, HookSite, Model, TokenSequence};
use crate::exec::try_map;
use crate::perturb::{calibrated_sigma, Baseline, LogitDelta, Mode, ModeSpec, PerturbationSpec};
use crate::probs::TokenProb;
use crate::rng::derive_seed;
use crate::{Error, Result};

/// Components perturbed at every swept layer, in sweep order.
pub const SWEEP_COMPONENTS: [Component; 2] = [Component::AttnOut, Component::MlpOut];

/// Amplify factor of the case-style plan ("doubled").
pub const CASE_AMPLIFY_FACTOR: f32 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub layers: Vec<usize>,
    pub modes: Vec<ModeSpec>,
    /// Base seed; entry `i` uses `derive_seed(seed, i)`.
    pub seed: u64,
}

impl SweepPlan {
    pub fn new(layers: Vec<usize>, modes: Vec<ModeSpec>, seed: u64) -> Self {
        Self { layers, modes, seed }
    }

    /// Zero-out, doubling and mean ablation at every listed layer.
    pub fn case_style(layers: Vec<usize>) -> Self {
        Self::new(
            layers,
            vec![
                ModeSpec::Zero,
                ModeSpec::Amplify {
                    factor: CASE_AMPLIFY_FACTOR,
                },
                ModeSpec::MeanAblate,
            ],
            0,
        )
    }

    pub fn len(&self) -> usize {
        self.layers.len() * SWEEP_COMPONENTS.len() * self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every (site, mode) cell, layer-major, then component, then mode.
    pub fn cells(&self) -> Vec<(HookSite, ModeSpec)> {
        let mut out = Vec::with_capacity(self.len());
        for &layer in &self.layers {
            for component in SWEEP_COMPONENTS {
                for &mode in &self.modes {
                    out.push((HookSite::new(layer, component), mode));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub site: HookSite,
    pub mode: ModeSpec,
    pub seed: u64,
    pub delta: LogitDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxDelta {
    pub site: HookSite,
    pub mode: ModeSpec,
    pub delta_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessProfile {
    pub tokens: TokenSequence,
    pub plan: SweepPlan,
    pub baseline_top: TokenProb,
    /// Sigma used for noise modes without an explicit one.
    pub calibrated_sigma: f32,
    pub entries: Vec<SweepEntry>,
    /// Entries whose top prediction changed.
    pub failures: usize,
    /// Entry with the largest `|ΔL|`; the first one on ties.
    pub max_abs_delta: Option<MaxDelta>,
}

impl RobustnessProfile {
    /// Assembles a profile from finished entries.
    pub fn from_entries(
        tokens: TokenSequence,
        plan: SweepPlan,
        baseline_top: TokenProb,
        calibrated_sigma: f32,
        entries: Vec<SweepEntry>,
    ) -> Self {
        let failures = entries.iter().filter(|e| e.delta.prediction_changed).count();
        let mut max_abs_delta: Option<MaxDelta> = None;
        for e in &entries {
            if max_abs_delta.as_ref().is_none_or(|m| e.delta.delta_l.abs() > m.delta_l.abs()) {
                max_abs_delta = Some(MaxDelta {
                    site: e.site.clone(),
                    mode: e.mode,
                    delta_l: e.delta.delta_l,
                });
            }
        }
        Self {
            tokens,
            plan,
            baseline_top,
            calibrated_sigma,
            entries,
            failures,
            max_abs_delta,
        }
    }
}

/// One ΔL per plan cell against a single clean run.
pub fn robustness_sweep(model: &Model, tokens: &TokenSequence, plan: &SweepPlan) -> Result<RobustnessProfile> {
    if plan.layers.is_empty() || plan.modes.is_empty() {
        return Err(Error::EmptyInput("sweep plan needs at least one layer and one mode".into()));
    }
    let baseline = Baseline::new(model, tokens)?;
    let sigma = calibrated_sigma(&baseline.trace);
    let cells = plan.cells();
    let indexed: Vec<usize> = (0..cells.len()).collect();
    let entries = try_map(&indexed, |&i| {
        let (site, mode) = &cells[i];
        let seed = derive_seed(plan.seed, i as u64);
        let spec = PerturbationSpec::new(site.clone(), mode.resolve(&baseline.trace)).with_seed(seed);
        Ok(SweepEntry {
            site: site.clone(),
            mode: *mode,
            seed,
            delta: baseline.delta(model, &spec)?,
        })
    })?;
    Ok(RobustnessProfile::from_entries(
        tokens.clone(),
        plan.clone(),
        baseline.top,
        sigma,
        entries,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityProbe {
    pub runs: usize,
    pub prediction_changes: usize,
    pub max_abs_delta: f64,
}

/// Runs sigma-0 noise and factor-1 amplification at every vector site; any
/// prediction change means the engine is not stateless.
pub fn identity_probe(model: &Model, tokens: &TokenSequence) -> Result<IdentityProbe> {
    let baseline = Baseline::new(model, tokens)?;
    let mut specs = Vec::new();
    for layer in 0..model.spec().n_layers {
        for c in Component::ALL {
            for mode in [Mode::Noise { sigma: 0.0 }, Mode::Amplify { factor: 1.0 }] {
                specs.push(PerturbationSpec::new(HookSite::new(layer, c), mode));
            }
        }
    }
    let deltas = try_map(&specs, |s| baseline.delta(model, s))?;
    let probe = IdentityProbe {
        runs: deltas.len(),
        prediction_changes: deltas.iter().filter(|d| d.prediction_changed).count(),
        max_abs_delta: deltas.iter().map(|d| d.delta_l.abs()).fold(0.0, f64::max),
    };
    if !probe.max_abs_delta.is_finite() {
        return Err(Error::Numeric(format!("identity probe produced ΔL {}", probe.max_abs_delta)));
    }
    Ok(probe)
}
