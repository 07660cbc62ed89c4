// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stateless interventions. A [`PerturbationSpec`] becomes a temporary hook
//! for exactly one forward pass; model weights are never touched.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::engine::{ActivationTrace, Component, Hook, HookSite, Model, RunRecord, TokenSequence};
use crate::probs::{next_token_distribution, top_prediction, TokenProb};
use crate::rng::Gaussian;
use crate::{Error, Result, Tensor};

/// Multiple of the embedding-activation standard deviation used when a
/// noise sigma is not given explicitly.
pub const CALIBRATED_NOISE_MULTIPLIER: f64 = 3.0;

#[derive(Debug, Clone)]
pub enum Mode {
    /// Adds `N(0, sigma²)` noise.
    Noise { sigma: f32 },
    Zero,
    /// Multiplies by `factor`.
    Amplify { factor: f32 },
    /// Replaces each covered row with the clean run's mean over positions.
    MeanAblate,
    /// Copies activations from another run.
    Patch(Arc<ActivationTrace>),
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Noise { .. } => "noise",
            Mode::Zero => "zero",
            Mode::Amplify { .. } => "amplify",
            Mode::MeanAblate => "mean_ablate",
            Mode::Patch(_) => "patch",
        }
    }

    fn describe(&self) -> String {
        match self {
            Mode::Noise { sigma } => format!("noise(sigma={sigma})"),
            Mode::Amplify { factor } => format!("amplify(factor={factor})"),
            other => other.name().into(),
        }
    }
}

/// Serializable form of the self-contained modes; patching needs a source
/// run and is built directly as [`Mode::Patch`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ModeSpec {
    /// `sigma: None` calibrates from the clean run, see [`calibrated_sigma`].
    Noise {
        #[serde(default)]
        sigma: Option<f32>,
    },
    Zero,
    Amplify { factor: f32 },
    MeanAblate,
}

impl ModeSpec {
    pub fn resolve(&self, clean: &ActivationTrace) -> Mode {
        match *self {
            ModeSpec::Noise { sigma } => Mode::Noise {
                sigma: sigma.unwrap_or_else(|| calibrated_sigma(clean)),
            },
            ModeSpec::Zero => Mode::Zero,
            ModeSpec::Amplify { factor } => Mode::Amplify { factor },
            ModeSpec::MeanAblate => Mode::MeanAblate,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            ModeSpec::Noise { sigma: Some(s) } => format!("noise(sigma={s})"),
            ModeSpec::Noise { sigma: None } => "noise(calibrated)".into(),
            ModeSpec::Zero => "zero".into(),
            ModeSpec::Amplify { factor } => format!("amplify(factor={factor})"),
            ModeSpec::MeanAblate => "mean_ablate".into(),
        }
    }
}

impl core::str::FromStr for ModeSpec {
    type Err = Error;

    /// `zero`, `mean`/`mean_ablate`, `amplify[=factor]` (default 2),
    /// `noise[=sigma]` (default calibrated).
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once('=') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let num = |a: &str| {
            a.parse::<f32>()
                .map_err(|_| Error::InvalidPerturbation(format!("`{a}` is not a number in mode `{s}`")))
        };
        match (name, arg) {
            ("zero", None) => Ok(ModeSpec::Zero),
            ("mean" | "mean_ablate" | "ablate", None) => Ok(ModeSpec::MeanAblate),
            ("amplify", None) => Ok(ModeSpec::Amplify { factor: 2.0 }),
            ("amplify", Some(a)) => Ok(ModeSpec::Amplify { factor: num(a)? }),
            ("noise", None) => Ok(ModeSpec::Noise { sigma: None }),
            ("noise", Some(a)) => Ok(ModeSpec::Noise { sigma: Some(num(a)?) }),
            _ => Err(Error::InvalidPerturbation(format!("unknown perturbation mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PerturbationSpec {
    pub site: HookSite,
    pub mode: Mode,
    /// Seeds the noise stream; ignored by other modes.
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(site: HookSite, mode: Mode) -> Self {
        Self { site, mode, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn describe(&self) -> String {
        format!("{} {}", self.site.describe(), self.mode.describe())
    }

    /// Checks parameters and the site against `model` and a run of `seq_len`
    /// tokens.
    pub fn validate(&self, model: &Model, seq_len: usize) -> Result<()> {
        self.site.validate(model.spec(), Some(seq_len))?;
        match &self.mode {
            Mode::Noise { sigma } if !(sigma.is_finite() && *sigma >= 0.0) => Err(Error::InvalidPerturbation(
                format!("noise sigma must be a non-negative real, got {sigma}"),
            )),
            Mode::Amplify { factor } if !(factor.is_finite() && *factor > 0.0) => Err(Error::InvalidPerturbation(
                format!("amplify factor must be a positive real, got {factor}"),
            )),
            Mode::MeanAblate if !self.site.component.is_vector() => Err(Error::UnsupportedSite {
                site: self.site.describe(),
                reason: "mean ablation is defined for vector-valued sites only".into(),
            }),
            Mode::Patch(source) => {
                let target_shape = site_shape(model, seq_len, self.site.component);
                let source_shape = source.site(&self.site).map(|t| t.shape().to_vec()).unwrap_or_default();
                if source_shape != target_shape {
                    return Err(Error::PatchShape {
                        site: self.site.describe(),
                        source_shape,
                        target_shape,
                    });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn site_shape(model: &Model, seq_len: usize, component: Component) -> Vec<usize> {
    let spec = model.spec();
    match component {
        Component::AttnPattern => vec![spec.n_heads, seq_len, seq_len],
        _ => vec![seq_len, spec.d_model],
    }
}

/// A spec bound to everything it needs at hook time.
struct PreparedHook<'a> {
    spec: &'a PerturbationSpec,
    mean: Option<Vec<f32>>,
}

impl PreparedHook<'_> {
    /// Calls `f(row_index, row)` for every row the site covers.
    fn for_each_row(&self, act: &mut Tensor, mut f: impl FnMut(usize, &mut [f32])) {
        let site = &self.spec.site;
        if site.component.is_vector() {
            for p in 0..act.n_rows() {
                if site.covers(p) {
                    f(p, act.row_mut(p));
                }
            }
        } else {
            let n = act.shape()[1];
            for r in 0..act.n_rows() {
                let (head, q) = (r / n, r % n);
                if site.covers_head(head) && site.covers(q) {
                    f(r, act.row_mut(r));
                }
            }
        }
    }
}

impl Hook for PreparedHook<'_> {
    fn site(&self) -> &HookSite {
        &self.spec.site
    }

    fn apply(&self, act: &mut Tensor) -> Result<()> {
        match &self.spec.mode {
            Mode::Noise { sigma } => {
                let sigma = *sigma as f64;
                let mut g = Gaussian::new(self.spec.seed);
                self.for_each_row(act, |_, row| {
                    for v in row {
                        *v += (sigma * g.sample()) as f32;
                    }
                });
            }
            Mode::Zero => self.for_each_row(act, |_, row| row.fill(0.0)),
            Mode::Amplify { factor } => self.for_each_row(act, |_, row| {
                for v in row {
                    *v *= factor;
                }
            }),
            Mode::MeanAblate => {
                let mean = self.mean.as_deref().expect("mean prepared for mean ablation");
                self.for_each_row(act, |_, row| row.copy_from_slice(mean));
            }
            Mode::Patch(source) => {
                let src = source.site(&self.spec.site).expect("validated patch source");
                self.for_each_row(act, |r, row| row.copy_from_slice(src.row(r)));
            }
        }
        Ok(())
    }

    fn describe(&self) -> String {
        self.spec.describe()
    }
}

/// Runs one forward pass with every spec applied as a temporary hook.
pub fn run_perturbed(model: &Model, tokens: &TokenSequence, specs: &[PerturbationSpec]) -> Result<RunRecord> {
    model.validate_tokens(tokens)?;
    for spec in specs {
        spec.validate(model, tokens.len())?;
    }
    let needs_clean = specs.iter().any(|s| matches!(s.mode, Mode::MeanAblate));
    let clean = if needs_clean {
        Some(model.forward(tokens, &[])?.trace)
    } else {
        None
    };
    run_prepared(model, tokens, specs, clean.as_ref())
}

fn run_prepared(
    model: &Model,
    tokens: &TokenSequence,
    specs: &[PerturbationSpec],
    clean: Option<&ActivationTrace>,
) -> Result<RunRecord> {
    let mut prepared = Vec::with_capacity(specs.len());
    for spec in specs {
        let mean = match spec.mode {
            Mode::MeanAblate => {
                let clean = clean.ok_or_else(|| Error::Argument("mean ablation needs a clean run".into()))?;
                Some(site_mean(clean, &spec.site)?)
            }
            _ => None,
        };
        prepared.push(PreparedHook { spec, mean });
    }
    let hooks: Vec<&dyn Hook> = prepared.iter().map(|h| h as &dyn Hook).collect();
    model.forward(tokens, &hooks)
}

/// Arithmetic mean over all positions of the activation at `site`.
pub fn site_mean(trace: &ActivationTrace, site: &HookSite) -> Result<Vec<f32>> {
    if !site.component.is_vector() {
        return Err(Error::UnsupportedSite {
            site: site.describe(),
            reason: "mean ablation is defined for vector-valued sites only".into(),
        });
    }
    let t = trace.site(site).ok_or_else(|| Error::InvalidSite {
        site: site.describe(),
        reason: "layer not present in trace".into(),
    })?;
    let rows = t.n_rows();
    if rows == 0 {
        return Err(Error::EmptyInput("trace has no positions".into()));
    }
    let mut acc = vec![0.0f64; t.row_len()];
    for r in 0..rows {
        for (a, &v) in acc.iter_mut().zip(t.row(r)) {
            *a += v as f64;
        }
    }
    Ok(acc.into_iter().map(|a| (a / rows as f64) as f32).collect())
}

/// `CALIBRATED_NOISE_MULTIPLIER ×` the standard deviation of the embedding
/// output (block 0 input) over all positions of `trace`.
pub fn calibrated_sigma(trace: &ActivationTrace) -> f32 {
    let Some(first) = trace.layers.first() else { return 0.0 };
    let data = first.resid_pre.data();
    if data.is_empty() {
        return 0.0;
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
    (CALIBRATED_NOISE_MULTIPLIER * libm::sqrt(var)) as f32
}

/// Effect of one perturbation on the final-position prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitDelta {
    /// Perturbed minus baseline logit of the baseline top token.
    pub delta_l: f64,
    pub baseline_top: TokenProb,
    pub perturbed_top: TokenProb,
    pub prediction_changed: bool,
}

/// Clean run of one prompt, computed once and reused across a sweep.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub trace: ActivationTrace,
    pub top: TokenProb,
}

impl Baseline {
    pub fn new(model: &Model, tokens: &TokenSequence) -> Result<Self> {
        let trace = model.forward(tokens, &[])?.trace;
        let top = top_prediction(&next_token_distribution(trace.final_logits())?)?;
        Ok(Self { trace, top })
    }

    pub fn tokens(&self) -> &TokenSequence {
        &self.trace.tokens
    }

    /// Runs `specs` against this baseline's prompt.
    pub fn run(&self, model: &Model, specs: &[PerturbationSpec]) -> Result<RunRecord> {
        let tokens = self.tokens();
        for spec in specs {
            spec.validate(model, tokens.len())?;
        }
        run_prepared(model, tokens, specs, Some(&self.trace))
    }

    pub fn delta(&self, model: &Model, spec: &PerturbationSpec) -> Result<LogitDelta> {
        let run = self.run(model, core::slice::from_ref(spec))?;
        let base_logits = self.trace.final_logits();
        let pert_logits = run.trace.final_logits();
        let perturbed_top = top_prediction(&next_token_distribution(pert_logits)?)?;
        let id = self.top.id as usize;
        Ok(LogitDelta {
            delta_l: pert_logits[id] as f64 - base_logits[id] as f64,
            baseline_top: self.top,
            perturbed_top,
            prediction_changed: perturbed_top.id != self.top.id,
        })
    }
}

/// ΔL of one perturbation at the final position.
pub fn delta_logit(model: &Model, tokens: &TokenSequence, spec: &PerturbationSpec) -> Result<LogitDelta> {
    Baseline::new(model, tokens)?.delta(model, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ModelSpec, PositionRange};
    use crate::synth::{random_model, random_tokens};

    fn setup() -> (Model, TokenSequence) {
        let spec = ModelSpec::gpt2_like(2, 2, 16, 23, 12);
        (random_model(&spec, 5).unwrap(), random_tokens(7, 23, 1))
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let (m, t) = setup();
        let clean = m.forward(&t, &[]).unwrap();
        for c in Component::ALL {
            let spec = PerturbationSpec::new(HookSite::new(1, c), Mode::Noise { sigma: 0.0 }).with_seed(3);
            let run = run_perturbed(&m, &t, &[spec]).unwrap();
            assert_eq!(run.trace.logits, clean.trace.logits, "{c}");
            assert_eq!(run.hook_manifest.len(), 1);
        }
        let d = delta_logit(&m, &t, &PerturbationSpec::new(HookSite::new(0, Component::MlpOut), Mode::Noise { sigma: 0.0 }))
            .unwrap();
        assert_eq!(d.delta_l, 0.0);
        assert!(!d.prediction_changed);
    }

    #[test]
    fn unit_amplify_is_identity() {
        let (m, t) = setup();
        let clean = m.forward(&t, &[]).unwrap();
        for c in Component::ALL {
            let spec = PerturbationSpec::new(HookSite::new(0, c), Mode::Amplify { factor: 1.0 });
            let run = run_perturbed(&m, &t, &[spec]).unwrap();
            assert_eq!(run.trace.logits, clean.trace.logits, "{c}");
        }
        assert!(clean.hook_manifest.is_empty());
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let (m, t) = setup();
        let site = HookSite::new(0, Component::MlpOut);
        for mode in [Mode::Noise { sigma: -1.0 }, Mode::Amplify { factor: 0.0 }, Mode::Amplify { factor: f32::NAN }] {
            let e = run_perturbed(&m, &t, &[PerturbationSpec::new(site.clone(), mode)]).unwrap_err();
            assert!(matches!(e, Error::InvalidPerturbation(_)));
        }
        let e = run_perturbed(&m, &t, &[PerturbationSpec::new(HookSite::new(5, Component::MlpOut), Mode::Zero)]).unwrap_err();
        assert!(matches!(e, Error::InvalidSite { .. }));
        let e = run_perturbed(&m, &t, &[PerturbationSpec::new(HookSite::new(0, Component::AttnPattern), Mode::MeanAblate)])
            .unwrap_err();
        assert!(matches!(e, Error::UnsupportedSite { .. }));
    }

    #[test]
    fn patch_shape_mismatch() {
        let (m, t) = setup();
        let other = m.forward(&random_tokens(4, 23, 2), &[]).unwrap().trace;
        let spec = PerturbationSpec::new(HookSite::new(0, Component::ResidPost), Mode::Patch(Arc::new(other)));
        assert!(matches!(run_perturbed(&m, &t, &[spec]), Err(Error::PatchShape { .. })));
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let (m, t) = setup();
        let spec = PerturbationSpec::new(HookSite::new(0, Component::ResidPost), Mode::Noise { sigma: 0.5 }).with_seed(11);
        let a = run_perturbed(&m, &t, core::slice::from_ref(&spec)).unwrap();
        let b = run_perturbed(&m, &t, core::slice::from_ref(&spec)).unwrap();
        assert_eq!(a.trace.logits, b.trace.logits);
        let c = run_perturbed(&m, &t, &[spec.with_seed(12)]).unwrap();
        assert_ne!(a.trace.logits, c.trace.logits);
    }

    #[test]
    fn positions_limit_the_intervention() {
        let (m, t) = setup();
        let clean = m.forward(&t, &[]).unwrap().trace;
        let site = HookSite::new(0, Component::MlpOut).at_positions(PositionRange::new(4, 6));
        let run = run_perturbed(&m, &t, &[PerturbationSpec::new(site, Mode::Zero)]).unwrap().trace;
        for p in 0..t.len() {
            let row = run.layers[0].mlp_out.row(p);
            if (4..6).contains(&p) {
                assert!(row.iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(row, clean.layers[0].mlp_out.row(p));
            }
        }
        // Causality: positions before the intervention are untouched downstream.
        for p in 0..4 {
            assert_eq!(run.logits.row(p), clean.logits.row(p));
        }
    }

    #[test]
    fn pattern_interventions_stay_distributions() {
        let (m, t) = setup();
        for mode in [Mode::Zero, Mode::Noise { sigma: 2.0 }, Mode::Amplify { factor: 3.0 }] {
            let site = HookSite::new(1, Component::AttnPattern).with_head(1);
            let run = run_perturbed(&m, &t, &[PerturbationSpec::new(site, mode)]).unwrap().trace;
            let p = &run.layers[1].attn_pattern;
            let n = t.len();
            for r in 0..p.n_rows() {
                let q = r % n;
                let row = p.row(r);
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!(row[q + 1..].iter().all(|&v| v == 0.0));
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn site_mean_examples() {
        let (m, t) = setup();
        let trace = m.forward(&TokenSequence(alloc::vec![3]), &[]).unwrap().trace;
        let site = HookSite::new(1, Component::ResidPost);
        assert_eq!(site_mean(&trace, &site).unwrap(), trace.layers[1].resid_post.row(0));

        let mut sym = m.forward(&TokenSequence(alloc::vec![3, 4]), &[]).unwrap().trace;
        let v: Vec<f32> = sym.layers[0].mlp_out.row(0).to_vec();
        sym.layers[0].mlp_out.row_mut(1).iter_mut().zip(&v).for_each(|(d, s)| *d = -s);
        assert!(site_mean(&sym, &HookSite::new(0, Component::MlpOut)).unwrap().iter().all(|&x| x == 0.0));

        let trace = m.forward(&t, &[]).unwrap().trace;
        assert!(site_mean(&trace, &HookSite::new(0, Component::AttnPattern)).is_err());
    }
}
