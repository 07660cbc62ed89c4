// SPDX-License-Identifier: MIT OR Apache-2.0

//! Request and result documents shared by the command line and the service.
//!
//! Every operation is a [`Request`]; [`execute`] turns it into a
//! [`ResultDocument`] and [`to_bytes`] is the only serializer, so equal
//! requests give byte-identical output on both front doors.

use std::collections::BTreeMap;
use std::sync::Arc;

use nmri_core::clinic::{
    self, BatteryDocument, ComparisonRules, NormalRangeDocument, ReportBundle, SweepPlan,
};
use nmri_core::perturb::{Baseline, ModeSpec, PerturbationSpec};
use nmri_core::scan_flair::{self, FlairThresholds};
use nmri_core::scan_func::{self, DtiConfig, Granularity};
use nmri_core::scan_struct::{self, T2Thresholds};
use nmri_core::{HookSite, Model, ModelSpec, PositionRange, TokenSequence, SCHEMA_VERSION};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::registry::Registry;
use crate::{Error, Result};

const DEFAULT_BATTERY: &str = include_str!("../data/battery/default.toml");
const GPT2_SMALL_RANGES: &str = include_str!("../data/normal_ranges/gpt2-small.toml");

/// A prompt, given either as text or as token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Input {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
}

impl Input {
    pub fn prompt(text: impl Into<String>) -> Self {
        Self {
            prompt: Some(text.into()),
            tokens: None,
        }
    }

    pub fn tokens(ids: Vec<u32>) -> Self {
        Self {
            prompt: None,
            tokens: Some(ids),
        }
    }

    pub fn resolve(&self, model: &Model) -> Result<TokenSequence> {
        match (&self.prompt, &self.tokens) {
            (Some(p), None) => Ok(model.tokenize(p)?),
            (None, Some(ids)) => Ok(TokenSequence::new(ids.clone())),
            _ => Err(Error::Usage("give exactly one of `prompt` or `tokens`".into())),
        }
    }
}

/// One operation. Every field that influences the result is part of the
/// request, seeds included, so a logged request replays exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    T1 {
        model: String,
    },
    T2 {
        model: String,
        #[serde(default)]
        thresholds: Option<T2Thresholds>,
    },
    Fmri {
        model: String,
        input: Input,
    },
    Flair {
        model: String,
        input: Input,
        #[serde(default)]
        thresholds: Option<FlairThresholds>,
    },
    Dti {
        model: String,
        input: Input,
        /// Site strings such as `blocks.0.mlp_out`; every attention and MLP
        /// output when absent.
        #[serde(default)]
        sites: Option<Vec<String>>,
        #[serde(default)]
        sigma: Option<f32>,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        granularity: Option<Granularity>,
        #[serde(default)]
        theta: Option<f64>,
    },
    Trace {
        model: String,
        clean: Input,
        corrupt: Input,
        /// Token whose probability is traced; the clean top token when absent.
        #[serde(default)]
        target: Option<u32>,
        #[serde(default)]
        sites: Option<Vec<String>>,
    },
    Perturb {
        model: String,
        input: Input,
        site: String,
        #[serde(default)]
        positions: Option<PositionRange>,
        #[serde(default)]
        head: Option<usize>,
        perturbation: ModeSpec,
        #[serde(default)]
        seed: u64,
    },
    Sweep {
        model: String,
        input: Input,
        /// All layers when absent.
        #[serde(default)]
        layers: Option<Vec<usize>>,
        /// Zero, amplify ×2 and mean ablation when absent.
        #[serde(default)]
        modes: Option<Vec<ModeSpec>>,
        #[serde(default)]
        seed: u64,
    },
    Compare {
        base: String,
        variant: String,
        input: Input,
        corrupt: Input,
        #[serde(default)]
        target: Option<u32>,
        #[serde(default)]
        sites: Option<Vec<String>>,
        #[serde(default)]
        layers: Option<Vec<usize>>,
        #[serde(default)]
        modes: Option<Vec<ModeSpec>>,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        rules: Option<ComparisonRules>,
    },
    Battery {
        model: String,
        /// The built-in default battery when absent.
        #[serde(default)]
        battery: Option<BatteryDocument>,
    },
    Report {
        model: String,
        input: Input,
        /// Adds a causal trace against this prompt.
        #[serde(default)]
        corrupt: Option<Input>,
        #[serde(default)]
        sigma: Option<f32>,
        #[serde(default)]
        theta: Option<f64>,
        #[serde(default)]
        layers: Option<Vec<usize>>,
        #[serde(default)]
        modes: Option<Vec<ModeSpec>>,
        #[serde(default)]
        seed: u64,
        /// Normal ranges; the built-in reference for the architecture when absent.
        #[serde(default)]
        reference: Option<NormalRangeDocument>,
    },
}

impl Request {
    pub fn kind(&self) -> &'static str {
        match self {
            Request::T1 { .. } => "t1",
            Request::T2 { .. } => "t2",
            Request::Fmri { .. } => "fmri",
            Request::Flair { .. } => "flair",
            Request::Dti { .. } => "dti",
            Request::Trace { .. } => "trace",
            Request::Perturb { .. } => "perturb",
            Request::Sweep { .. } => "sweep",
            Request::Compare { .. } => "compare",
            Request::Battery { .. } => "battery",
            Request::Report { .. } => "report",
        }
    }

    /// Model ids the request reads.
    pub fn models(&self) -> Vec<&str> {
        match self {
            Request::Compare { base, variant, .. } => vec![base, variant],
            Request::T1 { model }
            | Request::T2 { model, .. }
            | Request::Fmri { model, .. }
            | Request::Flair { model, .. }
            | Request::Dti { model, .. }
            | Request::Trace { model, .. }
            | Request::Perturb { model, .. }
            | Request::Sweep { model, .. }
            | Request::Battery { model, .. }
            | Request::Report { model, .. } => vec![model],
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        match self {
            Request::Dti { seed, .. }
            | Request::Perturb { seed, .. }
            | Request::Sweep { seed, .. }
            | Request::Compare { seed, .. }
            | Request::Report { seed, .. } => vec![*seed],
            _ => Vec::new(),
        }
    }
}

/// Versioned envelope around every result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub schema_version: u32,
    pub kind: String,
    pub request: Request,
    /// Weight digest of each model the request read, by id.
    pub models: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub result: Value,
}

/// Versioned envelope around a failed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDocument {
    pub schema_version: u32,
    pub error: ErrorBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

impl ErrorDocument {
    pub fn from_error(e: &Error) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            error: ErrorBody {
                kind: e.kind().into(),
                message: e.to_string(),
            },
        }
    }
}

/// Converts to a JSON value. Floats go through `f64` here, which fixes their
/// textual form for every later serialization of the same value.
pub fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("result types serialize")
}

/// The one serializer for documents: pretty JSON with sorted object keys
/// and a trailing newline.
pub fn to_bytes<T: Serialize>(x: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&to_value(x)).expect("values serialize");
    out.push(b'\n');
    out
}

#[derive(Serialize)]
struct FmriResult<'a> {
    token_text: Option<Vec<String>>,
    map: &'a scan_func::FmriMap,
}

#[derive(Serialize)]
struct DtiResult {
    token_text: Option<Vec<String>>,
    grid: scan_func::ImportanceGrid,
    critical_path: scan_func::CriticalPath,
    dominance: Option<scan_func::DominanceProfile>,
}

#[derive(Serialize)]
struct PerturbResult {
    site: String,
    perturbation: ModeSpec,
    /// The mode with calibrated parameters filled in.
    applied: String,
    seed: u64,
    delta: nmri_core::perturb::LogitDelta,
}

#[derive(Serialize)]
struct CompareResult {
    comparison: clinic::TuningComparison,
    irreducible: Vec<clinic::IrreducibleSite>,
}

#[derive(Serialize)]
struct ReportResult {
    report: clinic::DiagnosticReport,
    text: String,
}

fn token_text(model: &Model, tokens: &TokenSequence) -> Option<Vec<String>> {
    let tok = model.tokenizer()?;
    Some(
        tokens
            .ids()
            .iter()
            .map(|&id| tok.decode(&[id]).unwrap_or_else(|_| format!("<{id}>")))
            .collect(),
    )
}

fn parse_sites(sites: &Option<Vec<String>>, spec: &ModelSpec) -> Result<Vec<HookSite>> {
    match sites {
        None => Ok(scan_func::default_sites(spec.n_layers)),
        Some(list) => list.iter().map(|s| Ok(s.parse::<HookSite>()?)).collect(),
    }
}

fn sweep_plan(spec: &ModelSpec, layers: &Option<Vec<usize>>, modes: &Option<Vec<ModeSpec>>, seed: u64) -> SweepPlan {
    let layers = layers.clone().unwrap_or_else(|| (0..spec.n_layers).collect());
    let mut plan = SweepPlan::case_style(layers);
    if let Some(m) = modes {
        plan.modes = m.clone();
    }
    plan.seed = seed;
    plan
}

/// Battery run when a request names none.
pub fn default_battery() -> BatteryDocument {
    toml::from_str(DEFAULT_BATTERY).expect("embedded battery parses")
}

/// Built-in normal ranges for known architectures.
pub fn builtin_reference(spec: &ModelSpec) -> Option<NormalRangeDocument> {
    (*spec == ModelSpec::gpt2_like(12, 12, 768, 50257, 1024))
        .then(|| toml::from_str(GPT2_SMALL_RANGES).expect("embedded ranges parse"))
}

/// Runs every scan the report covers and grades the results.
pub fn examine(
    model: &Model,
    input: &Input,
    corrupt: Option<&Input>,
    dti: &DtiConfig,
    theta: f64,
    plan: &SweepPlan,
    reference: &NormalRangeDocument,
) -> Result<ReportBundle> {
    let tokens = input.resolve(model)?;
    let spec = model.spec();
    let sites = scan_func::default_sites(spec.n_layers);
    let mut bundle = ReportBundle::new(scan_struct::scan_t1(model));
    bundle.t2 = Some(scan_struct::scan_t2(model, &T2Thresholds::default())?);
    bundle.fmri = Some(scan_func::scan_fmri(model, &tokens)?);
    bundle.dti = Some(scan_func::dti_importance(model, &tokens, &sites, dti)?);
    bundle.theta = theta;
    if let Some(c) = corrupt {
        let corrupt = c.resolve(model)?;
        let top = Baseline::new(model, &tokens)?.top;
        bundle.trace = Some(scan_func::causal_trace(model, &tokens, &corrupt, top.id, &sites)?);
    }
    bundle.flair = Some(scan_flair::scan_flair(model, &tokens, &FlairThresholds::default())?);
    bundle.robustness = Some(clinic::robustness_sweep(model, &tokens, plan)?);
    bundle.identity = Some(clinic::identity_probe(model, &tokens)?);
    bundle.severities = Some(clinic::classify_severity(&clinic::metrics_from_bundle(&bundle), reference)?);
    match (&input.prompt, &input.tokens) {
        (Some(p), _) => bundle.parameters.insert("input.prompt".into(), p.clone()),
        _ => bundle.parameters.insert("input.tokens".into(), format!("{:?}", tokens.ids())),
    };
    bundle.parameters.insert("sweep.seed".into(), plan.seed.to_string());
    Ok(bundle)
}

/// Executes one request against the registry.
pub fn execute(registry: &Registry, request: &Request) -> Result<ResultDocument> {
    let mut models = BTreeMap::new();
    let mut load = |id: &str| -> Result<Arc<Model>> {
        let m = registry.get(id)?;
        models.insert(id.to_string(), m.digest().to_hex());
        Ok(m)
    };
    let result = match request {
        Request::T1 { model } => to_value(&scan_struct::scan_t1(&*load(model)?)),
        Request::T2 { model, thresholds } => {
            let m = load(model)?;
            to_value(&scan_struct::scan_t2(&m, &thresholds.unwrap_or_default())?)
        }
        Request::Fmri { model, input } => {
            let m = load(model)?;
            let tokens = input.resolve(&m)?;
            let map = scan_func::scan_fmri(&m, &tokens)?;
            to_value(&FmriResult {
                token_text: token_text(&m, &tokens),
                map: &map,
            })
        }
        Request::Flair { model, input, thresholds } => {
            let m = load(model)?;
            let tokens = input.resolve(&m)?;
            to_value(&scan_flair::scan_flair(&m, &tokens, &thresholds.unwrap_or_default())?)
        }
        Request::Dti {
            model,
            input,
            sites,
            sigma,
            seed,
            granularity,
            theta,
        } => {
            let m = load(model)?;
            let tokens = input.resolve(&m)?;
            let sites = parse_sites(sites, m.spec())?;
            let config = DtiConfig {
                sigma: *sigma,
                seed: *seed,
                granularity: granularity.unwrap_or(Granularity::PerPosition),
            };
            let grid = scan_func::dti_importance(&m, &tokens, &sites, &config)?;
            let critical_path = scan_func::critical_path(&grid, theta.unwrap_or(scan_func::DEFAULT_THETA))?;
            to_value(&DtiResult {
                token_text: token_text(&m, &tokens),
                critical_path,
                dominance: scan_func::dominance_profile(&grid).ok(),
                grid,
            })
        }
        Request::Trace {
            model,
            clean,
            corrupt,
            target,
            sites,
        } => {
            let m = load(model)?;
            let clean = clean.resolve(&m)?;
            let corrupt = corrupt.resolve(&m)?;
            let sites = parse_sites(sites, m.spec())?;
            let target = match target {
                Some(t) => *t,
                None => Baseline::new(&m, &clean)?.top.id,
            };
            to_value(&scan_func::causal_trace(&m, &clean, &corrupt, target, &sites)?)
        }
        Request::Perturb {
            model,
            input,
            site,
            positions,
            head,
            perturbation,
            seed,
        } => {
            let m = load(model)?;
            let tokens = input.resolve(&m)?;
            let mut hook: HookSite = site.parse()?;
            if let Some(r) = positions {
                hook = hook.at_positions(*r);
            }
            if let Some(h) = head {
                hook = hook.with_head(*h);
            }
            let baseline = Baseline::new(&m, &tokens)?;
            let spec = PerturbationSpec::new(hook, perturbation.resolve(&baseline.trace)).with_seed(*seed);
            let delta = baseline.delta(&m, &spec)?;
            to_value(&PerturbResult {
                site: spec.site.describe(),
                perturbation: *perturbation,
                applied: spec.describe(),
                seed: *seed,
                delta,
            })
        }
        Request::Sweep {
            model,
            input,
            layers,
            modes,
            seed,
        } => {
            let m = load(model)?;
            let tokens = input.resolve(&m)?;
            let plan = sweep_plan(m.spec(), layers, modes, *seed);
            to_value(&clinic::robustness_sweep(&m, &tokens, &plan)?)
        }
        Request::Compare {
            base,
            variant,
            input,
            corrupt,
            target,
            sites,
            layers,
            modes,
            seed,
            rules,
        } => {
            let b = load(base)?;
            let v = load(variant)?;
            let rules = rules.unwrap_or_default();
            let sites = parse_sites(sites, b.spec())?;
            // One target for both models keeps their recovery scores comparable.
            let target = match target {
                Some(t) => *t,
                None => Baseline::new(&b, &input.resolve(&b)?)?.top.id,
            };
            let plan = sweep_plan(b.spec(), layers, modes, *seed);
            let run = |m: &Model| -> Result<_> {
                let clean = input.resolve(m)?;
                let corrupted = corrupt.resolve(m)?;
                Ok((
                    clinic::robustness_sweep(m, &clean, &plan)?,
                    scan_func::causal_trace(m, &clean, &corrupted, target, &sites)?,
                ))
            };
            let (bp, bt) = run(&b)?;
            let (vp, vt) = run(&v)?;
            let comparison = clinic::compare_tuning((&bp, &bt), (&vp, &vt), &rules)?;
            let irreducible = clinic::detect_irreducible(&bp, &vp, rules.catastrophe_threshold)?;
            to_value(&CompareResult { comparison, irreducible })
        }
        Request::Battery { model, battery } => {
            let m = load(model)?;
            let doc = battery.clone().unwrap_or_else(default_battery);
            to_value(&clinic::run_battery(&m, &doc)?)
        }
        Request::Report {
            model,
            input,
            corrupt,
            sigma,
            theta,
            layers,
            modes,
            seed,
            reference,
        } => {
            let m = load(model)?;
            let reference = match reference {
                Some(r) => r.clone(),
                None => builtin_reference(m.spec()).unwrap_or_else(|| NormalRangeDocument::empty("none")),
            };
            let dti = DtiConfig {
                sigma: *sigma,
                seed: *seed,
                granularity: Granularity::PerPosition,
            };
            let plan = sweep_plan(m.spec(), layers, modes, *seed);
            let theta = theta.unwrap_or(scan_func::DEFAULT_THETA);
            let bundle = examine(&m, input, corrupt.as_ref(), &dti, theta, &plan, &reference)?;
            let report = clinic::generate_report(&bundle)?;
            to_value(&ReportResult {
                text: clinic::render_text(&report),
                report,
            })
        }
    };
    Ok(ResultDocument {
        schema_version: SCHEMA_VERSION,
        kind: request.kind().into(),
        request: request.clone(),
        models,
        seeds: request.seeds(),
        result,
    })
}
