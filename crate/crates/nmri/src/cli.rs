// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `nmri` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nmri_core::clinic::{
    self, BatteryDocument, BatteryResult, DiagnosticReport, NormalRangeDocument, RobustnessProfile,
};
use nmri_core::perturb::{LogitDelta, ModeSpec};
use nmri_core::scan_flair::{describe_flag, FlairReport};
use nmri_core::scan_func::{CausalTraceResult, CriticalPath, FmriMap, Granularity, ImportanceGrid};
use nmri_core::scan_struct::{T1Report, T2Report};
use nmri_core::{synth, ModelSpec};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;

use crate::api::{self, Input, Request, ResultDocument};
use crate::archive::{self, ArchiveLayout};
use crate::heatmap::{self, Palette};
use crate::registry::{Registry, REGISTRY_ENV};
use crate::session::{self, SessionArchive};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "nmri", version, about = "Diagnostic imaging scans for transformer language models")]
pub struct Cli {
    /// Directory holding one model directory per id.
    #[arg(long, global = true, env = REGISTRY_ENV)]
    pub registry: Option<PathBuf>,
    /// TOML file supplying defaults for any flag; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Registry id, or a path to a model directory.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, conflicts_with = "tokens")]
    pub prompt: Option<String>,
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',')]
    pub tokens: Option<Vec<u32>>,
    /// Where to write the result document; `-` for standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Noise std; calibrated from the model when absent.
    #[arg(long)]
    pub sigma: Option<f32>,
    /// Critical-path threshold as a fraction of the clean probability.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Comma-separated perturbation modes: zero, mean, amplify[=f], noise[=sigma].
    #[arg(long)]
    pub modes: Option<String>,
    /// Layers as ranges and lists, e.g. `0-1` or `0,2,5`.
    #[arg(long)]
    pub layers: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CorruptArgs {
    #[arg(long, conflicts_with = "corrupt_tokens")]
    pub corrupt_prompt: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub corrupt_tokens: Option<Vec<u32>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Topology: layer counts, widths and parameter totals.
    T1(#[command(flatten)] Common),
    /// Weight statistics per tensor.
    T2(#[command(flatten)] Common),
    /// Activation magnitudes per layer and position.
    Fmri(#[command(flatten)] Common),
    /// Anomaly screening.
    Flair(#[command(flatten)] Common),
    /// Noise-corruption importance per site and position.
    Dti {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sites such as `blocks.0.mlp_out`.
        #[arg(long, value_delimiter = ',')]
        sites: Option<Vec<String>>,
        /// Perturb whole sites instead of single positions.
        #[arg(long)]
        whole_site: bool,
    },
    /// Causal trace: patch clean activations into a corrupted run.
    Trace {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corrupt: CorruptArgs,
        #[arg(long)]
        target: Option<u32>,
        #[arg(long, value_delimiter = ',')]
        sites: Option<Vec<String>>,
    },
    /// One perturbation and its logit delta.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        site: String,
        /// A single mode, e.g. `noise=0.5`.
        #[arg(long)]
        mode: String,
    },
    /// Robustness sweep over layers, components and modes.
    Sweep(#[command(flatten)] Common),
    /// Classify how a tuned variant differs from its base model.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        corrupt: CorruptArgs,
        #[arg(long)]
        target: Option<u32>,
    },
    /// Run a functional test battery (TOML or JSON); the default one when absent.
    Battery {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        battery: Option<PathBuf>,
    },
    /// Full examination and diagnostic report.
    Report {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corrupt: CorruptArgs,
        /// Normal-range document (TOML or JSON).
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Render a result document: heatmap SVG for grids, text for reports.
    Render {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "gray-hot")]
        palette: String,
    },
    /// Re-execute a session archive and verify every result.
    Replay {
        archive: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
    /// Write a seeded random model directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        n_layers: usize,
        #[arg(long, default_value_t = 2)]
        n_heads: usize,
        #[arg(long, default_value_t = 16)]
        d_model: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 32)]
        context: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Make block `L+1` a copy of block `L`.
        #[arg(long)]
        collapse_pair: Option<usize>,
        /// Write published GPT-2 tensor names with a tied unembedding.
        #[arg(long)]
        published: bool,
    },
}

/// Flag defaults read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub registry: Option<PathBuf>,
    pub model: Option<String>,
    pub prompt: Option<String>,
    pub tokens: Option<Vec<u32>>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub sigma: Option<f32>,
    pub theta: Option<f64>,
    pub modes: Option<String>,
    pub layers: Option<String>,
    pub variant: Option<String>,
    pub corrupt_prompt: Option<String>,
    pub corrupt_tokens: Option<Vec<u32>>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    fn fill(&self, c: &mut Common) {
        let prompt_given = c.prompt.is_some() || c.tokens.is_some();
        c.model = c.model.take().or_else(|| self.model.clone());
        if !prompt_given {
            c.prompt = self.prompt.clone();
            c.tokens = self.tokens.clone();
        }
        c.out = c.out.take().or_else(|| self.out.clone());
        c.seed = c.seed.or(self.seed);
        c.sigma = c.sigma.or(self.sigma);
        c.theta = c.theta.or(self.theta);
        c.modes = c.modes.take().or_else(|| self.modes.clone());
        c.layers = c.layers.take().or_else(|| self.layers.clone());
    }

    fn fill_corrupt(&self, c: &mut CorruptArgs) {
        if c.corrupt_prompt.is_none() && c.corrupt_tokens.is_none() {
            c.corrupt_prompt = self.corrupt_prompt.clone();
            c.corrupt_tokens = self.corrupt_tokens.clone();
        }
    }
}

/// Parses `0-1`, `0,2,5` or a mix such as `0-2,5`.
pub fn parse_layers(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Usage(format!("cannot parse layers `{s}`; use e.g. `0-1` or `0,2,5`"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

pub fn parse_modes(s: &str) -> Result<Vec<ModeSpec>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|m| Ok(m.parse::<ModeSpec>()?))
        .collect()
}

fn read_document<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::parse(what, e))
    } else {
        serde_json::from_str(&text).map_err(|e| Error::parse(what, e))
    }
}

fn model_id(c: &Common) -> Result<String> {
    c.model.clone().ok_or_else(|| Error::Usage("--model is required".into()))
}

fn input(c: &Common) -> Result<Input> {
    match (&c.prompt, &c.tokens) {
        (Some(p), None) => Ok(Input::prompt(p.clone())),
        (None, Some(t)) => Ok(Input::tokens(t.clone())),
        _ => Err(Error::Usage("give --prompt or --tokens".into())),
    }
}

fn corrupt_input(c: &CorruptArgs) -> Option<Input> {
    match (&c.corrupt_prompt, &c.corrupt_tokens) {
        (Some(p), _) => Some(Input::prompt(p.clone())),
        (None, Some(t)) => Some(Input::tokens(t.clone())),
        _ => None,
    }
}

fn layers(c: &Common) -> Result<Option<Vec<usize>>> {
    c.layers.as_deref().map(parse_layers).transpose()
}

fn modes(c: &Common) -> Result<Option<Vec<ModeSpec>>> {
    c.modes.as_deref().map(parse_modes).transpose()
}

/// Translates a scan subcommand into its request.
pub fn to_request(command: &Command) -> Result<Option<(Request, Option<PathBuf>)>> {
    let req = match command {
        Command::T1(c) => (Request::T1 { model: model_id(c)? }, c),
        Command::T2(c) => (
            Request::T2 {
                model: model_id(c)?,
                thresholds: None,
            },
            c,
        ),
        Command::Fmri(c) => (
            Request::Fmri {
                model: model_id(c)?,
                input: input(c)?,
            },
            c,
        ),
        Command::Flair(c) => (
            Request::Flair {
                model: model_id(c)?,
                input: input(c)?,
                thresholds: None,
            },
            c,
        ),
        Command::Dti { common: c, sites, whole_site } => (
            Request::Dti {
                model: model_id(c)?,
                input: input(c)?,
                sites: sites.clone(),
                sigma: c.sigma,
                seed: c.seed.unwrap_or(0),
                granularity: whole_site.then_some(Granularity::WholeSite),
                theta: c.theta,
            },
            c,
        ),
        Command::Trace {
            common: c,
            corrupt,
            target,
            sites,
        } => (
            Request::Trace {
                model: model_id(c)?,
                clean: input(c)?,
                corrupt: corrupt_input(corrupt)
                    .ok_or_else(|| Error::Usage("give --corrupt-prompt or --corrupt-tokens".into()))?,
                target: *target,
                sites: sites.clone(),
            },
            c,
        ),
        Command::Perturb { common: c, site, mode } => (
            Request::Perturb {
                model: model_id(c)?,
                input: input(c)?,
                site: site.clone(),
                positions: None,
                head: None,
                perturbation: mode.parse()?,
                seed: c.seed.unwrap_or(0),
            },
            c,
        ),
        Command::Sweep(c) => (
            Request::Sweep {
                model: model_id(c)?,
                input: input(c)?,
                layers: layers(c)?,
                modes: modes(c)?,
                seed: c.seed.unwrap_or(0),
            },
            c,
        ),
        Command::Compare {
            common: c,
            variant,
            corrupt,
            target,
        } => (
            Request::Compare {
                base: model_id(c)?,
                variant: variant.clone().ok_or_else(|| Error::Usage("--variant is required".into()))?,
                input: input(c)?,
                corrupt: corrupt_input(corrupt)
                    .ok_or_else(|| Error::Usage("give --corrupt-prompt or --corrupt-tokens".into()))?,
                target: *target,
                sites: None,
                layers: layers(c)?,
                modes: modes(c)?,
                seed: c.seed.unwrap_or(0),
                rules: None,
            },
            c,
        ),
        Command::Battery { common: c, battery } => (
            Request::Battery {
                model: model_id(c)?,
                battery: battery.as_deref().map(read_document::<BatteryDocument>).transpose()?,
            },
            c,
        ),
        Command::Report {
            common: c,
            corrupt,
            reference,
        } => (
            Request::Report {
                model: model_id(c)?,
                input: input(c)?,
                corrupt: corrupt_input(corrupt),
                sigma: c.sigma,
                theta: c.theta,
                layers: layers(c)?,
                modes: modes(c)?,
                seed: c.seed.unwrap_or(0),
                reference: reference.as_deref().map(read_document::<NormalRangeDocument>).transpose()?,
            },
            c,
        ),
        _ => return Ok(None),
    };
    Ok(Some((req.0, req.1.out.clone())))
}

fn typed<T: DeserializeOwned>(v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| Error::parse("result", e))
}

fn typed_field<T: DeserializeOwned>(v: &Value, key: &str) -> Result<T> {
    typed(v.get(key).unwrap_or(&Value::Null))
}

/// One-paragraph human summary of a result document.
pub fn summarize(doc: &ResultDocument) -> Result<String> {
    let r = &doc.result;
    let s = match doc.kind.as_str() {
        "t1" => {
            let t: T1Report = typed(r)?;
            let s = &t.spec;
            format!(
                "T1: {} layers, {} heads (d_head {}), d_model {}, d_mlp {}, vocabulary {}, context {}, {} parameters{}; digest {}",
                s.n_layers,
                s.n_heads,
                t.d_head,
                s.d_model,
                s.d_mlp,
                s.vocab_size,
                s.max_seq_len,
                t.total_parameters,
                if t.tied_unembed { " (tied unembedding)" } else { "" },
                t.digest.to_hex()
            )
        }
        "t2" => {
            let t: T2Report = typed(r)?;
            format!(
                "T2: {} tensors, {} flags, dead-region fraction {:.4}",
                t.records.len(),
                t.flags.len(),
                t.dead_region_fraction()
            )
        }
        "fmri" => {
            let m: FmriMap = typed_field(r, "map")?;
            format!(
                "fMRI: {} layers x {} positions, most active layer {}",
                m.n_layers(),
                m.tokens.len(),
                m.most_active_layer()
            )
        }
        "flair" => {
            let f: FlairReport = typed(r)?;
            let mut s = format!("FLAIR: {} flags", f.flags.len());
            for flag in &f.flags {
                s.push_str("\n  ");
                s.push_str(&describe_flag(flag));
            }
            s
        }
        "dti" => {
            let g: ImportanceGrid = typed_field(r, "grid")?;
            let cp: CriticalPath = typed_field(r, "critical_path")?;
            format!(
                "DTI: {} sites x {} columns, p_clean {:.4} for token {}, sigma {}, critical path {} cells ({:.2}%)",
                g.sites.len(),
                g.columns.len(),
                g.p_clean(),
                g.clean_top.id,
                g.sigma,
                cp.sites.len(),
                100.0 * cp.fraction
            )
        }
        "trace" => {
            let t: CausalTraceResult = typed(r)?;
            format!(
                "Trace: target {}, p_clean {:.4}, p_corrupt {:.4}, dominant site {}",
                t.target,
                t.p_clean,
                t.p_corrupt,
                t.dominant_site().map_or("none".into(), |s| s.describe())
            )
        }
        "perturb" => {
            let d: LogitDelta = typed_field(r, "delta")?;
            format!(
                "Perturb {} {}: delta L {:.6}, prediction {}",
                r["site"].as_str().unwrap_or("?"),
                r["applied"].as_str().unwrap_or("?"),
                d.delta_l,
                if d.prediction_changed { "changed" } else { "unchanged" }
            )
        }
        "sweep" => {
            let p: RobustnessProfile = typed(r)?;
            let worst = p
                .max_abs_delta
                .as_ref()
                .map_or("none".into(), |m| format!("{:.4} at {} {}", m.delta_l, m.site.describe(), m.mode.label()));
            format!(
                "Sweep: {} perturbations, {} prediction changes, max |delta L| {worst}",
                p.entries.len(),
                p.failures
            )
        }
        "compare" => {
            let c: clinic::TuningComparison = typed_field(r, "comparison")?;
            let irr: Vec<clinic::IrreducibleSite> = typed_field(r, "irreducible")?;
            format!(
                "Compare: {} (failure difference {}, recovery drift {:.4}, persistent catastrophic sites: {}, irreducible sites: {})",
                c.pattern.as_str(),
                c.failure_difference,
                c.max_recovery_drift,
                if c.persistent { "yes" } else { "no" },
                irr.len()
            )
        }
        "battery" => {
            let b: BatteryResult = typed(r)?;
            let mut s = format!("Battery: {} passed, {} flagged", b.passed, b.flagged);
            for c in b.cases.iter().filter(|c| !c.reasons.is_empty()) {
                s.push_str(&format!("\n  {}: {}", c.id, c.reasons.join("; ")));
            }
            s
        }
        "report" => r["text"].as_str().unwrap_or_default().trim_end().to_string(),
        other => format!("{other} result"),
    };
    Ok(s)
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<()> {
    if path == Path::new("-") {
        std::io::stdout().write_all(bytes).map_err(|e| Error::io("stdout", e))
    } else {
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Registry for a run: the configured root, plus any `--model` given as a
/// directory path, registered under that exact string.
fn registry_for(root: Option<PathBuf>, request: Option<&Request>) -> Result<Registry> {
    let reg = match root {
        Some(r) => Registry::open(r),
        None => Registry::in_memory(),
    };
    if let Some(req) = request {
        for id in req.models() {
            let p = Path::new(id);
            if p.join(archive::CONFIG_FILE).is_file() && reg.get(id).is_err() {
                reg.insert(id, archive::load_model(p)?);
            }
        }
    }
    Ok(reg)
}

fn emit(summary: &str, out: Option<&Path>) {
    let to_stderr = out == Some(Path::new("-"));
    if to_stderr {
        eprintln!("{summary}");
    } else {
        println!("{summary}");
    }
}

fn run(cli: Cli) -> Result<bool> {
    let config = cli.config.as_deref().map(ConfigFile::load).transpose()?.unwrap_or_default();
    let root = cli.registry.clone().or_else(|| config.registry.clone());
    let mut command = cli.command;
    match &mut command {
        Command::T1(c) | Command::T2(c) | Command::Fmri(c) | Command::Flair(c) | Command::Sweep(c) => config.fill(c),
        Command::Dti { common, .. } | Command::Perturb { common, .. } | Command::Battery { common, .. } => {
            config.fill(common)
        }
        Command::Trace { common, corrupt, .. } | Command::Report { common, corrupt, .. } => {
            config.fill(common);
            config.fill_corrupt(corrupt);
        }
        Command::Compare {
            common,
            corrupt,
            variant,
            ..
        } => {
            config.fill(common);
            config.fill_corrupt(corrupt);
            *variant = variant.take().or_else(|| config.variant.clone());
        }
        _ => {}
    }

    if let Some((request, out)) = to_request(&command)? {
        let registry = registry_for(root, Some(&request))?;
        let doc = api::execute(&registry, &request)?;
        if let Some(path) = &out {
            write_out(path, &api::to_bytes(&doc))?;
        }
        emit(&summarize(&doc)?, out.as_deref());
        return Ok(true);
    }

    match command {
        Command::Render { input, out, palette } => {
            let doc: ResultDocument = read_document(&input)?;
            if doc.kind == "report" {
                let report: DiagnosticReport = typed_field(&doc.result, "report")?;
                let text = clinic::render_text(&report);
                match &out {
                    Some(p) => write_out(p, text.as_bytes())?,
                    None => print!("{text}"),
                }
                return Ok(true);
            }
            let grid = heatmap::grid_from_document(&doc)?;
            let map = heatmap::render_heatmap(&grid, palette.parse::<Palette>()?)?;
            let out = out.unwrap_or_else(|| input.with_extension("svg"));
            write_out(&out, map.svg.as_bytes())?;
            emit(
                &format!(
                    "Heatmap: {} cells ({} x {}), scale [{}, {}], palette {}, written to {}",
                    map.cells,
                    map.rows.len(),
                    map.cols.len(),
                    map.scale.min,
                    map.scale.max,
                    map.scale.palette.name(),
                    out.display()
                ),
                Some(&out),
            );
            Ok(true)
        }
        Command::Replay { archive, out } => {
            let a: SessionArchive = read_document(&archive)?;
            let registry = registry_for(root, None)?;
            let verdict = session::replay(&a, &registry)?;
            if let Some(p) = &out {
                write_out(p, &api::to_bytes(&verdict))?;
            }
            let mut s = format!(
                "Replay of session {}: {} requests, {} mismatches",
                verdict.session_id,
                verdict.replayed,
                verdict.mismatches.len()
            );
            for m in &verdict.mismatches {
                s.push_str(&format!("\n  #{} {}: {}", m.index, m.kind, m.detail));
            }
            emit(&s, out.as_deref());
            Ok(verdict.verified)
        }
        Command::Serve { bind } => {
            let root = root.ok_or_else(|| Error::Usage(format!("serve needs --registry or {REGISTRY_ENV}")))?;
            if !root.is_dir() {
                return Err(Error::io(&root, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
            let registry = Arc::new(Registry::open(root));
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(crate::service::serve(&bind, registry))?;
            Ok(true)
        }
        Command::Synth {
            out,
            n_layers,
            n_heads,
            d_model,
            vocab,
            context,
            seed,
            collapse_pair,
            published,
        } => {
            let spec = ModelSpec::gpt2_like(n_layers, n_heads, d_model, vocab, context);
            let weights = match collapse_pair {
                Some(first) => synth::collapsed_pair_weights(&spec, seed, first, 1000.0)?,
                None => synth::random_weights(&spec, seed, synth::InitScheme::default())?,
            };
            let layout = if published {
                ArchiveLayout::Published { tied_unembed: true }
            } else {
                ArchiveLayout::Canonical
            };
            let weights = if published { tie_unembed(&spec, weights)? } else { weights };
            archive::save_model(&out, &spec, &weights, layout)?;
            let model = archive::load_model(&out)?;
            println!("Synthetic model written to {} (digest {})", out.display(), model.digest().to_hex());
            Ok(true)
        }
        _ => unreachable!("scan subcommands handled above"),
    }
}

/// Replaces the unembedding by the transposed embedding, as a tied archive
/// stores it.
pub fn tie_unembed(spec: &ModelSpec, weights: nmri_core::WeightStore) -> Result<nmri_core::WeightStore> {
    let mut tensors = weights.into_tensors();
    let unembed = tensors["embed"].transposed()?;
    tensors.insert("unembed".into(), unembed);
    Ok(nmri_core::WeightStore::from_tensors(spec, tensors)?.with_tied_unembed(true))
}

/// Entry point; returns the process exit status.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .try_init();
    match run(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
