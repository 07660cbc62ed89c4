// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{Model, TokenSequence};
use crate::probs::{next_token_distribution, top_prediction};
use crate::scan_func::fmri_from_trace;
use crate::{Error, Result};

pub const BATTERY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatteryCategory {
    FactualRecall,
    LogicalReasoning,
    ReferenceResolution,
    InstructionAmbiguity,
    Adversarial,
}

impl BatteryCategory {
    pub const ALL: [BatteryCategory; 5] = [
        Self::FactualRecall,
        Self::LogicalReasoning,
        Self::ReferenceResolution,
        Self::InstructionAmbiguity,
        Self::Adversarial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FactualRecall => "factual_recall",
            Self::LogicalReasoning => "logical_reasoning",
            Self::ReferenceResolution => "reference_resolution",
            Self::InstructionAmbiguity => "instruction_ambiguity",
            Self::Adversarial => "adversarial",
        }
    }
}

impl FromStr for BatteryCategory {
    type Err = ();

    fn from_str(s: &str) -> core::result::Result<Self, ()> {
        Self::ALL.into_iter().find(|c| c.as_str() == s).ok_or(())
    }
}

/// What a test expects; at least one field must be set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    /// Decoded text of the expected next token, e.g. `" Paris"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_token_id: Option<u32>,
    /// Inclusive band `[lo, hi]` for the most active layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_layers: Option<[usize; 2]>,
}

impl Expectation {
    fn is_empty(&self) -> bool {
        self.top_token.is_none() && self.top_token_id.is_none() && self.active_layers.is_none()
    }
}

/// A test as written in a battery file. The category stays a string here so
/// an unknown one can be reported against the test that uses it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatteryTest {
    pub id: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
    #[serde(default)]
    pub expect: Expectation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatteryDocument {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub tests: Vec<BatteryTest>,
}

impl BatteryDocument {
    /// Checks the schema version, ids, categories and expectations.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != BATTERY_SCHEMA_VERSION {
            return Err(Error::Battery {
                test: "<document>".into(),
                reason: format!(
                    "schema_version {} is not supported (expected {BATTERY_SCHEMA_VERSION})",
                    self.schema_version
                ),
            });
        }
        let mut seen = BTreeSet::new();
        for t in &self.tests {
            let fail = |reason: String| Error::Battery {
                test: t.id.clone(),
                reason,
            };
            if t.id.is_empty() {
                return Err(fail("test id is empty".into()));
            }
            if !seen.insert(t.id.as_str()) {
                return Err(fail("duplicate test id".into()));
            }
            BatteryCategory::from_str(&t.category).map_err(|_| fail(format!("unknown category `{}`", t.category)))?;
            match (&t.prompt, &t.tokens) {
                (Some(_), Some(_)) => return Err(fail("give either `prompt` or `tokens`, not both".into())),
                (None, None) => return Err(fail("needs a `prompt` or `tokens`".into())),
                (None, Some(ids)) if ids.is_empty() => return Err(fail("`tokens` is empty".into())),
                (Some(p), None) if p.is_empty() => return Err(fail("`prompt` is empty".into())),
                _ => {}
            }
            if t.expect.is_empty() {
                return Err(fail("`expect` sets no expectation".into()));
            }
            if let Some([lo, hi]) = t.expect.active_layers {
                if lo > hi {
                    return Err(fail(format!("active_layers band [{lo}, {hi}] is inverted")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Flag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observed {
    pub top_token_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_token: Option<String>,
    pub top_probability: f64,
    pub most_active_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryCase {
    pub id: String,
    pub category: BatteryCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub tokens: TokenSequence,
    pub expect: Expectation,
    pub observed: Observed,
    pub outcome: Outcome,
    /// Unmet expectations, empty on a pass.
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatteryResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery: Option<String>,
    pub cases: Vec<BatteryCase>,
    pub passed: usize,
    pub flagged: usize,
}

fn run_test(model: &Model, test: &BatteryTest) -> Result<BatteryCase> {
    let wrap = |e: Error| Error::Battery {
        test: test.id.clone(),
        reason: e.to_string(),
    };
    let category = BatteryCategory::from_str(&test.category).map_err(|_| Error::Battery {
        test: test.id.clone(),
        reason: format!("unknown category `{}`", test.category),
    })?;
    let tokens = match (&test.prompt, &test.tokens) {
        (Some(p), _) => model.tokenize(p).map_err(wrap)?,
        (None, Some(ids)) => TokenSequence(ids.clone()),
        (None, None) => unreachable!("validated"),
    };
    let trace = model.forward(&tokens, &[]).map_err(wrap)?.trace;
    let top = top_prediction(&next_token_distribution(trace.final_logits()).map_err(wrap)?).map_err(wrap)?;
    let top_text = model.tokenizer().map(|t| t.decode(&[top.id])).transpose().map_err(wrap)?;
    let most_active_layer = fmri_from_trace(&trace).most_active_layer();

    let mut reasons = Vec::new();
    if let Some(want) = test.expect.top_token_id {
        if want != top.id {
            reasons.push(format!("top token id {} differs from expected {want}", top.id));
        }
    }
    if let Some(want) = &test.expect.top_token {
        match &top_text {
            Some(got) if got == want => {}
            Some(got) => reasons.push(format!("top token {got:?} differs from expected {want:?}")),
            None => return Err(wrap(Error::TokenizerUnavailable)),
        }
    }
    if let Some([lo, hi]) = test.expect.active_layers {
        if !(lo..=hi).contains(&most_active_layer) {
            reasons.push(format!("most active layer {most_active_layer} lies outside [{lo}, {hi}]"));
        }
    }
    Ok(BatteryCase {
        id: test.id.clone(),
        category,
        prompt: test.prompt.clone(),
        tokens,
        expect: test.expect.clone(),
        observed: Observed {
            top_token_id: top.id,
            top_token: top_text,
            top_probability: top.prob,
            most_active_layer,
        },
        outcome: if reasons.is_empty() { Outcome::Pass } else { Outcome::Flag },
        reasons,
    })
}

/// Evaluates every test in document order. Tests only read the model.
pub fn run_battery(model: &Model, battery: &BatteryDocument) -> Result<BatteryResult> {
    battery.validate()?;
    let cases = crate::exec::try_map(&battery.tests, |t| run_test(model, t))?;
    let passed = cases.iter().filter(|c| c.outcome == Outcome::Pass).count();
    Ok(BatteryResult {
        battery: battery.name.clone(),
        flagged: cases.len() - passed,
        passed,
        cases,
    })
}
