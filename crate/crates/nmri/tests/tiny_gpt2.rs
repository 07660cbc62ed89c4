// SPDX-License-Identifier: MIT OR Apache-2.0

//! The published-layout tiny GPT-2 archive against frozen reference outputs
//! from an independent implementation (see `fixtures/generate_fixtures.py`).

use std::path::{Path, PathBuf};

use nmri::api::{self, Input, Request};
use nmri::archive;
use nmri::registry::Registry;
use nmri_core::clinic::{run_battery, BatteryDocument, BatteryTest, Expectation, Outcome};
use nmri_core::rng::Gaussian;
use nmri_core::{Model, TokenSequence};
use serde::Deserialize;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn tiny() -> Model {
    archive::load_model(&fixtures().join("tiny-gpt2")).unwrap()
}

#[derive(Deserialize)]
struct TokenizerCase {
    text: String,
    ids: Vec<u32>,
}

#[derive(Deserialize)]
struct TokenizerReference {
    cases: Vec<TokenizerCase>,
}

#[derive(Deserialize)]
struct LogitSequence {
    tokens: Vec<u32>,
    logits: Vec<Vec<f32>>,
}

#[derive(Deserialize)]
struct LogitReference {
    sequences: Vec<LogitSequence>,
}

fn read<T: for<'de> Deserialize<'de>>(name: &str) -> T {
    serde_json::from_slice(&std::fs::read(fixtures().join(name)).unwrap()).unwrap()
}

#[test]
fn tokenizer_matches_reference_ids() {
    let m = tiny();
    let reference: TokenizerReference = read("tokenizer_reference.json");
    assert!(reference.cases.len() >= 50);
    for case in &reference.cases {
        assert_eq!(m.tokenize(&case.text).unwrap().ids(), &case.ids[..], "{:?}", case.text);
        assert_eq!(m.decode(&case.ids).unwrap(), case.text);
    }
}

#[test]
fn tokenizer_round_trips_random_text() {
    let m = tiny();
    let mut g = Gaussian::new(5);
    let ranges = [(0x20, 0x7e), (0x09, 0x0d), (0xa0, 0x2ff), (0x4e00, 0x4fff), (0x1f600, 0x1f64f)];
    for _ in 0..1000 {
        let len = 1 + g.below(40) as usize;
        let text: String = (0..len)
            .map(|_| {
                let (lo, hi): (u32, u32) = ranges[g.below(ranges.len() as u64) as usize];
                char::from_u32(lo + g.below((hi - lo + 1) as u64) as u32).unwrap()
            })
            .collect();
        let ids = m.tokenize(&text).unwrap();
        assert_eq!(m.decode(ids.ids()).unwrap(), text);
    }
}

#[test]
fn logits_match_reference_forward_pass() {
    let m = tiny();
    let reference: LogitReference = read("tiny_gpt2_logits.json");
    assert_eq!(reference.sequences.len(), 4);
    for seq in &reference.sequences {
        let run = m.forward(&TokenSequence(seq.tokens.clone()), &[]).unwrap();
        let logits = &run.trace.logits;
        assert_eq!(logits.n_rows(), seq.logits.len());
        for (p, expected) in seq.logits.iter().enumerate() {
            let row = logits.row(p);
            let diff = row.iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(diff <= 1e-4, "position {p}: max |Δlogit| = {diff}");
            assert_eq!(argmax(row), argmax(expected), "position {p}");
        }
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[test]
fn battery_reports_the_reference_top_token() {
    let m = tiny();
    let reference: LogitReference = read("tiny_gpt2_logits.json");
    let france = &reference.sequences[0];
    assert_eq!(m.tokenize("The capital of France is").unwrap().ids(), &france.tokens[..]);
    let expected = argmax(france.logits.last().unwrap()) as u32;
    let doc = BatteryDocument {
        schema_version: 1,
        name: Some("oracle".into()),
        tests: vec![BatteryTest {
            id: "france".into(),
            category: "factual_recall".into(),
            prompt: Some("The capital of France is".into()),
            tokens: None,
            expect: Expectation {
                top_token_id: Some(expected),
                ..Expectation::default()
            },
        }],
    };
    let result = run_battery(&m, &doc).unwrap();
    assert_eq!(result.cases[0].observed.top_token_id, expected);
    assert_eq!(result.cases[0].outcome, Outcome::Pass);
    assert_eq!(result.cases[0].observed.top_token, Some(m.decode(&[expected]).unwrap()));
}

#[test]
fn default_battery_runs_on_a_real_tokenizer() {
    let reg = Registry::in_memory();
    reg.insert("tiny", tiny());
    let doc = api::execute(
        &reg,
        &Request::Battery {
            model: "tiny".into(),
            battery: None,
        },
    )
    .unwrap();
    assert_eq!(doc.result["cases"].as_array().unwrap().len(), 10);
    let passed = doc.result["passed"].as_u64().unwrap();
    let flagged = doc.result["flagged"].as_u64().unwrap();
    assert_eq!(passed + flagged, 10);
}

#[test]
fn prompts_resolve_through_the_archive_tokenizer() {
    let reg = Registry::in_memory();
    reg.insert("tiny", tiny());
    let by_prompt = api::execute(
        &reg,
        &Request::Fmri {
            model: "tiny".into(),
            input: Input::prompt("The capital of Poland is"),
        },
    )
    .unwrap();
    let by_tokens = api::execute(
        &reg,
        &Request::Fmri {
            model: "tiny".into(),
            input: Input::tokens(vec![410, 425, 276, 677, 311]),
        },
    )
    .unwrap();
    assert_eq!(by_prompt.result, by_tokens.result);
}
