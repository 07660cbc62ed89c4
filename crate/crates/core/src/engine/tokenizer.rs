// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level byte-pair encoding in the GPT-2 vocabulary/merges format.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use unicode_general_category::{get_general_category, GeneralCategory};

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ByteLevelBpe {
    encoder: BTreeMap<String, u32>,
    decoder: BTreeMap<u32, String>,
    ranks: BTreeMap<(String, String), u32>,
    byte_encoder: [char; 256],
    byte_decoder: BTreeMap<char, u8>,
}

/// The reversible byte → printable-character table GPT-2 vocabularies use.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| (0x21..=0x7E).contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
    let mut extra = 0u32;
    for b in 0u32..256 {
        let cp = if printable(b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(cp).expect("code points below 0x200 are valid");
    }
    table
}

impl ByteLevelBpe {
    /// Builds a tokenizer from `vocab` (token string → id) and merges in
    /// priority order.
    pub fn new(
        vocab: impl IntoIterator<Item = (String, u32)>,
        merges: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let encoder: BTreeMap<String, u32> = vocab.into_iter().collect();
        if encoder.is_empty() {
            return Err(Error::Tokenizer("empty vocabulary".into()));
        }
        let mut decoder = BTreeMap::new();
        for (tok, &id) in &encoder {
            if decoder.insert(id, tok.clone()).is_some() {
                return Err(Error::Tokenizer(format!("duplicate token id {id}")));
            }
        }
        let ranks = merges
            .into_iter()
            .enumerate()
            .map(|(rank, pair)| (pair, rank as u32))
            .collect();
        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Ok(Self {
            encoder,
            decoder,
            ranks,
            byte_encoder,
            byte_decoder,
        })
    }

    /// Parses a `merges.txt` body: one space-separated pair per line, with an
    /// optional `#version` header.
    pub fn parse_merges(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::Tokenizer(format!("merges line {} is not a pair", lineno + 1)))?;
            out.push((a.to_string(), b.to_string()));
        }
        Ok(out)
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.encoder.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for piece in pretokenize(text) {
            let mapped: String = piece.bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for symbol in self.bpe(&mapped) {
                let id = self
                    .encoder
                    .get(&symbol)
                    .ok_or_else(|| Error::Tokenizer(format!("symbol `{symbol}` missing from vocabulary")))?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for id in ids {
            let tok = self
                .decoder
                .get(id)
                .ok_or_else(|| Error::Tokenizer(format!("token id {id} missing from vocabulary")))?;
            for c in tok.chars() {
                let b = self
                    .byte_decoder
                    .get(&c)
                    .ok_or_else(|| Error::Tokenizer(format!("token {id} holds a non-byte symbol `{c}`")))?;
                bytes.push(*b);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, &w[0], &w[1])))
                .min_by_key(|(r, _, _)| *r)
                .map(|(_, a, b)| (a.clone(), b.clone()));
            let Some((first, second)) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == first && symbols[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(core::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
            if symbols.len() == 1 {
                break;
            }
        }
        symbols
    }
}

fn is_letter(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::UppercaseLetter
            | GeneralCategory::LowercaseLetter
            | GeneralCategory::TitlecaseLetter
            | GeneralCategory::ModifierLetter
            | GeneralCategory::OtherLetter
    )
}

fn is_number(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::DecimalNumber | GeneralCategory::LetterNumber | GeneralCategory::OtherNumber
    )
}

fn is_other(c: char) -> bool {
    !c.is_whitespace() && !is_letter(c) && !is_number(c)
}

/// Splits text the way the GPT-2 pattern
/// `'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+`
/// does, without a regex engine.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let byte_at = |i: usize| if i < n { chars[i].0 } else { text.len() };
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < n {
        let end = match_at(&chars, i);
        pieces.push(&text[byte_at(i)..byte_at(end)]);
        i = end;
    }
    pieces
}

fn match_at(chars: &[(usize, char)], i: usize) -> usize {
    let n = chars.len();
    let c = |k: usize| chars[k].1;

    if c(i) == '\'' && i + 1 < n {
        match c(i + 1) {
            's' | 't' | 'm' | 'd' => return i + 2,
            'r' | 'v' | 'l' if i + 2 < n => {
                let pair = (c(i + 1), c(i + 2));
                if matches!(pair, ('r', 'e') | ('v', 'e') | ('l', 'l')) {
                    return i + 3;
                }
            }
            _ => {}
        }
    }

    let class_run = |class: fn(char) -> bool| -> Option<usize> {
        let start = if c(i) == ' ' && i + 1 < n && class(c(i + 1)) { i + 1 } else { i };
        if !class(c(start)) {
            return None;
        }
        let mut j = start;
        while j < n && class(c(j)) {
            j += 1;
        }
        Some(j)
    };
    for class in [is_letter as fn(char) -> bool, is_number, is_other] {
        if let Some(end) = class_run(class) {
            return end;
        }
    }

    // Whitespace: the greedy run, minus one character when it is followed by
    // a non-space and can give one back.
    let mut j = i;
    while j < n && c(j).is_whitespace() {
        j += 1;
    }
    debug_assert!(j > i);
    if j < n && j - i >= 2 {
        j - 1
    } else {
        j
    }
}
