//! Maps a free-form extracted answer onto a choice index.
//!
//! Cascade, first hit wins:
//! 1. a leading label `(b)`, `b)` or `b.` selects the choice at that position;
//! 2. exact match after normalization;
//! 3. exactly one choice appears inside the answer as a contiguous token run,
//!    or the answer appears inside exactly one choice;
//! 4. highest token Jaccard overlap, lowest index on ties, if at least 0.5.
//!
//! Normalization lowercases, collapses whitespace and strips punctuation from
//! both ends. A string that already equals a normalized choice is never read
//! as a label, so a gold answer always matches itself.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub const OVERLAP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStage {
    Label,
    Exact,
    Substring,
    Overlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchOutcome {
    pub correct: bool,
    pub matched_choice: Option<usize>,
    pub stage: Option<MatchStage>,
}

pub fn normalize(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed.trim_matches(|c: char| !c.is_alphanumeric()).to_string()
}

/// Split a leading choice label off an already lowercased, collapsed string.
fn split_label(s: &str) -> Option<(usize, &str)> {
    let b = s.as_bytes();
    let (letter, rest) = match b {
        [b'(', l, b')', ..] if l.is_ascii_lowercase() => (*l, &s[3..]),
        [l, b')' | b'.', ..] if l.is_ascii_lowercase() => {
            let rest = &s[2..];
            if !(rest.is_empty() || rest.starts_with(' ')) {
                return None;
            }
            (*l, rest)
        }
        _ => return None,
    };
    Some(((letter - b'a') as usize, rest))
}

fn tokens(s: &str) -> Vec<&str> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect()
}

fn contains_run(hay: &[&str], needle: &[&str]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

fn jaccard(a: &[&str], b: &[&str]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Resolve `extracted` to a choice index and the stage that decided it.
pub fn resolve_choice(extracted: &str, choices: &[String]) -> Option<(usize, MatchStage)> {
    let norm_choices: Vec<String> = choices.iter().map(|c| normalize(c)).collect();
    let lowered = extracted
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    let whole = normalize(&lowered);

    let mut text = whole.as_str();
    if !norm_choices.contains(&whole) {
        let trimmed = lowered.trim_start_matches(|c: char| !c.is_alphanumeric() && c != '(');
        if let Some((idx, rest)) = split_label(trimmed) {
            if idx < choices.len() {
                return Some((idx, MatchStage::Label));
            }
            text = rest.trim_matches(|c: char| !c.is_alphanumeric());
        }
    }
    let text = normalize(text);

    if let Some(i) = norm_choices.iter().position(|c| *c == text) {
        return Some((i, MatchStage::Exact));
    }

    let ext_tokens = tokens(&text);
    let choice_tokens: Vec<Vec<&str>> = norm_choices.iter().map(|c| tokens(c)).collect();
    let hits: Vec<usize> = choice_tokens
        .iter()
        .enumerate()
        .filter(|(_, ct)| contains_run(&ext_tokens, ct) || contains_run(ct, &ext_tokens))
        .map(|(i, _)| i)
        .collect();
    if let [only] = hits.as_slice() {
        return Some((*only, MatchStage::Substring));
    }

    let mut best: Option<(usize, f64)> = None;
    for (i, ct) in choice_tokens.iter().enumerate() {
        let score = jaccard(&ext_tokens, ct);
        if score >= OVERLAP_THRESHOLD && best.is_none_or(|(_, s)| score > s) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| (i, MatchStage::Overlap))
}

/// Score a multiple-choice answer.
pub fn match_answer(extracted: &str, choices: &[String], gold: &str) -> MatchOutcome {
    let gold_idx = choices.iter().position(|c| c == gold);
    match resolve_choice(extracted, choices) {
        Some((i, stage)) => MatchOutcome {
            correct: Some(i) == gold_idx,
            matched_choice: Some(i),
            stage: Some(stage),
        },
        None => MatchOutcome {
            correct: false,
            matched_choice: None,
            stage: None,
        },
    }
}

/// Score an open-ended answer against a single gold string with the
/// non-label stages of the cascade.
pub fn match_open(extracted: &str, gold: &str) -> bool {
    let e = normalize(extracted);
    let g = normalize(gold);
    if e.is_empty() {
        return false;
    }
    if e == g {
        return true;
    }
    let (et, gt) = (tokens(&e), tokens(&g));
    contains_run(&et, &gt) || contains_run(&gt, &et) || jaccard(&et, &gt) >= OVERLAP_THRESHOLD
}
