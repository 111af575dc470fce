//! Extraction of the topic label, refined words and intruder words from a
//! chain-of-thought completion.

use std::collections::HashSet;
use std::ops::Range;

use regex::Regex;
use serde_json::Value;

use super::{LlmError, RawCompletion, Suggestion};
use crate::corpus::Vocabulary;

pub const DEFAULT_STEP2_PATTERN: &str = r"(?im)^[\s*#>\-]*(?:step|stride)?\s*2\s*[.:)\-]";
pub const DEFAULT_STEP3_PATTERN: &str = r"(?im)^[\s*#>\-]*(?:step|stride)?\s*[3-9]\s*[.:)\-]";

#[derive(Debug, Clone)]
pub struct ParseOptions {
    /// Refined words beyond this many are dropped.
    pub max_refined: usize,
    /// Start of the "removed words" step in the reasoning text.
    pub step2: Regex,
    /// Start of any later step; ends the removed-words block.
    pub next_step: Regex,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self::new(super::prompt::DEFAULT_REFINED_WORDS)
    }
}

impl ParseOptions {
    pub fn new(max_refined: usize) -> Self {
        Self {
            max_refined,
            step2: Regex::new(DEFAULT_STEP2_PATTERN).expect("valid pattern"),
            next_step: Regex::new(DEFAULT_STEP3_PATTERN).expect("valid pattern"),
        }
    }
}

/// The last JSON object in `text` that carries both `Topic` and `Words`,
/// with its byte range.
pub fn find_answer_object(text: &str) -> Option<(Range<usize>, serde_json::Map<String, Value>)> {
    let starts: Vec<usize> = text.match_indices('{').map(|(i, _)| i).collect();
    for &start in starts.iter().rev() {
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(obj))) = stream.next() {
            if obj.contains_key("Topic") && obj.contains_key("Words") {
                let end = start + stream.byte_offset();
                return Some((start..end, obj));
            }
        }
    }
    None
}

fn normalize_word(w: &str) -> String {
    w.trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

fn answer_words(v: &Value) -> Option<Vec<String>> {
    match v {
        Value::Array(items) => Some(
            items
                .iter()
                .filter_map(Value::as_str)
                .map(normalize_word)
                .filter(|w| !w.is_empty())
                .collect(),
        ),
        Value::String(s) => Some(
            s.split(',')
                .map(normalize_word)
                .filter(|w| !w.is_empty())
                .collect(),
        ),
        _ => None,
    }
}

fn removed_from_reasoning(
    reasoning: &str,
    original: &[String],
    opts: &ParseOptions,
) -> Option<Vec<String>> {
    let m = opts.step2.find_iter(reasoning).last()?;
    let rest = &reasoning[m.end()..];
    let block_end = opts
        .next_step
        .find(rest)
        .map(|n| n.start())
        .unwrap_or(rest.len());
    let block = &rest[..block_end];
    let originals: HashSet<&str> = original.iter().map(|s| s.as_str()).collect();
    let mut seen = HashSet::new();
    Some(
        block
            .split(|c: char| !c.is_alphanumeric())
            .map(|t| t.to_lowercase())
            .filter(|t| originals.contains(t.as_str()) && seen.insert(t.clone()))
            .collect(),
    )
}

/// Parses the final JSON answer of a completion.
///
/// Refined words are lowercased, deduplicated (first occurrence wins),
/// filtered against `vocab` and truncated to `opts.max_refined`. Intruders
/// come from the step-2 block of the reasoning when one exists, otherwise
/// from the original words missing from the answer.
pub fn parse_suggestion_with<S: AsRef<str>>(
    completion: &RawCompletion,
    vocab: &Vocabulary,
    original_words: &[S],
    opts: &ParseOptions,
) -> Result<Suggestion, LlmError> {
    let text = &completion.text;
    let fail = |reason: &str| LlmError::ParseFailure {
        reason: reason.to_string(),
        raw: text.clone(),
    };
    let (range, obj) = find_answer_object(text).ok_or_else(|| fail("no JSON object with Topic and Words"))?;
    let topic = obj["Topic"].as_str().ok_or_else(|| fail("Topic is not a string"))?;
    let label: Vec<String> = topic
        .split_whitespace()
        .map(normalize_word)
        .filter(|w| !w.is_empty())
        .collect();
    if label.is_empty() {
        return Err(fail("empty Topic"));
    }
    let words = answer_words(&obj["Words"]).ok_or_else(|| fail("Words is neither a list nor a string"))?;

    let mut seen = HashSet::new();
    let mut refined_words = Vec::new();
    let mut dropped_oov = Vec::new();
    for w in &words {
        if !seen.insert(w.clone()) {
            continue;
        }
        if vocab.contains(w) {
            refined_words.push(w.clone());
        } else {
            dropped_oov.push(w.clone());
        }
    }
    refined_words.truncate(opts.max_refined);

    let original: Vec<String> = original_words.iter().map(|w| w.as_ref().to_lowercase()).collect();
    let removed_words = removed_from_reasoning(&text[..range.start], &original, opts).unwrap_or_else(|| {
        let answer: HashSet<&String> = words.iter().collect();
        original.iter().filter(|w| !answer.contains(w)).cloned().collect()
    });

    Ok(Suggestion {
        label,
        refined_words,
        removed_words,
        dropped_oov,
    })
}

pub fn parse_suggestion<S: AsRef<str>>(
    completion: &RawCompletion,
    vocab: &Vocabulary,
    original_words: &[S],
) -> Result<Suggestion, LlmError> {
    parse_suggestion_with(completion, vocab, original_words, &ParseOptions::default())
}

/// Drops refined words that are not in `vocab`. Idempotent.
pub fn filter_suggestion(s: &Suggestion, vocab: &Vocabulary) -> Suggestion {
    let mut out = s.clone();
    let (keep, drop): (Vec<String>, Vec<String>) =
        s.refined_words.iter().cloned().partition(|w| vocab.contains(w));
    out.refined_words = keep;
    out.dropped_oov.extend(drop);
    out
}

/// Byte range of the topic label inside the answer's `"Topic"` string
/// (quotes excluded), searched in `text`.
pub fn label_span(text: &str, label: &[String]) -> Option<Range<usize>> {
    let topic_value = Regex::new(r#""Topic"\s*:\s*"((?:[^"\\]|\\.)*)""#).expect("valid pattern");
    let needle = label.join(" ").to_ascii_lowercase();
    let search = |hay: &str, offset: usize| -> Option<Range<usize>> {
        if needle.is_empty() {
            return None;
        }
        hay.to_ascii_lowercase()
            .rfind(&needle)
            .map(|i| offset + i..offset + i + needle.len())
    };
    if let Some((range, _)) = find_answer_object(text) {
        let obj_text = &text[range.clone()];
        if let Some(cap) = topic_value.captures_iter(obj_text).last() {
            let g = cap.get(1).expect("group 1");
            let value = &obj_text[g.range()];
            let start = range.start + g.start();
            if let Some(r) = search(value, start) {
                return Some(r);
            }
            let trimmed = value.trim();
            if !trimmed.is_empty() {
                let lead = value.len() - value.trim_start().len();
                return Some(start + lead..start + lead + trimmed.len());
            }
        }
    }
    search(text, 0)
}
